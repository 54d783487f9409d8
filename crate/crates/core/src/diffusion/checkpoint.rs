//! Checkpoint files: the 7-byte magic `SRCKPT1`, a little-endian `u32`
//! length and that many bytes of network-config JSON, a `u64` parameter
//! count, then the parameters and their EMA as little-endian `f64`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scoremodel::{NetConfig, ScoreNet};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"SRCKPT1";

pub fn encode_checkpoint(model: &ScoreNet, ema: &ScoreNet) -> Result<Vec<u8>> {
    if model.config() != ema.config() {
        return Err(Error::param("model and EMA have different architectures"));
    }
    let config = serde_json::to_vec(model.config()).map_err(|e| Error::Config(e.to_string()))?;
    let n = model.param_count();
    let mut buf = Vec::with_capacity(7 + 4 + config.len() + 8 + 16 * n);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    for v in model.params().iter().chain(ema.params()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

/// Returns `(model, ema)`.
pub fn decode_checkpoint(bytes: &[u8], origin: &Path) -> Result<(ScoreNet, ScoreNet)> {
    let bad = |reason: String| Error::Format {
        path: origin.to_path_buf(),
        reason,
    };
    let mut rest = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if rest.len() < n {
            return Err(bad("truncated checkpoint".into()));
        }
        let (head, tail) = rest.split_at(n);
        rest = tail;
        Ok(head)
    };
    if take(7)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let config: NetConfig = serde_json::from_slice(take(len)?).map_err(|e| bad(format!("config: {e}")))?;
    let n = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let mut read = |count: usize| -> Result<Vec<f64>> {
        Ok(take(8 * count)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    };
    let params = read(n)?;
    let ema = read(n)?;
    if !rest.is_empty() {
        return Err(bad("trailing bytes".into()));
    }
    let model = ScoreNet::from_params(config, params).map_err(|e| bad(e.to_string()))?;
    let ema = ScoreNet::from_params(config, ema).map_err(|e| bad(e.to_string()))?;
    Ok((model, ema))
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &ScoreNet, ema: &ScoreNet) -> Result<()> {
    fs::write(path, encode_checkpoint(model, ema)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ScoreNet, ScoreNet)> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path)?, path)
}
