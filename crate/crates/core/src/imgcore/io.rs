//! Raw image files: the 6-byte magic `SRIMG1`, two little-endian `u32`
//! dimensions (rows, cols), then `rows * cols` little-endian `f32` values in
//! row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Image;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"SRIMG1";

pub fn encode(img: &Image) -> Vec<u8> {
    let mut buf = Vec::with_capacity(14 + 4 * img.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(img.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(img.cols() as u32).to_le_bytes());
    for &v in img.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

pub fn decode(mut bytes: &[u8], origin: &Path) -> Result<Image> {
    let bad = |reason: &str| Error::Format {
        path: origin.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut magic = [0u8; 6];
    bytes.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let mut word = [0u8; 4];
    bytes.read_exact(&mut word).map_err(|_| bad("truncated header"))?;
    let rows = u32::from_le_bytes(word) as usize;
    bytes.read_exact(&mut word).map_err(|_| bad("truncated header"))?;
    let cols = u32::from_le_bytes(word) as usize;
    if bytes.len() != 4 * rows * cols {
        return Err(bad(&format!(
            "expected {} payload bytes, found {}",
            4 * rows * cols,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Image::from_vec(rows, cols, data).map_err(|e| bad(&e.to_string()))
}

pub fn write(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(img))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    decode(&fs::read(path)?, path)
}

/// 8-bit grayscale preview, linearly mapped from `[lo, hi]`.
pub fn write_png(path: impl AsRef<Path>, img: &Image, lo: f64, hi: f64) -> Result<()> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pixels: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::GrayImage::from_raw(img.cols() as u32, img.rows() as u32, pixels)
        .ok_or_else(|| Error::dim("preview buffer size"))?;
    buf.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let img = Image::from_vec(2, 3, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.5]).unwrap();
        let b = encode(&img);
        assert_eq!(&b[..6], b"SRIMG1");
        assert_eq!(&b[6..10], &2u32.to_le_bytes());
        assert_eq!(&b[10..14], &3u32.to_le_bytes());
        assert_eq!(&b[14 + 20..], &5.5f32.to_le_bytes());
        assert_eq!(b.len(), 14 + 24);
    }

    #[test]
    fn rejects_garbage() {
        let p = Path::new("mem");
        assert!(decode(b"NOTIMG\0\0\0\0\0\0\0\0", p).is_err());
        let mut b = encode(&Image::zeros(3, 3));
        b.pop();
        assert!(decode(&b, p).is_err());
    }

    proptest! {
        #[test]
        fn f32_values_survive_roundtrip(v in proptest::collection::vec(-1e6f32..1e6, 12)) {
            let img = Image::from_vec(3, 4, v.iter().map(|&x| x as f64).collect()).unwrap();
            let back = decode(&encode(&img), Path::new("mem")).unwrap();
            prop_assert_eq!(back, img);
        }
    }
}
