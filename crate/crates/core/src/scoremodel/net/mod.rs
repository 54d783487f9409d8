//! Convolutional U-Net score model with noise-level conditioning.
//!
//! Layout, for depth `d` and `b` blocks per stage:
//!
//! * `conv_in` (3x3) lifts the scaled input to `base` channels.
//! * Each encoder level runs `b` residual blocks; all but the last level end
//!   with a downsampling step (binomial blur, stride 2, then a 3x3 conv).
//! * The bottleneck is residual block, optional self-attention, residual block.
//! * Each decoder level runs `b + 1` residual blocks, each consuming one skip
//!   tensor from the encoder by channel concatenation; all but level 0 end
//!   with an upsampling step (3x3 conv at low resolution, then blur-up).
//! * The head is silu, 3x3 conv, silu, 1x1 conv to one channel.
//!
//! The network sees `x / sqrt(1 + sigma^2)` and its output is divided by
//! `sigma`, so an output of unit scale means a score of order `1 / sigma`.

mod attention;
mod tensor;

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use serde::{Deserialize, Serialize};

use self::attention::{AttnCache, Attention};
use self::tensor::{blur_down, blur_down_t, blur_up, blur_up_back, silu, silu_back, silu_feat, Conv, Dense, Feat};
use super::receptive::{receptive_field, LayerSpec, ReceptiveField};
use super::ScoreModel;
use crate::error::{Error, Result};
use crate::imgcore::{Image, RngState};

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub deep_channels: usize,
    pub blocks_per_stage: usize,
    #[serde(default)]
    pub attention: bool,
    pub fourier_scale: f64,
}

impl NetConfig {
    /// Full-size configuration at depth `d`, with `attention` for the `d = 4*` variant.
    pub fn paper(depth: usize, attention: bool) -> Self {
        Self {
            depth,
            base_channels: 128,
            deep_channels: 256,
            blocks_per_stage: 4,
            attention,
            fourier_scale: 16.0,
        }
    }

    /// Small single-level net for desk-scale training.
    pub fn tiny() -> Self {
        Self {
            depth: 1,
            base_channels: 16,
            deep_channels: 16,
            blocks_per_stage: 1,
            attention: false,
            fourier_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.depth) {
            return Err(Error::param(format!("depth must be 1..=4, got {}", self.depth)));
        }
        if self.base_channels == 0 || self.deep_channels == 0 || self.blocks_per_stage == 0 {
            return Err(Error::param("channel and block counts must be positive"));
        }
        if self.attention && self.depth != 4 {
            return Err(Error::param("attention is only available at depth 4"));
        }
        if !(self.fourier_scale > 0.0 && self.fourier_scale.is_finite()) {
            return Err(Error::param("fourier_scale must be positive"));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        if level == 0 {
            self.base_channels
        } else {
            self.deep_channels
        }
    }

    /// Kernel/stride chain from input to output that determines the receptive
    /// field. Stride-1 layers of one resolution level are grouped together and
    /// adjacent levels are joined by the 4-tap stride-2 binomial filter.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let b = self.blocks_per_stage;
        let d = self.depth;
        let mut chain = Vec::new();
        for level in 0..d {
            let mut convs = 0;
            if level == 0 {
                convs += 2; // conv_in and the head's 3x3
            } else {
                convs += 2; // conv after downsampling, conv before upsampling
            }
            if level + 1 < d {
                convs += 2 * b + 2 * (b + 1);
            } else {
                convs += 2 * (2 * b + 3);
            }
            chain.extend(std::iter::repeat_n(LayerSpec::conv3(), convs));
            if level + 1 < d {
                chain.push(LayerSpec::new(4, 1)); // blur-up landing at this level
            }
            if level == 0 {
                chain.push(LayerSpec::new(1, 1));
            }
            if level + 1 < d {
                chain.push(LayerSpec::new(4, 2));
            }
        }
        chain
    }

    pub fn receptive_field(&self) -> ReceptiveField {
        let conv = receptive_field(&self.layer_specs());
        if self.attention {
            ReceptiveField::Global { conv_only: conv }
        } else {
            ReceptiveField::Finite(conv)
        }
    }

    /// Image sides must be divisible by this.
    pub fn side_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    conv_a: Conv,
    temb: Dense,
    conv_b: Conv,
    skip: Option<Conv>,
}

struct RbCache {
    x: Feat,
    a: Feat,
    h1: Feat,
    b: Feat,
}

impl ResBlock {
    fn forward(&self, p: &[f64], x: &Feat, st: &[f64]) -> (Feat, RbCache) {
        let a = silu_feat(x);
        let mut h1 = self.conv_a.forward(p, &a);
        let bias = self.temb.forward(p, st);
        for (c, &bv) in bias.iter().enumerate() {
            h1.channel_mut(c).iter_mut().for_each(|v| *v += bv);
        }
        let b = silu_feat(&h1);
        let mut out = self.conv_b.forward(p, &b);
        match &self.skip {
            Some(conv) => out.add_assign(&conv.forward(p, x)),
            None => out.add_assign(x),
        }
        let cache = RbCache {
            x: x.clone(),
            a,
            h1,
            b,
        };
        (out.scaled(FRAC_1_SQRT_2), cache)
    }

    fn backward(&self, p: &[f64], cache: &RbCache, gy: &Feat, st: &[f64], gp: &mut [f64], g_st: &mut [f64]) -> Feat {
        let g = gy.clone().scaled(FRAC_1_SQRT_2);
        let gb = self.conv_b.backward(p, &cache.b, &g, gp);
        let gh1 = Feat {
            data: silu_back(&cache.h1.data, &gb.data),
            ..gb
        };
        let gbias: Vec<f64> = (0..gh1.c).map(|c| gh1.channel(c).iter().sum()).collect();
        let gst = self.temb.backward(p, st, &gbias, gp);
        g_st.iter_mut().zip(&gst).for_each(|(a, b)| *a += b);
        let ga = self.conv_a.backward(p, &cache.a, &gh1, gp);
        let mut gx = Feat {
            data: silu_back(&cache.x.data, &ga.data),
            ..ga
        };
        match &self.skip {
            Some(conv) => gx.add_assign(&conv.backward(p, &cache.x, &g, gp)),
            None => gx.add_assign(&g),
        }
        gx
    }
}

#[derive(Debug, Clone, Copy)]
struct InitSpec {
    start: usize,
    len: usize,
    std: f64,
}

/// Hands out parameter offsets and records how to initialize them.
#[derive(Default)]
struct Alloc {
    next: usize,
    inits: Vec<InitSpec>,
}

impl Alloc {
    fn take(&mut self, len: usize, std: f64) -> usize {
        let start = self.next;
        self.next += len;
        if std > 0.0 {
            self.inits.push(InitSpec { start, len, std });
        }
        start
    }

    fn conv(&mut self, cin: usize, cout: usize, k: usize, gain: f64) -> Conv {
        let fan_in = (cin * k * k) as f64;
        let w = self.take(cout * cin * k * k, gain / fan_in.sqrt());
        let b = self.take(cout, 0.0);
        Conv { cin, cout, k, w, b }
    }

    fn dense(&mut self, nin: usize, nout: usize, gain: f64) -> Dense {
        let w = self.take(nin * nout, gain / (nin as f64).sqrt());
        let b = self.take(nout, 0.0);
        Dense { nin, nout, w, b }
    }

    fn res_block(&mut self, cin: usize, cout: usize, temb: usize) -> ResBlock {
        ResBlock {
            conv_a: self.conv(cin, cout, 3, 1.0),
            temb: self.dense(temb, cout, 1.0),
            conv_b: self.conv(cout, cout, 3, 0.1),
            skip: (cin != cout).then(|| self.conv(cin, cout, 1, 1.0)),
        }
    }
}

#[derive(Debug, Clone)]
struct Layout {
    fourier: usize,
    n_fourier: usize,
    t0: Dense,
    t1: Dense,
    conv_in: Conv,
    enc: Vec<Vec<ResBlock>>,
    down: Vec<Conv>,
    mid_a: ResBlock,
    attn: Option<Attention>,
    mid_b: ResBlock,
    dec: Vec<Vec<ResBlock>>,
    up: Vec<Option<Conv>>,
    out_a: Conv,
    out_b: Conv,
    total: usize,
    inits: Vec<InitSpec>,
}

impl Layout {
    fn new(cfg: &NetConfig) -> Self {
        let mut al = Alloc::default();
        let n_fourier = cfg.base_channels.div_ceil(2).max(1);
        let temb = 4 * cfg.base_channels;
        let fourier = al.take(n_fourier, cfg.fourier_scale);
        let t0 = al.dense(2 * n_fourier, temb, 1.0);
        let t1 = al.dense(temb, temb, 1.0);
        let c0 = cfg.channels(0);
        let conv_in = al.conv(1, c0, 3, 1.0);

        let d = cfg.depth;
        let mut skips = vec![c0];
        let mut enc = Vec::with_capacity(d);
        let mut down = Vec::new();
        let mut ch = c0;
        for level in 0..d {
            let c = cfg.channels(level);
            let mut blocks = Vec::new();
            for _ in 0..cfg.blocks_per_stage {
                blocks.push(al.res_block(ch, c, temb));
                ch = c;
                skips.push(ch);
            }
            enc.push(blocks);
            if level + 1 < d {
                let next = cfg.channels(level + 1);
                down.push(al.conv(ch, next, 3, 1.0));
                ch = next;
                skips.push(ch);
            }
        }
        let mid_a = al.res_block(ch, ch, temb);
        let attn = cfg.attention.then(|| Attention {
            q: al.conv(ch, ch, 1, 1.0),
            k: al.conv(ch, ch, 1, 1.0),
            v: al.conv(ch, ch, 1, 1.0),
            o: al.conv(ch, ch, 1, 0.1),
        });
        let mid_b = al.res_block(ch, ch, temb);

        let mut dec: Vec<Vec<ResBlock>> = (0..d).map(|_| Vec::new()).collect();
        let mut up: Vec<Option<Conv>> = vec![None; d];
        for level in (0..d).rev() {
            let c = cfg.channels(level);
            for _ in 0..=cfg.blocks_per_stage {
                let skip = skips.pop().expect("skip stack balanced by construction");
                dec[level].push(al.res_block(ch + skip, c, temb));
                ch = c;
            }
            if level > 0 {
                let prev = cfg.channels(level - 1);
                up[level] = Some(al.conv(ch, prev, 3, 1.0));
                ch = prev;
            }
        }
        debug_assert!(skips.is_empty());
        let out_a = al.conv(ch, ch, 3, 1.0);
        let out_b = al.conv(ch, 1, 1, 0.1);
        Layout {
            fourier,
            n_fourier,
            t0,
            t1,
            conv_in,
            enc,
            down,
            mid_a,
            attn,
            mid_b,
            dec,
            up,
            out_a,
            out_b,
            total: al.next,
            inits: al.inits,
        }
    }
}

struct TembCache {
    feats: Vec<f64>,
    h0: Vec<f64>,
    s0: Vec<f64>,
    temb: Vec<f64>,
    st: Vec<f64>,
}

/// Everything the backward pass needs from a forward evaluation.
struct Tape {
    temb: TembCache,
    input: Feat,
    enc: Vec<Vec<RbCache>>,
    down_in: Vec<Feat>,
    mid_a: RbCache,
    attn: Option<AttnCache>,
    mid_b: RbCache,
    /// Per decoder level: caches and the width of the main path before concatenation.
    dec: Vec<Vec<(RbCache, usize)>>,
    up_in: Vec<Option<Feat>>,
    head_in: Feat,
    head_mid: Feat,
}

/// Convolutional score network with flat parameter storage.
#[derive(Debug, Clone)]
pub struct ScoreNet {
    cfg: NetConfig,
    layout: Layout,
    params: Vec<f64>,
}

impl ScoreNet {
    /// Build a network with freshly initialized parameters.
    pub fn new(cfg: NetConfig, rng: &mut RngState) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let mut params = vec![0.0; layout.total];
        for spec in &layout.inits {
            for v in &mut params[spec.start..spec.start + spec.len] {
                *v = spec.std * rng.normal();
            }
        }
        Ok(Self { cfg, layout, params })
    }

    /// Rebuild from a stored parameter vector.
    pub fn from_params(cfg: NetConfig, params: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        if params.len() != layout.total {
            return Err(Error::dim(format!(
                "network needs {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self { cfg, layout, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Parameter indices excluded from optimization (the random Fourier frequencies).
    pub fn frozen(&self) -> std::ops::Range<usize> {
        self.layout.fourier..self.layout.fourier + self.layout.n_fourier
    }

    pub fn check_dims(&self, rows: usize, cols: usize) -> Result<()> {
        let m = self.cfg.side_multiple();
        if rows == 0 || cols == 0 || rows % m != 0 || cols % m != 0 {
            return Err(Error::dim(format!(
                "image {rows}x{cols} is not divisible by {m} (depth {})",
                self.cfg.depth
            )));
        }
        Ok(())
    }

    /// Score with an explicit parameter vector (same layout as [`ScoreNet::params`]).
    pub fn score_with(&self, params: &[f64], x: &Image, sigma: f64) -> Result<Image> {
        let (out, _) = self.forward(params, x, sigma)?;
        Ok(Image::from_vec(x.rows(), x.cols(), out.data.iter().map(|v| v / sigma).collect())?)
    }

    /// Evaluate the score, ask `loss_grad` for `dL/ds` at that score, and
    /// backpropagate it.
    ///
    /// Parameter gradients are added into `gp`; returns `(score, dL/dx)`.
    pub fn score_and_backward(
        &self,
        params: &[f64],
        x: &Image,
        sigma: f64,
        loss_grad: impl FnOnce(&Image) -> Image,
        gp: &mut [f64],
    ) -> Result<(Image, Image)> {
        if gp.len() != self.layout.total {
            return Err(Error::dim("gradient buffer has the wrong length"));
        }
        let (out, tape) = self.forward(params, x, sigma)?;
        let score = Image::from_vec(x.rows(), x.cols(), out.data.iter().map(|v| v / sigma).collect())?;
        let g_score = loss_grad(&score);
        x.same_dims(&g_score)?;
        let g_out = Feat {
            c: 1,
            h: x.rows(),
            w: x.cols(),
            data: g_score.data().iter().map(|g| g / sigma).collect(),
        };
        let g_in = self.backward(params, &tape, &g_out, gp);
        let c_in = input_scale(sigma);
        let gx = Image::from_vec(x.rows(), x.cols(), g_in.data.iter().map(|g| g * c_in).collect())?;
        Ok((score, gx))
    }

    fn embed(&self, p: &[f64], sigma: f64) -> TembCache {
        let l = &self.layout;
        let t = sigma.ln();
        let freqs = &p[l.fourier..l.fourier + l.n_fourier];
        let mut feats = Vec::with_capacity(2 * l.n_fourier);
        feats.extend(freqs.iter().map(|w| (2.0 * PI * w * t).sin()));
        feats.extend(freqs.iter().map(|w| (2.0 * PI * w * t).cos()));
        let h0 = l.t0.forward(p, &feats);
        let s0: Vec<f64> = h0.iter().map(|&v| silu(v)).collect();
        let temb = l.t1.forward(p, &s0);
        let st = temb.iter().map(|&v| silu(v)).collect();
        TembCache { feats, h0, s0, temb, st }
    }

    fn forward(&self, p: &[f64], x: &Image, sigma: f64) -> Result<(Feat, Tape)> {
        if p.len() != self.layout.total {
            return Err(Error::dim("parameter vector has the wrong length"));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::param(format!("noise level must be positive, got {sigma}")));
        }
        self.check_dims(x.rows(), x.cols())?;
        let l = &self.layout;
        let temb = self.embed(p, sigma);
        let st = &temb.st;
        let c_in = input_scale(sigma);
        let input = Feat {
            c: 1,
            h: x.rows(),
            w: x.cols(),
            data: x.data().iter().map(|v| v * c_in).collect(),
        };

        let mut h = l.conv_in.forward(p, &input);
        let mut skips = vec![h.clone()];
        let mut enc_caches = Vec::with_capacity(l.enc.len());
        let mut down_in = Vec::new();
        for (level, blocks) in l.enc.iter().enumerate() {
            let mut caches = Vec::with_capacity(blocks.len());
            for rb in blocks {
                let (out, cache) = rb.forward(p, &h, st);
                caches.push(cache);
                h = out;
                skips.push(h.clone());
            }
            enc_caches.push(caches);
            if let Some(conv) = l.down.get(level) {
                let blurred = blur_down(&h);
                h = conv.forward(p, &blurred);
                down_in.push(blurred);
                skips.push(h.clone());
            }
        }

        let (out, mid_a) = l.mid_a.forward(p, &h, st);
        h = out;
        let attn = l.attn.as_ref().map(|a| {
            let (out, cache) = a.forward(p, &h);
            h = out;
            cache
        });
        let (out, mid_b) = l.mid_b.forward(p, &h, st);
        h = out;

        let d = l.dec.len();
        let mut dec_caches: Vec<Vec<(RbCache, usize)>> = (0..d).map(|_| Vec::new()).collect();
        let mut up_in: Vec<Option<Feat>> = vec![None; d];
        for level in (0..d).rev() {
            for rb in &l.dec[level] {
                let skip = skips.pop().expect("balanced skip stack");
                let width = h.c;
                let (out, cache) = rb.forward(p, &Feat::concat(&h, &skip), st);
                dec_caches[level].push((cache, width));
                h = out;
            }
            if let Some(conv) = &l.up[level] {
                let pre = conv.forward(p, &h);
                up_in[level] = Some(h);
                h = blur_up(&pre);
            }
        }

        let head_in = h;
        let a = silu_feat(&head_in);
        let head_mid = l.out_a.forward(p, &a);
        let out = l.out_b.forward(p, &silu_feat(&head_mid));
        let tape = Tape {
            temb,
            input,
            enc: enc_caches,
            down_in,
            mid_a,
            attn,
            mid_b,
            dec: dec_caches,
            up_in,
            head_in,
            head_mid,
        };
        Ok((out, tape))
    }

    fn backward(&self, p: &[f64], tape: &Tape, g_out: &Feat, gp: &mut [f64]) -> Feat {
        let l = &self.layout;
        let st = &tape.temb.st;
        let mut g_st = vec![0.0; st.len()];

        // head
        let s_mid = silu_feat(&tape.head_mid);
        let g = l.out_b.backward(p, &s_mid, g_out, gp);
        let g = Feat {
            data: silu_back(&tape.head_mid.data, &g.data),
            ..g
        };
        let g = l.out_a.backward(p, &silu_feat(&tape.head_in), &g, gp);
        let mut g = Feat {
            data: silu_back(&tape.head_in.data, &g.data),
            ..g
        };

        // decoder, in reverse execution order; skip gradients are collected
        // in the order the skips were pushed
        let mut g_skips: Vec<Feat> = Vec::new();
        let d = l.dec.len();
        for level in 0..d {
            if let (Some(conv), Some(x)) = (&l.up[level], &tape.up_in[level]) {
                let g_pre = blur_up_back(&g);
                g = conv.backward(p, x, &g_pre, gp);
            }
            for (rb, (cache, width)) in l.dec[level].iter().zip(&tape.dec[level]).rev() {
                let g_cat = rb.backward(p, cache, &g, st, gp, &mut g_st);
                let (g_main, g_skip) = g_cat.split(*width);
                g = g_main;
                g_skips.push(g_skip);
            }
        }
        // g_skips now runs from the first pushed skip to the last

        g = l.mid_b.backward(p, &tape.mid_b, &g, st, gp, &mut g_st);
        if let (Some(a), Some(cache)) = (&l.attn, &tape.attn) {
            g = a.backward(p, cache, &g, gp);
        }
        g = l.mid_a.backward(p, &tape.mid_a, &g, st, gp, &mut g_st);

        for level in (0..l.enc.len()).rev() {
            if let Some(conv) = l.down.get(level) {
                g.add_assign(&g_skips.pop().expect("skip gradient"));
                let g_blur = conv.backward(p, &tape.down_in[level], &g, gp);
                g = blur_down_t(&g_blur);
            }
            for (rb, cache) in l.enc[level].iter().zip(&tape.enc[level]).rev() {
                g.add_assign(&g_skips.pop().expect("skip gradient"));
                g = rb.backward(p, cache, &g, st, gp, &mut g_st);
            }
        }
        g.add_assign(&g_skips.pop().expect("skip gradient"));
        debug_assert!(g_skips.is_empty());
        let g_in = l.conv_in.backward(p, &tape.input, &g, gp);

        // noise-level embedding (the Fourier frequencies themselves are frozen)
        let tc = &tape.temb;
        let g_temb = silu_back(&tc.temb, &g_st);
        let g_s0 = l.t1.backward(p, &tc.s0, &g_temb, gp);
        let g_h0 = silu_back(&tc.h0, &g_s0);
        l.t0.backward(p, &tc.feats, &g_h0, gp);
        g_in
    }
}

fn input_scale(sigma: f64) -> f64 {
    1.0 / (1.0 + sigma * sigma).sqrt()
}

impl ScoreModel for ScoreNet {
    fn score(&self, x: &Image, sigma: f64) -> Result<Image> {
        self.score_with(&self.params, x, sigma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(depth: usize, attention: bool) -> NetConfig {
        NetConfig {
            depth,
            base_channels: 3,
            deep_channels: 4,
            blocks_per_stage: 1,
            attention,
            fourier_scale: 1.0,
        }
    }

    #[test]
    fn table_of_receptive_fields() {
        let rf = |d| NetConfig::paper(d, false).receptive_field();
        assert_eq!(rf(1), ReceptiveField::Finite(49));
        assert_eq!(rf(2), ReceptiveField::Finite(143));
        assert_eq!(rf(3), ReceptiveField::Finite(331));
        match rf(4) {
            ReceptiveField::Finite(r) => assert!(r > 640),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            NetConfig::paper(4, true).receptive_field(),
            ReceptiveField::Global { .. }
        ));
    }

    #[test]
    fn attention_needs_depth_four() {
        let mut rng = RngState::new(0);
        assert!(ScoreNet::new(NetConfig::paper(3, true), &mut rng).is_err());
    }

    #[test]
    fn output_has_input_dims() {
        let mut rng = RngState::new(1);
        for (d, attn) in [(1, false), (2, false), (3, false), (4, true)] {
            let net = ScoreNet::new(small(d, attn), &mut rng).unwrap();
            let x = crate::imgcore::gaussian_field(16, 8, &mut rng);
            let s = net.score(&x, 0.7).unwrap();
            assert_eq!(s.dims(), (16, 8));
            assert!(s.is_finite());
        }
    }

    #[test]
    fn indivisible_side_is_rejected() {
        let mut rng = RngState::new(2);
        let net = ScoreNet::new(small(3, false), &mut rng).unwrap();
        let x = Image::zeros(10, 8);
        assert!(matches!(net.score(&x, 1.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn parameter_count_grows_with_depth() {
        let mut rng = RngState::new(3);
        let counts: Vec<usize> = (1..=4)
            .map(|d| ScoreNet::new(NetConfig::paper(d, false), &mut rng).unwrap().param_count())
            .collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
    }

    fn check_gradients(cfg: NetConfig, side: usize, seed: u64) {
        let mut rng = RngState::new(seed);
        let net = ScoreNet::new(cfg, &mut rng).unwrap();
        // perturb every parameter so zero-ish initial blocks do not hide bugs
        let mut p = net.params().to_vec();
        for v in p.iter_mut() {
            *v += 0.2 * rng.normal();
        }
        let x = crate::imgcore::gaussian_field(side, side, &mut rng);
        let w = crate::imgcore::gaussian_field(side, side, &mut rng);
        let sigma = 0.8;
        let mut gp = vec![0.0; p.len()];
        let (_, gx) = net.score_and_backward(&p, &x, sigma, |_| w.clone(), &mut gp).unwrap();
        let loss = |p: &[f64], x: &Image| net.score_with(p, x, sigma).unwrap().dot(&w);
        let h = 1e-5;
        let frozen = net.frozen();
        let n = p.len();
        let picks: Vec<usize> = (0..40).map(|i| (i * 7919 + 13) % n).filter(|i| !frozen.contains(i)).collect();
        for i in picks {
            let mut pp = p.clone();
            pp[i] += h;
            let mut pm = p.clone();
            pm[i] -= h;
            let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h);
            assert!(
                (fd - gp[i]).abs() <= 1e-5 * fd.abs().max(1e-2),
                "param {i}: fd {fd} vs analytic {}",
                gp[i]
            );
        }
        for i in [0, side + 1, side * side - 1] {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * h);
            assert!((fd - gx.data()[i]).abs() <= 1e-5 * fd.abs().max(1e-2), "pixel {i}: {fd} vs {}", gx.data()[i]);
        }
    }

    #[test]
    fn backward_matches_finite_differences_single_level() {
        check_gradients(small(1, false), 6, 10);
    }

    #[test]
    fn backward_matches_finite_differences_multi_level() {
        check_gradients(small(3, false), 8, 11);
    }

    #[test]
    fn backward_matches_finite_differences_with_attention() {
        check_gradients(small(4, true), 8, 12);
    }

    #[test]
    fn single_level_influence_stops_at_49_pixels() {
        let cfg = NetConfig {
            depth: 1,
            base_channels: 2,
            deep_channels: 2,
            blocks_per_stage: 4,
            attention: false,
            fourier_scale: 16.0,
        };
        assert_eq!(cfg.receptive_field(), ReceptiveField::Finite(49));
        let mut rng = RngState::new(5);
        let net = ScoreNet::new(cfg, &mut rng).unwrap();
        let x = crate::imgcore::gaussian_field(320, 320, &mut rng);
        let base = net.score(&x, 1.0).unwrap();
        for _ in 0..3 {
            let (pr, pc) = (40 + rng.below(240), 40 + rng.below(240));
            let mut xp = x.clone();
            xp.set(pr, pc, x.get(pr, pc) + 1.0);
            let moved = net.score(&xp, 1.0).unwrap();
            for r in 0..320usize {
                for c in 0..320usize {
                    let dr = r.abs_diff(pr);
                    let dc = c.abs_diff(pc);
                    let changed = moved.get(r, c) != base.get(r, c);
                    if dr > 24 || dc > 24 {
                        assert!(!changed, "pixel ({r},{c}) reacts to ({pr},{pc})");
                    }
                }
            }
            // the window edge is reached: the Jacobian row of output pixel
            // (pr, pc) is nonzero 24 pixels away (too small to survive rounding
            // in a finite perturbation, hence the backward pass)
            let mut gp = vec![0.0; net.param_count()];
            let (_, row) = net
                .score_and_backward(
                    net.params(),
                    &x,
                    1.0,
                    |_| {
                        let mut e = Image::zeros(320, 320);
                        e.set(pr, pc, 1.0);
                        e
                    },
                    &mut gp,
                )
                .unwrap();
            for (r, c) in [(pr + 24, pc), (pr - 24, pc), (pr, pc + 24), (pr + 24, pc - 24)] {
                assert!(row.get(r, c) != 0.0, "no influence from ({r},{c})");
            }
            for (r, c) in [(pr + 25, pc), (pr, pc - 25), (pr + 30, pc + 30)] {
                assert_eq!(row.get(r, c), 0.0);
            }
        }
    }

    #[test]
    fn from_params_round_trip() {
        let mut rng = RngState::new(4);
        let net = ScoreNet::new(small(2, false), &mut rng).unwrap();
        let copy = ScoreNet::from_params(*net.config(), net.params().to_vec()).unwrap();
        let x = crate::imgcore::gaussian_field(4, 4, &mut rng);
        assert_eq!(net.score(&x, 2.0).unwrap(), copy.score(&x, 2.0).unwrap());
        assert!(ScoreNet::from_params(*net.config(), vec![0.0; 3]).is_err());
    }
}
