use super::tensor::{Conv, Feat};

/// Single-head dot-product self-attention over all pixels, with a residual
/// connection: `(x + W_o softmax(q^T k / sqrt(C)) v) / sqrt(2)`.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub q: Conv,
    pub k: Conv,
    pub v: Conv,
    pub o: Conv,
}

pub struct AttnCache {
    x: Feat,
    q: Feat,
    k: Feat,
    v: Feat,
    attn: Vec<f64>,
    mixed: Feat,
}

impl Attention {
    pub fn forward(&self, p: &[f64], x: &Feat) -> (Feat, AttnCache) {
        let (c, n) = (x.c, x.plane());
        let q = self.q.forward(p, x);
        let k = self.k.forward(p, x);
        let v = self.v.forward(p, x);
        let scale = 1.0 / (c as f64).sqrt();
        let mut attn = vec![0.0; n * n];
        for i in 0..n {
            let row = &mut attn[i * n..(i + 1) * n];
            for (j, r) in row.iter_mut().enumerate() {
                *r = (0..c).map(|ch| q.data[ch * n + i] * k.data[ch * n + j]).sum::<f64>() * scale;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                total += *r;
            }
            row.iter_mut().for_each(|r| *r /= total);
        }
        let mut mixed = Feat::zeros(c, x.h, x.w);
        for ch in 0..c {
            for i in 0..n {
                mixed.data[ch * n + i] = (0..n).map(|j| attn[i * n + j] * v.data[ch * n + j]).sum();
            }
        }
        let mut out = self.o.forward(p, &mixed);
        out.add_assign(x);
        let out = out.scaled(std::f64::consts::FRAC_1_SQRT_2);
        (
            out,
            AttnCache {
                x: x.clone(),
                q,
                k,
                v,
                attn,
                mixed,
            },
        )
    }

    pub fn backward(&self, p: &[f64], cache: &AttnCache, gy: &Feat, gp: &mut [f64]) -> Feat {
        let (c, n) = (cache.x.c, cache.x.plane());
        let g = gy.clone().scaled(std::f64::consts::FRAC_1_SQRT_2);
        let mut gx = g.clone();
        let gmixed = self.o.backward(p, &cache.mixed, &g, gp);

        let a = &cache.attn;
        let mut gv = Feat::zeros(c, cache.x.h, cache.x.w);
        let mut ga = vec![0.0; n * n];
        for ch in 0..c {
            for i in 0..n {
                let gm = gmixed.data[ch * n + i];
                for j in 0..n {
                    ga[i * n + j] += gm * cache.v.data[ch * n + j];
                    gv.data[ch * n + j] += a[i * n + j] * gm;
                }
            }
        }
        // softmax backward, row by row
        let scale = 1.0 / (c as f64).sqrt();
        let mut gs = vec![0.0; n * n];
        for i in 0..n {
            let inner: f64 = (0..n).map(|j| a[i * n + j] * ga[i * n + j]).sum();
            for j in 0..n {
                gs[i * n + j] = a[i * n + j] * (ga[i * n + j] - inner) * scale;
            }
        }
        let mut gq = Feat::zeros(c, cache.x.h, cache.x.w);
        let mut gk = Feat::zeros(c, cache.x.h, cache.x.w);
        for ch in 0..c {
            for i in 0..n {
                for j in 0..n {
                    let s = gs[i * n + j];
                    gq.data[ch * n + i] += s * cache.k.data[ch * n + j];
                    gk.data[ch * n + j] += s * cache.q.data[ch * n + i];
                }
            }
        }
        gx.add_assign(&self.q.backward(p, &cache.x, &gq, gp));
        gx.add_assign(&self.k.backward(p, &cache.x, &gk, gp));
        gx.add_assign(&self.v.backward(p, &cache.x, &gv, gp));
        gx
    }
}
