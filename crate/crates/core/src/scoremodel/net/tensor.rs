//! Channel-major feature maps and the primitive layers of the score network,
//! each with a hand-written backward pass.

/// `c x h x w` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Feat {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Feat {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        let p = self.plane();
        &self.data[i * p..(i + 1) * p]
    }

    pub fn channel_mut(&mut self, i: usize) -> &mut [f64] {
        let p = self.plane();
        &mut self.data[i * p..(i + 1) * p]
    }

    pub fn add_assign(&mut self, other: &Feat) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scaled(mut self, s: f64) -> Self {
        self.data.iter_mut().for_each(|v| *v *= s);
        self
    }

    /// Stack channels of `a` then `b`.
    pub fn concat(a: &Feat, b: &Feat) -> Feat {
        debug_assert_eq!((a.h, a.w), (b.h, b.w));
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Feat {
            c: a.c + b.c,
            h: a.h,
            w: a.w,
            data,
        }
    }

    /// Inverse of [`Feat::concat`] for gradients.
    pub fn split(&self, first: usize) -> (Feat, Feat) {
        let cut = first * self.plane();
        (
            Feat {
                c: first,
                h: self.h,
                w: self.w,
                data: self.data[..cut].to_vec(),
            },
            Feat {
                c: self.c - first,
                h: self.h,
                w: self.w,
                data: self.data[cut..].to_vec(),
            },
        )
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn silu_feat(x: &Feat) -> Feat {
    Feat {
        c: x.c,
        h: x.h,
        w: x.w,
        data: x.data.iter().map(|&v| silu(v)).collect(),
    }
}

/// `g * silu'(x)` elementwise.
pub fn silu_back(x: &[f64], g: &[f64]) -> Vec<f64> {
    x.iter().zip(g).map(|(&xv, &gv)| gv * silu_grad(xv)).collect()
}

/// Multiply-adds above which a convolution splits its output channels across
/// threads.
const PAR_THRESHOLD: usize = 1 << 20;

/// Square convolution, stride 1, zero padding `k / 2` (odd `k`).
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub w: usize,
    pub b: usize,
}

impl Conv {
    #[cfg(test)]
    pub fn param_count(cin: usize, cout: usize, k: usize) -> usize {
        cout * cin * k * k + cout
    }

    fn for_taps(&self, h: usize, w: usize, mut f: impl FnMut(usize, usize, isize, isize)) {
        let pad = (self.k / 2) as isize;
        for ky in 0..self.k {
            for kx in 0..self.k {
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                if dy.unsigned_abs() >= h || dx.unsigned_abs() >= w {
                    continue;
                }
                f(ky, kx, dy, dx);
            }
        }
    }

    pub fn forward(&self, p: &[f64], x: &Feat) -> Feat {
        debug_assert_eq!(x.c, self.cin);
        let mut out = Feat::zeros(self.cout, x.h, x.w);
        let plane = x.plane();
        let work = plane * self.cin * self.cout * self.k * self.k;
        if work >= PAR_THRESHOLD {
            crate::par::for_each_chunk_mut(&mut out.data, plane, |o, dst| self.forward_channel(p, x, o, dst));
        } else {
            for (o, dst) in out.data.chunks_mut(plane).enumerate() {
                self.forward_channel(p, x, o, dst);
            }
        }
        out
    }

    fn forward_channel(&self, p: &[f64], x: &Feat, o: usize, dst: &mut [f64]) {
        let (h, w) = (x.h, x.w);
        let kk = self.k * self.k;
        dst.iter_mut().for_each(|v| *v = p[self.b + o]);
        for i in 0..self.cin {
            let src = x.channel(i);
            let wbase = self.w + (o * self.cin + i) * kk;
            self.for_taps(h, w, |ky, kx, dy, dx| {
                let wt = p[wbase + ky * self.k + kx];
                let y0 = (-dy).max(0) as usize;
                let y1 = (h as isize - dy.max(0)) as usize;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx.max(0)) as usize;
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let drow = &mut dst[y * w + x0..y * w + x1];
                    let sx0 = (x0 as isize + dx) as usize;
                    let srow = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                    for (d, s) in drow.iter_mut().zip(srow) {
                        *d += wt * s;
                    }
                }
            });
        }
    }

    /// Accumulate parameter gradients into `gp` and return `dL/dx`.
    pub fn backward(&self, p: &[f64], x: &Feat, gy: &Feat, gp: &mut [f64]) -> Feat {
        let (h, w) = (x.h, x.w);
        let kk = self.k * self.k;
        let mut gx = Feat::zeros(self.cin, h, w);
        for o in 0..self.cout {
            let g = gy.channel(o);
            gp[self.b + o] += g.iter().sum::<f64>();
            for i in 0..self.cin {
                let src = x.channel(i);
                let wbase = self.w + (o * self.cin + i) * kk;
                let gxi = &mut gx.data[i * h * w..(i + 1) * h * w];
                self.for_taps(h, w, |ky, kx, dy, dx| {
                    let widx = wbase + ky * self.k + kx;
                    let wt = p[widx];
                    let y0 = (-dy).max(0) as usize;
                    let y1 = (h as isize - dy.max(0)) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx.max(0)) as usize;
                    let mut gw = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        let n = x1 - x0;
                        let grow = &g[y * w + x0..y * w + x1];
                        let srow = &src[sy * w + sx0..sy * w + sx0 + n];
                        let gxrow = &mut gxi[sy * w + sx0..sy * w + sx0 + n];
                        for ((gv, sv), gxv) in grow.iter().zip(srow).zip(gxrow.iter_mut()) {
                            gw += gv * sv;
                            *gxv += wt * gv;
                        }
                    }
                    gp[widx] += gw;
                });
            }
        }
        gx
    }
}

/// Fully connected layer on a vector.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub nin: usize,
    pub nout: usize,
    pub w: usize,
    pub b: usize,
}

impl Dense {
    pub fn forward(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        (0..self.nout)
            .map(|o| {
                let row = &p[self.w + o * self.nin..self.w + (o + 1) * self.nin];
                p[self.b + o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    pub fn backward(&self, p: &[f64], x: &[f64], gy: &[f64], gp: &mut [f64]) -> Vec<f64> {
        let mut gx = vec![0.0; self.nin];
        for (o, &g) in gy.iter().enumerate() {
            gp[self.b + o] += g;
            let base = self.w + o * self.nin;
            for i in 0..self.nin {
                gp[base + i] += g * x[i];
                gx[i] += g * p[base + i];
            }
        }
        gx
    }
}

/// Order-3 binomial filter `[1, 3, 3, 1] / 8`.
const BINOMIAL: [f64; 4] = [0.125, 0.375, 0.375, 0.125];

/// 1-D blur-and-decimate along one axis: `out[y] = sum_t f[t] in[2y + t - 1]`.
fn down_1d(src: &[f64], dst: &mut [f64], n_out: usize, stride_in: usize, stride_out: usize, n_in: usize) {
    for y in 0..n_out {
        let mut acc = 0.0;
        for (t, &f) in BINOMIAL.iter().enumerate() {
            let s = 2 * y as isize + t as isize - 1;
            if s >= 0 && (s as usize) < n_in {
                acc += f * src[s as usize * stride_in];
            }
        }
        dst[y * stride_out] = acc;
    }
}

/// Transpose of [`down_1d`].
fn down_1d_t(src: &[f64], dst: &mut [f64], n_coarse: usize, stride_c: usize, stride_f: usize, n_fine: usize) {
    for y in 0..n_coarse {
        let v = src[y * stride_c];
        for (t, &f) in BINOMIAL.iter().enumerate() {
            let s = 2 * y as isize + t as isize - 1;
            if s >= 0 && (s as usize) < n_fine {
                dst[s as usize * stride_f] += f * v;
            }
        }
    }
}

/// Separable binomial anti-aliasing filter with stride 2 (`h, w` even).
pub fn blur_down(x: &Feat) -> Feat {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut mid = Feat::zeros(x.c, x.h, w2);
    let mut out = Feat::zeros(x.c, h2, w2);
    for c in 0..x.c {
        let src = x.channel(c);
        let m = mid.channel_mut(c);
        for r in 0..x.h {
            down_1d(&src[r * x.w..], &mut m[r * w2..], w2, 1, 1, x.w);
        }
        let m = mid.channel(c).to_vec();
        let o = out.channel_mut(c);
        for col in 0..w2 {
            down_1d(&m[col..], &mut o[col..], h2, w2, w2, x.h);
        }
    }
    out
}

/// Transpose of [`blur_down`], mapping an `h x w` map to `2h x 2w`.
pub fn blur_down_t(g: &Feat) -> Feat {
    let (h, w) = (2 * g.h, 2 * g.w);
    let mut mid = Feat::zeros(g.c, h, g.w);
    let mut out = Feat::zeros(g.c, h, w);
    for c in 0..g.c {
        let src = g.channel(c);
        let m = mid.channel_mut(c);
        for col in 0..g.w {
            down_1d_t(&src[col..], &mut m[col..], g.h, g.w, g.w, h);
        }
        let m = mid.channel(c).to_vec();
        let o = out.channel_mut(c);
        for r in 0..h {
            down_1d_t(&m[r * g.w..], &mut o[r * w..], g.w, 1, 1, w);
        }
    }
    out
}

/// Upsample by 2 with the same filter (`4 * blur_down^T`, preserves constants).
pub fn blur_up(x: &Feat) -> Feat {
    blur_down_t(x).scaled(4.0)
}

pub fn blur_up_back(g: &Feat) -> Feat {
    blur_down(g).scaled(4.0)
}
