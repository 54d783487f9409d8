//! Charbonnier-smoothed total-variation reconstruction.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{fd_h, fd_h_adjoint, fd_v, fd_v_adjoint, Image};
use crate::operators::{Measurement, MeasurementOp};

/// `sum_ij sqrt((D_h x)^2 + (D_v x)^2 + eps^2)`.
pub fn tv_value(x: &Image, epsilon: f64) -> f64 {
    let gh = fd_h(x);
    let gv = fd_v(x);
    let e2 = epsilon * epsilon;
    gh.data()
        .iter()
        .zip(gv.data())
        .map(|(a, b)| (a * a + b * b + e2).sqrt())
        .sum()
}

/// Gradient of [`tv_value`]: `D_h^T (D_h x / n) + D_v^T (D_v x / n)` with
/// `n` the Charbonnier magnitude.
pub fn tv_gradient(x: &Image, epsilon: f64) -> Image {
    let mut gh = fd_h(x);
    let mut gv = fd_v(x);
    let e2 = epsilon * epsilon;
    for (a, b) in gh.data_mut().iter_mut().zip(gv.data_mut().iter_mut()) {
        let n = (*a * *a + *b * *b + e2).sqrt();
        *a /= n;
        *b /= n;
    }
    let mut g = fd_h_adjoint(&gh);
    g.axpy(1.0, &fd_v_adjoint(&gv));
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TvParams {
    pub epsilon: f64,
    pub lambda: f64,
    pub max_iters: usize,
    /// Stop once the relative objective change of an accepted step drops below this.
    pub tol: f64,
}

impl Default for TvParams {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            lambda: 1e3,
            max_iters: 5000,
            tol: 1e-9,
        }
    }
}

/// One accepted iterate: objective, its data term `lambda/2 |Ax - y|^2` and TV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub objective: f64,
    pub data_fidelity: f64,
    pub tv: f64,
}

#[derive(Debug, Clone)]
pub struct TvResult {
    pub image: Image,
    pub trace: Vec<TraceRow>,
    pub iterations: usize,
    pub restarts: usize,
    /// False when `max_iters` ran out before the tolerance was met; `image`
    /// is then the best iterate seen.
    pub converged: bool,
}

struct Objective<'a> {
    y: &'a Measurement,
    op: &'a MeasurementOp,
    p: &'a TvParams,
}

impl Objective<'_> {
    fn parts(&self, x: &Image) -> Result<(f64, f64)> {
        let data = if self.p.lambda == 0.0 {
            0.0
        } else {
            0.5 * self.p.lambda * self.op.residual_norm(x, self.y)?.powi(2)
        };
        Ok((data, tv_value(x, self.p.epsilon)))
    }

    fn value(&self, x: &Image) -> Result<f64> {
        let (d, t) = self.parts(x)?;
        Ok(d + t)
    }

    fn gradient(&self, x: &Image) -> Result<Image> {
        let mut g = tv_gradient(x, self.p.epsilon);
        if self.p.lambda != 0.0 {
            let resid = self.op.forward(x)?.sub(self.y)?;
            g.axpy(self.p.lambda, &self.op.adjoint(&resid)?);
        }
        Ok(g)
    }

    fn row(&self, iter: usize, x: &Image) -> Result<TraceRow> {
        let (data_fidelity, tv) = self.parts(x)?;
        Ok(TraceRow {
            iter,
            objective: data_fidelity + tv,
            data_fidelity,
            tv,
        })
    }
}

/// Minimize `lambda/2 |Ax - y|^2 + TV_eps(x)` over real images with
/// accelerated gradient steps, backtracking on the step size and a
/// function-value restart: a step that would raise the objective is
/// discarded and the momentum reset, so accepted objectives never increase.
pub fn reconstruct_tv(y: &Measurement, op: &MeasurementOp, p: &TvParams) -> Result<TvResult> {
    if !(p.lambda >= 0.0 && p.lambda.is_finite()) {
        return Err(Error::param(format!("lambda must be nonnegative, got {}", p.lambda)));
    }
    if !(p.epsilon > 0.0) {
        return Err(Error::param("epsilon must be positive"));
    }
    let f = Objective { y, op, p };
    // the back-operator output is real by construction, so it is already feasible
    let mut x = op.back(y)?;
    let mut fx = f.value(&x)?;
    let mut trace = vec![f.row(0, &x)?];
    let mut z = x.clone();
    let mut t = 1.0f64;
    let l0 = p.lambda * op.norm_sq_bound() + 8.0 / p.epsilon;
    let mut lip = l0;
    let mut restarts = 0;
    let mut converged = false;
    let mut iterations = 0;

    for k in 1..=p.max_iters {
        iterations = k;
        let g = f.gradient(&z)?;
        let fz = f.value(&z)?;
        let gg = g.dot(&g);
        if gg == 0.0 {
            converged = true;
            break;
        }
        // try a longer step than last time, then backtrack
        lip *= 0.9;
        let (x_new, f_new) = loop {
            let mut cand = z.clone();
            cand.axpy(-1.0 / lip, &g);
            let fc = f.value(&cand)?;
            // sufficient decrease for the gradient step z - g / L
            if fc <= fz - 0.5 * gg / lip || lip >= 1e6 * l0 {
                break (cand, fc);
            }
            lip *= 2.0;
        };
        if f_new > fx {
            restarts += 1;
            t = 1.0;
            z = x.clone();
            continue;
        }
        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_new;
        z = x_new.zip_map(&x, |a, b| a + beta * (a - b));
        let rel = (fx - f_new).abs() / fx.abs().max(f64::MIN_POSITIVE);
        x = x_new;
        fx = f_new;
        t = t_new;
        trace.push(f.row(k, &x)?);
        if rel < p.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("TV reconstruction stopped after {iterations} iterations without meeting tol");
    }
    Ok(TvResult {
        image: x,
        trace,
        iterations,
        restarts,
        converged,
    })
}

/// Objective trace CSV: `iter,objective,data_fidelity,tv`.
pub fn write_trace_csv(path: impl AsRef<Path>, trace: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iter", "objective", "data_fidelity", "tv"])?;
    for r in trace {
        w.write_record([
            r.iter.to_string(),
            format!("{}", r.objective),
            format!("{}", r.data_fidelity),
            format!("{}", r.tv),
        ])?;
    }
    w.flush()?;
    Ok(())
}
