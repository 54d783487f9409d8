use std::path::Path;

use crate::error::Result;

/// Outcome for one slice. Failed slices keep their id and an error message
/// and leave the metric cells empty.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceRow {
    pub id: String,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub time_s: Option<f64>,
    pub error: Option<String>,
}

impl SliceRow {
    pub fn new(id: &str) -> Self {
        Self {
            id: id.to_string(),
            psnr: None,
            ssim: None,
            time_s: None,
            error: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconReport {
    pub dataset: String,
    pub mask: String,
    pub method: String,
    /// Network depth, when the prior is a network.
    pub depth: Option<usize>,
    pub lambda: Option<f64>,
    pub rows: Vec<SliceRow>,
}

/// Mean and sample standard deviation (0 for a single value).
fn mean_std(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some((mean, std))
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl ReconReport {
    pub fn psnr_stats(&self) -> Option<(f64, f64)> {
        mean_std(self.rows.iter().filter_map(|r| r.psnr).filter(|v| v.is_finite()))
    }

    pub fn ssim_stats(&self) -> Option<(f64, f64)> {
        mean_std(self.rows.iter().filter_map(|r| r.ssim))
    }

    pub fn mean_time(&self) -> Option<f64> {
        mean_std(self.rows.iter().filter_map(|r| r.time_s)).map(|s| s.0)
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }

    /// `metrics.csv`: a comment line stating the intensity normalization,
    /// then `id,mask,psnr,ssim,time_s`.
    pub fn write_metrics_csv(&self, path: &Path) -> Result<()> {
        let mut text = String::from("# intensities normalized to [0,1] by per-slice max\n");
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["id", "mask", "psnr", "ssim", "time_s"])?;
        for r in &self.rows {
            w.write_record([r.id.clone(), self.mask.clone(), cell(r.psnr), cell(r.ssim), cell(r.time_s)])?;
        }
        let body = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        text.push_str(&String::from_utf8_lossy(&body));
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Summary table across experiments:
/// `dataset,mask,method,d,lambda,psnr_mean,psnr_std,ssim_mean,ssim_std,time_s`.
pub fn compare_table(reports: &[ReconReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "dataset", "mask", "method", "d", "lambda", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std", "time_s",
    ])?;
    for r in reports {
        let p = r.psnr_stats();
        let s = r.ssim_stats();
        w.write_record([
            r.dataset.clone(),
            r.mask.clone(),
            r.method.clone(),
            r.depth.map(|d| d.to_string()).unwrap_or_default(),
            cell(r.lambda),
            cell(p.map(|v| v.0)),
            cell(p.map(|v| v.1)),
            cell(s.map(|v| v.0)),
            cell(s.map(|v| v.1)),
            cell(r.mean_time()),
        ])?;
    }
    let body = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(String::from_utf8_lossy(&body).into_owned())
}

pub fn write_compare_table(path: &Path, reports: &[ReconReport]) -> Result<()> {
    std::fs::write(path, compare_table(reports)?)?;
    Ok(())
}
