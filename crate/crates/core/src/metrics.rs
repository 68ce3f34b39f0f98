//! Image-quality metrics and the experiment results table.
//!
//! NMSE uses the squared-norm convention `||est - ref||_2^2 / ||ref||_2^2`
//! (labeled `nmse_sq` in CSV headers). SSIM follows the common fastMRI
//! evaluation convention: 7x7 uniform window, k1 = 0.01, k2 = 0.03,
//! sample-covariance normalization, data range defaulting to the maximum
//! of the reference, averaged over windows fully inside the image.

use crate::error::{Error, Result};
use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;
use std::io::Write;
use std::path::Path;

/// Squared-norm NMSE over complex moduli.
pub fn nmse(reference: &ArrayView2<'_, Complex64>, estimate: &ArrayView2<'_, Complex64>) -> Result<f64> {
    if reference.dim() != estimate.dim() {
        return Err(Error::Dim(format!(
            "nmse operands {:?} vs {:?}",
            reference.dim(),
            estimate.dim()
        )));
    }
    let ref_energy: f64 = reference.iter().map(|v| v.norm_sqr()).sum();
    if ref_energy == 0.0 {
        return Err(Error::Degenerate("zero reference in nmse".into()));
    }
    let err_energy: f64 = reference
        .iter()
        .zip(estimate.iter())
        .map(|(r, e)| (e - r).norm_sqr())
        .sum();
    Ok(err_energy / ref_energy)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimOptions {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    /// Luminance range; `None` uses the maximum of the reference.
    pub data_range: Option<f64>,
}

impl Default for SsimOptions {
    fn default() -> Self {
        SsimOptions { window: 7, k1: 0.01, k2: 0.03, data_range: None }
    }
}

/// Mean local SSIM between two real (magnitude) images.
pub fn ssim(
    reference: &ArrayView2<'_, f64>,
    estimate: &ArrayView2<'_, f64>,
    opts: &SsimOptions,
) -> Result<f64> {
    if reference.dim() != estimate.dim() {
        return Err(Error::Dim(format!(
            "ssim operands {:?} vs {:?}",
            reference.dim(),
            estimate.dim()
        )));
    }
    let (h, w) = reference.dim();
    let win = opts.window;
    if win == 0 || win > h || win > w {
        return Err(Error::Dim(format!(
            "window {win} does not fit a {h}x{w} image"
        )));
    }
    let data_range = match opts.data_range {
        Some(r) => r,
        None => reference.iter().cloned().fold(0.0, f64::max),
    };
    if !(data_range > 0.0) {
        return Err(Error::Degenerate("nonpositive data range in ssim".into()));
    }
    let c1 = (opts.k1 * data_range).powi(2);
    let c2 = (opts.k2 * data_range).powi(2);
    let np = (win * win) as f64;
    let cov_norm = np / (np - 1.0);

    // Row-prefix sums make each window sum O(window) instead of O(window^2).
    let integral = |img: &ArrayView2<'_, f64>, f: &dyn Fn(f64, f64) -> f64,
                    other: &ArrayView2<'_, f64>| {
        let mut t = Array2::<f64>::zeros((h, w + 1));
        for i in 0..h {
            for j in 0..w {
                t[[i, j + 1]] = t[[i, j]] + f(img[[i, j]], other[[i, j]]);
            }
        }
        t
    };
    let rx = integral(reference, &|a, _| a, estimate);
    let ry = integral(estimate, &|a, _| a, reference);
    let rxx = integral(reference, &|a, _| a * a, estimate);
    let ryy = integral(estimate, &|a, _| a * a, reference);
    let rxy = integral(reference, &|a, b| a * b, estimate);

    let window_sum = |t: &Array2<f64>, i0: usize, j0: usize| -> f64 {
        (i0..i0 + win).map(|i| t[[i, j0 + win]] - t[[i, j0]]).sum()
    };

    let mut total = 0.0;
    let mut count = 0usize;
    for i0 in 0..=(h - win) {
        for j0 in 0..=(w - win) {
            let ux = window_sum(&rx, i0, j0) / np;
            let uy = window_sum(&ry, i0, j0) / np;
            let uxx = window_sum(&rxx, i0, j0) / np;
            let uyy = window_sum(&ryy, i0, j0) / np;
            let uxy = window_sum(&rxy, i0, j0) / np;
            let vx = cov_norm * (uxx - ux * ux);
            let vy = cov_norm * (uyy - uy * uy);
            let vxy = cov_norm * (uxy - ux * uy);
            let num = (2.0 * ux * uy + c1) * (2.0 * vxy + c2);
            let den = (ux * ux + uy * uy + c1) * (vx + vy + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Magnitude image of a complex reconstruction.
pub fn magnitude(x: &ArrayView2<'_, Complex64>) -> Array2<f64> {
    x.mapv(|v| v.norm())
}

/// One evaluated (slice, method) pair in an experiment table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub slice_id: u64,
    pub method: String,
    pub r: f64,
    pub rho: Option<f64>,
    pub scheme: Option<String>,
    pub overlap: Option<f64>,
    pub nmse: f64,
    pub ssim: f64,
    pub wall_time_s: f64,
}

impl MetricsRow {
    pub fn validate(&self) -> Result<()> {
        if self.nmse < 0.0 {
            return Err(Error::Consistency("NMSE must be nonnegative".into()));
        }
        if !(-1.0..=1.0).contains(&self.ssim) {
            return Err(Error::Consistency(format!("SSIM {} outside [-1,1]", self.ssim)));
        }
        Ok(())
    }
}

fn opt_str<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

/// Stable-sorted CSV (by slice id, then method) for diffable outputs.
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut sorted: Vec<&MetricsRow> = rows.iter().collect();
    sorted.sort_by(|a, b| (a.slice_id, &a.method).cmp(&(b.slice_id, &b.method)));
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "slice_id,method,R,rho,scheme,overlap,nmse_sq,ssim,wall_time_s")?;
    for row in sorted {
        row.validate()?;
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            row.slice_id,
            row.method,
            row.r,
            opt_str(&row.rho),
            opt_str(&row.scheme),
            opt_str(&row.overlap),
            row.nmse,
            row.ssim,
            row.wall_time_s
        )?;
    }
    f.into_inner().map_err(|e| Error::Io(e.into_error()))?.flush()?;
    Ok(())
}
