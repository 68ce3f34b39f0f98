//! Experiment runners: dataset assembly, model evaluation, and the
//! hyperparameter sweeps (loss-set fraction, theta/lambda overlap,
//! selection scheme, acceleration).
//!
//! Each runner trains from scratch per configuration point and reports one
//! metrics row per test slice.

use crate::error::{Error, Result};
use crate::metrics::{magnitude, nmse, ssim, MetricsRow, SsimOptions};
use crate::mri::SamplingMask;
use crate::network::{reconstruct, ParamStore, ResNetConfig, UnrollConfig};
use crate::sim::{equispaced_mask, jitter_spec, make_phantom, simulate_acquisition, PhantomSpec};
use crate::solvers::cg_sense;
use crate::train::{train, SelectionScheme, TrainConfig, TrainExample, TrainMode};
use ndarray::Array2;
use num_complex::Complex64;
use std::time::Instant;

/// One synthetic slice: the training view plus its ground truth.
#[derive(Debug, Clone)]
pub struct SliceData {
    pub example: TrainExample,
    pub truth: Array2<Complex64>,
}

/// Dataset-level generation parameters.
#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub phantom: PhantomSpec,
    pub n_train: usize,
    pub n_test: usize,
    /// Per-slice geometry jitter amplitude.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec { phantom: PhantomSpec::default(), n_train: 32, n_test: 6, jitter: 0.04, seed: 1 }
    }
}

/// Generate `n_train + n_test` slices under a shared sampling pattern.
///
/// Each slice jitters the phantom geometry, simulates one noisy
/// acquisition, and stores both the undersampled volume and the
/// fully-sampled reference k-space (same noise realization, same
/// normalization) so the supervised modes can train on identical data.
pub fn build_dataset(
    spec: &DatasetSpec,
    omega: &SamplingMask,
) -> Result<(Vec<TrainExample>, Vec<SliceData>)> {
    let n_total = spec.n_train + spec.n_test;
    let (h, w) = omega.dim();
    let full = SamplingMask::full(h, w, crate::mri::MaskKind::Omega);
    let mut train_set = Vec::with_capacity(spec.n_train);
    let mut test_set = Vec::with_capacity(spec.n_test);
    for i in 0..n_total {
        let slice_id = i as u64;
        let slice_spec = jitter_spec(&spec.phantom, spec.jitter, spec.seed.wrapping_add(1000 + slice_id));
        let (x_true, maps) = make_phantom(&slice_spec, spec.seed.wrapping_add(2000 + slice_id))?;
        let noise_seed = spec.seed.wrapping_add(3000 + slice_id);
        let y = simulate_acquisition(&x_true, &maps, omega, spec.phantom.noise_std, noise_seed, slice_id)?;
        // Identical seed: the same noise realization restricted differently.
        let y_full_vol =
            simulate_acquisition(&x_true, &maps, &full, spec.phantom.noise_std, noise_seed, slice_id)?;
        let rescale = y_full_vol.norm_scale / y.norm_scale;
        let y_full = y_full_vol.data.mapv(|v| v * rescale);
        let example = TrainExample { kspace: y, maps, y_full: Some(y_full) };
        if i < spec.n_train {
            train_set.push(example);
        } else {
            test_set.push(SliceData { example, truth: x_true });
        }
    }
    Ok((train_set, test_set))
}

/// Columns shared by every row of one evaluation.
#[derive(Debug, Clone, Default)]
pub struct EvalContext {
    pub r_nominal: f64,
    pub rho: Option<f64>,
    pub scheme: Option<String>,
    pub overlap: Option<f64>,
}

/// Evaluate an arbitrary per-slice reconstruction against ground truth.
pub fn evaluate_reconstructions<F>(
    test: &[SliceData],
    method: &str,
    ctx: &EvalContext,
    mut recon_fn: F,
) -> Result<Vec<MetricsRow>>
where
    F: FnMut(&SliceData) -> Result<Array2<Complex64>>,
{
    let mut rows = Vec::with_capacity(test.len());
    for slice in test {
        let start = Instant::now();
        let recon = recon_fn(slice)?;
        let wall_time_s = start.elapsed().as_secs_f64();
        let ref_mag = magnitude(&slice.truth.view());
        let est_mag = magnitude(&recon.view());
        rows.push(MetricsRow {
            slice_id: slice.example.kspace.slice_id,
            method: method.to_string(),
            r: ctx.r_nominal,
            rho: ctx.rho,
            scheme: ctx.scheme.clone(),
            overlap: ctx.overlap,
            nmse: nmse(&slice.truth.view(), &recon.view())?,
            ssim: ssim(&ref_mag.view(), &est_mag.view(), &SsimOptions::default())?,
            wall_time_s,
        });
    }
    Ok(rows)
}

/// Evaluate a trained network on held-out slices.
pub fn evaluate_model(
    store: &ParamStore,
    unroll: &UnrollConfig,
    resnet: &ResNetConfig,
    test: &[SliceData],
    method: &str,
    ctx: &EvalContext,
) -> Result<Vec<MetricsRow>> {
    evaluate_reconstructions(test, method, ctx, |slice| {
        reconstruct(&slice.example.kspace, &slice.example.maps, store, unroll, resnet)
    })
}

/// Evaluate the CG-SENSE baseline on held-out slices.
pub fn evaluate_cg_sense(
    test: &[SliceData],
    n_iter: usize,
    l2_reg: f64,
    ctx: &EvalContext,
) -> Result<Vec<MetricsRow>> {
    evaluate_reconstructions(test, "cg_sense", ctx, |slice| {
        let y = &slice.example.kspace;
        let x = cg_sense(y, &slice.example.maps, &y.acquired_mask, n_iter, l2_reg)?;
        Ok(x.mapv(|v| v * y.norm_scale))
    })
}

/// Everything a sweep needs: data, held-out slices, and a base config.
pub struct SweepSetup {
    pub train_set: Vec<TrainExample>,
    pub test_set: Vec<SliceData>,
    pub base_cfg: TrainConfig,
    pub r_nominal: f64,
}

fn annotate(e: Error, note: &str) -> Error {
    match e {
        Error::Dim(m) => Error::Dim(format!("{note}: {m}")),
        Error::Consistency(m) => Error::Consistency(format!("{note}: {m}")),
        Error::Solver(m) => Error::Solver(format!("{note}: {m}")),
        Error::Policy(m) => Error::Policy(format!("{note}: {m}")),
        Error::Usage(m) => Error::Usage(format!("{note}: {m}")),
        Error::Degenerate(m) => Error::Degenerate(format!("{note}: {m}")),
        Error::Format(m) => Error::Format(format!("{note}: {m}")),
        Error::Io(e) => Error::Io(e),
    }
}

/// Train once and evaluate on the setup's test slices.
pub fn train_and_evaluate(
    setup: &SweepSetup,
    cfg: &TrainConfig,
    method: &str,
    ctx: &EvalContext,
) -> Result<Vec<MetricsRow>> {
    let out = train(&setup.train_set, cfg)?;
    evaluate_model(&out.params, &cfg.unroll, &cfg.resnet, &setup.test_set, method, ctx)
}

/// One full self-supervised training per loss-set fraction.
pub fn run_rho_sweep(setup: &SweepSetup, rho_list: &[f64]) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for &rho in rho_list {
        let mut cfg = setup.base_cfg.clone();
        cfg.mode = TrainMode::Ssdu;
        cfg.identical_sets = false;
        cfg.partition.rho = rho;
        let ctx = EvalContext {
            r_nominal: setup.r_nominal,
            rho: Some(rho),
            scheme: Some(cfg.partition.scheme.to_string()),
            overlap: Some(cfg.partition.overlap_fraction),
        };
        let mut batch = train_and_evaluate(setup, &cfg, "ssdu", &ctx)
            .map_err(|e| annotate(e, &format!("rho={rho}")))?;
        rows.append(&mut batch);
    }
    Ok(rows)
}

/// Overlap study over `|lambda AND theta| / |lambda|`, optionally with the
/// limiting identical-sets case (theta = lambda = omega).
pub fn run_overlap_study(
    setup: &SweepSetup,
    overlaps: &[f64],
    include_identical: bool,
) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for &overlap in overlaps {
        let mut cfg = setup.base_cfg.clone();
        cfg.mode = TrainMode::Ssdu;
        cfg.identical_sets = false;
        cfg.partition.overlap_fraction = overlap;
        let ctx = EvalContext {
            r_nominal: setup.r_nominal,
            rho: Some(cfg.partition.rho),
            scheme: Some(cfg.partition.scheme.to_string()),
            overlap: Some(overlap),
        };
        let mut batch = train_and_evaluate(setup, &cfg, "ssdu", &ctx)
            .map_err(|e| annotate(e, &format!("overlap={overlap}")))?;
        rows.append(&mut batch);
    }
    if include_identical {
        let mut cfg = setup.base_cfg.clone();
        cfg.mode = TrainMode::Ssdu;
        cfg.identical_sets = true;
        let ctx = EvalContext {
            r_nominal: setup.r_nominal,
            rho: None,
            scheme: None,
            overlap: Some(1.0),
        };
        let mut batch = train_and_evaluate(setup, &cfg, "ssdu_identical", &ctx)
            .map_err(|e| annotate(e, "identical sets"))?;
        rows.append(&mut batch);
    }
    Ok(rows)
}

/// Uniform vs Gaussian loss-set selection at the base rho.
pub fn run_scheme_comparison(setup: &SweepSetup) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for scheme in [SelectionScheme::Uniform, SelectionScheme::Gaussian] {
        let mut cfg = setup.base_cfg.clone();
        cfg.mode = TrainMode::Ssdu;
        cfg.identical_sets = false;
        cfg.partition.scheme = scheme;
        let ctx = EvalContext {
            r_nominal: setup.r_nominal,
            rho: Some(cfg.partition.rho),
            scheme: Some(scheme.to_string()),
            overlap: Some(cfg.partition.overlap_fraction),
        };
        let mut batch = train_and_evaluate(setup, &cfg, "ssdu", &ctx)
            .map_err(|e| annotate(e, &format!("scheme={scheme}")))?;
        rows.append(&mut batch);
    }
    Ok(rows)
}

/// Self-supervised training and CG-SENSE across acceleration rates; the
/// dataset is regenerated per rate under its own equispaced pattern.
pub fn run_acceleration_sweep(
    dataset: &DatasetSpec,
    acs_lines: usize,
    rates: &[usize],
    base_cfg: &TrainConfig,
    cg_iters: usize,
    cg_l2: f64,
) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for &r in rates {
        let omega = equispaced_mask(dataset.phantom.h, dataset.phantom.w, r, acs_lines)?;
        let (train_set, test_set) = build_dataset(dataset, &omega)?;
        let setup = SweepSetup {
            train_set,
            test_set,
            base_cfg: base_cfg.clone(),
            r_nominal: r as f64,
        };
        let ctx = EvalContext {
            r_nominal: r as f64,
            rho: Some(base_cfg.partition.rho),
            scheme: Some(base_cfg.partition.scheme.to_string()),
            overlap: Some(base_cfg.partition.overlap_fraction),
        };
        let mut cfg = base_cfg.clone();
        cfg.mode = TrainMode::Ssdu;
        let mut batch = train_and_evaluate(&setup, &cfg, "ssdu", &ctx)
            .map_err(|e| annotate(e, &format!("R={r}")))?;
        rows.append(&mut batch);
        let mut cg_rows = evaluate_cg_sense(&setup.test_set, cg_iters, cg_l2, &ctx)
            .map_err(|e| annotate(e, &format!("R={r}")))?;
        rows.append(&mut cg_rows);
    }
    Ok(rows)
}
