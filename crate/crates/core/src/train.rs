//! Loss-mask partitioning, training losses, the Adam optimizer, and the
//! end-to-end training loop.
//!
//! Self-supervised training splits the acquired indices of each slice into
//! a data-consistency set (theta) and a loss set (lambda), fixed once per
//! slice for the whole run. The network only sees theta inside its DC
//! units; the loss compares the re-encoded output against the measured
//! values on lambda. Supervised modes keep the full acquired set in DC and
//! compare against a fully-sampled reference instead.

use crate::autodiff::{ComplexArr, Tape, Var};
use crate::error::{Error, Result};
use crate::mri::{
    apply_e_on_tape, sense1_combine, CoilMaps, KSpaceVolume, MaskDescriptor, MaskKind,
    SamplingMask,
};
use crate::network::{
    absorb_grads, register_params, unrolled_forward_on_tape, ParamStore, ResNetConfig,
    TapeParams, UnrollConfig,
};
use crate::fft::ifft2_centered;
use ndarray::{Array2, Array3, ArrayViewD, Axis};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

/// How loss-mask indices are drawn from the acquired set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionScheme {
    Uniform,
    Gaussian,
}

impl fmt::Display for SelectionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionScheme::Uniform => "uniform",
            SelectionScheme::Gaussian => "gaussian",
        })
    }
}

impl FromStr for SelectionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(SelectionScheme::Uniform),
            "gaussian" => Ok(SelectionScheme::Gaussian),
            other => Err(Error::Usage(format!("unknown selection scheme '{other}'"))),
        }
    }
}

/// Policy for splitting acquired indices into theta and lambda.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionPolicy {
    /// Loss-set fraction |lambda| / |omega|.
    pub rho: f64,
    pub scheme: SelectionScheme,
    /// Per-axis Gaussian sigma as a fraction of that axis extent.
    pub gaussian_std_fraction: f64,
    /// Central block (rows, cols) always kept in theta.
    pub center_keep: (usize, usize),
    /// Realized |lambda AND theta| / |lambda|; 0 means disjoint sets.
    pub overlap_fraction: f64,
    pub per_slice_seed_base: u64,
}

impl Default for PartitionPolicy {
    fn default() -> Self {
        PartitionPolicy {
            rho: 0.4,
            scheme: SelectionScheme::Gaussian,
            gaussian_std_fraction: 0.25,
            center_keep: (4, 4),
            overlap_fraction: 0.0,
            per_slice_seed_base: 0,
        }
    }
}

impl PartitionPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Policy(format!("rho must be in (0,1), got {}", self.rho)));
        }
        if !(self.gaussian_std_fraction > 0.0) {
            return Err(Error::Policy("gaussian_std_fraction must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.overlap_fraction) {
            return Err(Error::Policy(format!(
                "overlap_fraction must be in [0,1], got {}",
                self.overlap_fraction
            )));
        }
        Ok(())
    }
}

/// Split `omega` into a DC set and a loss set.
///
/// `|lambda| = round(rho * |omega|)` points are drawn without replacement
/// from omega minus the protected central block; theta is the complement
/// within omega plus, for positive `overlap_fraction`, a uniform
/// re-inclusion of that fraction of lambda. Deterministic in `slice_seed`.
pub fn partition_mask(
    omega: &SamplingMask,
    policy: &PartitionPolicy,
    slice_seed: u64,
) -> Result<(SamplingMask, SamplingMask)> {
    policy.validate()?;
    let (h, w) = omega.dim();
    let n_omega = omega.count();
    if n_omega == 0 {
        return Err(Error::Policy("omega mask is empty".into()));
    }
    let (ck_h, ck_w) = policy.center_keep;
    if ck_h > h || ck_w > w {
        return Err(Error::Policy(format!(
            "center_keep {:?} does not fit inside a {h}x{w} grid",
            policy.center_keep
        )));
    }
    let r0 = (h - ck_h) / 2;
    let c0 = (w - ck_w) / 2;
    let in_block = |i: usize, j: usize| i >= r0 && i < r0 + ck_h && j >= c0 && j < c0 + ck_w;

    let eligible: Vec<(usize, usize)> = omega
        .grid
        .indexed_iter()
        .filter(|&((i, j), &on)| on && !in_block(i, j))
        .map(|((i, j), _)| (i, j))
        .collect();

    let n_lambda = (policy.rho * n_omega as f64).round() as usize;
    if n_lambda == 0 {
        return Err(Error::Policy(format!(
            "rho = {} selects no loss point from |omega| = {n_omega}",
            policy.rho
        )));
    }
    if n_lambda > eligible.len() {
        return Err(Error::Policy(format!(
            "rho = {} needs {n_lambda} loss points but only {} are eligible \
             outside the protected center",
            policy.rho,
            eligible.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(slice_seed);
    let chosen: Vec<(usize, usize)> = match policy.scheme {
        SelectionScheme::Uniform => {
            let mut pool = eligible;
            for i in 0..n_lambda {
                let j = rng.gen_range(i..pool.len());
                pool.swap(i, j);
            }
            pool.truncate(n_lambda);
            pool
        }
        SelectionScheme::Gaussian => {
            let sy = policy.gaussian_std_fraction * h as f64;
            let sx = policy.gaussian_std_fraction * w as f64;
            let (cy, cx) = ((h / 2) as f64, (w / 2) as f64);
            let mut pool = eligible;
            let mut chosen = Vec::with_capacity(n_lambda);
            let mut tries: u64 = 0;
            while chosen.len() < n_lambda {
                tries += 1;
                if tries > 20_000_000 {
                    return Err(Error::Policy(
                        "rejection sampling failed to fill the loss set".into(),
                    ));
                }
                let pos = rng.gen_range(0..pool.len());
                let (i, j) = pool[pos];
                let dy = i as f64 - cy;
                let dx = j as f64 - cx;
                let weight =
                    (-(dy * dy / (2.0 * sy * sy) + dx * dx / (2.0 * sx * sx))).exp();
                if rng.gen::<f64>() < weight {
                    chosen.push((i, j));
                    pool.swap_remove(pos);
                }
            }
            chosen
        }
    };

    let mut lambda_grid = Array2::from_elem((h, w), false);
    for &(i, j) in &chosen {
        lambda_grid[[i, j]] = true;
    }
    let mut theta_grid = omega.grid.as_ref().clone();
    theta_grid.zip_mut_with(&lambda_grid, |t, &l| {
        if l {
            *t = false;
        }
    });

    if policy.overlap_fraction > 0.0 {
        let n_over = (policy.overlap_fraction * n_lambda as f64).round() as usize;
        let mut pool = chosen.clone();
        for i in 0..n_over.min(pool.len()) {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
            let (y, x) = pool[i];
            theta_grid[[y, x]] = true;
        }
    }

    let descriptor = MaskDescriptor {
        scheme: policy.scheme.to_string(),
        seed: Some(slice_seed),
        rho: Some(policy.rho),
    };
    let theta = SamplingMask::new(theta_grid, MaskKind::Theta, descriptor.clone())
        .map_err(|_| Error::Policy("loss set exhausts the acquired indices".into()))?;
    let lambda = SamplingMask::new(lambda_grid, MaskKind::Lambda, descriptor)?;
    Ok((theta, lambda))
}

/// Normalized l1-l2 loss `||u-v||_2/||u||_2 + ||u-v||_1/||u||_1` over
/// complex moduli.
pub fn normalized_l1l2_loss(
    u: &ArrayViewD<'_, Complex64>,
    v: &ArrayViewD<'_, Complex64>,
) -> Result<f64> {
    if u.shape() != v.shape() {
        return Err(Error::Dim(format!("loss operands {:?} vs {:?}", u.shape(), v.shape())));
    }
    let n2: f64 = u.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
    if n2 == 0.0 {
        return Err(Error::Degenerate("zero reference in normalized loss".into()));
    }
    let n1: f64 = u.iter().map(|x| x.norm()).sum();
    let d2: f64 = u
        .iter()
        .zip(v.iter())
        .map(|(a, b)| (a - b).norm_sqr())
        .sum::<f64>()
        .sqrt();
    let d1: f64 = u.iter().zip(v.iter()).map(|(a, b)| (a - b).norm()).sum();
    Ok(d2 / n2 + d1 / n1)
}

/// Tape version of the normalized l1-l2 loss against a fixed reference.
pub fn l1l2_loss_on_tape(tape: &mut Tape, u: &ComplexArr, v: Var) -> Result<Var> {
    let n2: f64 = u.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
    if n2 == 0.0 {
        return Err(Error::Degenerate("zero reference in normalized loss".into()));
    }
    let n1: f64 = u.iter().map(|x| x.norm()).sum();
    let uc = tape.constant(u.clone());
    let d = tape.sub(uc, v)?;
    let l2 = tape.norm2(d);
    let l1 = tape.norm1(d);
    let a = tape.scale_const(l2, 1.0 / n2);
    let b = tape.scale_const(l1, 1.0 / n1);
    tape.add(a, b)
}

/// Loss between measured k-space and the re-encoded reconstruction,
/// restricted to `loss_mask` across all coils.
pub fn kspace_masked_loss_on_tape(
    tape: &mut Tape,
    recon: Var,
    y: &KSpaceVolume,
    maps: &CoilMaps,
    loss_mask: &SamplingMask,
) -> Result<Var> {
    let u = loss_mask.restrict(&y.data.view())?;
    let encoded = apply_e_on_tape(tape, recon, maps, loss_mask)?;
    l1l2_loss_on_tape(tape, &u.into_dyn(), encoded)
}

/// Self-supervised loss: run the network with theta in DC, compare on
/// lambda.
pub fn ssdu_loss_on_tape(
    tape: &mut Tape,
    tp: &TapeParams,
    y: &KSpaceVolume,
    maps: &CoilMaps,
    theta: &SamplingMask,
    lambda: &SamplingMask,
    unroll: &UnrollConfig,
    resnet: &ResNetConfig,
) -> Result<Var> {
    if !theta.is_subset_of(&y.acquired_mask) || !lambda.is_subset_of(&y.acquired_mask) {
        return Err(Error::Consistency(
            "theta/lambda select indices outside the acquired k-space".into(),
        ));
    }
    if lambda.is_empty() {
        return Err(Error::Degenerate("empty loss mask: loss undefined".into()));
    }
    let recon = unrolled_forward_on_tape(tape, y, maps, theta, tp, unroll, resnet)?;
    kspace_masked_loss_on_tape(tape, recon, y, maps, lambda)
}

/// Self-supervised loss evaluated on plain inputs (constant weights).
pub fn ssdu_loss(
    y: &KSpaceVolume,
    maps: &CoilMaps,
    theta: &SamplingMask,
    lambda: &SamplingMask,
    store: &ParamStore,
    unroll: &UnrollConfig,
    resnet: &ResNetConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let tp = register_params(&mut tape, store, resnet, false, true)?;
    let loss = ssdu_loss_on_tape(&mut tape, &tp, y, maps, theta, lambda, unroll, resnet)?;
    Ok(tape.scalar_value(loss))
}

/// Reference for supervised training at one slice, in the same
/// normalization as the network input.
#[derive(Debug, Clone)]
pub enum SupervisedTarget {
    /// Fully-sampled reference k-space; the loss re-encodes the output with
    /// the full encoding operator.
    Kspace { y_ref: Array3<Complex64> },
    /// SENSE-1 combined reference image.
    Image { x_ref: Array2<Complex64> },
}

pub fn supervised_loss_on_tape(
    tape: &mut Tape,
    recon: Var,
    target: &SupervisedTarget,
    maps: &CoilMaps,
) -> Result<Var> {
    match target {
        SupervisedTarget::Kspace { y_ref } => {
            let (h, w) = maps.dim();
            let full = SamplingMask::full(h, w, MaskKind::Omega);
            let encoded = apply_e_on_tape(tape, recon, maps, &full)?;
            l1l2_loss_on_tape(tape, &y_ref.clone().into_dyn(), encoded)
        }
        SupervisedTarget::Image { x_ref } => {
            l1l2_loss_on_tape(tape, &x_ref.clone().into_dyn(), recon)
        }
    }
}

/// One standard Adam update over every entry in the store, with bias
/// correction; moments persist in the store.
pub fn adam_step(store: &mut ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) {
    store.step += 1;
    let t = store.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for e in store.entries_mut() {
        for ((m, v), (g, p)) in e
            .adam_m
            .iter_mut()
            .zip(e.adam_v.iter_mut())
            .zip(e.grad.iter().zip(e.value.iter_mut()))
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Numeric precision for stored artifacts (checkpoints); arithmetic runs
/// in double precision throughout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Single => "single",
            Precision::Double => "double",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Precision::Single),
            "double" => Ok(Precision::Double),
            other => Err(Error::Usage(format!("unknown precision '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Ssdu,
    SupervisedKspace,
    SupervisedImage,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Ssdu => "ssdu",
            TrainMode::SupervisedKspace => "supervised_kspace",
            TrainMode::SupervisedImage => "supervised_image",
        })
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssdu" => Ok(TrainMode::Ssdu),
            "supervised_kspace" => Ok(TrainMode::SupervisedKspace),
            "supervised_image" => Ok(TrainMode::SupervisedImage),
            other => Err(Error::Usage(format!("unknown train mode '{other}'"))),
        }
    }
}

/// Every hyperparameter of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub n_epochs: usize,
    /// Fixed at 1 (per-slice updates).
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub precision: Precision,
    pub mode: TrainMode,
    pub partition: PartitionPolicy,
    pub unroll: UnrollConfig,
    pub resnet: ResNetConfig,
    pub seed: u64,
    /// Slices held out from the end of the dataset for validation.
    pub n_val_slices: usize,
    pub freeze_mu: bool,
    pub log_mu_init: f64,
    /// Limiting study case: theta = lambda = omega on every slice.
    pub identical_sets: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            n_epochs: 100,
            batch_size: 1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            precision: Precision::Double,
            mode: TrainMode::Ssdu,
            partition: PartitionPolicy::default(),
            unroll: UnrollConfig::default(),
            resnet: ResNetConfig::default(),
            seed: 0,
            n_val_slices: 2,
            freeze_mu: false,
            log_mu_init: (0.05f64).ln(),
            identical_sets: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Usage("learning_rate must be finite and >= 0".into()));
        }
        if self.batch_size != 1 {
            return Err(Error::Usage("batch_size is fixed at 1".into()));
        }
        if self.n_epochs == 0 {
            return Err(Error::Usage("n_epochs must be >= 1".into()));
        }
        self.partition.validate()?;
        self.unroll.validate()?;
        self.resnet.validate()
    }
}

/// One slice of training data. `y_full` is only consulted by the
/// supervised modes; self-supervised training never reads it.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub kspace: KSpaceVolume,
    pub maps: CoilMaps,
    pub y_full: Option<Array3<Complex64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub val_loss: Option<f64>,
}

pub struct TrainOutput {
    pub params: ParamStore,
    pub history: Vec<EpochStats>,
}

struct PreparedSlice {
    slice_id: u64,
    y: KSpaceVolume,
    maps: CoilMaps,
    theta: Option<SamplingMask>,
    lambda: Option<SamplingMask>,
    target: Option<SupervisedTarget>,
}

fn prepare_slice(example: &TrainExample, cfg: &TrainConfig) -> Result<PreparedSlice> {
    let slice_id = example.kspace.slice_id;
    let y = example.kspace.normalized().map_err(|e| {
        Error::Degenerate(format!("slice {slice_id}: {e}"))
    })?;
    let scale_applied = y.norm_scale / example.kspace.norm_scale;

    let (theta, lambda, target) = match cfg.mode {
        TrainMode::Ssdu => {
            let (theta, lambda) = if cfg.identical_sets {
                (
                    y.acquired_mask.with_kind(MaskKind::Theta),
                    y.acquired_mask.with_kind(MaskKind::Lambda),
                )
            } else {
                let seed = cfg.partition.per_slice_seed_base.wrapping_add(slice_id);
                partition_mask(&y.acquired_mask, &cfg.partition, seed)
                    .map_err(|e| Error::Policy(format!("slice {slice_id}: {e}")))?
            };
            if lambda.is_empty() {
                return Err(Error::Degenerate(format!(
                    "slice {slice_id}: empty loss mask"
                )));
            }
            (Some(theta), Some(lambda), None)
        }
        TrainMode::SupervisedKspace | TrainMode::SupervisedImage => {
            let y_full = example.y_full.as_ref().ok_or_else(|| {
                Error::Usage(format!(
                    "slice {slice_id}: supervised training needs a fully-sampled reference"
                ))
            })?;
            let y_ref = y_full.mapv(|v| v / scale_applied);
            let target = match cfg.mode {
                TrainMode::SupervisedKspace => SupervisedTarget::Kspace { y_ref },
                TrainMode::SupervisedImage => {
                    let n = y_ref.dim().0;
                    let mut coil_images = Array3::<Complex64>::zeros(y_ref.dim());
                    for c in 0..n {
                        coil_images
                            .index_axis_mut(Axis(0), c)
                            .assign(&ifft2_centered(&y_ref.index_axis(Axis(0), c)));
                    }
                    let x_ref = sense1_combine(&coil_images.view(), &example.maps)?;
                    SupervisedTarget::Image { x_ref }
                }
                TrainMode::Ssdu => unreachable!(),
            };
            (None, None, Some(target))
        }
    };
    Ok(PreparedSlice { slice_id, y, maps: example.maps.clone(), theta, lambda, target })
}

fn slice_loss_on_tape(
    tape: &mut Tape,
    tp: &TapeParams,
    p: &PreparedSlice,
    cfg: &TrainConfig,
) -> Result<Var> {
    match cfg.mode {
        TrainMode::Ssdu => ssdu_loss_on_tape(
            tape,
            tp,
            &p.y,
            &p.maps,
            p.theta.as_ref().expect("theta prepared"),
            p.lambda.as_ref().expect("lambda prepared"),
            &cfg.unroll,
            &cfg.resnet,
        ),
        TrainMode::SupervisedKspace | TrainMode::SupervisedImage => {
            let recon = unrolled_forward_on_tape(
                tape,
                &p.y,
                &p.maps,
                &p.y.acquired_mask,
                tp,
                &cfg.unroll,
                &cfg.resnet,
            )?;
            supervised_loss_on_tape(
                tape,
                recon,
                p.target.as_ref().expect("target prepared"),
                &p.maps,
            )
        }
    }
}

/// Train the unrolled network. The last `cfg.n_val_slices` entries of the
/// dataset are held out for validation with the mode's own loss; all other
/// slices are visited in order, one Adam update each, for `n_epochs`
/// epochs. Deterministic for fixed seeds.
pub fn train(dataset: &[TrainExample], cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Usage("training dataset is empty".into()));
    }
    let n_val = cfg.n_val_slices.min(dataset.len().saturating_sub(1));
    let n_train = dataset.len() - n_val;

    let prepared: Vec<PreparedSlice> = dataset
        .iter()
        .map(|ex| prepare_slice(ex, cfg))
        .collect::<Result<_>>()?;
    let (train_slices, val_slices) = prepared.split_at(n_train);

    let mut store = ParamStore::init(&cfg.resnet, cfg.log_mu_init, cfg.seed)?;
    let mut history = Vec::with_capacity(cfg.n_epochs);

    for epoch in 0..cfg.n_epochs {
        let mut sum = 0.0;
        for p in train_slices {
            let mut tape = Tape::new();
            let tp = register_params(&mut tape, &store, &cfg.resnet, true, cfg.freeze_mu)?;
            let loss = slice_loss_on_tape(&mut tape, &tp, p, cfg)
                .map_err(|e| Error::Usage(format!("slice {}: {e}", p.slice_id)))?;
            sum += tape.scalar_value(loss);
            let grads = tape.backward(loss)?;
            absorb_grads(&mut store, &grads, &tp);
            adam_step(
                &mut store,
                cfg.learning_rate,
                cfg.adam_beta1,
                cfg.adam_beta2,
                cfg.adam_epsilon,
            );
        }
        let mean_train_loss = sum / n_train as f64;

        let val_loss = if val_slices.is_empty() {
            None
        } else {
            let mut vsum = 0.0;
            for p in val_slices {
                let mut tape = Tape::new();
                let tp = register_params(&mut tape, &store, &cfg.resnet, false, true)?;
                let loss = slice_loss_on_tape(&mut tape, &tp, p, cfg)?;
                vsum += tape.scalar_value(loss);
            }
            Some(vsum / val_slices.len() as f64)
        };

        history.push(EpochStats { epoch, mean_train_loss, val_loss });
    }
    Ok(TrainOutput { params: store, history })
}

/// Loss history as CSV: `epoch,mean_train_loss,val_loss`.
pub fn write_loss_history(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,mean_train_loss,val_loss")?;
    for row in history {
        match row.val_loss {
            Some(v) => writeln!(f, "{},{},{}", row.epoch, row.mean_train_loss, v)?,
            None => writeln!(f, "{},{},", row.epoch, row.mean_train_loss)?,
        }
    }
    f.into_inner().map_err(|e| Error::Io(e.into_error()))?.flush()?;
    Ok(())
}
