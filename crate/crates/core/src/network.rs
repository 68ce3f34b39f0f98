//! The residual-CNN regularizer and the unrolled reconstruction network.
//!
//! The network alternates T times between the regularizer (a small ResNet
//! acting on the real/imaginary channels of the current image) and a
//! CG-solved data-consistency unit. One set of weights is shared across all
//! unrolled steps: every step references the same tape leaves.

use crate::autodiff::{scalar, Gradients, RealArr, Tape, Var};
use crate::bytes;
use crate::error::{Error, Result};
use crate::mri::{zero_filled_init, CoilMaps, KSpaceVolume, SamplingMask};
use crate::solvers::{dc_solve_on_tape, DCConfig};
use crate::tensor::Tensor;
use ndarray::{Array2, IxDyn};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Regularizer architecture. In/out channels are fixed at 2 (real/imag).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResNetConfig {
    pub n_res_blocks: usize,
    pub n_channels: usize,
    pub kernel_size: usize,
    /// Constant multiplier after the second conv of each residual block.
    pub scale_c: f64,
    /// Biases on the input/output convolutions only; none inside blocks,
    /// which keeps zero input mapping to zero residual.
    pub use_bias: bool,
}

impl Default for ResNetConfig {
    /// Desk-scale defaults; see [`ResNetConfig::paper_scale`] for the
    /// full-size architecture.
    fn default() -> Self {
        ResNetConfig { n_res_blocks: 3, n_channels: 16, kernel_size: 3, scale_c: 0.1, use_bias: true }
    }
}

impl ResNetConfig {
    pub fn paper_scale() -> Self {
        ResNetConfig { n_res_blocks: 15, n_channels: 64, kernel_size: 3, scale_c: 0.1, use_bias: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(Error::Usage("kernel_size must be odd".into()));
        }
        if self.n_res_blocks == 0 || self.n_channels == 0 {
            return Err(Error::Usage("n_res_blocks and n_channels must be >= 1".into()));
        }
        if !(self.scale_c > 0.0) {
            return Err(Error::Usage("scale_c must be positive".into()));
        }
        Ok(())
    }
}

/// Unrolled-network shape: T alternations of regularizer and DC unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnrollConfig {
    pub n_unrolls: usize,
    pub dc: DCConfig,
    /// Fixed true; a single weight set serves every unrolled step.
    pub weights_shared: bool,
}

impl Default for UnrollConfig {
    fn default() -> Self {
        UnrollConfig { n_unrolls: 5, dc: DCConfig::default(), weights_shared: true }
    }
}

impl UnrollConfig {
    pub fn paper_scale() -> Self {
        UnrollConfig { n_unrolls: 10, dc: DCConfig::default(), weights_shared: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_unrolls == 0 {
            return Err(Error::Usage("n_unrolls must be >= 1".into()));
        }
        if !self.weights_shared {
            return Err(Error::Usage("per-step weights are not supported".into()));
        }
        self.dc.validate()
    }
}

/// One named trainable tensor with its gradient and Adam moment buffers.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: RealArr,
    pub grad: RealArr,
    pub adam_m: RealArr,
    pub adam_v: RealArr,
}

impl ParamEntry {
    fn new(name: impl Into<String>, value: RealArr) -> Self {
        let zeros = RealArr::zeros(value.raw_dim());
        ParamEntry {
            name: name.into(),
            value,
            grad: zeros.clone(),
            adam_m: zeros.clone(),
            adam_v: zeros,
        }
    }
}

/// Flat collection of the network's trainable tensors.
///
/// Entry order is fixed by construction and determines checkpoint layout:
/// input conv (+bias), per-block conv pairs, output conv (+bias), `log_mu`.
#[derive(Debug, Clone)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
    /// Adam step counter.
    pub step: u64,
}

/// Name of the trainable log-penalty scalar.
pub const LOG_MU: &str = "log_mu";

impl ParamStore {
    /// Seeded uniform init with bound `sqrt(6 / (fan_in + fan_out))` per
    /// kernel; biases start at zero and `log_mu` at `log_mu_init`.
    pub fn init(cfg: &ResNetConfig, log_mu_init: f64, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = cfg.kernel_size;
        let ch = cfg.n_channels;
        let mut entries = Vec::new();

        let conv_init = |rng: &mut ChaCha8Rng, c_out: usize, c_in: usize| -> RealArr {
            let bound = (6.0 / ((c_in * k * k + c_out * k * k) as f64)).sqrt();
            let mut a = RealArr::zeros(IxDyn(&[c_out, c_in, k, k]));
            for v in a.iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
            a
        };

        entries.push(ParamEntry::new("input.kernel", conv_init(&mut rng, ch, 2)));
        if cfg.use_bias {
            entries.push(ParamEntry::new("input.bias", RealArr::zeros(IxDyn(&[ch]))));
        }
        for b in 0..cfg.n_res_blocks {
            entries.push(ParamEntry::new(
                format!("rb{b:02}.conv1.kernel"),
                conv_init(&mut rng, ch, ch),
            ));
            entries.push(ParamEntry::new(
                format!("rb{b:02}.conv2.kernel"),
                conv_init(&mut rng, ch, ch),
            ));
        }
        entries.push(ParamEntry::new("output.kernel", conv_init(&mut rng, 2, ch)));
        if cfg.use_bias {
            entries.push(ParamEntry::new("output.bias", RealArr::zeros(IxDyn(&[2]))));
        }
        entries.push(ParamEntry::new(LOG_MU, scalar(log_mu_init)));

        let index = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
        Ok(ParamStore { entries, index, step: 0 })
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        match self.index.get(name) {
            Some(&i) => Some(&mut self.entries[i]),
            None => None,
        }
    }

    /// Total scalar parameter count.
    pub fn n_params(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn log_mu(&self) -> f64 {
        *self.get(LOG_MU).expect("log_mu present").value.first().unwrap()
    }

    pub fn mu(&self) -> f64 {
        self.log_mu().exp()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    fn from_entries(entries: Vec<ParamEntry>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
        ParamStore { entries, index, step: 0 }
    }
}

/// Closed-form scalar parameter count for an architecture.
pub fn parameter_count(cfg: &ResNetConfig) -> usize {
    let k2 = cfg.kernel_size * cfg.kernel_size;
    let ch = cfg.n_channels;
    let convs = ch * 2 * k2            // input
        + cfg.n_res_blocks * 2 * ch * ch * k2
        + 2 * ch * k2; // output
    let biases = if cfg.use_bias { ch + 2 } else { 0 };
    convs + biases + 1 // + log_mu
}

/// Tape handles for one registration of a [`ParamStore`].
pub struct TapeParams {
    pub input_kernel: Var,
    pub input_bias: Option<Var>,
    pub blocks: Vec<(Var, Var)>,
    pub output_kernel: Var,
    pub output_bias: Option<Var>,
    pub log_mu: Var,
    named: Vec<(String, Var)>,
}

impl TapeParams {
    pub fn named(&self) -> &[(String, Var)] {
        &self.named
    }
}

/// Put every parameter on a tape. With `trainable = false` the leaves are
/// constants (inference); `freeze_mu` keeps `log_mu` constant while the
/// convolutions train.
pub fn register_params(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ResNetConfig,
    trainable: bool,
    freeze_mu: bool,
) -> Result<TapeParams> {
    let mut named = Vec::with_capacity(store.entries().len());
    let mut reg = |tape: &mut Tape, name: &str, train: bool| -> Result<Var> {
        let entry = store
            .get(name)
            .ok_or_else(|| Error::Usage(format!("parameter {name} missing from store")))?;
        let v = if train {
            tape.param(entry.value.clone())
        } else {
            tape.constant(entry.value.clone())
        };
        named.push((name.to_string(), v));
        Ok(v)
    };

    let input_kernel = reg(tape, "input.kernel", trainable)?;
    let input_bias = if cfg.use_bias {
        Some(reg(tape, "input.bias", trainable)?)
    } else {
        None
    };
    let mut blocks = Vec::with_capacity(cfg.n_res_blocks);
    for b in 0..cfg.n_res_blocks {
        let k1 = reg(tape, &format!("rb{b:02}.conv1.kernel"), trainable)?;
        let k2 = reg(tape, &format!("rb{b:02}.conv2.kernel"), trainable)?;
        blocks.push((k1, k2));
    }
    let output_kernel = reg(tape, "output.kernel", trainable)?;
    let output_bias = if cfg.use_bias {
        Some(reg(tape, "output.bias", trainable)?)
    } else {
        None
    };
    let log_mu = reg(tape, LOG_MU, trainable && !freeze_mu)?;
    Ok(TapeParams {
        input_kernel,
        input_bias,
        blocks,
        output_kernel,
        output_bias,
        log_mu,
        named,
    })
}

/// Copy gradients for one registration back into the store (overwrites).
pub fn absorb_grads(store: &mut ParamStore, grads: &Gradients, tp: &TapeParams) {
    for (name, var) in tp.named() {
        let shape: Vec<usize> = store
            .get(name)
            .expect("registered parameter exists")
            .value
            .shape()
            .to_vec();
        let g = grads.real_or_zeros(*var, &shape);
        store.get_mut(name).unwrap().grad = g;
    }
}

/// Regularizer forward pass on the tape.
///
/// complex -> 2 channels -> input conv -> blocks of
/// [conv, ReLU, conv, scale, skip-add] -> output conv -> complex.
pub fn resnet_forward_on_tape(
    tape: &mut Tape,
    x: Var,
    tp: &TapeParams,
    cfg: &ResNetConfig,
) -> Result<Var> {
    let mut t = tape.complex_to_channels(x)?;
    t = tape.conv2d(t, tp.input_kernel, tp.input_bias)?;
    for &(k1, k2) in &tp.blocks {
        let a = tape.conv2d(t, k1, None)?;
        let a = tape.relu(a)?;
        let a = tape.conv2d(a, k2, None)?;
        let a = tape.scale_const(a, cfg.scale_c);
        t = tape.add(t, a)?;
    }
    t = tape.conv2d(t, tp.output_kernel, tp.output_bias)?;
    tape.channels_to_complex(t)
}

/// Regularizer on plain arrays (throwaway tape, constant weights).
pub fn resnet_forward(
    x: &Array2<Complex64>,
    store: &ParamStore,
    cfg: &ResNetConfig,
) -> Result<Array2<Complex64>> {
    let mut tape = Tape::new();
    let tp = register_params(&mut tape, store, cfg, false, true)?;
    let xv = tape.constant(x.clone().into_dyn());
    let out = resnet_forward_on_tape(&mut tape, xv, &tp, cfg)?;
    Ok(tape
        .complex(out)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("regularizer preserves image shape"))
}

/// T-step unrolled network on the tape. `dc_mask` is Theta during
/// self-supervised training and the full acquired set at inference.
pub fn unrolled_forward_on_tape(
    tape: &mut Tape,
    y: &KSpaceVolume,
    maps: &CoilMaps,
    dc_mask: &SamplingMask,
    tp: &TapeParams,
    unroll: &UnrollConfig,
    resnet: &ResNetConfig,
) -> Result<Var> {
    unroll.validate()?;
    resnet.validate()?;
    if !dc_mask.is_subset_of(&y.acquired_mask) {
        return Err(Error::Consistency(
            "DC mask selects indices outside the acquired k-space".into(),
        ));
    }
    let x0 = zero_filled_init(y, maps, dc_mask)?;
    let mu = tape.exp(tp.log_mu)?;
    let mut x = tape.constant(x0.into_dyn());
    for _ in 0..unroll.n_unrolls {
        let z = resnet_forward_on_tape(tape, x, tp, resnet)?;
        x = dc_solve_on_tape(tape, z, y, maps, dc_mask, mu, unroll.dc.n_cg_iterations)?;
    }
    Ok(x)
}

/// Inference-style unrolled forward on plain arrays, in the volume's
/// normalized units.
pub fn unrolled_forward(
    y: &KSpaceVolume,
    maps: &CoilMaps,
    dc_mask: &SamplingMask,
    store: &ParamStore,
    unroll: &UnrollConfig,
    resnet: &ResNetConfig,
) -> Result<Array2<Complex64>> {
    let mut tape = Tape::new();
    let tp = register_params(&mut tape, store, resnet, false, true)?;
    let out = unrolled_forward_on_tape(&mut tape, y, maps, dc_mask, &tp, unroll, resnet)?;
    Ok(tape
        .complex(out)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("network output is an image"))
}

/// Reconstruct one slice at inference: data consistency always runs over
/// the full acquired mask, and the result is rescaled to physical units.
pub fn reconstruct(
    y: &KSpaceVolume,
    maps: &CoilMaps,
    store: &ParamStore,
    unroll: &UnrollConfig,
    resnet: &ResNetConfig,
) -> Result<Array2<Complex64>> {
    let out = unrolled_forward(y, maps, &y.acquired_mask, store, unroll, resnet)?;
    Ok(out.mapv(|v| v * y.norm_scale))
}

const CKPT_MAGIC: &[u8; 8] = b"SSDUCKPT";
const CKPT_VERSION: u16 = 1;

/// Write parameters with their architecture block.
///
/// Layout: magic, version, config text, tensor count, then per tensor the
/// name (length-prefixed), dtype code, rank, extents and little-endian
/// payload. With `single_precision` the payloads are narrowed to f32.
pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    resnet: &ResNetConfig,
    unroll: &UnrollConfig,
    single_precision: bool,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    bytes::write_u16(&mut w, CKPT_VERSION)?;
    bytes::write_string(&mut w, &crate::config::network_config_text(resnet, unroll))?;
    bytes::write_u32(&mut w, store.entries().len() as u32)?;
    for e in store.entries() {
        bytes::write_string(&mut w, &e.name)?;
        let t = Tensor::R64(e.value.clone());
        let t = if single_precision { t.to_single() } else { t };
        bytes::write_tensor(&mut w, &t)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint back; moments are reset and the step counter zeroed.
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, ResNetConfig, UnrollConfig)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = bytes::read_u16(&mut r)?;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let (resnet, unroll) = crate::config::parse_network_config(&bytes::read_string(&mut r)?)?;
    let count = bytes::read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name = bytes::read_string(&mut r)?;
        let tensor = bytes::read_tensor(&mut r)?;
        let value = tensor.to_r64()?;
        entries.push(ParamEntry::new(name, value));
    }
    let store = ParamStore::from_entries(entries);
    if store.get(LOG_MU).is_none() {
        return Err(Error::Format("checkpoint lacks log_mu".into()));
    }
    Ok((store, resnet, unroll))
}
