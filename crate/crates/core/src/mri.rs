//! Multi-coil Cartesian SENSE encoding: the forward operator, its adjoint,
//! coil combination, and mask bookkeeping.
//!
//! The encoding operator maps an image to per-coil k-space,
//! `E x = mask .* F(S_c .* x)` per coil `c`, with `F` the orthonormal
//! centered FFT. The full grid is kept with zeros outside the mask, which is
//! equivalent to the flattened-sample view for every norm and solve used
//! here. Each operation exists in a pure (array in, array out) form and as a
//! tape emitter for use inside differentiable graphs.

use crate::autodiff::{ComplexArr, Tape, Var};
use crate::error::{Error, Result};
use crate::fft::{fft2_centered, ifft2_centered};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use num_complex::Complex64;
use std::sync::Arc;

/// Role a mask plays in the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    /// All acquired k-space indices.
    Omega,
    /// Data-consistency subset.
    Theta,
    /// Loss subset.
    Lambda,
}

impl MaskKind {
    pub fn tag(self) -> &'static str {
        match self {
            MaskKind::Omega => "omega",
            MaskKind::Theta => "theta",
            MaskKind::Lambda => "lambda",
        }
    }
}

/// How a mask was generated, carried for provenance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MaskDescriptor {
    pub scheme: String,
    pub seed: Option<u64>,
    pub rho: Option<f64>,
}

/// Boolean grid over k-space indices.
#[derive(Debug, Clone)]
pub struct SamplingMask {
    pub grid: Arc<Array2<bool>>,
    pub kind: MaskKind,
    pub descriptor: MaskDescriptor,
}

impl SamplingMask {
    /// Omega and theta masks must select at least one index.
    pub fn new(grid: Array2<bool>, kind: MaskKind, descriptor: MaskDescriptor) -> Result<Self> {
        let count = grid.iter().filter(|&&b| b).count();
        if count == 0 && matches!(kind, MaskKind::Omega | MaskKind::Theta) {
            return Err(Error::Consistency(format!(
                "{} mask selects no k-space index",
                kind.tag()
            )));
        }
        Ok(SamplingMask { grid: Arc::new(grid), kind, descriptor })
    }

    /// Fully-sampled mask.
    pub fn full(h: usize, w: usize, kind: MaskKind) -> Self {
        SamplingMask {
            grid: Arc::new(Array2::from_elem((h, w), true)),
            kind,
            descriptor: MaskDescriptor { scheme: "full".into(), ..Default::default() },
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.grid.dim()
    }

    pub fn count(&self) -> usize {
        self.grid.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn is_subset_of(&self, other: &SamplingMask) -> bool {
        self.grid.dim() == other.grid.dim()
            && self
                .grid
                .iter()
                .zip(other.grid.iter())
                .all(|(&a, &b)| !a || b)
    }

    /// Same grid, different role tag.
    pub fn with_kind(&self, kind: MaskKind) -> SamplingMask {
        SamplingMask { grid: self.grid.clone(), kind, descriptor: self.descriptor.clone() }
    }

    /// Restrict per-coil k-space to this mask (zero elsewhere).
    pub fn restrict(&self, y: &ArrayView3<'_, Complex64>) -> Result<Array3<Complex64>> {
        let (_, h, w) = y.dim();
        if (h, w) != self.grid.dim() {
            return Err(Error::Dim(format!(
                "mask {:?} vs k-space {:?}",
                self.grid.dim(),
                y.dim()
            )));
        }
        let mut out = y.to_owned();
        for mut coil in out.axis_iter_mut(Axis(0)) {
            coil.zip_mut_with(&self.grid, |v, &keep| {
                if !keep {
                    *v = Complex64::new(0.0, 0.0);
                }
            });
        }
        Ok(out)
    }
}

/// Per-coil complex sensitivity images.
#[derive(Debug, Clone)]
pub struct CoilMaps {
    maps: Arc<ComplexArr>,
    conj: Arc<ComplexArr>,
}

impl CoilMaps {
    /// Validates finiteness and that the root-sum-of-squares never exceeds
    /// one (up to roundoff); RSS below one is allowed outside the object.
    pub fn new(maps: Array3<Complex64>) -> Result<Self> {
        if maps.dim().0 == 0 {
            return Err(Error::Dim("coil maps need at least one coil".into()));
        }
        if maps.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::Consistency("coil maps contain non-finite entries".into()));
        }
        let (_, h, w) = maps.dim();
        for i in 0..h {
            for j in 0..w {
                let rss: f64 = maps
                    .slice(ndarray::s![.., i, j])
                    .iter()
                    .map(|v| v.norm_sqr())
                    .sum::<f64>()
                    .sqrt();
                if rss > 1.0 + 1e-9 {
                    return Err(Error::Consistency(format!(
                        "coil map RSS {rss} > 1 at pixel ({i},{j})"
                    )));
                }
            }
        }
        let conj = maps.mapv(|v| v.conj());
        Ok(CoilMaps {
            maps: Arc::new(maps.into_dyn()),
            conj: Arc::new(conj.into_dyn()),
        })
    }

    pub fn n_coils(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn dim(&self) -> (usize, usize) {
        (self.maps.shape()[1], self.maps.shape()[2])
    }

    pub fn view(&self) -> ArrayView3<'_, Complex64> {
        self.maps.view().into_dimensionality().unwrap()
    }

    pub(crate) fn arc_maps(&self) -> Arc<ComplexArr> {
        self.maps.clone()
    }

    pub(crate) fn arc_conj(&self) -> Arc<ComplexArr> {
        self.conj.clone()
    }
}

/// Acquired multi-coil k-space for one slice. `data` is stored already
/// normalized; `norm_scale` is the divisor that restores physical units.
#[derive(Debug, Clone)]
pub struct KSpaceVolume {
    pub data: Array3<Complex64>,
    pub acquired_mask: SamplingMask,
    pub slice_id: u64,
    pub norm_scale: f64,
}

impl KSpaceVolume {
    pub fn new(
        data: Array3<Complex64>,
        acquired_mask: SamplingMask,
        slice_id: u64,
        norm_scale: f64,
    ) -> Result<Self> {
        let (_, h, w) = data.dim();
        if (h, w) != acquired_mask.dim() {
            return Err(Error::Dim(format!(
                "k-space {:?} vs mask {:?}",
                data.dim(),
                acquired_mask.dim()
            )));
        }
        if !(norm_scale > 0.0) {
            return Err(Error::Consistency("normalization scale must be positive".into()));
        }
        for coil in data.axis_iter(Axis(0)) {
            for (v, &keep) in coil.iter().zip(acquired_mask.grid.iter()) {
                if !keep && (v.re != 0.0 || v.im != 0.0) {
                    return Err(Error::Consistency(
                        "k-space nonzero outside the acquired mask".into(),
                    ));
                }
            }
        }
        Ok(KSpaceVolume { data, acquired_mask, slice_id, norm_scale })
    }

    pub fn n_coils(&self) -> usize {
        self.data.dim().0
    }

    pub fn dim(&self) -> (usize, usize) {
        (self.data.dim().1, self.data.dim().2)
    }

    /// Rescale so the maximum modulus is 1, composing the recorded scale.
    pub fn normalized(&self) -> Result<KSpaceVolume> {
        let max = self.data.iter().map(|v| v.norm()).fold(0.0, f64::max);
        if max == 0.0 {
            return Err(Error::Degenerate("all-zero k-space cannot be normalized".into()));
        }
        Ok(KSpaceVolume {
            data: self.data.mapv(|v| v / max),
            acquired_mask: self.acquired_mask.clone(),
            slice_id: self.slice_id,
            norm_scale: self.norm_scale * max,
        })
    }
}

fn check_encode_shapes(
    x: Option<(usize, usize)>,
    maps: &CoilMaps,
    mask: &SamplingMask,
) -> Result<()> {
    if maps.dim() != mask.dim() {
        return Err(Error::Dim(format!(
            "maps {:?} vs mask {:?}",
            maps.dim(),
            mask.dim()
        )));
    }
    if let Some(xd) = x {
        if xd != maps.dim() {
            return Err(Error::Dim(format!("image {:?} vs maps {:?}", xd, maps.dim())));
        }
    }
    Ok(())
}

/// Forward encoding: per coil `mask .* F(maps_c .* x)`.
pub fn apply_e(
    x: &ArrayView2<'_, Complex64>,
    maps: &CoilMaps,
    mask: &SamplingMask,
) -> Result<Array3<Complex64>> {
    check_encode_shapes(Some(x.dim()), maps, mask)?;
    let (h, w) = x.dim();
    let n = maps.n_coils();
    let mut out = Array3::<Complex64>::zeros((n, h, w));
    let mv = maps.view();
    for c in 0..n {
        let weighted = &mv.index_axis(Axis(0), c) * x;
        let mut k = fft2_centered(&weighted.view());
        k.zip_mut_with(&*mask.grid, |v, &keep| {
            if !keep {
                *v = Complex64::new(0.0, 0.0);
            }
        });
        out.index_axis_mut(Axis(0), c).assign(&k);
    }
    Ok(out)
}

/// Adjoint encoding: `sum_c conj(maps_c) .* F^-1(mask .* y_c)`.
pub fn apply_eh(
    y: &ArrayView3<'_, Complex64>,
    maps: &CoilMaps,
    mask: &SamplingMask,
) -> Result<Array2<Complex64>> {
    check_encode_shapes(None, maps, mask)?;
    let (n, h, w) = y.dim();
    if n != maps.n_coils() || (h, w) != maps.dim() {
        return Err(Error::Dim(format!("k-space {:?} vs maps", y.dim())));
    }
    let mut out = Array2::<Complex64>::zeros((h, w));
    let mv = maps.view();
    for c in 0..n {
        let mut masked = y.index_axis(Axis(0), c).to_owned();
        masked.zip_mut_with(&*mask.grid, |v, &keep| {
            if !keep {
                *v = Complex64::new(0.0, 0.0);
            }
        });
        let img = ifft2_centered(&masked.view());
        let coil_map = mv.index_axis(Axis(0), c);
        out.zip_mut_with(&(&img * &coil_map.mapv(|v| v.conj())), |acc, v| *acc += v);
    }
    Ok(out)
}

/// SENSE-1 combination: `sum_c conj(maps_c) .* coil_image_c`.
pub fn sense1_combine(
    coil_images: &ArrayView3<'_, Complex64>,
    maps: &CoilMaps,
) -> Result<Array2<Complex64>> {
    let (n, h, w) = coil_images.dim();
    if n != maps.n_coils() || (h, w) != maps.dim() {
        return Err(Error::Dim(format!(
            "coil images {:?} vs maps ({}, {:?})",
            coil_images.dim(),
            maps.n_coils(),
            maps.dim()
        )));
    }
    let mut out = Array2::<Complex64>::zeros((h, w));
    let mv = maps.view();
    for c in 0..n {
        let img = coil_images.index_axis(Axis(0), c);
        for ((acc, &i), &m) in out.iter_mut().zip(img.iter()).zip(mv.index_axis(Axis(0), c)) {
            *acc += m.conj() * i;
        }
    }
    Ok(out)
}

/// Zero-filled initial image `E^H y` restricted to `mask`.
pub fn zero_filled_init(
    y: &KSpaceVolume,
    maps: &CoilMaps,
    mask: &SamplingMask,
) -> Result<Array2<Complex64>> {
    if !mask.is_subset_of(&y.acquired_mask) {
        return Err(Error::Consistency(
            "mask selects indices outside the acquired k-space".into(),
        ));
    }
    apply_eh(&y.data.view(), maps, mask)
}

/// Tape version of [`apply_e`] for a complex `[H,W]` image node.
pub fn apply_e_on_tape(
    tape: &mut Tape,
    x: Var,
    maps: &CoilMaps,
    mask: &SamplingMask,
) -> Result<Var> {
    check_encode_shapes(None, maps, mask)?;
    let spread = tape.spread_coils(x, maps.n_coils())?;
    let weighted = tape.mul_const(spread, maps.arc_maps())?;
    let k = tape.fft2c(weighted)?;
    tape.mask(k, mask.grid.clone())
}

/// Tape version of [`apply_eh`] for a complex `[N,H,W]` k-space node.
pub fn apply_eh_on_tape(
    tape: &mut Tape,
    y: Var,
    maps: &CoilMaps,
    mask: &SamplingMask,
) -> Result<Var> {
    check_encode_shapes(None, maps, mask)?;
    let masked = tape.mask(y, mask.grid.clone())?;
    let img = tape.ifft2c(masked)?;
    let weighted = tape.mul_const(img, maps.arc_conj())?;
    tape.sum_coils(weighted)
}
