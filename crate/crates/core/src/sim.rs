//! Synthetic multi-coil data: analytic ellipse phantoms with smooth complex
//! phase, ring-array coil sensitivities, noisy undersampled acquisition,
//! and Cartesian sampling-pattern generators.
//!
//! Everything here is a pure function of its spec and seed, so datasets are
//! reproducible bit for bit.

use crate::error::{Error, Result};
use crate::fft::fft2_centered;
use crate::mri::{CoilMaps, KSpaceVolume, MaskDescriptor, MaskKind, SamplingMask};
use ndarray::{Array2, Array3, Axis};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::PI;

/// One additive ellipse in normalized coordinates (the grid spans
/// [-1, 1] on each axis).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub intensity: f64,
    /// Half-axes (a along x, b along y).
    pub half_axes: (f64, f64),
    pub center: (f64, f64),
    pub angle_deg: f64,
}

/// The usual head-phantom ellipse table (peak magnitude 1.0).
pub fn default_ellipses() -> Vec<Ellipse> {
    let e = |intensity, a, b, x0, y0, angle_deg| Ellipse {
        intensity,
        half_axes: (a, b),
        center: (x0, y0),
        angle_deg,
    };
    vec![
        e(1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
        e(-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
        e(-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
        e(-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
        e(0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
        e(0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
        e(0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
        e(0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
        e(0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
        e(0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
    ]
}

/// Everything needed to generate one synthetic slice and its coil array.
#[derive(Debug, Clone)]
pub struct PhantomSpec {
    pub h: usize,
    pub w: usize,
    pub ellipses: Vec<Ellipse>,
    /// Peak-to-peak scale of the smooth object phase, in radians.
    pub phase_amplitude: f64,
    pub n_coils: usize,
    /// Coil-center ring radius in normalized units.
    pub coil_ring_radius: f64,
    /// Gaussian bump width of each coil in normalized units.
    pub coil_bump_width: f64,
    /// Complex noise standard deviation per k-space sample.
    pub noise_std: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            h: 64,
            w: 64,
            ellipses: default_ellipses(),
            phase_amplitude: 0.8,
            n_coils: 8,
            coil_ring_radius: 1.1,
            coil_bump_width: 1.0,
            noise_std: 0.0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 {
            return Err(Error::Usage("phantom grid must be nonempty".into()));
        }
        if self.n_coils == 0 {
            return Err(Error::Usage("n_coils must be >= 1".into()));
        }
        if !(self.coil_bump_width > 0.0) {
            return Err(Error::Usage("coil_bump_width must be positive".into()));
        }
        Ok(())
    }
}

fn grid_coords(n: usize, idx: usize) -> f64 {
    2.0 * (idx as f64 + 0.5) / n as f64 - 1.0
}

/// Rasterize the ellipse stack plus a seeded low-order smooth phase, and
/// build ring-array coil maps normalized to unit root-sum-of-squares at
/// every pixel. Magnitudes stay within [0, 1.02].
pub fn make_phantom(spec: &PhantomSpec, seed: u64) -> Result<(Array2<Complex64>, CoilMaps)> {
    spec.validate()?;
    let (h, w) = (spec.h, spec.w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Low-order phase coefficients: constant, linear, bilinear, quadratic.
    let coef: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let mut magnitude = Array2::<f64>::zeros((h, w));
    for el in &spec.ellipses {
        let phi = el.angle_deg * PI / 180.0;
        let (c, s) = (phi.cos(), phi.sin());
        let (a, b) = el.half_axes;
        for i in 0..h {
            let y = grid_coords(h, i);
            for j in 0..w {
                let x = grid_coords(w, j);
                let dx = x - el.center.0;
                let dy = y - el.center.1;
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                    magnitude[[i, j]] += el.intensity;
                }
            }
        }
    }
    let peak = magnitude.iter().cloned().fold(0.0, f64::max);
    if peak > 1.02 {
        return Err(Error::Usage(format!(
            "ellipse intensities produce magnitude {peak} > 1.02"
        )));
    }

    let x_true = Array2::from_shape_fn((h, w), |(i, j)| {
        let y = grid_coords(h, i);
        let x = grid_coords(w, j);
        let phase = spec.phase_amplitude
            * (coef[0] + coef[1] * y + coef[2] * x + coef[3] * x * y
                + coef[4] * (y * y - x * x))
            / 2.0;
        Complex64::from_polar(magnitude[[i, j]].max(0.0), phase)
    });

    // Gaussian bumps on a ring, jointly normalized so RSS is exactly 1.
    let n = spec.n_coils;
    let mut bumps = Array3::<f64>::zeros((n, h, w));
    for c in 0..n {
        let angle = 2.0 * PI * c as f64 / n as f64;
        let (cy, cx) = (
            spec.coil_ring_radius * angle.sin(),
            spec.coil_ring_radius * angle.cos(),
        );
        for i in 0..h {
            let y = grid_coords(h, i);
            for j in 0..w {
                let x = grid_coords(w, j);
                let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                bumps[[c, i, j]] = (-d2 / (2.0 * spec.coil_bump_width.powi(2))).exp();
            }
        }
    }
    let mut maps = Array3::<Complex64>::zeros((n, h, w));
    for i in 0..h {
        for j in 0..w {
            let rss: f64 = (0..n).map(|c| bumps[[c, i, j]].powi(2)).sum::<f64>().sqrt();
            for c in 0..n {
                maps[[c, i, j]] = Complex64::new(bumps[[c, i, j]] / rss, 0.0);
            }
        }
    }
    Ok((x_true, CoilMaps::new(maps)?))
}

/// Produce a slice-specific variant of the spec by jittering ellipse
/// geometry; keeps magnitudes within bounds by leaving intensities alone.
pub fn jitter_spec(spec: &PhantomSpec, amount: f64, seed: u64) -> PhantomSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = spec.clone();
    for el in &mut out.ellipses {
        el.center.0 += amount * rng.gen_range(-1.0..1.0);
        el.center.1 += amount * rng.gen_range(-1.0..1.0);
        let sa = 1.0 + amount * rng.gen_range(-1.0..1.0);
        let sb = 1.0 + amount * rng.gen_range(-1.0..1.0);
        el.half_axes.0 = (el.half_axes.0 * sa).max(0.01);
        el.half_axes.1 = (el.half_axes.1 * sb).max(0.01);
        el.angle_deg += 20.0 * amount * rng.gen_range(-1.0..1.0);
    }
    out
}

/// Simulate one acquisition: encode, add complex white Gaussian noise of
/// standard deviation `noise_std` per sample, restrict to `omega`, then
/// max-abs normalize with the scale recorded on the volume.
pub fn simulate_acquisition(
    x_true: &Array2<Complex64>,
    maps: &CoilMaps,
    omega: &SamplingMask,
    noise_std: f64,
    seed: u64,
    slice_id: u64,
) -> Result<KSpaceVolume> {
    if x_true.dim() != maps.dim() || maps.dim() != omega.dim() {
        return Err(Error::Dim(format!(
            "phantom {:?}, maps {:?}, mask {:?} disagree",
            x_true.dim(),
            maps.dim(),
            omega.dim()
        )));
    }
    let n = maps.n_coils();
    let (h, w) = x_true.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise_std / 2f64.sqrt())
        .map_err(|_| Error::Usage("noise_std must be finite and nonnegative".into()))?;

    let mut data = Array3::<Complex64>::zeros((n, h, w));
    let mv = maps.view();
    for c in 0..n {
        let weighted = &mv.index_axis(Axis(0), c) * x_true;
        let mut k = fft2_centered(&weighted.view());
        if noise_std > 0.0 {
            for v in k.iter_mut() {
                *v += Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng));
            }
        }
        k.zip_mut_with(&*omega.grid, |v, &keep| {
            if !keep {
                *v = Complex64::new(0.0, 0.0);
            }
        });
        data.index_axis_mut(Axis(0), c).assign(&k);
    }
    let volume = KSpaceVolume::new(data, omega.clone(), slice_id, 1.0)?;
    volume.normalized()
}

/// Equispaced phase-encode undersampling: every R-th row plus a centered
/// block of fully-sampled calibration rows; readout fully sampled.
pub fn equispaced_mask(h: usize, w: usize, r: usize, acs_lines: usize) -> Result<SamplingMask> {
    if r == 0 {
        return Err(Error::Usage("acceleration R must be >= 1".into()));
    }
    if acs_lines > h {
        return Err(Error::Usage(format!("acs_lines {acs_lines} exceeds {h} rows")));
    }
    let acs0 = (h - acs_lines) / 2;
    let mut grid = Array2::from_elem((h, w), false);
    for i in 0..h {
        if i % r == 0 || (i >= acs0 && i < acs0 + acs_lines) {
            for j in 0..w {
                grid[[i, j]] = true;
            }
        }
    }
    SamplingMask::new(
        grid,
        MaskKind::Omega,
        MaskDescriptor { scheme: format!("equispaced(R={r},acs={acs_lines})"), ..Default::default() },
    )
}

/// Sheared equispaced pattern over the two phase-encode axes: the
/// equispaced offset advances by one row per successive column, plus a
/// centered fully-sampled calibration block.
pub fn sheared_mask(h: usize, w: usize, r: usize, acs_block: (usize, usize)) -> Result<SamplingMask> {
    if r == 0 {
        return Err(Error::Usage("acceleration R must be >= 1".into()));
    }
    let (acs_h, acs_w) = acs_block;
    if acs_h > h || acs_w > w {
        return Err(Error::Usage(format!("ACS block {acs_block:?} exceeds {h}x{w} grid")));
    }
    let (r0, c0) = ((h - acs_h) / 2, (w - acs_w) / 2);
    let mut grid = Array2::from_elem((h, w), false);
    for i in 0..h {
        for j in 0..w {
            let on_lattice = (i + r - (j % r)) % r == 0;
            let in_acs = i >= r0 && i < r0 + acs_h && j >= c0 && j < c0 + acs_w;
            grid[[i, j]] = on_lattice || in_acs;
        }
    }
    SamplingMask::new(
        grid,
        MaskKind::Omega,
        MaskDescriptor {
            scheme: format!("sheared(R={r},acs={acs_h}x{acs_w})"),
            ..Default::default()
        },
    )
}
