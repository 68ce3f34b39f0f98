//! Centered, orthonormal 2-D FFTs.
//!
//! The convention throughout the crate is DC-at-center: `ifftshift` before
//! the transform, `fftshift` after, and a 1/sqrt(H*W) scale on both the
//! forward and inverse transforms so that the pair is unitary and the
//! adjoint of the forward transform is exactly the inverse.

use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};
use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

thread_local! {
    static PLANS: RefCell<PlanCache> = RefCell::new(PlanCache::new());
}

struct PlanCache {
    planner: FftPlanner<f64>,
    plans: HashMap<(usize, bool), Arc<dyn Fft<f64>>>,
}

impl PlanCache {
    fn new() -> Self {
        PlanCache { planner: FftPlanner::new(), plans: HashMap::new() }
    }

    fn get(&mut self, len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
        self.plans
            .entry((len, inverse))
            .or_insert_with(|| {
                let dir = if inverse { FftDirection::Inverse } else { FftDirection::Forward };
                self.planner.plan_fft(len, dir)
            })
            .clone()
    }
}

/// Circularly shift the zero-frequency sample to the array center
/// (`numpy.fft.fftshift` semantics: roll by `n/2` on each axis).
pub fn fftshift2(x: &ArrayView2<'_, Complex64>) -> Array2<Complex64> {
    let (h, w) = x.dim();
    roll2(x, h / 2, w / 2)
}

/// Inverse of [`fftshift2`] (roll by `-(n/2)`, which differs for odd sizes).
pub fn ifftshift2(x: &ArrayView2<'_, Complex64>) -> Array2<Complex64> {
    let (h, w) = x.dim();
    roll2(x, h - h / 2, w - w / 2)
}

fn roll2(x: &ArrayView2<'_, Complex64>, dy: usize, dx: usize) -> Array2<Complex64> {
    let (h, w) = x.dim();
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        let ii = (i + dy) % h;
        for j in 0..w {
            out[[ii, (j + dx) % w]] = x[[i, j]];
        }
    }
    out
}

fn fft_rows(x: &mut ArrayViewMut2<'_, Complex64>, inverse: bool) {
    let w = x.ncols();
    PLANS.with(|c| {
        let plan = c.borrow_mut().get(w, inverse);
        let mut scratch = vec![Complex64::default(); plan.get_inplace_scratch_len()];
        for mut row in x.rows_mut() {
            let slice = row.as_slice_mut().expect("row not contiguous");
            plan.process_with_scratch(slice, &mut scratch);
        }
    });
}

fn fft_cols(x: &mut ArrayViewMut2<'_, Complex64>, inverse: bool) {
    let (h, w) = x.dim();
    PLANS.with(|c| {
        let plan = c.borrow_mut().get(h, inverse);
        let mut scratch = vec![Complex64::default(); plan.get_inplace_scratch_len()];
        let mut col = vec![Complex64::default(); h];
        for j in 0..w {
            for i in 0..h {
                col[i] = x[[i, j]];
            }
            plan.process_with_scratch(&mut col, &mut scratch);
            for i in 0..h {
                x[[i, j]] = col[i];
            }
        }
    });
}

fn fft2_raw(x: Array2<Complex64>, inverse: bool) -> Array2<Complex64> {
    let mut x = if x.is_standard_layout() { x } else { x.as_standard_layout().to_owned() };
    fft_rows(&mut x.view_mut(), inverse);
    fft_cols(&mut x.view_mut(), inverse);
    x
}

/// Orthonormal centered 2-D DFT: `fftshift(fft2(ifftshift(x))) / sqrt(H*W)`.
pub fn fft2_centered(x: &ArrayView2<'_, Complex64>) -> Array2<Complex64> {
    let (h, w) = x.dim();
    let scale = 1.0 / ((h * w) as f64).sqrt();
    let mut out = fftshift2(&fft2_raw(ifftshift2(x), false).view());
    out.mapv_inplace(|v| v * scale);
    out
}

/// Orthonormal centered 2-D inverse DFT; exact inverse and adjoint of
/// [`fft2_centered`].
pub fn ifft2_centered(x: &ArrayView2<'_, Complex64>) -> Array2<Complex64> {
    let (h, w) = x.dim();
    let scale = 1.0 / ((h * w) as f64).sqrt();
    let mut out = fftshift2(&fft2_raw(ifftshift2(x), true).view());
    out.mapv_inplace(|v| v * scale);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Array2<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        })
    }

    fn norm(x: &Array2<Complex64>) -> f64 {
        x.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    #[test]
    fn parseval() {
        let x = random_image(16, 12, 1);
        let y = fft2_centered(&x.view());
        let rel = (norm(&y) - norm(&x)).abs() / norm(&x);
        assert!(rel < 1e-12, "rel = {rel}");
    }

    #[test]
    fn centered_delta_gives_flat_spectrum() {
        for (h, w) in [(8usize, 8usize), (7, 9)] {
            let mut x = Array2::<Complex64>::zeros((h, w));
            x[[h / 2, w / 2]] = Complex64::new(1.0, 0.0);
            let y = fft2_centered(&x.view());
            let expect = 1.0 / ((h * w) as f64).sqrt();
            for v in y.iter() {
                assert!((v - Complex64::new(expect, 0.0)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn inverse_pair_round_trip() {
        let x = random_image(9, 14, 2);
        let back = ifft2_centered(&fft2_centered(&x.view()).view());
        let err = x
            .iter()
            .zip(back.iter())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt()
            / norm(&x);
        assert!(err < 1e-12, "err = {err}");
    }

    #[test]
    fn shifts_are_inverses_for_odd_sizes() {
        let x = random_image(7, 5, 3);
        let y = ifftshift2(&fftshift2(&x.view()).view());
        assert_eq!(x, y);
    }
}
