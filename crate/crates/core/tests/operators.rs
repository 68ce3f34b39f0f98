//! Encoding-operator correctness: dense-matrix oracle agreement, adjoint
//! identities, coil combination, zero-filled init, and algebraic
//! properties (linearity, restriction, positive semidefiniteness).

use ndarray::{Array2, Array3, Axis};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssdu_core::fft::{fft2_centered, ifft2_centered};
use ssdu_core::mri::{
    apply_e, apply_eh, sense1_combine, zero_filled_init, CoilMaps, KSpaceVolume, MaskDescriptor,
    MaskKind, SamplingMask,
};
use ssdu_core::sim::{equispaced_mask, make_phantom, simulate_acquisition, PhantomSpec};
use ssdu_core::solvers::cg_sense;

fn rng_complex(rng: &mut ChaCha8Rng) -> Complex64 {
    Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
}

fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array2<Complex64> {
    Array2::from_shape_fn((h, w), |_| rng_complex(rng))
}

fn random_coil_stack(n: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array3<Complex64> {
    Array3::from_shape_fn((n, h, w), |_| rng_complex(rng))
}

/// Random maps scaled so the RSS never exceeds 1.
fn random_maps(n: usize, h: usize, w: usize, seed: u64) -> CoilMaps {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = random_coil_stack(n, h, w, &mut rng);
    let mut max_rss: f64 = 0.0;
    for i in 0..h {
        for j in 0..w {
            let rss: f64 = (0..n).map(|c| raw[[c, i, j]].norm_sqr()).sum::<f64>().sqrt();
            max_rss = max_rss.max(rss);
        }
    }
    CoilMaps::new(raw.mapv(|v| v / max_rss)).unwrap()
}

fn random_mask(h: usize, w: usize, keep: f64, seed: u64) -> SamplingMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let grid = Array2::from_shape_fn((h, w), |_| rng.gen::<f64>() < keep);
        if grid.iter().any(|&b| b) {
            return SamplingMask::new(grid, MaskKind::Omega, MaskDescriptor::default()).unwrap();
        }
    }
}

fn dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(p, q)| p.conj() * q).sum()
}

/// Build the explicit encoding matrix column by column.
fn dense_e(maps: &CoilMaps, mask: &SamplingMask) -> Vec<Vec<Complex64>> {
    let (h, w) = maps.dim();
    let n = maps.n_coils();
    let cols = h * w;
    let rows = n * h * w;
    let mut mat = vec![vec![Complex64::new(0.0, 0.0); cols]; rows];
    for col in 0..cols {
        let mut basis = Array2::<Complex64>::zeros((h, w));
        basis[[col / w, col % w]] = Complex64::new(1.0, 0.0);
        let out = apply_e(&basis.view(), maps, mask).unwrap();
        for (row, v) in out.iter().enumerate() {
            mat[row][col] = *v;
        }
    }
    mat
}

#[test]
fn dense_matrix_oracle_forward_and_adjoint() {
    let (n, h, w) = (2usize, 4usize, 4usize);
    let maps = random_maps(n, h, w, 21);
    let mask = random_mask(h, w, 0.6, 22);
    let mat = dense_e(&maps, &mask);
    let mut rng = ChaCha8Rng::seed_from_u64(23);

    let x = random_image(h, w, &mut rng);
    let xf: Vec<Complex64> = x.iter().cloned().collect();
    let ex = apply_e(&x.view(), &maps, &mask).unwrap();
    for (row, v) in ex.iter().enumerate() {
        let expect: Complex64 = mat[row]
            .iter()
            .zip(&xf)
            .map(|(m, xv)| m * xv)
            .sum();
        assert!((v - expect).norm() < 1e-12, "forward row {row}");
    }

    let y = random_coil_stack(n, h, w, &mut rng);
    let yf: Vec<Complex64> = y.iter().cloned().collect();
    let ehy = apply_eh(&y.view(), &maps, &mask).unwrap();
    for (col, v) in ehy.iter().enumerate() {
        // Column `col` of E, conjugated, dotted with y.
        let expect: Complex64 = (0..yf.len()).map(|row| mat[row][col].conj() * yf[row]).sum();
        assert!((v - expect).norm() < 1e-12, "adjoint col {col}");
    }
}

#[test]
fn adjoint_identity_on_random_instances() {
    for seed in 0..10u64 {
        let (n, h, w) = (4usize, 8usize, 7usize);
        let maps = random_maps(n, h, w, 100 + seed);
        let mask = random_mask(h, w, 0.5, 200 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let x = random_image(h, w, &mut rng);
        let y = random_coil_stack(n, h, w, &mut rng);
        let ex = apply_e(&x.view(), &maps, &mask).unwrap();
        let ehy = apply_eh(&y.view(), &maps, &mask).unwrap();
        let lhs = dot(ex.as_slice().unwrap(), y.as_slice().unwrap());
        let rhs = dot(x.as_slice().unwrap(), ehy.as_slice().unwrap());
        let rel = (lhs - rhs).norm() / lhs.norm().max(1e-30);
        assert!(rel < 1e-10, "seed {seed}: rel {rel}");
    }
}

#[test]
fn trivial_encode_cases() {
    let (n, h, w) = (3usize, 6usize, 6usize);
    let maps = random_maps(n, h, w, 31);
    let mask = random_mask(h, w, 0.5, 32);

    let zero = Array2::<Complex64>::zeros((h, w));
    let out = apply_e(&zero.view(), &maps, &mask).unwrap();
    assert!(out.iter().all(|v| v.norm() == 0.0));
    let zero_k = Array3::<Complex64>::zeros((n, h, w));
    let out = apply_eh(&zero_k.view(), &maps, &mask).unwrap();
    assert!(out.iter().all(|v| v.norm() == 0.0));

    // Single coil, unit maps, full mask: plain centered FFT.
    let ones = CoilMaps::new(Array3::from_elem((1, h, w), Complex64::new(1.0, 0.0))).unwrap();
    let full = SamplingMask::full(h, w, MaskKind::Omega);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let x = random_image(h, w, &mut rng);
    let ex = apply_e(&x.view(), &ones, &full).unwrap();
    let expect = fft2_centered(&x.view());
    for (a, b) in ex.index_axis(Axis(0), 0).iter().zip(expect.iter()) {
        assert!((a - b).norm() < 1e-12);
    }
}

#[test]
fn shape_mismatch_is_a_dimension_error() {
    let maps = random_maps(2, 4, 4, 41);
    let mask = random_mask(5, 5, 0.5, 42);
    let x = Array2::<Complex64>::zeros((4, 4));
    assert!(apply_e(&x.view(), &maps, &mask).is_err());
    let y = Array3::<Complex64>::zeros((2, 4, 4));
    assert!(apply_eh(&y.view(), &maps, &mask).is_err());
}

#[test]
fn sense1_cases() {
    let (h, w) = (5usize, 4usize);
    // Single coil with unit maps: identity.
    let ones = CoilMaps::new(Array3::from_elem((1, h, w), Complex64::new(1.0, 0.0))).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let x = random_image(h, w, &mut rng);
    let mut imgs = Array3::<Complex64>::zeros((1, h, w));
    imgs.index_axis_mut(Axis(0), 0).assign(&x);
    let combined = sense1_combine(&imgs.view(), &ones).unwrap();
    assert!(combined.iter().zip(x.iter()).all(|(a, b)| (a - b).norm() < 1e-15));

    // Unit-RSS maps with coil_images = maps .* x recover x exactly.
    let spec = PhantomSpec { h, w, n_coils: 4, ..PhantomSpec::default() };
    let (_, maps) = make_phantom(&spec, 7).unwrap();
    let mv = maps.view();
    let mut imgs = Array3::<Complex64>::zeros((4, h, w));
    for c in 0..4 {
        imgs.index_axis_mut(Axis(0), c).assign(&(&mv.index_axis(Axis(0), c) * &x));
    }
    let combined = sense1_combine(&imgs.view(), &maps).unwrap();
    for (a, b) in combined.iter().zip(x.iter()) {
        assert!((a - b).norm() < 1e-12);
    }

    // Random instance against the direct loop.
    let maps = random_maps(3, h, w, 52);
    let imgs = random_coil_stack(3, h, w, &mut rng);
    let combined = sense1_combine(&imgs.view(), &maps).unwrap();
    let mv = maps.view();
    for i in 0..h {
        for j in 0..w {
            let expect: Complex64 =
                (0..3).map(|c| mv[[c, i, j]].conj() * imgs[[c, i, j]]).sum();
            assert!((combined[[i, j]] - expect).norm() < 1e-12);
        }
    }
}

#[test]
fn zero_filled_init_cases() {
    let (h, w) = (8usize, 8usize);
    let ones = CoilMaps::new(Array3::from_elem((1, h, w), Complex64::new(1.0, 0.0))).unwrap();
    let full = SamplingMask::full(h, w, MaskKind::Omega);
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let y_data = random_coil_stack(1, h, w, &mut rng);
    let y = KSpaceVolume::new(y_data.clone(), full.clone(), 0, 1.0).unwrap();

    // Full mask, unit single-coil maps: the centered inverse FFT.
    let x0 = zero_filled_init(&y, &ones, &full).unwrap();
    let expect = ifft2_centered(&y_data.index_axis(Axis(0), 0));
    for (a, b) in x0.iter().zip(expect.iter()) {
        assert!((a - b).norm() < 1e-12);
    }

    // mask = acquired mask reproduces apply_eh directly.
    let omega = random_mask(h, w, 0.5, 62);
    let restricted = omega.restrict(&y_data.view()).unwrap();
    let yv = KSpaceVolume::new(restricted.clone(), omega.clone(), 0, 1.0).unwrap();
    let a = zero_filled_init(&yv, &ones, &omega).unwrap();
    let b = apply_eh(&restricted.view(), &ones, &omega).unwrap();
    assert_eq!(a, b);

    // A mask outside the acquired set is a consistency error.
    let bigger = SamplingMask::full(h, w, MaskKind::Omega);
    assert!(zero_filled_init(&yv, &ones, &bigger).is_err());
}

#[test]
fn zero_filled_aliasing_is_worse_than_cg_sense() {
    let spec = PhantomSpec { h: 64, w: 64, n_coils: 8, noise_std: 0.0, ..PhantomSpec::default() };
    let (x_true, maps) = make_phantom(&spec, 71).unwrap();
    let omega = equispaced_mask(64, 64, 4, 8).unwrap();
    let y = simulate_acquisition(&x_true, &maps, &omega, 0.0, 72, 0).unwrap();

    let zf = zero_filled_init(&y, &maps, &omega).unwrap().mapv(|v| v * y.norm_scale);
    let cg = cg_sense(&y, &maps, &omega, 30, 0.0).unwrap().mapv(|v| v * y.norm_scale);

    let nmse = |est: &Array2<Complex64>| -> f64 {
        let num: f64 = est.iter().zip(x_true.iter()).map(|(e, r)| (e - r).norm_sqr()).sum();
        let den: f64 = x_true.iter().map(|r| r.norm_sqr()).sum();
        num / den
    };
    assert!(
        nmse(&zf) > nmse(&cg),
        "zero-filled {} should be worse than CG-SENSE {}",
        nmse(&zf),
        nmse(&cg)
    );
}

#[test]
fn linearity_restriction_and_psd() {
    let (n, h, w) = (3usize, 6usize, 5usize);
    let maps = random_maps(n, h, w, 81);
    let mask = random_mask(h, w, 0.5, 82);
    let full = SamplingMask::full(h, w, MaskKind::Omega);
    let mut rng = ChaCha8Rng::seed_from_u64(83);
    let x1 = random_image(h, w, &mut rng);
    let x2 = random_image(h, w, &mut rng);
    let alpha = Complex64::new(0.7, -0.3);

    // Linearity.
    let lhs = apply_e(&(&x1 * alpha + &x2).view(), &maps, &mask).unwrap();
    let e1 = apply_e(&x1.view(), &maps, &mask).unwrap();
    let e2 = apply_e(&x2.view(), &maps, &mask).unwrap();
    for ((l, a), b) in lhs.iter().zip(e1.iter()).zip(e2.iter()) {
        assert!((l - (a * alpha + b)).norm() < 1e-12);
    }

    // Restriction composition: masked E equals mask applied to full E.
    let masked = apply_e(&x1.view(), &maps, &mask).unwrap();
    let full_e = apply_e(&x1.view(), &maps, &full).unwrap();
    for c in 0..n {
        for i in 0..h {
            for j in 0..w {
                let expect = if mask.grid[[i, j]] {
                    full_e[[c, i, j]]
                } else {
                    Complex64::new(0.0, 0.0)
                };
                assert!((masked[[c, i, j]] - expect).norm() < 1e-12);
            }
        }
    }

    // E^H E is Hermitian positive semidefinite.
    let ehe = |v: &Array2<Complex64>| {
        let e = apply_e(&v.view(), &maps, &mask).unwrap();
        apply_eh(&e.view(), &maps, &mask).unwrap()
    };
    let q1 = ehe(&x1);
    let q2 = ehe(&x2);
    let quad = dot(q1.as_slice().unwrap(), x1.as_slice().unwrap());
    assert!(quad.re >= -1e-12, "quadratic form must be nonnegative");
    assert!(quad.im.abs() < 1e-12);
    let h12 = dot(q1.as_slice().unwrap(), x2.as_slice().unwrap());
    let h21 = dot(q2.as_slice().unwrap(), x1.as_slice().unwrap());
    assert!((h12 - h21.conj()).norm() < 1e-12, "Hermitian symmetry");
}

#[test]
fn kspace_volume_invariants() {
    let (h, w) = (4usize, 4usize);
    let omega = random_mask(h, w, 0.5, 91);
    let mut data = Array3::<Complex64>::zeros((1, h, w));
    // Nonzero outside the mask must be rejected.
    let off = omega
        .grid
        .indexed_iter()
        .find(|(_, &b)| !b)
        .map(|((i, j), _)| (i, j))
        .unwrap();
    data[[0, off.0, off.1]] = Complex64::new(1.0, 0.0);
    assert!(KSpaceVolume::new(data.clone(), omega.clone(), 0, 1.0).is_err());
    data[[0, off.0, off.1]] = Complex64::new(0.0, 0.0);
    assert!(KSpaceVolume::new(data.clone(), omega.clone(), 0, 0.0).is_err());
    assert!(KSpaceVolume::new(data, omega, 0, 1.0).is_ok());
}
