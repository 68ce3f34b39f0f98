//! Zero-padded ("same") 2-D cross-correlation kernels and their adjoints.
//!
//! These are the raw numeric routines behind the tape's conv op. Layout is
//! row-major `[channels, H, W]` for feature maps and
//! `[out_ch, in_ch, k, k]` for kernels; inner loops run over contiguous
//! rows so the compiler can vectorize them.

use crate::error::{Error, Result};
use ndarray::{Array1, Array3, Array4, ArrayView1, ArrayView3, ArrayView4};

pub struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
}

pub fn check_shapes(
    input: &ArrayView3<'_, f64>,
    kernel: &ArrayView4<'_, f64>,
    bias: Option<&ArrayView1<'_, f64>>,
) -> Result<ConvShape> {
    let (c_in, h, w) = input.dim();
    let (c_out, kc_in, kh, kw) = kernel.dim();
    if kh != kw {
        return Err(Error::Dim(format!("kernel must be square, got {kh}x{kw}")));
    }
    if kh % 2 == 0 {
        return Err(Error::Dim(format!("kernel size must be odd, got {kh}")));
    }
    if kc_in != c_in {
        return Err(Error::Dim(format!(
            "kernel expects {kc_in} input channels, input has {c_in}"
        )));
    }
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(Error::Dim(format!(
                "bias has {} entries for {c_out} output channels",
                b.len()
            )));
        }
    }
    Ok(ConvShape { c_in, c_out, h, w, k: kh, pad: (kh - 1) / 2 })
}

/// `out[co] = bias[co] + sum_ci input[ci] (*) kernel[co][ci]` with zero padding.
pub fn forward(
    input: &ArrayView3<'_, f64>,
    kernel: &ArrayView4<'_, f64>,
    bias: Option<&ArrayView1<'_, f64>>,
) -> Result<Array3<f64>> {
    let s = check_shapes(input, kernel, bias)?;
    let mut out = Array3::<f64>::zeros((s.c_out, s.h, s.w));
    if let Some(b) = bias {
        for co in 0..s.c_out {
            out.index_axis_mut(ndarray::Axis(0), co).fill(b[co]);
        }
    }
    let inp = input.as_slice().expect("input not contiguous");
    let ker = kernel.as_slice().expect("kernel not contiguous");
    let o = out.as_slice_mut().expect("output not contiguous");
    let (h, w, k, p) = (s.h, s.w, s.k, s.pad as isize);
    for co in 0..s.c_out {
        for ci in 0..s.c_in {
            let in_base = ci * h * w;
            for ky in 0..k {
                let dy = ky as isize - p;
                let y_lo = (-dy).max(0) as usize;
                let y_hi = ((h as isize - dy).min(h as isize)) as usize;
                for kx in 0..k {
                    let wgt = ker[((co * s.c_in + ci) * k + ky) * k + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - p;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = ((w as isize - dx).min(w as isize)) as usize;
                    for y in y_lo..y_hi {
                        let src = in_base + ((y as isize + dy) as usize) * w;
                        let dst = (co * h + y) * w;
                        let src_row = &inp[src + ((x_lo as isize + dx) as usize)
                            ..src + ((x_hi as isize + dx) as usize)];
                        let dst_row = &mut o[dst + x_lo..dst + x_hi];
                        for (d, sv) in dst_row.iter_mut().zip(src_row) {
                            *d += wgt * sv;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`forward`] with respect to the input.
pub fn input_grad(
    g_out: &ArrayView3<'_, f64>,
    kernel: &ArrayView4<'_, f64>,
) -> Array3<f64> {
    let (c_out, h, w) = g_out.dim();
    let (_, c_in, k, _) = kernel.dim();
    let p = ((k - 1) / 2) as isize;
    let mut g_in = Array3::<f64>::zeros((c_in, h, w));
    let g = g_out.as_slice().expect("grad not contiguous");
    let ker = kernel.as_slice().expect("kernel not contiguous");
    let gi = g_in.as_slice_mut().unwrap();
    for ci in 0..c_in {
        for co in 0..c_out {
            let g_base = co * h * w;
            for ky in 0..k {
                // g_in[y] accumulates from g_out[y - (ky - p)]
                let dy = p - ky as isize;
                let y_lo = (-dy).max(0) as usize;
                let y_hi = ((h as isize - dy).min(h as isize)) as usize;
                for kx in 0..k {
                    let wgt = ker[((co * c_in + ci) * k + ky) * k + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let dx = p - kx as isize;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = ((w as isize - dx).min(w as isize)) as usize;
                    for y in y_lo..y_hi {
                        let src = g_base + ((y as isize + dy) as usize) * w;
                        let dst = (ci * h + y) * w;
                        let src_row = &g[src + ((x_lo as isize + dx) as usize)
                            ..src + ((x_hi as isize + dx) as usize)];
                        let dst_row = &mut gi[dst + x_lo..dst + x_hi];
                        for (d, sv) in dst_row.iter_mut().zip(src_row) {
                            *d += wgt * sv;
                        }
                    }
                }
            }
        }
    }
    g_in
}

/// Adjoint of [`forward`] with respect to the kernel.
pub fn kernel_grad(
    g_out: &ArrayView3<'_, f64>,
    input: &ArrayView3<'_, f64>,
    k: usize,
) -> Array4<f64> {
    let (c_out, h, w) = g_out.dim();
    let (c_in, _, _) = input.dim();
    let p = ((k - 1) / 2) as isize;
    let mut g_k = Array4::<f64>::zeros((c_out, c_in, k, k));
    let g = g_out.as_slice().expect("grad not contiguous");
    let inp = input.as_slice().expect("input not contiguous");
    for co in 0..c_out {
        for ci in 0..c_in {
            let in_base = ci * h * w;
            for ky in 0..k {
                let dy = ky as isize - p;
                let y_lo = (-dy).max(0) as usize;
                let y_hi = ((h as isize - dy).min(h as isize)) as usize;
                for kx in 0..k {
                    let dx = kx as isize - p;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = ((w as isize - dx).min(w as isize)) as usize;
                    let mut acc = 0.0;
                    for y in y_lo..y_hi {
                        let g_row = (co * h + y) * w;
                        let i_row = in_base + ((y as isize + dy) as usize) * w;
                        let a = &g[g_row + x_lo..g_row + x_hi];
                        let b = &inp[i_row + ((x_lo as isize + dx) as usize)
                            ..i_row + ((x_hi as isize + dx) as usize)];
                        for (ga, ib) in a.iter().zip(b) {
                            acc += ga * ib;
                        }
                    }
                    g_k[[co, ci, ky, kx]] = acc;
                }
            }
        }
    }
    g_k
}

/// Adjoint of [`forward`] with respect to the bias.
pub fn bias_grad(g_out: &ArrayView3<'_, f64>) -> Array1<f64> {
    let c_out = g_out.dim().0;
    Array1::from_iter(
        (0..c_out).map(|co| g_out.index_axis(ndarray::Axis(0), co).sum()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array3, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand3(d: (usize, usize, usize), seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0))
    }

    fn rand4(d: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct six-nested-loop evaluation of the same cross-correlation.
    fn conv_oracle(
        input: &Array3<f64>,
        kernel: &Array4<f64>,
        bias: Option<&Array1<f64>>,
    ) -> Array3<f64> {
        let (c_in, h, w) = input.dim();
        let (c_out, _, k, _) = kernel.dim();
        let p = (k - 1) / 2;
        let mut out = Array3::<f64>::zeros((c_out, h, w));
        for co in 0..c_out {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias.map_or(0.0, |b| b[co]);
                    for ci in 0..c_in {
                        for ky in 0..k {
                            for kx in 0..k {
                                let yy = y as isize + ky as isize - p as isize;
                                let xx = x as isize + kx as isize - p as isize;
                                if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                                    acc += input[[ci, yy as usize, xx as usize]]
                                        * kernel[[co, ci, ky, kx]];
                                }
                            }
                        }
                    }
                    out[[co, y, x]] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let input = Array3::<f64>::zeros((2, 5, 5));
        let kernel = rand4((3, 2, 3, 3), 0);
        let out = forward(&input.view(), &kernel.view(), None).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_1x1_kernel_is_identity() {
        let input = rand3((1, 4, 6), 1);
        let kernel = Array4::from_elem((1, 1, 1, 1), 1.0);
        let out = forward(&input.view(), &kernel.view(), None).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let input = rand3((2, 4, 4), 2);
        let kernel = rand4((3, 2, 3, 3), 3);
        let bias = Array1::from_vec(vec![0.3, -0.1, 0.7]);
        let fast = forward(&input.view(), &kernel.view(), Some(&bias.view())).unwrap();
        let slow = conv_oracle(&input, &kernel, Some(&bias));
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn rejects_even_kernel_and_channel_mismatch() {
        let input = rand3((2, 4, 4), 4);
        let even = rand4((1, 2, 2, 2), 5);
        assert!(forward(&input.view(), &even.view(), None).is_err());
        let wrong_ch = rand4((1, 3, 3, 3), 6);
        assert!(forward(&input.view(), &wrong_ch.view(), None).is_err());
    }

    /// Adjoint identity <conv(u), v> = <u, conv^T(v)> for the input adjoint,
    /// and <conv_k(u), v> = <u, kernel_grad(v)> for the kernel adjoint.
    #[test]
    fn adjoint_identities() {
        let input = rand3((3, 6, 5), 7);
        let kernel = rand4((2, 3, 3, 3), 8);
        let u = rand3((3, 6, 5), 9);
        let v = rand3((2, 6, 5), 10);

        let ju = forward(&u.view(), &kernel.view(), None).unwrap();
        let jtv = input_grad(&v.view(), &kernel.view());
        let lhs: f64 = ju.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.iter().zip(jtv.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() / lhs.abs().max(1e-30) < 1e-12);

        let ku = rand4((2, 3, 3, 3), 11);
        let jku = forward(&input.view(), &ku.view(), None).unwrap();
        let jktv = kernel_grad(&v.view(), &input.view(), 3);
        let lhs: f64 = jku.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = ku.iter().zip(jktv.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() / lhs.abs().max(1e-30) < 1e-12);
    }
}
