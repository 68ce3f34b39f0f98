//! Conjugate-gradient solves: the data-consistency subproblem inside the
//! unrolled network and the CG-SENSE baseline.
//!
//! The DC unit solves `(E^H E + mu I) x = E^H y + mu z` with a fixed number
//! of CG steps, warm-started at `z`, and every arithmetic step recorded on
//! the tape so the whole solve is differentiable. CG-SENSE solves
//! `(E^H E + reg I) x = E^H y` off-tape from a zero start with an early
//! stop on the relative residual.

use crate::autodiff::{scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::mri::{apply_e, apply_e_on_tape, apply_eh, apply_eh_on_tape, CoilMaps, KSpaceVolume, SamplingMask};
use ndarray::Array2;
use num_complex::Complex64;

/// Configuration of one data-consistency unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DCConfig {
    /// CG steps per DC unit; the solve is unrolled, never early-stopped.
    pub n_cg_iterations: usize,
    /// Quadratic-penalty weight coupling the solve to the regularizer output.
    pub mu: f64,
}

impl Default for DCConfig {
    fn default() -> Self {
        DCConfig { n_cg_iterations: 10, mu: 0.05 }
    }
}

impl DCConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cg_iterations == 0 {
            return Err(Error::Usage("n_cg_iterations must be >= 1".into()));
        }
        if !(self.mu >= 0.0) {
            return Err(Error::Usage("mu must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Emit `(E^H E + mu I) v` for a complex `[H,W]` node.
fn normal_op_on_tape(
    tape: &mut Tape,
    v: Var,
    maps: &CoilMaps,
    mask: &SamplingMask,
    mu: Var,
) -> Result<Var> {
    let ev = apply_e_on_tape(tape, v, maps, mask)?;
    let ehev = apply_eh_on_tape(tape, ev, maps, mask)?;
    let muv = tape.mul_scalar(v, mu)?;
    tape.add(ehev, muv)
}

/// Solve the data-consistency subproblem on the tape.
///
/// Runs exactly `n_cg` CG steps on `(E^H E + mu I) x = E^H y + mu z`,
/// warm-started at `x = z`. `y` is restricted to `mask` before entering the
/// right-hand side, so entries outside `mask` are never read.
pub fn dc_solve_on_tape(
    tape: &mut Tape,
    z: Var,
    y: &KSpaceVolume,
    maps: &CoilMaps,
    mask: &SamplingMask,
    mu: Var,
    n_cg: usize,
) -> Result<Var> {
    if n_cg == 0 {
        return Err(Error::Usage("n_cg_iterations must be >= 1".into()));
    }
    if !mask.is_subset_of(&y.acquired_mask) {
        return Err(Error::Consistency(
            "DC mask selects indices outside the acquired k-space".into(),
        ));
    }
    if mask.is_empty() && tape.scalar_value(mu) <= 0.0 {
        return Err(Error::Solver(
            "singular DC system: empty mask and zero penalty".into(),
        ));
    }

    let restricted = mask.restrict(&y.data.view())?;
    let ehy = apply_eh(&restricted.view(), maps, mask)?;
    let ehy = tape.constant(ehy.into_dyn());
    let muz = tape.mul_scalar(z, mu)?;
    let rhs = tape.add(ehy, muz)?;

    let mut x = z;
    let ax = normal_op_on_tape(tape, x, maps, mask, mu)?;
    let mut r = tape.sub(rhs, ax)?;
    let mut p = r;
    let mut rs = tape.dot_real(r, r)?;

    for _ in 0..n_cg {
        let ap = normal_op_on_tape(tape, p, maps, mask, mu)?;
        let pap = tape.dot_real(p, ap)?;
        let alpha = tape.div_safe(rs, pap)?;
        let step = tape.mul_scalar(p, alpha)?;
        x = tape.add(x, step)?;
        let rstep = tape.mul_scalar(ap, alpha)?;
        r = tape.sub(r, rstep)?;
        let rs_new = tape.dot_real(r, r)?;
        let beta = tape.div_safe(rs_new, rs)?;
        let pscaled = tape.mul_scalar(p, beta)?;
        p = tape.add(r, pscaled)?;
        rs = rs_new;
    }
    Ok(x)
}

/// Convenience form of the DC solve for plain arrays: builds a throwaway
/// tape with a constant penalty.
pub fn dc_solve(
    z: &Array2<Complex64>,
    y: &KSpaceVolume,
    maps: &CoilMaps,
    mask: &SamplingMask,
    cfg: &DCConfig,
) -> Result<Array2<Complex64>> {
    cfg.validate()?;
    if mask.is_empty() && cfg.mu == 0.0 {
        return Err(Error::Solver(
            "singular DC system: empty mask and zero penalty".into(),
        ));
    }
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone().into_dyn());
    let mu = tape.constant(scalar(cfg.mu));
    let out = dc_solve_on_tape(&mut tape, zv, y, maps, mask, mu, cfg.n_cg_iterations)?;
    Ok(tape
        .complex(out)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("DC output is an image"))
}

fn dot_re(a: &Array2<Complex64>, b: &Array2<Complex64>) -> f64 {
    a.iter().zip(b.iter()).map(|(p, q)| p.re * q.re + p.im * q.im).sum()
}

/// CG-SENSE with residual history: solves `(E^H E + l2_reg I) x = E^H y`
/// from zero for at most `n_iter` steps or until the relative residual
/// drops below 1e-9. Returns the estimate and the residual norms, starting
/// with the initial residual.
pub fn cg_sense_with_history(
    y: &KSpaceVolume,
    maps: &CoilMaps,
    mask: &SamplingMask,
    n_iter: usize,
    l2_reg: f64,
) -> Result<(Array2<Complex64>, Vec<f64>)> {
    if mask.is_empty() {
        return Err(Error::Solver("CG-SENSE needs a nonempty mask".into()));
    }
    if n_iter == 0 {
        return Err(Error::Usage("n_iter must be >= 1".into()));
    }
    if !(l2_reg >= 0.0) {
        return Err(Error::Usage("l2_reg must be nonnegative".into()));
    }
    let restricted = mask.restrict(&y.data.view())?;
    let rhs = apply_eh(&restricted.view(), maps, mask)?;
    let (h, w) = rhs.dim();

    let normal = |v: &Array2<Complex64>| -> Result<Array2<Complex64>> {
        let ev = apply_e(&v.view(), maps, mask)?;
        let mut out = apply_eh(&ev.view(), maps, mask)?;
        if l2_reg != 0.0 {
            out.zip_mut_with(v, |o, &vv| *o += vv * l2_reg);
        }
        Ok(out)
    };

    let mut x = Array2::<Complex64>::zeros((h, w));
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut rs = dot_re(&r, &r);
    let rhs_norm = rs.sqrt();
    let mut history = vec![rhs_norm];
    if rhs_norm == 0.0 {
        return Ok((x, history));
    }

    for _ in 0..n_iter {
        if rs.sqrt() < 1e-9 * rhs_norm {
            break;
        }
        let ap = normal(&p)?;
        let pap = dot_re(&p, &ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rs / pap;
        x.zip_mut_with(&p, |xv, &pv| *xv += pv * alpha);
        r.zip_mut_with(&ap, |rv, &av| *rv -= av * alpha);
        let rs_new = dot_re(&r, &r);
        history.push(rs_new.sqrt());
        let beta = rs_new / rs;
        p.zip_mut_with(&r, |pv, &rv| *pv = rv + *pv * beta);
        rs = rs_new;
    }
    Ok((x, history))
}

/// CG-SENSE reconstruction in the volume's normalization; multiply by
/// `y.norm_scale` to return to physical units.
pub fn cg_sense(
    y: &KSpaceVolume,
    maps: &CoilMaps,
    mask: &SamplingMask,
    n_iter: usize,
    l2_reg: f64,
) -> Result<Array2<Complex64>> {
    cg_sense_with_history(y, maps, mask, n_iter, l2_reg).map(|(x, _)| x)
}
