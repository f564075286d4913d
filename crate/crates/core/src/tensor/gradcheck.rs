use rand::Rng;

use super::{Tape, Tensor, Var};
use crate::error::{invalid, Result};

/// Gradients smaller than this in magnitude are compared on an absolute
/// scale of `tol * GRAD_FLOOR` instead of relatively.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct CoordCheck {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    /// `f(θ±h)` was finite.
    pub finite: bool,
    /// A discrete decision (loss branch or expert choice) changed inside the
    /// `±h` bracket, so the central difference straddles a kink.
    pub kink: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub coords: Vec<CoordCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub kinks_skipped: usize,
    pub passed: bool,
}

impl GradCheckReport {
    fn from_coords(coords: Vec<CoordCheck>, tol: f64) -> Self {
        let smooth = || coords.iter().filter(|c| !c.kink);
        let max_rel_err = smooth().map(|c| c.rel_err).fold(0.0, f64::max);
        let all_finite = coords.iter().all(|c| c.finite);
        let kinks_skipped = coords.iter().filter(|c| c.kink).count();
        let passed = all_finite && smooth().all(|c| c.rel_err < tol);
        Self {
            coords,
            max_rel_err,
            tol,
            kinks_skipped,
            passed,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
    (analytic - numeric).abs() / denom
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, p)| tape.param(i, p.clone()))
        .collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape.value(out).item(), tape.branch_signature()))
}

/// Check selected `(param, flat index)` coordinates of `f` against central
/// differences with step `h`.
pub fn grad_check_coords<F>(
    f: F,
    params: &[Tensor],
    coords: &[(usize, usize)],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return invalid(format!("finite-difference step must be positive, got {h}"));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, p)| tape.param(i, p.clone()))
        .collect();
    let loss = f(&mut tape, &vars)?;
    let base_sig = tape.branch_signature();
    let grads = tape.backward(loss)?;

    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &(p, i) in coords {
        if p >= params.len() || i >= params[p].numel() {
            return invalid(format!("coordinate ({p}, {i}) out of range"));
        }
        let analytic = grads.get_or_zeros(p, params[p].shape()).data()[i];
        let orig = work[p].data()[i];
        work[p].data_mut()[i] = orig + h;
        let (fp, sig_p) = evaluate(&f, &work)?;
        work[p].data_mut()[i] = orig - h;
        let (fm, sig_m) = evaluate(&f, &work)?;
        work[p].data_mut()[i] = orig;

        let finite = fp.is_finite() && fm.is_finite();
        let numeric = (fp - fm) / (2.0 * h);
        let rel_err = if finite {
            relative_error(analytic, numeric)
        } else {
            f64::INFINITY
        };
        out.push(CoordCheck {
            param: p,
            index: i,
            analytic,
            numeric,
            rel_err,
            finite,
            kink: finite && (sig_p != base_sig || sig_m != base_sig),
        });
    }
    Ok(GradCheckReport::from_coords(out, tol))
}

/// Check every coordinate of every parameter.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.numel()).map(move |i| (p, i)))
        .collect();
    grad_check_coords(f, params, &coords, h, tol)
}

/// Check `n` uniformly sampled coordinates, drawn without regard to which
/// tensor they live in.
pub fn grad_check_sampled<F, R>(
    f: F,
    params: &[Tensor],
    n: usize,
    rng: &mut R,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    R: Rng,
{
    let total: usize = params.iter().map(Tensor::numel).sum();
    if total == 0 {
        return invalid("no parameters to check");
    }
    let coords: Vec<(usize, usize)> = (0..n)
        .map(|_| {
            let mut flat = rng.gen_range(0..total);
            let mut p = 0;
            while flat >= params[p].numel() {
                flat -= params[p].numel();
                p += 1;
            }
            (p, flat)
        })
        .collect();
    grad_check_coords(f, params, &coords, h, tol)
}
