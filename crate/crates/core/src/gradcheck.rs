//! Central finite-difference gradient checking at 64-bit precision.

use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Finite-difference step used by the checks.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor of the relative error, so that gradients that are zero
/// up to rounding do not register as large relative errors.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// The caller declared this element as sitting behind a stop-gradient;
    /// a zero analytic gradient there is expected.
    pub intentional: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tol: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    /// Entries whose relative error exceeds the tolerance and that were not
    /// declared as intentional.
    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries
            .iter()
            .filter(|e| !e.intentional && !(e.rel_error <= self.tol))
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| !e.intentional)
            .map(|e| e.rel_error)
            .fold(0.0, f64::max)
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(REL_FLOOR);
    (a - b).abs() / denom
}

/// Checks `fn` (scalar-valued, built on a fresh graph from one input) at
/// `point`. Elements listed in `stop_grad` are reported as intentional when
/// their analytic gradient is exactly zero.
pub fn check_gradients<F>(
    f: F,
    point: &Tensor<f64>,
    tol: f64,
    stop_grad: &[usize],
) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, Var) -> Result<Var>,
{
    let probes: Vec<(usize, usize)> = (0..point.len()).map(|i| (0, i)).collect();
    let declared: Vec<(usize, usize)> = stop_grad.iter().map(|&i| (0, i)).collect();
    check_param_gradients(
        |g, vars| f(g, vars[0]),
        core::slice::from_ref(point),
        &probes,
        tol,
        &declared,
    )
}

/// Multi-input variant: `probes` lists `(input, element)` pairs to check.
pub fn check_param_gradients<F>(
    f: F,
    params: &[Tensor<f64>],
    probes: &[(usize, usize)],
    tol: f64,
    stop_grad: &[(usize, usize)],
) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let analytic = {
        let g = Graph::new();
        let vars: Vec<Var> = params.iter().enumerate().map(|(i, p)| g.param(i, p)).collect();
        let loss = f(&g, &vars)?;
        g.backward(loss)?
    };
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p)).collect();
        let loss = f(&g, &vars)?;
        Ok(g.item(loss))
    };

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut entries = Vec::with_capacity(probes.len());
    for &(p, i) in probes {
        let orig = work[p].data()[i];
        work[p].data_mut()[i] = orig + FD_STEP;
        let up = eval(&work)?;
        work[p].data_mut()[i] = orig - FD_STEP;
        let down = eval(&work)?;
        work[p].data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic.get(p).map_or(0.0, |t| t.data()[i]);
        let declared = stop_grad.contains(&(p, i));
        entries.push(GradCheckEntry {
            param: p,
            index: i,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
            intentional: declared && a == 0.0,
        });
    }
    Ok(GradCheckReport { tol, entries })
}
