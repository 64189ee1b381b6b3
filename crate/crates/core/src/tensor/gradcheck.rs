//! Central finite-difference gradient checking in double precision.

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

pub const PERTURBATION: f64 = 1e-5;
pub const REL_TOLERANCE: f64 = 1e-4;

/// Relative error with a small absolute floor so near-zero gradients do not
/// blow up the ratio.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Worst relative error over probes whose perturbations stay on one
    /// smooth piece of the function.
    pub max_rel_error: f64,
    pub probes: usize,
    /// Probes where `±PERTURBATION` crossed a relu or max-pool switch; central
    /// differences are no oracle there, so they are excluded from the maximum.
    pub straddled: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < REL_TOLERANCE
    }

    /// Probes that count towards the maximum.
    pub fn valid(&self) -> usize {
        self.probes - self.straddled
    }
}

/// Compares the graph gradient of a scalar function of `inputs` against
/// central differences for every input element.
pub fn check<F>(inputs: &[Tensor<f64>], f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor<f64>]| -> Result<(f64, Vec<usize>)> {
        let mut g = Graph::new(true, 0);
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t)).collect();
        let out = f(&mut g, &vars)?;
        Ok((g.value(out)[0], g.activation_pattern()))
    };
    let mut g = Graph::new(true, 0);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(&t.clone().with_requires_grad(true))).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let base = g.activation_pattern();
    let mut worst: f64 = 0.0;
    let mut probes = 0;
    let mut straddled = 0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).map(|x| x.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]);
        for i in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += PERTURBATION;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= PERTURBATION;
            let ((fp, pp), (fm, pm)) = (eval(&plus)?, eval(&minus)?);
            probes += 1;
            if pp != base || pm != base {
                straddled += 1;
                continue;
            }
            worst = worst.max(relative_error(analytic[i], (fp - fm) / (2.0 * PERTURBATION)));
        }
    }
    Ok(GradCheck { max_rel_error: worst, probes, straddled })
}

/// Checks selected `(parameter, element)` pairs of a loss computed from a
/// parameter store. Every evaluation builds a training graph with `seed`, so
/// dropout masks stay fixed across the perturbations.
pub fn check_params<F>(store: &mut ParamStore<f64>, probes: &[(ParamId, usize)], seed: u64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>| -> Result<(f64, Vec<usize>)> {
        let mut g = Graph::new(true, seed);
        let out = f(&mut g, store)?;
        Ok((g.value(out)[0], g.activation_pattern()))
    };
    store.zero_grads();
    let mut g = Graph::new(true, seed);
    let out = f(&mut g, store)?;
    g.backward(out)?;
    store.accumulate_grads(&g);
    let base = g.activation_pattern();
    let analytic: Vec<f64> = probes.iter().map(|&(id, i)| store.get(id).grad().map_or(0.0, |gr| gr[i])).collect();
    let mut worst: f64 = 0.0;
    let mut straddled = 0;
    for (&(id, i), a) in probes.iter().zip(analytic) {
        let orig = store.get(id).data()[i];
        store.get_mut(id).data_mut()[i] = orig + PERTURBATION;
        let (fp, pp) = eval(store)?;
        store.get_mut(id).data_mut()[i] = orig - PERTURBATION;
        let (fm, pm) = eval(store)?;
        store.get_mut(id).data_mut()[i] = orig;
        if pp != base || pm != base {
            straddled += 1;
            continue;
        }
        worst = worst.max(relative_error(a, (fp - fm) / (2.0 * PERTURBATION)));
    }
    Ok(GradCheck { max_rel_error: worst, probes: probes.len(), straddled })
}

