//! Central finite-difference verification of reverse-mode gradients.

use crate::error::TensorError;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("function failed: {0}")]
    Function(#[from] TensorError),
    #[error("non-finite value produced by `{op}` during the {phase} pass")]
    NonFinite { op: &'static str, phase: &'static str },
}

/// Agreement for one input tensor.
#[derive(Clone, Debug)]
pub struct InputReport {
    pub index: usize,
    pub checked: usize,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
    pub max_abs_diff: f64,
    /// `max |analytic - numeric| / max(max |analytic|, max |numeric|)` over the
    /// checked entries; zero when both gradients vanish.
    pub rel_error: f64,
    /// Flat index with the largest absolute disagreement.
    pub worst_entry: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }
}

/// Finite-difference checker.
///
/// `max_entries` limits how many entries of each input are perturbed; the
/// chosen entries are spread evenly across the flat index range.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub tolerance: f64,
    pub max_entries: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_entries: None,
        }
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor], phase: &'static str) -> Result<f64, GradCheckError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if let Some((_, op)) = g.first_non_finite() {
        return Err(GradCheckError::NonFinite { op, phase });
    }
    Ok(g.value(out).item())
}

impl GradCheck {
    pub fn run<F>(&self, f: F, inputs: &[Tensor]) -> Result<GradCheckReport, GradCheckError>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
    {
        if !(self.step > 0.0) {
            return Err(GradCheckError::InvalidStep(self.step));
        }
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        if let Some((_, op)) = g.first_non_finite() {
            return Err(GradCheckError::NonFinite { op, phase: "analytic" });
        }
        g.backward(out)?;

        let mut reports = Vec::with_capacity(inputs.len());
        let mut perturbed = inputs.to_vec();
        for (idx, input) in inputs.iter().enumerate() {
            let analytic = g
                .grad(vars[idx])
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![0.0; input.numel()]);
            let n = input.numel();
            let entries: Vec<usize> = match self.max_entries {
                Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
                _ => (0..n).collect(),
            };
            let mut rep = InputReport {
                index: idx,
                checked: entries.len(),
                max_abs_analytic: 0.0,
                max_abs_numeric: 0.0,
                max_abs_diff: 0.0,
                rel_error: 0.0,
                worst_entry: 0,
            };
            for &e in &entries {
                let orig = input.data()[e];
                perturbed[idx].data_mut()[e] = orig + self.step;
                let fp = evaluate(&f, &perturbed, "perturbed")?;
                perturbed[idx].data_mut()[e] = orig - self.step;
                let fm = evaluate(&f, &perturbed, "perturbed")?;
                perturbed[idx].data_mut()[e] = orig;
                let numeric = (fp - fm) / (2.0 * self.step);
                let diff = (numeric - analytic[e]).abs();
                rep.max_abs_analytic = rep.max_abs_analytic.max(analytic[e].abs());
                rep.max_abs_numeric = rep.max_abs_numeric.max(numeric.abs());
                if diff > rep.max_abs_diff {
                    rep.max_abs_diff = diff;
                    rep.worst_entry = e;
                }
            }
            let scale = rep.max_abs_analytic.max(rep.max_abs_numeric);
            rep.rel_error = if scale > 0.0 { rep.max_abs_diff / scale } else { 0.0 };
            reports.push(rep);
        }
        Ok(GradCheckReport {
            inputs: reports,
            tolerance: self.tolerance,
        })
    }
}

/// Checks `f` at `inputs` with every entry perturbed.
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    GradCheck {
        step,
        tolerance,
        max_entries: None,
    }
    .run(f, inputs)
}
