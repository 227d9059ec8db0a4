use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Builds the function under test from leaf vars (one per case input).
pub type Builder = Box<dyn for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>>;

/// One finite-difference check: a graph builder plus its 64-bit inputs.
pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Builder,
    pub tolerance: f64,
    /// Cap on perturbed coordinates per input, spread evenly over the tensor.
    pub max_coords: Option<usize>,
}

impl GradCase {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Tensor<f64>>,
        tolerance: f64,
        build: impl for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>> + 'static,
    ) -> Self {
        GradCase {
            name: name.into(),
            inputs,
            build: Box::new(build),
            tolerance,
            max_coords: None,
        }
    }

    pub fn with_max_coords(mut self, n: usize) -> Self {
        self.max_coords = Some(n);
        self
    }
}

#[derive(Clone, Debug)]
pub struct GradEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub error: Option<String>,
}

impl GradEntry {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_rel_error <= self.tolerance
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(GradEntry::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradEntry> {
        self.entries.iter().filter(|e| !e.passed())
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<32} {:>12} {:>10} {:>8}  status",
            "op", "max_rel_err", "tolerance", "coords"
        )?;
        for e in &self.entries {
            let status = match (&e.error, e.passed()) {
                (Some(msg), _) => format!("ERROR {msg}"),
                (None, true) => "ok".into(),
                (None, false) => "FAIL".into(),
            };
            writeln!(
                f,
                "{:<32} {:>12.3e} {:>10.1e} {:>8}  {status}",
                e.name, e.max_rel_error, e.tolerance, e.checked
            )?;
        }
        Ok(())
    }
}

/// Fixed projection applied to non-scalar outputs so every output element
/// contributes with a distinct weight.
fn projection(shape: &[usize]) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn scalar_loss<'g>(g: &'g Graph<f64>, out: Var<'g, f64>) -> Result<Var<'g, f64>> {
    if out.value().is_scalar() {
        return Ok(out);
    }
    let w = g.constant(projection(&out.shape()));
    Ok(out.mul(w)?.sum())
}

fn eval(case: &GradCase, inputs: &[Tensor<f64>]) -> Result<f64> {
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = (case.build)(&g, &vars)?;
    Ok(scalar_loss(&g, out)?.value().item())
}

/// Compares analytic gradients against central differences `(f(x+e) - f(x-e)) / 2e`.
///
/// The relative error of a coordinate is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn check_gradients(case: &GradCase, eps: f64) -> GradEntry {
    let mut entry = GradEntry {
        name: case.name.clone(),
        max_rel_error: 0.0,
        tolerance: case.tolerance,
        checked: 0,
        error: None,
    };
    let analytic = (|| -> Result<Vec<Tensor<f64>>> {
        let g = Graph::new();
        let vars: Vec<_> = case.inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = (case.build)(&g, &vars)?;
        let loss = scalar_loss(&g, out)?;
        let grads = g.backward(loss)?;
        Ok(vars.iter().map(|&v| grads.get_or_zeros(v)).collect())
    })();
    let analytic = match analytic {
        Ok(a) => a,
        Err(e) => {
            entry.error = Some(e.to_string());
            return entry;
        }
    };
    let mut inputs = case.inputs.clone();
    for k in 0..inputs.len() {
        let n = inputs[k].numel();
        let step = case.max_coords.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        for i in (0..n).step_by(step) {
            let orig = inputs[k].data()[i];
            inputs[k].data_mut()[i] = orig + eps;
            let plus = eval(case, &inputs);
            inputs[k].data_mut()[i] = orig - eps;
            let minus = eval(case, &inputs);
            inputs[k].data_mut()[i] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(e), _) | (_, Err(e)) => {
                    entry.error = Some(e.to_string());
                    return entry;
                }
            };
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[k].data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            let rel = (a - numeric).abs() / denom;
            if rel.is_nan() {
                entry.max_rel_error = f64::INFINITY;
            } else {
                entry.max_rel_error = entry.max_rel_error.max(rel);
            }
            entry.checked += 1;
        }
    }
    entry
}
