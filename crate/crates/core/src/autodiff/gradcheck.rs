//! Finite-difference verification of analytic gradients.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference step used in 64-bit mode.
pub const GRADCHECK_STEP: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Probe at most this many elements per input, spread over the tensor.
    /// `None` probes every element.
    pub max_probes: Option<usize>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: GRADCHECK_STEP,
            tolerance: 1e-4,
            max_probes: None,
        }
    }
}

/// Outcome of a gradient check.
///
/// The relative error of an input is `max_k |a_k - n_k| / s`, where `a` and
/// `n` are the analytic and numeric gradients over the probed elements and
/// `s` is the largest magnitude among them. Scaling by the whole input's
/// gradient keeps elements whose true gradient is zero from dividing noise
/// by noise.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: Vec<f64>,
    pub max_abs_error: Vec<f64>,
    pub probes: Vec<usize>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error.iter().all(|&e| e <= self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

/// Checks every element of every input against central differences.
pub fn gradcheck<C>(closure: C, inputs: &[Tensor<f64>], tolerance: f64) -> Result<GradcheckReport>
where
    C: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    gradcheck_with(
        closure,
        inputs,
        &GradcheckOptions {
            tolerance,
            ..Default::default()
        },
    )
}

pub fn gradcheck_with<C>(
    closure: C,
    inputs: &[Tensor<f64>],
    options: &GradcheckOptions,
) -> Result<GradcheckReport>
where
    C: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let out = closure(&mut graph, &vars)?;
    if graph.value(out).len() != 1 {
        return Err(Error::Usage(format!(
            "gradcheck closure must return a scalar, got dims {:?}",
            graph.value(out).dims()
        )));
    }
    graph.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            graph
                .grad(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.dims()))
        })
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vs: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let o = closure(&mut g, &vs)?;
        g.value(o).item()
    };

    let h = options.step;
    let mut report = GradcheckReport {
        max_rel_error: Vec::new(),
        max_abs_error: Vec::new(),
        probes: Vec::new(),
        tolerance: options.tolerance,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let mut pairs = Vec::new();
        for k in probe_positions(n, options.max_probes) {
            let orig = input.data()[k];
            work[i].data_mut()[k] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[k] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[k] = orig;
            pairs.push((analytic[i].data()[k], (plus - minus) / (2.0 * h)));
        }
        let scale = pairs
            .iter()
            .map(|(a, b)| a.abs().max(b.abs()))
            .fold(0.0, f64::max);
        let abs = pairs.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        report.max_abs_error.push(abs);
        report
            .max_rel_error
            .push(if scale > 0.0 { abs / scale } else { 0.0 });
        report.probes.push(pairs.len());
    }
    Ok(report)
}

/// All positions, or `max` of them spread by a golden-ratio sequence so the
/// sample does not alias with channel strides.
fn probe_positions(n: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m > 0 && n > m => {
            let phi = 0.618_033_988_749_894_9_f64;
            let mut seen = vec![false; n];
            let mut out = Vec::with_capacity(m);
            let mut j = 0u64;
            while out.len() < m {
                let k = (((j as f64 * phi).fract()) * n as f64) as usize;
                if !seen[k] {
                    seen[k] = true;
                    out.push(k);
                }
                j += 1;
            }
            out.sort_unstable();
            out
        }
        _ => (0..n).collect(),
    }
}
