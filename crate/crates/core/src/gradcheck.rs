//! Central finite-difference gradient verification (f64).
//!
//! Used by the test suites as the independent oracle for every analytic
//! gradient: perturb one element at a time, rebuild the forward pass, and
//! compare (f(x+h) - f(x-h)) / 2h against the tape's gradient.

use rand::Rng;

use crate::error::Result;
use crate::graph::Graph;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Relative error with a small floor so near-zero pairs compare on an
/// absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Check analytic gradients of `build` (a scalar-valued forward pass over
/// `params`) against central differences with step `h`.
///
/// Dense check for tensors up to `dense_limit` elements; larger tensors are
/// probed at `samples` random positions.
pub fn finite_diff_check<F>(
    params: &[Tensor<f64>],
    build: F,
    h: f64,
    dense_limit: usize,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<GradReport>
where
    F: Fn(&Graph<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let params: Vec<Tensor<f64>> = params.iter().map(|p| p.detach().with_grad()).collect();

    let graph = Graph::new();
    let loss = build(&graph, &params)?;
    let refs: Vec<&Tensor<f64>> = params.iter().collect();
    let grads = graph.backward(&loss, &refs, false)?;

    // Recording stays on: some forward passes (grad-norm penalties) take
    // gradients internally and need the tape even during FD evaluation.
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        Ok(build(&g, ps)?.scalar_value())
    };

    let mut report = GradReport { max_rel_err: 0.0, checked: 0, worst_analytic: 0.0, worst_numeric: 0.0 };
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        let idxs: Vec<usize> = if n <= dense_limit {
            (0..n).collect()
        } else {
            (0..samples).map(|_| rng.gen_range(0..n)).collect()
        };
        for j in idxs {
            let perturbed = |delta: f64| -> Vec<Tensor<f64>> {
                params
                    .iter()
                    .enumerate()
                    .map(|(qi, q)| {
                        if qi == pi {
                            let mut data = q.data().to_vec();
                            data[j] += delta;
                            Tensor::from_vec(q.shape().to_vec(), data).unwrap()
                        } else {
                            q.clone()
                        }
                    })
                    .collect()
            };
            let fp = eval(&perturbed(h))?;
            let fm = eval(&perturbed(-h))?;
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grads[pi].data()[j];
            let e = rel_err(analytic, numeric);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst_analytic = analytic;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
