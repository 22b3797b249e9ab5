//! Central finite-difference gradient verification.
//!
//! The harness rebuilds the graph from scratch for every probe, so the
//! numeric gradient is independent of the backward implementation it checks.
//! Complex tensors are perturbed slot by slot (real and imaginary parts
//! separately), matching the packed-pair gradient convention.

use super::{Graph, Tensor, Var};
use crate::error::Result;
use crate::rng::RngStream;

/// Builds a scalar loss from leaf vars; called many times per check.
pub type LossBuilder<'a> = &'a dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

pub struct CheckReport {
    /// Worst |analytic - numeric| / max(1, ||numeric||_inf) over all probes.
    pub max_rel_err: f64,
    pub probes: usize,
}

fn eval(build: LossBuilder, inputs: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    Ok(g.value(loss).data[0])
}

/// Compare analytic gradients against central finite differences.
///
/// `max_probes_per_input` bounds the number of perturbed slots per input
/// (chosen deterministically from `seed`); `None` probes every slot.
pub fn check(
    build: LossBuilder,
    inputs: &[Tensor],
    h: f64,
    max_probes_per_input: Option<usize>,
    seed: u64,
) -> Result<CheckReport> {
    // Analytic pass.
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.tensor(&g, v)).collect();

    let gnorm = analytic
        .iter()
        .flat_map(|t| t.data.iter())
        .fold(0.0f64, |m, x| m.max(x.abs()));
    let denom = gnorm.max(1.0);

    let mut rng = RngStream::derive(seed, "gradcheck-probes");
    let mut max_rel = 0.0f64;
    let mut probes = 0usize;
    for (i, t) in inputs.iter().enumerate() {
        let slots = t.data.len();
        let picked: Vec<usize> = match max_probes_per_input {
            Some(k) if k < slots => {
                let mut idx: Vec<usize> = (0..slots).collect();
                rng.shuffle(&mut idx);
                idx.truncate(k);
                idx
            }
            _ => (0..slots).collect(),
        };
        for j in picked {
            let mut plus = inputs.to_vec();
            plus[i].data[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data[j] -= h;
            let numeric = (eval(build, &plus)? - eval(build, &minus)?) / (2.0 * h);
            let rel = (analytic[i].data[j] - numeric).abs() / denom;
            max_rel = max_rel.max(rel);
            probes += 1;
        }
    }
    Ok(CheckReport {
        max_rel_err: max_rel,
        probes,
    })
}

/// Convenience wrapper asserting the spec tolerance.
pub fn assert_grads_match(
    build: LossBuilder,
    inputs: &[Tensor],
    tol: f64,
    max_probes_per_input: Option<usize>,
    seed: u64,
) {
    let report = check(build, inputs, 1e-5, max_probes_per_input, seed)
        .expect("gradient check forward/backward failed");
    assert!(
        report.max_rel_err < tol,
        "gradient mismatch: max relative error {:.3e} over {} probes (tol {tol:.1e})",
        report.max_rel_err,
        report.probes
    );
}
