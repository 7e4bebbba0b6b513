//! Finite-difference verification of reverse-mode gradients.
//!
//! The checker rebuilds the graph from scratch for every probe, so the
//! forward function must be a pure, deterministic function of its inputs.
//! Double precision and a central difference keep the oracle error well
//! below the tolerances the rest of the crate asserts.

use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Per-input maximum relative error between reverse-mode and central
/// finite-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_input: Vec<(String, f64)>,
    pub max_rel_err: f64,
    /// Smallest kink margin observed on the baseline forward pass (see
    /// [`Graph::fd_sensitivity`]); finite differences are unreliable when
    /// this is close to the probe step.
    pub fd_margin: f64,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Compares reverse-mode gradients of `build`'s scalar output against
/// central finite differences with step `h`, for every element of every
/// input. Relative error uses a unit floor, i.e. `|a-b| / max(|a|,|b|,1)`.
///
/// Inputs should be small (dims of at most a few units) to keep the
/// element-by-element oracle tractable.
pub fn grad_check<F>(
    build: F,
    inputs: &[Tensor<f64>],
    names: &[&str],
    h: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    if inputs.len() != names.len() {
        return Err(Error::Parameter(format!(
            "{} inputs but {} names",
            inputs.len(),
            names.len()
        )));
    }
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::Parameter(format!("step must be positive, got {h}")));
    }

    let eval = |tensors: &[Tensor<f64>]| -> Result<(f64, f64)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors
            .iter()
            .map(|t| g.leaf(t.clone()))
            .collect::<Result<_>>()?;
        let out = build(&mut g, &ids)?;
        let loss = g.value(out).item()?;
        Ok((loss, g.fd_sensitivity()))
    };

    // Reverse-mode gradients on the baseline point.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.set_requires_grad(true);
            g.leaf(t)
        })
        .collect::<Result<_>>()?;
    let out = build(&mut g, &ids)?;
    g.value(out).item()?;
    let fd_margin = g.fd_sensitivity();
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            g.grad(id)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; g.value(id).numel()])
        })
        .collect();
    drop(g);

    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut max_rel = 0.0f64;
    for (i, name) in names.iter().enumerate() {
        let mut worst = 0.0f64;
        for e in 0..inputs[i].numel() {
            let orig = probe[i].data()[e];
            probe[i].data_mut()[e] = orig + h;
            let (up, _) = eval(&probe)?;
            probe[i].data_mut()[e] = orig - h;
            let (down, _) = eval(&probe)?;
            probe[i].data_mut()[e] = orig;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(analytic[i][e], fd));
        }
        per_input.push((name.to_string(), worst));
        max_rel = max_rel.max(worst);
    }

    Ok(GradCheckReport {
        per_input,
        max_rel_err: max_rel,
        fd_margin,
    })
}
