//! Finite-difference gradient checking against the graph's own gradients.

use super::{Graph, GraphError, NodeId, Op, Tensor};

/// Settings for [`check_gradients`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Perturbation size of the five-point central stencil.
    pub step: f64,
    /// Entries whose analytic and numeric magnitudes are both below this are
    /// compared absolutely rather than relatively.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            abs_floor: 1e-8,
        }
    }
}

/// Largest discrepancy found by a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_error: f64,
    /// `(position in wrt, flat element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Vec<f64>>,
    pub entries: usize,
}

/// Relative error with an absolute fallback for tiny entries.
pub fn entry_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale < abs_floor {
        diff
    } else {
        diff / scale
    }
}

/// Five-point central difference of `f` at every entry of `x`.
pub fn central_difference(
    mut f: impl FnMut(&[f64]) -> Result<f64, GraphError>,
    x: &[f64],
    h: f64,
) -> Result<Vec<f64>, GraphError> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut at = |d: f64| -> Result<f64, GraphError> {
            probe[i] = x[i] + d;
            let v = f(&probe);
            probe[i] = x[i];
            v
        };
        let (p2, p1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
        out.push((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h));
    }
    Ok(out)
}

/// Compares `d output / d wrt` from [`Graph::gradients`] with finite
/// differences of `output`, perturbing the bound values of the `wrt` inputs.
/// Bindings are restored afterwards.
pub fn check_gradients(
    graph: &mut Graph,
    output: NodeId,
    wrt: &[NodeId],
    cfg: GradCheckConfig,
) -> Result<GradCheckReport, GraphError> {
    let mut base = Vec::with_capacity(wrt.len());
    for &id in wrt {
        match (&graph.nodes[id.0].op, &graph.bindings[id.0]) {
            (Op::Input(_), Some(v)) => base.push(v.clone()),
            (Op::Input(name), None) => {
                return Err(GraphError::UnboundInput {
                    node: id.0,
                    name: name.clone(),
                })
            }
            _ => return Err(GraphError::NotAnInput(id.0)),
        }
    }
    let grads = graph.gradients(output, wrt)?;
    let analytic = graph.eval(&grads)?;

    let mut report = GradCheckReport {
        max_error: 0.0,
        worst: None,
        analytic,
        numeric: Vec::with_capacity(wrt.len()),
        entries: 0,
    };
    for (k, &id) in wrt.iter().enumerate() {
        let shape = base[k].shape().to_vec();
        let numeric = central_difference(
            |x| {
                graph.bind(id, Tensor::from_parts(shape.clone(), x.to_vec()))?;
                let v = graph.eval(&[output])?;
                Ok(v[0].data()[0])
            },
            base[k].data(),
            cfg.step,
        );
        graph.bind(id, base[k].clone())?;
        let numeric = numeric?;
        for (j, (&a, &n)) in report.analytic[k].data().iter().zip(&numeric).enumerate() {
            let e = entry_error(a, n, cfg.abs_floor);
            report.entries += 1;
            if e > report.max_error || report.worst.is_none() {
                report.max_error = report.max_error.max(e);
                report.worst = Some((k, j));
            }
        }
        report.numeric.push(numeric);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stencil_is_exact_on_quartics() {
        let d = central_difference(|x| Ok(x[0].powi(4) + 3.0 * x[1]), &[0.7, -2.0], 1e-2).unwrap();
        assert!((d[0] - 4.0 * 0.7f64.powi(3)).abs() < 1e-10);
        assert!((d[1] - 3.0).abs() < 1e-10);
    }

    #[test]
    fn detects_product_gradient_and_restores_binding() {
        let mut g = Graph::new();
        let x = g.input("x", &[3]).unwrap();
        let y = g.mul(x, x).unwrap();
        let s = g.sum_all(y);
        let v = Tensor::vector(vec![1.0, -0.5, 2.0]);
        g.bind(x, v.clone()).unwrap();
        let r = check_gradients(&mut g, s, &[x], GradCheckConfig::default()).unwrap();
        assert!(r.max_error < 1e-9, "{r:?}");
        assert_eq!(r.entries, 3);
        assert_eq!(g.eval(&[x]).unwrap()[0], v);
    }

    #[test]
    fn constants_are_rejected() {
        let mut g = Graph::new();
        let c = g.scalar(1.0);
        let s = g.sum_all(c);
        assert_eq!(
            check_gradients(&mut g, s, &[c], GradCheckConfig::default()).unwrap_err(),
            GraphError::NotAnInput(c.index())
        );
    }
}
