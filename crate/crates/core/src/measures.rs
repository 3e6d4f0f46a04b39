//! CAM interpretability measures: entropy, ellipsoidal area and dispersion.
//!
//! Lower entropy, lower ellipsoidal area and higher dispersion indicate a more
//! concentrated, more decisive map. All detached functions here are pure.

use crate::autodiff::{Graph, GraphError, NodeId};
use crate::gradcam::CamMap;

/// Added to the map sum before normalizing.
pub const NORM_EPS: f64 = 1e-12;
/// Offset inside the entropy logarithm, so that `0 * ln 0` evaluates to 0.
pub const LOG_EPS: f64 = 1e-12;
/// Maps whose sum falls below this are treated as degenerate (uniform fallback).
pub const DEGENERATE_SUM: f64 = 1e-9;
/// Lower bound on the squared mean in the dispersion denominator.
pub const DISPERSION_EPS: f64 = 1e-12;
/// Covariance eigenvalues smaller than this in magnitude are clamped to 0.
pub const EIGEN_CLAMP: f64 = 1e-12;

/// A CAM normalized to a probability mass over its pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// Set when the map summed to (nearly) zero and the uniform mass was substituted.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasureRecord {
    /// CAM entropy, nats.
    pub ce: f64,
    /// CAM ellipsoidal area, squared map pixels.
    pub ca: f64,
    /// CAM dispersion, dimensionless.
    pub cd: f64,
    pub degenerate: bool,
}

pub fn normalize_map(map: &CamMap) -> NormalizedMap {
    let total: f64 = map.values().iter().sum();
    let n = map.values().len();
    let (values, degenerate) = if total < DEGENERATE_SUM {
        (vec![1.0 / n as f64; n], true)
    } else {
        let denom = total + NORM_EPS;
        (map.values().iter().map(|v| v / denom).collect(), false)
    };
    NormalizedMap {
        height: map.height(),
        width: map.width(),
        values,
        degenerate,
    }
}

/// Shannon entropy (nats) of the normalized map.
pub fn cam_entropy(map: &CamMap) -> f64 {
    entropy_of(&normalize_map(map).values)
}

fn entropy_of(p: &[f64]) -> f64 {
    let h: f64 = p.iter().map(|&q| q * (q + LOG_EPS).ln()).sum();
    (-h).max(0.0)
}

/// Population covariance of the pixel coordinates `(row, col)` under the
/// probability mass `p` (row-major, `height x width`).
pub fn coordinate_covariance(p: &[f64], height: usize, width: usize) -> [[f64; 2]; 2] {
    let total: f64 = p.iter().sum();
    let (mut mi, mut mj) = (0.0, 0.0);
    for (k, &q) in p.iter().enumerate() {
        mi += q * (k / width) as f64;
        mj += q * (k % width) as f64;
    }
    mi /= total;
    mj /= total;
    let (mut sii, mut sjj, mut sij) = (0.0, 0.0, 0.0);
    for (k, &q) in p.iter().enumerate() {
        let di = (k / width) as f64 - mi;
        let dj = (k % width) as f64 - mj;
        sii += q * di * di;
        sjj += q * dj * dj;
        sij += q * di * dj;
    }
    debug_assert_eq!(p.len(), height * width);
    [[sii / total, sij / total], [sij / total, sjj / total]]
}

/// Eigenvalues `(larger, smaller)` of a symmetric 2x2 matrix, closed form.
pub fn symmetric_eigenvalues(m: [[f64; 2]; 2]) -> (f64, f64) {
    let half_trace = 0.5 * (m[0][0] + m[1][1]);
    let half_diff = 0.5 * (m[0][0] - m[1][1]);
    let disc = half_diff.hypot(m[0][1]);
    (half_trace + disc, half_trace - disc)
}

/// `sqrt(l1 * l2)` of the coordinate covariance under the normalized map.
pub fn cam_ellipsoidal_area(map: &CamMap) -> f64 {
    let p = normalize_map(map);
    area_of(&p)
}

fn area_of(p: &NormalizedMap) -> f64 {
    let cov = coordinate_covariance(&p.values, p.height, p.width);
    let clamp = |l: f64| if l.abs() < EIGEN_CLAMP { 0.0 } else { l.max(0.0) };
    let (l1, l2) = symmetric_eigenvalues(cov);
    (clamp(l1) * clamp(l2)).sqrt()
}

/// Population variance over squared mean of the raw map values.
pub fn cam_dispersion(map: &CamMap) -> f64 {
    let v = map.values();
    let n = v.len() as f64;
    let mu = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    if var == 0.0 {
        return 0.0;
    }
    var / (mu * mu).max(DISPERSION_EPS)
}

/// All three measures, detached.
pub fn measure_all(map: &CamMap) -> MeasureRecord {
    let p = normalize_map(map);
    MeasureRecord {
        ce: entropy_of(&p.values),
        ca: area_of(&p),
        cd: cam_dispersion(map),
        degenerate: p.degenerate,
    }
}

/// Per-sample CAM entropy as graph nodes, for maps shaped `[N, h, w]`.
///
/// Mirrors [`cam_entropy`], including the uniform fallback for maps summing
/// below [`DEGENERATE_SUM`]; the fallback branch carries no gradient.
pub fn entropy_nodes(graph: &mut Graph, maps: NodeId) -> Result<NodeId, GraphError> {
    let shape = graph.shape(maps).to_vec();
    if shape.len() != 3 {
        return Err(GraphError::ShapeMismatch(format!(
            "entropy expects [N, h, w] maps, got {:?}",
            shape
        )));
    }
    let (n, pixels) = (shape[0], shape[1] * shape[2]);
    let totals = graph.sum(maps, &[1, 2])?;
    // 1 where the map is degenerate
    let below = graph.scale(totals, -1.0)?;
    let below = graph.add_scalar(below, DEGENERATE_SUM)?;
    let degenerate = graph.step(below);
    let degenerate = graph.reshape(degenerate, &[n, 1, 1])?;

    let denom = graph.add_scalar(totals, NORM_EPS)?;
    let denom = graph.reshape(denom, &[n, 1, 1])?;
    let normalized = graph.div(maps, denom)?;
    let keep = graph.scale(degenerate, -1.0)?;
    let keep = graph.add_scalar(keep, 1.0)?;
    let kept = graph.mul(normalized, keep)?;
    let uniform = graph.scale(degenerate, 1.0 / pixels as f64)?;
    let p = graph.add(kept, uniform)?;

    let logp = graph.safe_log(p, LOG_EPS)?;
    let plogp = graph.mul(p, logp)?;
    let h = graph.sum(plogp, &[1, 2])?;
    Ok(graph.neg(h))
}
