//! GradCAM weights and maps as graph expressions, plus the min-max display
//! normalization and range statistics of a map.
//!
//! For class `c`, `alpha_k = (1/Z) sum_ij dy_c / dA^k_ij` with `Z = h * w`, and
//! the map is `relu(sum_k alpha_k A^k)`. Both stay differentiable with respect
//! to the model parameters; differentiating the map means differentiating a
//! gradient.

use crate::autodiff::{GraphError, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::network::ForwardTrace;

/// A nonnegative `height x width` class activation map.
#[derive(Debug, Clone, PartialEq)]
pub struct CamMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    pub class_index: usize,
    /// Whether the map was read off a live graph expression.
    pub differentiable: bool,
}

impl CamMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::InvalidMap(format!(
                "{} values for a {}x{} map",
                values.len(),
                height,
                width
            )));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidMap(format!("value {v} is negative or non-finite")));
        }
        Ok(CamMap {
            height,
            width,
            values,
            class_index: 0,
            differentiable: false,
        })
    }

    pub fn with_class(mut self, class_index: usize) -> Self {
        self.class_index = class_index;
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Row-major values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Max, min and spread of a map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CamRangeStats {
    pub max: f64,
    pub min: f64,
    pub absolute_range: f64,
    /// `(max - min) / min`; absent when `min <= 0` (unless the map is constant).
    pub relative_range: Option<f64>,
}

impl CamRangeStats {
    pub fn from_extremes(max: f64, min: f64) -> Self {
        let absolute_range = (max - min).max(0.0);
        let relative_range = if absolute_range == 0.0 {
            Some(0.0)
        } else if min > 0.0 {
            Some(absolute_range / min)
        } else {
            None
        };
        CamRangeStats {
            max,
            min,
            absolute_range,
            relative_range,
        }
    }
}

pub fn cam_range_stats(map: &CamMap) -> CamRangeStats {
    CamRangeStats::from_extremes(map.max(), map.min())
}

/// Min-max rescaled map for display.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// The input was constant; `values` are all zero.
    pub constant: bool,
}

/// `(M - min M) / (max M - min M)`. A constant map yields zeros and sets the flag.
pub fn visual_normalize(map: &CamMap) -> VisualMap {
    let (lo, hi) = (map.min(), map.max());
    let constant = hi <= lo;
    let values = if constant {
        vec![0.0; map.values.len()]
    } else {
        map.values.iter().map(|v| (v - lo) / (hi - lo)).collect()
    };
    VisualMap {
        height: map.height,
        width: map.width,
        values,
        constant,
    }
}

/// Graph nodes of a batch of GradCAM computations.
#[derive(Debug, Clone, Copy)]
pub struct CamNodes {
    /// `dy_c / dA` per sample, `[N, K, h, w]`.
    pub activation_grads: NodeId,
    /// Channel weights, `[N, K]`.
    pub alpha: NodeId,
    /// Maps, `[N, h, w]`.
    pub maps: NodeId,
}

/// Appends GradCAM for every sample of the trace, each for its own class.
///
/// `classes` is a `[N]` node of class indices. Because the samples of a batch
/// are computed independently, the gradient of `sum_n y[n, classes[n]]` with
/// respect to `A` holds each sample's own `dy_c / dA` in its row; nothing is
/// mixed across samples.
pub fn cam_nodes(trace: &mut ForwardTrace, classes: NodeId) -> Result<CamNodes> {
    let g = &mut trace.graph;
    let c = trace.arch.classes;
    let selector = g.one_hot(classes, c)?;
    let picked = g.mul(trace.logits, selector)?;
    let score = g.sum_all(picked);
    let activation_grads = g.gradients(score, &[trace.target])?[0];
    let alpha = g.global_avg_pool(activation_grads)?;

    let (n, k, h, w) = {
        let s = g.shape(trace.target);
        (s[0], s[1], s[2], s[3])
    };
    let weights = g.reshape(alpha, &[n, k, 1, 1])?;
    let weighted = g.mul(weights, trace.target)?;
    let combined = g.sum(weighted, &[1])?;
    debug_assert_eq!(g.shape(combined), &[n, h, w]);
    let maps = g.relu(combined);
    Ok(CamNodes {
        activation_grads,
        alpha,
        maps,
    })
}

fn check_indices(trace: &ForwardTrace, class_index: usize, sample_index: usize) -> Result<()> {
    if class_index >= trace.arch.classes {
        return Err(Error::ClassOutOfRange {
            class: class_index,
            classes: trace.arch.classes,
        });
    }
    if sample_index >= trace.batch {
        return Err(Error::SampleOutOfRange {
            index: sample_index,
            batch: trace.batch,
        });
    }
    Ok(())
}

fn class_nodes(trace: &mut ForwardTrace, class_index: usize) -> Result<CamNodes> {
    let classes = trace
        .graph
        .constant(Tensor::vector(vec![class_index as f64; trace.batch]));
    cam_nodes(trace, classes)
}

/// `alpha_k` for one sample and class, evaluated with the trace's bindings.
pub fn alpha_weights(
    trace: &mut ForwardTrace,
    class_index: usize,
    sample_index: usize,
) -> Result<Vec<f64>> {
    check_indices(trace, class_index, sample_index)?;
    let nodes = class_nodes(trace, class_index)?;
    let alpha = trace.eval(&[nodes.alpha])?.remove(0);
    let k = alpha.shape()[1];
    Ok(alpha.data()[sample_index * k..(sample_index + 1) * k].to_vec())
}

/// The GradCAM map of one sample for one class.
pub fn gradcam_map(
    trace: &mut ForwardTrace,
    class_index: usize,
    sample_index: usize,
) -> Result<CamMap> {
    check_indices(trace, class_index, sample_index)?;
    let nodes = class_nodes(trace, class_index)?;
    let maps = trace.eval(&[nodes.maps])?.remove(0);
    let mut map = split_maps(&maps)?.swap_remove(sample_index).with_class(class_index);
    map.differentiable = true;
    Ok(map)
}

/// Splits an evaluated `[N, h, w]` tensor into detached maps.
pub fn split_maps(maps: &Tensor) -> Result<Vec<CamMap>> {
    let s = maps.shape();
    if s.len() != 3 {
        return Err(GraphError::ShapeMismatch(format!("expected [N, h, w] maps, got {:?}", s)).into());
    }
    let plane = s[1] * s[2];
    maps.data()
        .chunks_exact(plane)
        .map(|chunk| CamMap::new(s[1], s[2], chunk.to_vec()))
        .collect()
}
