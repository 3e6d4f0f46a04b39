use super::GraphError;

/// Number of elements described by a shape. The empty shape is a scalar.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        out[d] = out[d + 1] * shape[d + 1];
    }
    out
}

/// Dense row-major `f64` tensor. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, GraphError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(GraphError::InvalidShape(shape));
        }
        if numel(&shape) != data.len() {
            return Err(GraphError::ShapeMismatch(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self, GraphError> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor, GraphError> {
        let first = items
            .first()
            .ok_or_else(|| GraphError::ShapeMismatch("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(GraphError::ShapeMismatch(format!(
                    "stack of {:?} and {:?}",
                    first.shape, t.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor::from_parts(shape, data))
    }

    /// Slices `count` entries along axis 0, starting at `start`, concatenating leading
    /// rows of a batch.
    pub fn rows(&self, start: usize, count: usize) -> Result<Tensor, GraphError> {
        let n = *self.shape.first().unwrap_or(&1);
        if self.shape.is_empty() || count == 0 || start + count > n {
            return Err(GraphError::ShapeMismatch(format!(
                "rows {}..{} of shape {:?}",
                start,
                start + count,
                self.shape
            )));
        }
        let row = self.numel() / n;
        let mut shape = self.shape.clone();
        shape[0] = count;
        Ok(Tensor::from_parts(
            shape,
            self.data[start * row..(start + count) * row].to_vec(),
        ))
    }
}
