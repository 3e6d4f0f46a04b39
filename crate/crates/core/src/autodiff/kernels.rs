//! Forward kernels for every graph operation. Each kernel takes already
//! shape-checked inputs and returns a fresh tensor.

use super::tensor::{numel, strides, Tensor};

/// Static geometry of one 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

/// Spatial padding rule for [`conv2d`](super::Graph::conv2d).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output size `ceil(in / stride)`, padding split with the extra row/column at the end.
    Same,
    /// No padding; the kernel must fit.
    Valid,
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        (in_h, in_w): (usize, usize),
        (kernel_h, kernel_w): (usize, usize),
        stride: usize,
        padding: Padding,
    ) -> Option<Self> {
        if stride == 0 {
            return None;
        }
        let axis = |input: usize, k: usize| -> Option<(usize, usize)> {
            match padding {
                Padding::Valid => {
                    if k > input {
                        None
                    } else {
                        Some(((input - k) / stride + 1, 0))
                    }
                }
                Padding::Same => {
                    let out = input.div_ceil(stride);
                    let total = ((out - 1) * stride + k).saturating_sub(input);
                    Some((out, total / 2))
                }
            }
        };
        let (out_h, pad_top) = axis(in_h, kernel_h)?;
        let (out_w, pad_left) = axis(in_w, kernel_w)?;
        Some(ConvGeometry {
            in_channels,
            out_channels,
            in_h,
            in_w,
            kernel_h,
            kernel_w,
            out_h,
            out_w,
            stride,
            pad_top,
            pad_left,
        })
    }

    /// Input row/column touched by output position `o` and kernel offset `k`, if in bounds.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
        let pos = (o * stride + k).checked_sub(pad)?;
        (pos < limit).then_some(pos)
    }
}

pub fn conv2d(x: &Tensor, w: &Tensor, g: &ConvGeometry) -> Tensor {
    let n = x.shape()[0];
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0; n * g.out_channels * g.out_h * g.out_w];
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let k_plane = g.kernel_h * g.kernel_w;
    for b in 0..n {
        for o in 0..g.out_channels {
            let out_base = (b * g.out_channels + o) * out_plane;
            for i in 0..g.in_channels {
                let x_base = (b * g.in_channels + i) * in_plane;
                let w_base = (o * g.in_channels + i) * k_plane;
                for ky in 0..g.kernel_h {
                    for kx in 0..g.kernel_w {
                        let wv = wd[w_base + ky * g.kernel_w + kx];
                        for oy in 0..g.out_h {
                            let Some(y) = ConvGeometry::src(oy, ky, g.stride, g.pad_top, g.in_h)
                            else {
                                continue;
                            };
                            let row = out_base + oy * g.out_w;
                            for ox in 0..g.out_w {
                                if let Some(xx) =
                                    ConvGeometry::src(ox, kx, g.stride, g.pad_left, g.in_w)
                                {
                                    out[row + ox] += wv * xd[x_base + y * g.in_w + xx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![n, g.out_channels, g.out_h, g.out_w], out)
}

/// Adjoint of [`conv2d`] with respect to its input: scatters `grad` back through `w`.
pub fn conv2d_input_grad(grad: &Tensor, w: &Tensor, g: &ConvGeometry) -> Tensor {
    let n = grad.shape()[0];
    let (gd, wd) = (grad.data(), w.data());
    let mut out = vec![0.0; n * g.in_channels * g.in_h * g.in_w];
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let k_plane = g.kernel_h * g.kernel_w;
    for b in 0..n {
        for o in 0..g.out_channels {
            let g_base = (b * g.out_channels + o) * out_plane;
            for i in 0..g.in_channels {
                let x_base = (b * g.in_channels + i) * in_plane;
                let w_base = (o * g.in_channels + i) * k_plane;
                for ky in 0..g.kernel_h {
                    for kx in 0..g.kernel_w {
                        let wv = wd[w_base + ky * g.kernel_w + kx];
                        for oy in 0..g.out_h {
                            let Some(y) = ConvGeometry::src(oy, ky, g.stride, g.pad_top, g.in_h)
                            else {
                                continue;
                            };
                            for ox in 0..g.out_w {
                                if let Some(xx) =
                                    ConvGeometry::src(ox, kx, g.stride, g.pad_left, g.in_w)
                                {
                                    out[x_base + y * g.in_w + xx] +=
                                        wv * gd[g_base + oy * g.out_w + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![n, g.in_channels, g.in_h, g.in_w], out)
}

/// Adjoint of [`conv2d`] with respect to its kernel: correlates `x` with `grad`.
pub fn conv2d_kernel_grad(x: &Tensor, grad: &Tensor, g: &ConvGeometry) -> Tensor {
    let n = x.shape()[0];
    let (xd, gd) = (x.data(), grad.data());
    let mut out = vec![0.0; g.out_channels * g.in_channels * g.kernel_h * g.kernel_w];
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let k_plane = g.kernel_h * g.kernel_w;
    for b in 0..n {
        for o in 0..g.out_channels {
            let g_base = (b * g.out_channels + o) * out_plane;
            for i in 0..g.in_channels {
                let x_base = (b * g.in_channels + i) * in_plane;
                let w_base = (o * g.in_channels + i) * k_plane;
                for ky in 0..g.kernel_h {
                    for kx in 0..g.kernel_w {
                        let mut acc = 0.0;
                        for oy in 0..g.out_h {
                            let Some(y) = ConvGeometry::src(oy, ky, g.stride, g.pad_top, g.in_h)
                            else {
                                continue;
                            };
                            for ox in 0..g.out_w {
                                if let Some(xx) =
                                    ConvGeometry::src(ox, kx, g.stride, g.pad_left, g.in_w)
                                {
                                    acc += xd[x_base + y * g.in_w + xx]
                                        * gd[g_base + oy * g.out_w + ox];
                                }
                            }
                        }
                        out[w_base + ky * g.kernel_w + kx] += acc;
                    }
                }
            }
        }
    }
    Tensor::from_parts(
        vec![g.out_channels, g.in_channels, g.kernel_h, g.kernel_w],
        out,
    )
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let ad = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = ad[i * n + j];
        }
    }
    Tensor::from_parts(vec![n, m], out)
}

/// Shape left after removing `axes`, and for each input dimension the stride it
/// contributes to the output flat index (0 for reduced dimensions).
pub fn reduce_layout(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let kept: Vec<usize> = (0..shape.len()).filter(|d| !axes.contains(d)).collect();
    let out_shape: Vec<usize> = kept.iter().map(|&d| shape[d]).collect();
    let out_strides = strides(&out_shape);
    let mut map = vec![0; shape.len()];
    for (pos, &d) in kept.iter().enumerate() {
        map[d] = out_strides[pos];
    }
    (out_shape, map)
}

#[inline]
fn mapped_index(mut flat: usize, shape: &[usize], map: &[usize]) -> usize {
    let mut out = 0;
    for d in (0..shape.len()).rev() {
        out += (flat % shape[d]) * map[d];
        flat /= shape[d];
    }
    out
}

pub fn sum(x: &Tensor, axes: &[usize]) -> Tensor {
    let (out_shape, map) = reduce_layout(x.shape(), axes);
    let mut out = vec![0.0; numel(&out_shape)];
    for (i, &v) in x.data().iter().enumerate() {
        out[mapped_index(i, x.shape(), &map)] += v;
    }
    Tensor::from_parts(out_shape, out)
}

pub fn mean(x: &Tensor, axes: &[usize]) -> Tensor {
    let count: usize = axes.iter().map(|&a| x.shape()[a]).product();
    let s = sum(x, axes);
    s.map(|v| v / count as f64)
}

/// Position (flat input index) of the first extremum of every reduction group.
fn extreme_positions(x: &Tensor, axes: &[usize], max: bool) -> (Vec<usize>, Vec<usize>) {
    let (out_shape, map) = reduce_layout(x.shape(), axes);
    let mut best: Vec<Option<usize>> = vec![None; numel(&out_shape)];
    let d = x.data();
    for (i, &v) in d.iter().enumerate() {
        let slot = &mut best[mapped_index(i, x.shape(), &map)];
        match *slot {
            None => *slot = Some(i),
            Some(j) => {
                let better = if max { v > d[j] } else { v < d[j] };
                if better {
                    *slot = Some(i);
                }
            }
        }
    }
    (out_shape, best.into_iter().map(|b| b.unwrap_or(0)).collect())
}

pub fn extreme(x: &Tensor, axes: &[usize], max: bool) -> Tensor {
    let (out_shape, pos) = extreme_positions(x, axes, max);
    Tensor::from_parts(out_shape, pos.iter().map(|&p| x.data()[p]).collect())
}

/// One-hot indicator of the first extremum within each reduction group.
pub fn extreme_mask(x: &Tensor, axes: &[usize], max: bool) -> Tensor {
    let (_, pos) = extreme_positions(x, axes, max);
    let mut out = vec![0.0; x.numel()];
    for p in pos {
        out[p] = 1.0;
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub fn broadcast_to(x: &Tensor, shape: &[usize]) -> Tensor {
    let offset = shape.len() - x.shape().len();
    let in_strides = strides(x.shape());
    let mut map = vec![0; shape.len()];
    for (d, &s) in x.shape().iter().enumerate() {
        if s != 1 {
            map[d + offset] = in_strides[d];
        }
    }
    let data = x.data();
    let out = (0..numel(shape))
        .map(|i| data[mapped_index(i, shape, &map)])
        .collect();
    Tensor::from_parts(shape.to_vec(), out)
}

pub fn slice(x: &Tensor, axis: usize, start: usize, end: usize) -> Tensor {
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let len = end - start;
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * shape[axis] * inner;
        out.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    Tensor::from_parts(out_shape, out)
}

/// Embeds `x` at `start` along `axis` of a zero tensor whose axis length is `full`.
pub fn unslice(x: &Tensor, axis: usize, start: usize, full: usize) -> Tensor {
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let len = shape[axis];
    let mut out_shape = shape.to_vec();
    out_shape[axis] = full;
    let mut out = vec![0.0; numel(&out_shape)];
    for o in 0..outer {
        let src = &x.data()[o * len * inner..(o + 1) * len * inner];
        let dst = o * full * inner + start * inner;
        out[dst..dst + len * inner].copy_from_slice(src);
    }
    Tensor::from_parts(out_shape, out)
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; n * c];
    for r in 0..n {
        let row = &x.data()[r * c..(r + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &v) in out[r * c..(r + 1) * c].iter_mut().zip(row) {
            *o = (v - m).exp();
            z += *o;
        }
        for o in &mut out[r * c..(r + 1) * c] {
            *o /= z;
        }
    }
    Tensor::from_parts(vec![n, c], out)
}

/// Mean over rows of `-log softmax(row)[label]`, stabilized by max subtraction.
/// Labels must already be validated.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Tensor {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits.data()[r * c..(r + 1) * c];
        let mut top = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[top] {
                top = j;
            }
        }
        let m = row[top];
        // log-sum-exp minus m, as log1p of the non-maximal terms
        let rest: f64 = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != top)
            .map(|(_, &v)| (v - m).exp())
            .sum();
        total += rest.ln_1p() + (m - row[label]);
    }
    Tensor::scalar(total / n as f64)
}

pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut out = vec![0.0; labels.len() * classes];
    for (r, &l) in labels.iter().enumerate() {
        out[r * classes + l] = 1.0;
    }
    Tensor::from_parts(vec![labels.len(), classes], out)
}

pub fn argmax_rows(x: &Tensor) -> Tensor {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let out = (0..n)
        .map(|r| {
            let row = &x.data()[r * c..(r + 1) * c];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best as f64
        })
        .collect();
    Tensor::from_parts(vec![n], out)
}

pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let out = x
        .data()
        .chunks_exact(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect();
    Tensor::from_parts(vec![n, c], out)
}

pub fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_geometry() {
        let g = ConvGeometry::new(1, 1, (32, 32), (3, 3), 2, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.out_w, g.pad_top, g.pad_left), (16, 16, 0, 0));
        let g = ConvGeometry::new(1, 1, (5, 5), (3, 3), 1, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.pad_top), (5, 1));
        assert!(ConvGeometry::new(1, 1, (2, 2), (3, 3), 1, Padding::Valid).is_none());
    }

    #[test]
    fn reductions_over_axes() {
        let x = Tensor::new(vec![2, 3], vec![1.0, 5.0, 3.0, 4.0, 2.0, 6.0]).unwrap();
        assert_eq!(sum(&x, &[1]).data(), &[9.0, 12.0]);
        assert_eq!(sum(&x, &[0]).data(), &[5.0, 7.0, 9.0]);
        assert_eq!(extreme(&x, &[1], true).data(), &[5.0, 6.0]);
        assert_eq!(extreme(&x, &[0, 1], false).data(), &[1.0]);
        assert_eq!(
            extreme_mask(&x, &[1], true).data(),
            &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn slice_unslice_roundtrip() {
        let x = Tensor::new(vec![2, 4], (0..8).map(f64::from).collect()).unwrap();
        let s = slice(&x, 1, 1, 3);
        assert_eq!(s.data(), &[1.0, 2.0, 5.0, 6.0]);
        let u = unslice(&s, 1, 1, 4);
        assert_eq!(u.data(), &[0.0, 1.0, 2.0, 0.0, 0.0, 5.0, 6.0, 0.0]);
    }

    #[test]
    fn broadcast_trailing_alignment() {
        let b = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let out = broadcast_to(&b, &[2, 3]);
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let col = Tensor::new(vec![2, 1], vec![7.0, 8.0]).unwrap();
        assert_eq!(broadcast_to(&col, &[2, 2]).data(), &[7.0, 7.0, 8.0, 8.0]);
    }
}
