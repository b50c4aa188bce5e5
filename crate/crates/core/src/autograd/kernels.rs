// Dense kernels shared by the forward and backward passes.

use crate::error::{shape_err, Result};

use super::Tensor;

/// `out += op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    out: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    // Strides of the stored layout; a transposed operand swaps them.
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slices cover m*k, k*n and m*n elements under the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn transpose(t: &Tensor) -> Result<Tensor> {
    if t.rank() != 2 {
        return Err(shape_err!("transpose needs rank 2, got {:?}", t.shape()));
    }
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let src = t.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out)
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err!("incompatible shapes {:?} and {:?}", a, b)),
        };
    }
    Ok(out)
}

/// For every flat index of `out_shape`, the flat index of the source element.
fn broadcast_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let mut in_strides = vec![0usize; rank];
    let mut stride = 1;
    for i in (0..in_shape.len()).rev() {
        in_strides[i + offset] = if in_shape[i] == 1 { 0 } else { stride };
        stride *= in_shape[i];
    }
    let n: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        map.push(idx.iter().zip(&in_strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

/// Input strides `(row, col)` when both shapes fit in two dimensions.
fn strides_2d(in_shape: &[usize], out_shape: &[usize]) -> Option<(usize, usize, usize, usize)> {
    if out_shape.len() > 2 || in_shape.len() > out_shape.len() {
        return None;
    }
    let pad = |s: &[usize]| -> [usize; 2] {
        match s.len() {
            0 => [1, 1],
            1 => [1, s[0]],
            _ => [s[0], s[1]],
        }
    };
    let (i, o) = (pad(in_shape), pad(out_shape));
    let cs = usize::from(i[1] != 1);
    let rs = if i[0] == 1 { 0 } else { i[1] };
    Some((o[0], o[1], rs, cs))
}

pub(crate) fn broadcast(t: &Tensor, shape: &[usize]) -> Tensor {
    let src = t.data();
    let data = match strides_2d(t.shape(), shape) {
        Some((r, c, rs, cs)) => {
            let mut d = Vec::with_capacity(r * c);
            for i in 0..r {
                let base = i * rs;
                if cs == 1 {
                    d.extend_from_slice(&src[base..base + c]);
                } else {
                    d.extend(std::iter::repeat(src[base]).take(c));
                }
            }
            d
        }
        None => broadcast_map(t.shape(), shape).into_iter().map(|i| src[i]).collect(),
    };
    Tensor::new(shape.to_vec(), data).expect("broadcast map covers the output")
}

pub(crate) fn unbroadcast(in_shape: &[usize], grad: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(in_shape);
    let dst = out.data_mut();
    let g = grad.data();
    match strides_2d(in_shape, grad.shape()) {
        Some((r, c, rs, cs)) => {
            for i in 0..r {
                let row = &g[i * c..(i + 1) * c];
                let base = i * rs;
                if cs == 1 {
                    for (d, v) in dst[base..base + c].iter_mut().zip(row) {
                        *d += v;
                    }
                } else {
                    dst[base] += row.iter().sum::<f64>();
                }
            }
        }
        None => {
            for (o, i) in broadcast_map(in_shape, grad.shape()).into_iter().enumerate() {
                dst[i] += g[o];
            }
        }
    }
    out
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn reduce(t: &Tensor, axis: Option<usize>, mean: bool) -> Result<Tensor> {
    match axis {
        None => {
            let s: f64 = t.data().iter().sum();
            let n = t.numel().max(1) as f64;
            Ok(Tensor::scalar(if mean { s / n } else { s }))
        }
        Some(ax) => {
            if ax >= t.rank() {
                return Err(shape_err!("axis {} out of range for {:?}", ax, t.shape()));
            }
            let (outer, n, inner) = split_axis(t.shape(), ax);
            let mut out = vec![0.0; outer * inner];
            let src = t.data();
            for o in 0..outer {
                let dst = &mut out[o * inner..(o + 1) * inner];
                for row in src[o * n * inner..(o + 1) * n * inner].chunks_exact(inner.max(1)) {
                    for (d, v) in dst.iter_mut().zip(row) {
                        *d += v;
                    }
                }
            }
            if mean && n > 0 {
                out.iter_mut().for_each(|v| *v /= n as f64);
            }
            let mut shape = t.shape().to_vec();
            shape[ax] = 1;
            Tensor::new(shape, out)
        }
    }
}

pub(crate) fn reduce_backward(in_shape: &[usize], grad: &Tensor, axis: Option<usize>, mean: bool) -> Tensor {
    let numel: usize = in_shape.iter().product();
    match axis {
        None => {
            let g = grad.item() / if mean { numel.max(1) as f64 } else { 1.0 };
            Tensor::full(in_shape, g)
        }
        Some(ax) => {
            let (outer, n, inner) = split_axis(in_shape, ax);
            let scale = if mean { 1.0 / n as f64 } else { 1.0 };
            let mut out = vec![0.0; numel];
            let g = grad.data();
            for o in 0..outer {
                let src = &g[o * inner..(o + 1) * inner];
                for row in out[o * n * inner..(o + 1) * n * inner].chunks_exact_mut(inner.max(1)) {
                    for (d, v) in row.iter_mut().zip(src) {
                        *d = v * scale;
                    }
                }
            }
            Tensor::new(in_shape.to_vec(), out).expect("shape preserved")
        }
    }
}

pub(crate) fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
    if axis >= first.rank() {
        return Err(shape_err!("concat axis {} out of range for {:?}", axis, first.shape()));
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = 0;
    for p in parts {
        let ok = p.rank() == first.rank()
            && p.shape().iter().zip(first.shape()).enumerate().all(|(d, (a, b))| d == axis || a == b);
        if !ok {
            return Err(shape_err!("concat {:?} with {:?} along {}", first.shape(), p.shape(), axis));
        }
        shape[axis] += p.shape()[axis];
    }
    let (outer, total, inner) = split_axis(&shape, axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let n = p.shape()[axis];
            out.extend_from_slice(&p.data()[o * n * inner..(o + 1) * n * inner]);
        }
    }
    Tensor::new(shape, out)
}

pub(crate) fn slice(t: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= t.rank() || start + len > t.shape()[axis] {
        return Err(shape_err!("slice [{}, {}) on axis {} of {:?}", start, start + len, axis, t.shape()));
    }
    let (outer, n, inner) = split_axis(t.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * n + start) * inner;
        out.extend_from_slice(&t.data()[base..base + len * inner]);
    }
    let mut shape = t.shape().to_vec();
    shape[axis] = len;
    Tensor::new(shape, out)
}

pub(crate) fn unslice(in_shape: &[usize], grad: &Tensor, axis: usize, start: usize) -> Tensor {
    let (outer, n, inner) = split_axis(in_shape, axis);
    let len = grad.shape()[axis];
    let mut out = Tensor::zeros(in_shape);
    let dst = out.data_mut();
    for o in 0..outer {
        let base = (o * n + start) * inner;
        dst[base..base + len * inner].copy_from_slice(&grad.data()[o * len * inner..(o + 1) * len * inner]);
    }
    out
}
