//! Dense row-major `f64` tensors and the raw kernels the tape is built from.
//!
//! Shape errors here are programmer errors and panic, the same way `ndarray`
//! does. Domain-level validation (loss inputs, batch shapes) happens in the
//! calling modules and is reported through `ReidError`.

use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Self {
        let shape = shape.into();
        assert_eq!(
            numel(&shape),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: f64) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self { shape, data: vec![v; n] }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(&mut f).collect();
        Self { shape, data }
    }

    /// Row-major matrix from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::new(vec![r, c], data)
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(vec![n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        assert_eq!(numel(&shape), self.data.len(), "reshape {:?} -> {:?}", self.shape, shape);
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        assert_eq!(self.rank(), 2);
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    /// Generic strided copy: `out[idx] = self[sum(idx[d] * src_strides[d])]`.
    fn gather_strided(&self, out_shape: &[usize], src_strides: &[usize]) -> Tensor {
        let n = numel(out_shape);
        let mut data = Vec::with_capacity(n);
        let rank = out_shape.len();
        if rank == 0 {
            return Tensor::new(vec![], vec![self.data[0]]);
        }
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        let last = rank - 1;
        let inner = out_shape[last];
        let inner_stride = src_strides[last];
        while data.len() < n {
            if inner_stride == 1 {
                data.extend_from_slice(&self.data[off..off + inner]);
            } else {
                for k in 0..inner {
                    data.push(self.data[off + k * inner_stride]);
                }
            }
            // advance the outer counter
            let mut d = last;
            loop {
                if d == 0 {
                    break;
                }
                d -= 1;
                idx[d] += 1;
                off += src_strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                off -= src_strides[d] * out_shape[d];
                idx[d] = 0;
            }
        }
        Tensor::new(out_shape.to_vec(), data)
    }

    pub fn permute(&self, perm: &[usize]) -> Tensor {
        assert_eq!(perm.len(), self.rank(), "permute rank mismatch");
        let st = strides(&self.shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
        self.gather_strided(&out_shape, &src)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        let bs = broadcast_shape(&self.shape, shape).expect("incompatible broadcast");
        assert_eq!(bs, shape, "cannot broadcast {:?} to {:?}", self.shape, shape);
        let st = strides(&self.shape);
        let off = shape.len() - self.rank();
        let src: Vec<usize> = (0..shape.len())
            .map(|d| {
                if d < off || self.shape[d - off] == 1 {
                    0
                } else {
                    st[d - off]
                }
            })
            .collect();
        self.gather_strided(shape, &src)
    }

    /// Sum over broadcast dimensions so the result has shape `target`.
    pub fn reduce_to(&self, target: &[usize]) -> Tensor {
        if self.shape == target {
            return self.clone();
        }
        let off = self.rank() - target.len();
        let mut cur = self.clone();
        for _ in 0..off {
            cur = cur.sum_axis(0, false);
        }
        for (d, &t) in target.iter().enumerate() {
            if t == 1 && cur.shape[d] != 1 {
                cur = cur.sum_axis(d, true);
            }
        }
        cur.reshape(target.to_vec())
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Tensor {
        let (outer, n, inner) = split_axis(&self.shape, axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for k in 0..n {
                let base = (o * n + k) * inner;
                for (d, s) in dst.iter_mut().zip(&self.data[base..base + inner]) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape.clone();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Tensor::new(shape, data)
    }

    /// Repeat along a size-1 (or removed) axis `n` times; inverse of `sum_axis`.
    pub fn expand_axis(&self, axis: usize, n: usize, was_kept: bool) -> Tensor {
        let mut shape = self.shape.clone();
        if was_kept {
            shape[axis] = n;
        } else {
            shape.insert(axis, n);
        }
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            let src = &self.data[o * inner..(o + 1) * inner];
            for _ in 0..n {
                data.extend_from_slice(src);
            }
        }
        Tensor::new(shape, data)
    }

    /// Last-axis argmax per row.
    pub fn argmax_last(&self) -> Vec<usize> {
        let c = *self.shape.last().expect("argmax of scalar");
        self.data
            .chunks(c)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty());
        let mut shape = parts[0].shape.clone();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        for p in parts {
            assert_eq!(p.rank(), shape.len());
            for d in 0..shape.len() {
                if d != axis {
                    assert_eq!(p.shape[d], shape[d], "concat shape mismatch");
                }
            }
        }
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let len = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * len..(o + 1) * len]);
            }
        }
        Tensor::new(shape, data)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        assert!(start + len <= self.shape[axis], "narrow out of range");
        let (outer, n, inner) = split_axis(&self.shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Tensor::new(shape, data)
    }

    /// Select slices along axis 0.
    pub fn index_select(&self, idx: &[usize]) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            assert!(i < self.shape[0], "index {i} out of range {}", self.shape[0]);
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor::new(shape, data)
    }

    /// Matrix product on the last two axes, with optional transposition of
    /// either operand; leading axes are batch axes and must agree.
    pub fn matmul_t(&self, other: &Tensor, ta: bool, tb: bool) -> Tensor {
        assert!(self.rank() >= 2 && other.rank() >= 2, "matmul needs rank >= 2");
        let ra = self.rank();
        let rb = other.rank();
        let batch_a = &self.shape[..ra - 2];
        let batch_b = &other.shape[..rb - 2];
        assert_eq!(batch_a, batch_b, "matmul batch mismatch");
        let (ar, ac) = (self.shape[ra - 2], self.shape[ra - 1]);
        let (br, bc) = (other.shape[rb - 2], other.shape[rb - 1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", self.shape, other.shape);
        let batch: usize = batch_a.iter().product();
        let mut out = vec![0.0; batch * m * n];
        let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
        let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
        for b in 0..batch {
            let a = &self.data[b * ar * ac..(b + 1) * ar * ac];
            let bb = &other.data[b * br * bc..(b + 1) * br * bc];
            let c = &mut out[b * m * n..(b + 1) * m * n];
            gemm(m, k, n, a, rsa, csa, bb, rsb, csb, c);
        }
        let mut shape = batch_a.to_vec();
        shape.push(m);
        shape.push(n);
        Tensor::new(shape, out)
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        self.matmul_t(other, false, false)
    }
}

/// (outer, n, inner) decomposition of `shape` around `axis`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `c = a * b` for row/col-strided operands; `c` is overwritten.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    // SAFETY: the slices cover every index addressed by the given strides;
    // callers derive strides from the same shapes the slices were built for.
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
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution over NCHW input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Self {
        assert_eq!(x.len(), 4, "conv input must be NCHW");
        assert_eq!(k.len(), 4, "conv kernel must be OIHW");
        assert_eq!(x[1], k[1], "conv channel mismatch: input {:?} kernel {:?}", x, k);
        let (h, w, kh, kw) = (x[2], x[3], k[2], k[3]);
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv kernel larger than input");
        Self {
            n: x[0],
            c: x[1],
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        }
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

/// Unfold NCHW input into a `[C*kh*kw, N*oh*ow]` patch matrix (zero padding).
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.col_cols();
    let mut out = vec![0.0; g.col_rows() * cols];
    let plane = g.oh * g.ow;
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let y = (oy * g.stride + i) as isize - g.pad as isize;
                        if y < 0 || y >= g.h as isize {
                            continue;
                        }
                        let y = y as usize;
                        let base = n * plane + oy * g.ow;
                        for ox in 0..g.ow {
                            let xx = (ox * g.stride + j) as isize - g.pad as isize;
                            if xx >= 0 && (xx as usize) < g.w {
                                dst[base + ox] = src[y * g.w + xx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the input.
pub fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncols = g.col_cols();
    let mut out = vec![0.0; g.n * g.c * g.h * g.w];
    let plane = g.oh * g.ow;
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let dst = &mut out[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let y = (oy * g.stride + i) as isize - g.pad as isize;
                        if y < 0 || y >= g.h as isize {
                            continue;
                        }
                        let y = y as usize;
                        let base = n * plane + oy * g.ow;
                        for ox in 0..g.ow {
                            let xx = (ox * g.stride + j) as isize - g.pad as isize;
                            if xx >= 0 && (xx as usize) < g.w {
                                dst[y * g.w + xx as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `[O, N*P]` row-major to `[N, O, P]`.
pub fn om_to_nop(data: &[f64], o: usize, n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; o * n * p];
    for oi in 0..o {
        for ni in 0..n {
            let src = &data[(oi * n + ni) * p..(oi * n + ni + 1) * p];
            out[(ni * o + oi) * p..(ni * o + oi + 1) * p].copy_from_slice(src);
        }
    }
    out
}

/// `[N, O, P]` row-major to `[O, N*P]`.
pub fn nop_to_om(data: &[f64], o: usize, n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; o * n * p];
    for ni in 0..n {
        for oi in 0..o {
            let src = &data[(ni * o + oi) * p..(ni * o + oi + 1) * p];
            out[(oi * n + ni) * p..(oi * n + ni + 1) * p].copy_from_slice(src);
        }
    }
    out
}
