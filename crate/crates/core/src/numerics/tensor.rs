//! Dense row-major `f64` tensors and the value-level kernels the tape is built on.

use crate::error::{contract, invalid_shape, Error, Result};
use crate::numerics::rng::SeededRng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(invalid_shape("shape list is empty"));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(invalid_shape(format!("zero extent in {shape:?}")));
    }
    Ok(shape.iter().product())
}

/// Row-major strides for `shape`.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(invalid_shape(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// I.i.d. standard normal samples drawn from `rng`.
    pub fn randn(shape: &[usize], rng: &mut SeededRng) -> Result<Self> {
        let n = check_shape(shape)?;
        let data = (0..n).map(|_| rng.normal()).collect();
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// Same-shape elementwise combination.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "zip_map",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self + alpha * other`, same shapes.
    pub fn axpy(&self, alpha: f64, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + alpha * b)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(invalid_shape(format!(
                "permutation {axes:?} is not valid for rank {rank}"
            )));
        }
        let in_strides = strides_of(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..self.data.len() {
            data.push(self.data[offset]);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                offset += src_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                offset -= src_strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| invalid_shape("concat of zero tensors"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(invalid_shape(format!("concat axis {axis} for rank {rank}")));
        }
        for p in parts {
            let compatible = p.rank() == rank
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total_axis: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut shape = first.shape.clone();
        shape[axis] = total_axis;
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for p in parts {
                let block = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
            }
        }
        Ok(Tensor { shape, data })
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() || len == 0 || start + len > self.shape[axis] {
            return Err(invalid_shape(format!(
                "narrow(axis={axis}, start={start}, len={len}) on {:?}",
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let block = self.shape[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * block + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor { shape, data })
    }

    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
        if axis >= self.rank() || sizes.iter().sum::<usize>() != self.shape[axis] {
            return Err(invalid_shape(format!(
                "split sizes {sizes:?} along axis {axis} of {:?}",
                self.shape
            )));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&s| {
                let t = self.narrow(axis, start, s);
                start += s;
                t
            })
            .collect()
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let plan = MatmulPlan::new(&self.shape, &other.shape)?;
        let mut out = vec![0.0; plan.out_len()];
        plan.forward(&self.data, &other.data, &mut out);
        Ok(Tensor {
            shape: plan.out_shape,
            data: out,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        broadcast_binary(self, other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        broadcast_binary(self, other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        broadcast_binary(self, other, "mul", |a, b| a * b)
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(invalid_shape(format!("softmax axis {axis} on {:?}", self.shape)));
        }
        let (outer, n, inner) = axis_split(&self.shape, axis);
        let mut data = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let max = (0..n).map(|k| data[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for k in 0..n {
                    let e = (data[at(k)] - max).exp();
                    data[at(k)] = e;
                    denom += e;
                }
                for k in 0..n {
                    data[at(k)] /= denom;
                }
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }
}

/// (product of axes before, extent of axis, product of axes after)
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

/// Index mapping for numpy-style broadcasting of two operands.
#[derive(Clone, Debug)]
pub(crate) struct Broadcast {
    pub out_shape: Vec<usize>,
    kind: BroadcastKind,
}

#[derive(Clone, Debug)]
enum BroadcastKind {
    Same,
    /// rhs repeats every `period` elements of lhs
    RhsSuffix { period: usize },
    LhsSuffix { period: usize },
    General { lhs: Vec<usize>, rhs: Vec<usize> },
}

impl Broadcast {
    pub fn new(lhs: &[usize], rhs: &[usize], op: &'static str) -> Result<Self> {
        if lhs == rhs {
            return Ok(Self {
                out_shape: lhs.to_vec(),
                kind: BroadcastKind::Same,
            });
        }
        let rank = lhs.len().max(rhs.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (l, r) = (pad(lhs), pad(rhs));
        let mut out_shape = Vec::with_capacity(rank);
        for (&a, &b) in l.iter().zip(&r) {
            if a == b || b == 1 {
                out_shape.push(a);
            } else if a == 1 {
                out_shape.push(b);
            } else {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: lhs.to_vec(),
                    rhs: rhs.to_vec(),
                });
            }
        }
        let trailing = |s: &[usize]| {
            let lead = s.iter().take_while(|&&d| d == 1).count();
            out_shape[lead..] == s[lead..]
        };
        let kind = if l == out_shape && trailing(&r) {
            BroadcastKind::RhsSuffix {
                period: r.iter().product(),
            }
        } else if r == out_shape && trailing(&l) {
            BroadcastKind::LhsSuffix {
                period: l.iter().product(),
            }
        } else {
            let masked = |s: &[usize]| {
                strides_of(s)
                    .into_iter()
                    .zip(s)
                    .map(|(st, &d)| if d == 1 { 0 } else { st })
                    .collect::<Vec<_>>()
            };
            BroadcastKind::General {
                lhs: masked(&l),
                rhs: masked(&r),
            }
        };
        Ok(Self { out_shape, kind })
    }

    pub fn out_len(&self) -> usize {
        self.out_shape.iter().product()
    }

    /// Calls `f(out_index, lhs_index, rhs_index)` for every output element in order.
    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n = self.out_len();
        match &self.kind {
            BroadcastKind::Same => (0..n).for_each(|i| f(i, i, i)),
            BroadcastKind::RhsSuffix { period } => (0..n).for_each(|i| f(i, i, i % period)),
            BroadcastKind::LhsSuffix { period } => (0..n).for_each(|i| f(i, i % period, i)),
            BroadcastKind::General { lhs, rhs } => {
                let rank = self.out_shape.len();
                let mut idx = vec![0usize; rank];
                let (mut lo, mut ro) = (0usize, 0usize);
                for i in 0..n {
                    f(i, lo, ro);
                    for ax in (0..rank).rev() {
                        idx[ax] += 1;
                        lo += lhs[ax];
                        ro += rhs[ax];
                        if idx[ax] < self.out_shape[ax] {
                            break;
                        }
                        lo -= lhs[ax] * self.out_shape[ax];
                        ro -= rhs[ax] * self.out_shape[ax];
                        idx[ax] = 0;
                    }
                }
            }
        }
    }
}

pub(crate) fn broadcast_binary(
    a: &Tensor,
    b: &Tensor,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let plan = Broadcast::new(&a.shape, &b.shape, op)?;
    let mut data = vec![0.0; plan.out_len()];
    plan.for_each(|i, l, r| data[i] = f(a.data[l], b.data[r]));
    Ok(Tensor {
        shape: plan.out_shape,
        data,
    })
}

/// Contraction plan: `lhs (..., m, k) @ rhs (k, n)` with a shared right operand,
/// or `lhs (..., m, k) @ rhs (..., k, n)` with identical batch extents.
#[derive(Clone, Debug)]
pub(crate) struct MatmulPlan {
    pub out_shape: Vec<usize>,
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub shared_rhs: bool,
}

impl MatmulPlan {
    pub fn new(lhs: &[usize], rhs: &[usize]) -> Result<Self> {
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        };
        if lhs.len() < 2 || rhs.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (lhs[lhs.len() - 2], lhs[lhs.len() - 1]);
        let (k2, n) = (rhs[rhs.len() - 2], rhs[rhs.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let lhs_batch = &lhs[..lhs.len() - 2];
        let shared_rhs = rhs.len() == 2;
        if !shared_rhs && lhs_batch != &rhs[..rhs.len() - 2] {
            return Err(mismatch());
        }
        let mut out_shape = lhs_batch.to_vec();
        out_shape.extend([m, n]);
        Ok(Self {
            out_shape,
            batch: lhs_batch.iter().product(),
            m,
            k,
            n,
            shared_rhs,
        })
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.m * self.n
    }

    pub fn forward(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.shared_rhs {
            gemm_nn(a, b, out, self.batch * m, k, n);
        } else {
            for bi in 0..self.batch {
                gemm_nn(
                    &a[bi * m * k..(bi + 1) * m * k],
                    &b[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
    }

    /// Accumulates `dA += dC @ B^T` and `dB += A^T @ dC`.
    pub fn backward(
        &self,
        a: &[f64],
        b: &[f64],
        dc: &[f64],
        da: Option<&mut [f64]>,
        db: Option<&mut [f64]>,
    ) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.shared_rhs {
            let rows = self.batch * m;
            if let Some(da) = da {
                gemm_nt(dc, b, da, rows, n, k);
            }
            if let Some(db) = db {
                gemm_tn(a, dc, db, rows, k, n);
            }
        } else {
            if let Some(da) = da {
                for bi in 0..self.batch {
                    gemm_nt(
                        &dc[bi * m * n..(bi + 1) * m * n],
                        &b[bi * k * n..(bi + 1) * k * n],
                        &mut da[bi * m * k..(bi + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
            }
            if let Some(db) = db {
                for bi in 0..self.batch {
                    gemm_tn(
                        &a[bi * m * k..(bi + 1) * m * k],
                        &dc[bi * m * n..(bi + 1) * m * n],
                        &mut db[bi * k * n..(bi + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
    }
}

/// `c (m,n) += a (m,k) @ b (k,n)`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c (m,n) += a (m,k) @ b^T` where `b` is stored `(n,k)`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * n + j] += dot;
        }
    }
}

/// `c (k,n) += a^T @ b` where `a` is stored `(m,k)` and `b` is `(m,n)`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}
