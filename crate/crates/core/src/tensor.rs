//! Dense row-major tensors, broadcasting helpers and the matrix kernels
//! every higher-level op is built from.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Element precision stored on disk and selected in configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn tag(self) -> u8 {
        self.size() as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            4 => Some(Dtype::F32),
            8 => Some(Dtype::F64),
            _ => None,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        })
    }
}

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Sum
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;

    /// Lossy conversion from an f64 literal.
    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    fn put_le(self, out: &mut Vec<u8>);

    fn take_le(bytes: &[u8]) -> Self;

    fn to_bits_u64(self) -> u64;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn take_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }

    fn to_bits_u64(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn take_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }

    fn to_bits_u64(self) -> u64 {
        self.to_bits()
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= SHOWN {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..(+{})", &self.data[..SHOWN], self.data.len() - SHOWN)
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::of(x)).collect())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| T::of(normal.sample(rng))).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| T::of(rng.random_range(lo..hi))).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Bitwise equality of shape and every element.
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits_u64() == b.to_bits_u64())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Largest elementwise `|a-b| / max(|a|, |b|, floor)`.
    pub fn max_rel_err(&self, other: &Self, floor: f64) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| rel_err(a.as_f64(), b.as_f64(), floor))
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Self> {
        let nd = self.shape.len();
        if nd < 2 {
            return Err(Error::dim(format!(
                "transpose needs at least 2 dims, got {:?}",
                self.shape
            )));
        }
        let (m, n) = (self.shape[nd - 2], self.shape[nd - 1]);
        let batch = self.data.len() / (m * n).max(1);
        let mut out = vec![T::zero(); self.data.len()];
        for b in 0..batch {
            let src = &self.data[b * m * n..(b + 1) * m * n];
            let dst = &mut out[b * m * n..(b + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.swap(nd - 2, nd - 1);
        Ok(Tensor { shape, data: out })
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let nd = self.shape.len();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim(format!(
                "invalid permutation {:?} for shape {:?}",
                perm, self.shape
            )));
        }
        let in_strides = contiguous_strides(&self.shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        let zeros = vec![0; nd];
        let (shape, sa, _) = collapse(&out_shape, &src_strides, &zeros);
        walk(&shape, &sa, &sa, |_, pa, _| {
            let inner = *shape.last().unwrap_or(&1);
            let step = *sa.last().unwrap_or(&0);
            for j in 0..inner {
                out.push(self.data[pa + j * step]);
            }
        });
        Tensor::new(&out_shape, out)
    }

    /// Materializes this tensor broadcast to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        let out = broadcast_shape(&self.shape, shape)?;
        if out != shape {
            return Err(Error::dim(format!(
                "cannot broadcast {:?} to {:?}",
                self.shape, shape
            )));
        }
        if out == self.shape {
            return Ok(self.clone());
        }
        let src = strides_in(&self.shape, shape);
        let zeros = vec![0; shape.len()];
        let (cshape, sa, _) = collapse(shape, &src, &zeros);
        let inner = *cshape.last().unwrap();
        let step = *sa.last().unwrap();
        let mut data = Vec::with_capacity(shape.iter().product());
        walk(&cshape, &sa, &sa, |_, pa, _| {
            if step == 0 {
                data.extend(std::iter::repeat_n(self.data[pa], inner));
            } else {
                data.extend_from_slice(&self.data[pa..pa + inner]);
            }
        });
        Tensor::new(shape, data)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        zip_broadcast(self, other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        zip_broadcast(self, other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        zip_broadcast(self, other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    /// In-place `self += other` for identical shapes.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "add_assign shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    /// Batched matrix product with broadcast batch axes.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let plan = MatmulPlan::new(&self.shape, &other.shape)?;
        let mut out = vec![T::zero(); plan.out_numel()];
        plan.for_each(|oa, ob, oc| {
            gemm_nn(
                &self.data[oa..oa + plan.m * plan.k],
                &other.data[ob..ob + plan.k * plan.n],
                &mut out[oc..oc + plan.m * plan.n],
                plan.m,
                plan.k,
                plan.n,
            )
        });
        Tensor::new(&plan.out_shape(), out)
    }

    /// Sums over `axis`, optionally keeping it with extent 1.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Self> {
        let (outer, len, inner) = axis_split(&self.shape, axis)?;
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for a in 0..len {
                let src = &self.data[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        let mut shape = self.shape.clone();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Tensor::new(&shape, out)
    }

    /// Inclusive prefix sum along `axis`.
    pub fn cumsum(&self, axis: usize) -> Result<Self> {
        let (outer, len, inner) = axis_split(&self.shape, axis)?;
        let mut out = self.data.clone();
        for o in 0..outer {
            for a in 1..len {
                let (prev, cur) = out.split_at_mut((o * len + a) * inner);
                let prev = &prev[(o * len + a - 1) * inner..];
                for (c, &p) in cur[..inner].iter_mut().zip(prev) {
                    *c = *c + p;
                }
            }
        }
        Tensor::new(&self.shape, out)
    }

    /// Inclusive suffix sum along `axis` (cumsum run back to front).
    pub fn rev_cumsum(&self, axis: usize) -> Result<Self> {
        let (outer, len, inner) = axis_split(&self.shape, axis)?;
        let mut out = self.data.clone();
        for o in 0..outer {
            for a in (0..len.saturating_sub(1)).rev() {
                let (cur, next) = out.split_at_mut((o * len + a + 1) * inner);
                let cur = &mut cur[(o * len + a) * inner..];
                for (c, &n) in cur.iter_mut().zip(&next[..inner]) {
                    *c = *c + n;
                }
            }
        }
        Tensor::new(&self.shape, out)
    }
}

pub(crate) fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// `(outer, extent, inner)` decomposition around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(format!(
            "axis {} out of range for shape {:?}",
            axis, shape
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    strides
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let dim = |s: &[usize], i: usize| {
        if i + s.len() >= n {
            s[i + s.len() - n]
        } else {
            1
        }
    };
    (0..n)
        .map(|i| {
            let (da, db) = (dim(a, i), dim(b, i));
            if da == db || db == 1 {
                Ok(da)
            } else if da == 1 {
                Ok(db)
            } else {
                Err(Error::dim(format!(
                    "shapes {:?} and {:?} are not broadcastable",
                    a, b
                )))
            }
        })
        .collect()
}

/// Strides of `shape` viewed in the (trailing-aligned) `out` space; broadcast axes get 0.
pub(crate) fn strides_in(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                own[i - off]
            }
        })
        .collect()
}

/// Drops unit axes and fuses adjacent axes that are contiguous for both operands.
pub(crate) fn collapse(
    shape: &[usize],
    sa: &[usize],
    sb: &[usize],
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut dims: Vec<(usize, usize, usize)> = Vec::with_capacity(shape.len());
    for i in 0..shape.len() {
        if shape[i] == 1 {
            continue;
        }
        if let Some(last) = dims.last_mut() {
            if last.1 == sa[i] * shape[i] && last.2 == sb[i] * shape[i] {
                *last = (last.0 * shape[i], sa[i], sb[i]);
                continue;
            }
        }
        dims.push((shape[i], sa[i], sb[i]));
    }
    if dims.is_empty() {
        dims.push((1, 0, 0));
    }
    (
        dims.iter().map(|d| d.0).collect(),
        dims.iter().map(|d| d.1).collect(),
        dims.iter().map(|d| d.2).collect(),
    )
}

/// Calls `f(row, offset_a, offset_b)` once per innermost row of `shape`.
pub(crate) fn walk(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let nd = shape.len();
    if nd <= 1 {
        f(0, 0, 0);
        return;
    }
    if shape.contains(&0) {
        return;
    }
    let outer = &shape[..nd - 1];
    let mut idx = vec![0usize; nd - 1];
    let (mut pa, mut pb) = (0usize, 0usize);
    let rows: usize = outer.iter().product();
    for row in 0..rows {
        f(row, pa, pb);
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            pa += sa[d];
            pb += sb[d];
            if idx[d] < outer[d] {
                break;
            }
            pa -= sa[d] * outer[d];
            pb -= sb[d] * outer[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn zip_broadcast<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    let out_shape = broadcast_shape(&a.shape, &b.shape)?;
    let numel: usize = out_shape.iter().product();
    let (shape, sa, sb) = collapse(
        &out_shape,
        &strides_in(&a.shape, &out_shape),
        &strides_in(&b.shape, &out_shape),
    );
    let inner = *shape.last().unwrap();
    let (ia, ib) = (*sa.last().unwrap(), *sb.last().unwrap());
    let mut out = Vec::with_capacity(numel);
    let (ad, bd) = (&a.data, &b.data);
    walk(&shape, &sa, &sb, |_, pa, pb| match (ia, ib) {
        (1, 1) => out.extend(ad[pa..pa + inner].iter().zip(&bd[pb..pb + inner]).map(|(&x, &y)| f(x, y))),
        (1, 0) => {
            let y = bd[pb];
            out.extend(ad[pa..pa + inner].iter().map(|&x| f(x, y)))
        }
        (0, 1) => {
            let x = ad[pa];
            out.extend(bd[pb..pb + inner].iter().map(|&y| f(x, y)))
        }
        _ => out.extend((0..inner).map(|j| f(ad[pa + j * ia], bd[pb + j * ib]))),
    });
    Tensor::new(&out_shape, out)
}

/// Sums `grad` (shaped like a broadcast result) back down to `shape`.
pub(crate) fn reduce_to_shape<T: Scalar>(grad: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if grad.shape == shape {
        return Ok(grad.clone());
    }
    let out_shape = broadcast_shape(shape, &grad.shape)?;
    if out_shape != grad.shape {
        return Err(Error::dim(format!(
            "cannot reduce {:?} to {:?}",
            grad.shape, shape
        )));
    }
    let mut acc = Tensor::<T>::zeros(shape);
    let (cshape, sg, st) = collapse(
        &grad.shape,
        &contiguous_strides(&grad.shape),
        &strides_in(shape, &grad.shape),
    );
    let inner = *cshape.last().unwrap();
    let (ig, it) = (*sg.last().unwrap(), *st.last().unwrap());
    let g = &grad.data;
    let dst = &mut acc.data;
    walk(&cshape, &sg, &st, |_, pg, pt| {
        if it == 0 {
            let mut s = T::zero();
            for j in 0..inner {
                s = s + g[pg + j * ig];
            }
            dst[pt] = dst[pt] + s;
        } else {
            for j in 0..inner {
                dst[pt + j * it] = dst[pt + j * it] + g[pg + j * ig];
            }
        }
    });
    Ok(acc)
}

/// Shape bookkeeping for batched matmul over broadcast batch axes.
pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub batch: Vec<usize>,
    stride_a: Vec<usize>,
    stride_b: Vec<usize>,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::dim(format!(
                "matmul needs at least 2 dims, got {:?} x {:?}",
                a, b
            )));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner extents differ: {:?} x {:?}",
                a, b
            )));
        }
        let (ba, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
        let batch = broadcast_shape(ba, bb)
            .map_err(|_| Error::dim(format!("matmul batch axes differ: {:?} x {:?}", a, b)))?;
        let stride_a = strides_in(ba, &batch).iter().map(|s| s * m * k).collect();
        let stride_b = strides_in(bb, &batch).iter().map(|s| s * k * n).collect();
        Ok(MatmulPlan {
            m,
            k,
            n,
            batch,
            stride_a,
            stride_b,
        })
    }

    pub fn batch_count(&self) -> usize {
        self.batch.iter().product()
    }

    pub fn out_numel(&self) -> usize {
        self.batch_count() * self.m * self.n
    }

    pub fn out_shape(&self) -> Vec<usize> {
        let mut s = self.batch.clone();
        s.push(self.m);
        s.push(self.n);
        s
    }

    /// Calls `f(offset_a, offset_b, offset_out)` for every batch entry.
    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let nb = self.batch.len();
        let mut idx = vec![0usize; nb];
        for i in 0..self.batch_count() {
            let oa: usize = (0..nb).map(|d| idx[d] * self.stride_a[d]).sum();
            let ob: usize = (0..nb).map(|d| idx[d] * self.stride_b[d]).sum();
            f(oa, ob, i * self.m * self.n);
            for d in (0..nb).rev() {
                idx[d] += 1;
                if idx[d] < self.batch[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
    }
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj = *cj + aip * bj;
            }
        }
    }
}

/// `c += aᵀ · b` for row-major `a: m×k`, `b: m×n`, `c: k×n`.
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj = *cj + aip * bj;
            }
        }
    }
}

/// Named, ordered collection of tensors (model parameters, gradients, moments).
#[derive(Clone, Debug, PartialEq)]
pub struct TensorSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T> Default for TensorSet<T> {
    fn default() -> Self {
        TensorSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Scalar> TensorSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends `tensor`, replacing any existing entry of the same name in place.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        match self.position(&name) {
            Some(i) => self.tensors[i] = tensor,
            None => {
                self.names.push(name);
                self.tensors.push(tensor);
            }
        }
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::Contract(format!("missing tensor `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        TensorSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn bits_eq(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.bits_eq(b))
    }
}
