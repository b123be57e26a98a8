use rand::Rng;

use crate::element::Element;
use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{axpy, dot, gemm_nn};
use crate::shape::{broadcast_shape, broadcast_strides, contiguous_strides, for_each_offset, numel, Odometer};
use crate::tensor::Tensor;
use crate::{LAYER_NORM_EPS, MASK_VALUE};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which entries of a square score matrix are hidden from the normalizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMask {
    None,
    /// Tokens are laid out time-major in groups of `group`; token `i` belongs to
    /// step `i / group` and may only see tokens of the same or an earlier step.
    Causal { group: usize },
}

impl AttnMask {
    #[inline]
    pub fn is_masked(self, row: usize, col: usize) -> bool {
        match self {
            AttnMask::None => false,
            AttnMask::Causal { group } => col / group > row / group,
        }
    }
}

/// How raw attention scores become weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalizer {
    Softmax,
    /// ReLU the scores and divide each row by its sum; rows without positive
    /// mass fall back to uniform weights over the unmasked entries.
    SumNormalize,
}

pub(crate) const SUM_NORMALIZE_FLOOR: f64 = 1e-8;

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    MatMul(Var, Var),
    MhaScores {
        q: Var,
        k: Var,
        heads: usize,
        scale: T,
    },
    MhaApply {
        weights: Var,
        v: Var,
        heads: usize,
    },
    AttnWeights {
        x: Var,
        mask: AttnMask,
        norm: Normalizer,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Dropout(Var, Vec<T>),
    SumAll(Var),
    NormLastDim(Var),
}

#[derive(Debug)]
pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<T>,
}

/// Records operations in execution order so gradients can be replayed backward.
///
/// Nodes are only ever appended, so every op's inputs precede it.
#[derive(Debug)]
pub struct Tape<T: Element = f32> {
    pub(crate) nodes: Vec<Node<T>>,
    budget: Option<usize>,
    elements: usize,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            budget: None,
            elements: 0,
        }
    }

    /// A tape that refuses to hold more than `elements` values in total.
    pub fn with_budget(elements: usize) -> Self {
        Self {
            budget: Some(elements),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Total number of elements held by recorded values.
    pub fn workspace_elements(&self) -> usize {
        self.elements
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.reserve(value.numel())?;
        Ok(self.push(value, requires_grad, Op::Leaf))
    }

    fn reserve(&mut self, n: usize) -> Result<()> {
        if let Some(budget) = self.budget {
            let requested = self.elements + n;
            if requested > budget {
                return Err(TensorError::BudgetExceeded { requested, budget });
            }
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.elements += value.numel();
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)?;
        self.reserve(numel(&out_shape))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data: Vec<T> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let strides = [broadcast_strides(&sa, &out_shape), broadcast_strides(&sb, &out_shape)];
            let mut out = Vec::with_capacity(numel(&out_shape));
            for_each_offset(&out_shape, strides, |[ia, ib]| out.push(f(va[ia], vb[ib])));
            out
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(out_shape, data), rg, op))
    }

    /// Broadcasting elementwise sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Broadcasting elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        self.reserve(numel(&shape))?;
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), rg, op))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.reserve(value.numel())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// Reorders axes: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        let rank = in_shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        self.reserve(numel(&out_shape))?;
        let in_strides = contiguous_strides(&in_shape);
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(numel(&out_shape));
        for_each_offset(&out_shape, [src_strides], |[i]| data.push(src[i]));
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape, data), rg, Op::Permute(x, perm.to_vec())))
    }

    /// Batched matrix product `[.., P, Q] × [.., Q, R] → [.., P, R]` with
    /// broadcasting over the leading batch dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b))?;
        let mut out_shape = plan.batch.clone();
        out_shape.extend([plan.p, plan.r]);
        self.reserve(numel(&out_shape))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); numel(&out_shape)];
        plan.for_each(|ia, ib, ic| {
            let (p, q, r) = (plan.rows(), plan.q, plan.r);
            gemm_nn(&va[ia..ia + p * q], &vb[ib..ib + q * r], &mut out[ic..ic + p * r], p, q, r);
        });
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(out_shape, out), rg, Op::MatMul(a, b)))
    }

    /// Multi-head scaled dot products.
    ///
    /// `q: [.., T, H·F]`, `k: [.., S, H·F]` with identical batch dims give
    /// `[.., H, T, S]` where head `h` uses feature columns `h·F..(h+1)·F`.
    pub fn mha_scores(&mut self, q: Var, k: Var, heads: usize, scale: T) -> Result<Var> {
        let (sq, sk) = (self.shape(q).to_vec(), self.shape(k).to_vec());
        let geo = MhaGeometry::new(&sq, &sk, heads, "mha_scores")?;
        let mut out_shape = geo.batch.clone();
        out_shape.extend([heads, geo.t, geo.s]);
        self.reserve(numel(&out_shape))?;
        let (vq, vk) = (self.value(q).data(), self.value(k).data());
        let (t_len, s_len, hf, f) = (geo.t, geo.s, geo.hf, geo.f);
        let mut out = vec![T::zero(); numel(&out_shape)];
        for b in 0..geo.batch_count {
            let qb = &vq[b * t_len * hf..(b + 1) * t_len * hf];
            let kb = &vk[b * s_len * hf..(b + 1) * s_len * hf];
            let ob = &mut out[b * heads * t_len * s_len..(b + 1) * heads * t_len * s_len];
            for h in 0..heads {
                for t in 0..t_len {
                    let qrow = &qb[t * hf + h * f..t * hf + (h + 1) * f];
                    let orow = &mut ob[(h * t_len + t) * s_len..(h * t_len + t + 1) * s_len];
                    for (s, o) in orow.iter_mut().enumerate() {
                        *o = dot(qrow, &kb[s * hf + h * f..s * hf + (h + 1) * f]) * scale;
                    }
                }
            }
        }
        let rg = self.any_grad(&[q, k]);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            rg,
            Op::MhaScores { q, k, heads, scale },
        ))
    }

    /// Applies per-head weights `[.., H, T, S]` to values `[.., S, H·F]`,
    /// concatenating the heads into `[.., T, H·F]`.
    pub fn mha_apply(&mut self, weights: Var, v: Var, heads: usize) -> Result<Var> {
        let (sw, sv) = (self.shape(weights).to_vec(), self.shape(v).to_vec());
        let geo = MhaApplyGeometry::new(&sw, &sv, heads)?;
        let mut out_shape = geo.batch.clone();
        out_shape.extend([geo.t, geo.hf]);
        self.reserve(numel(&out_shape))?;
        let (vw, vv) = (self.value(weights).data(), self.value(v).data());
        let (t_len, s_len, hf, f) = (geo.t, geo.s, geo.hf, geo.f);
        let mut out = vec![T::zero(); numel(&out_shape)];
        for b in 0..geo.batch_count {
            let wb = &vw[b * heads * t_len * s_len..(b + 1) * heads * t_len * s_len];
            let vb = &vv[b * s_len * hf..(b + 1) * s_len * hf];
            let ob = &mut out[b * t_len * hf..(b + 1) * t_len * hf];
            for h in 0..heads {
                for t in 0..t_len {
                    let wrow = &wb[(h * t_len + t) * s_len..(h * t_len + t + 1) * s_len];
                    let orow = &mut ob[t * hf + h * f..t * hf + (h + 1) * f];
                    for (s, &w) in wrow.iter().enumerate() {
                        axpy(w, &vb[s * hf + h * f..s * hf + (h + 1) * f], orow);
                    }
                }
            }
        }
        let rg = self.any_grad(&[weights, v]);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            rg,
            Op::MhaApply { weights, v, heads },
        ))
    }

    /// Softmax over the last dimension, stabilized by max subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        self.attention_weights(x, AttnMask::None, Normalizer::Softmax)
    }

    /// Masks and normalizes score rows over the last dimension.
    ///
    /// With a causal mask the last two dimensions must be square.
    pub fn attention_weights(&mut self, x: Var, mask: AttnMask, norm: Normalizer) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = shape[shape.len() - 1];
        let rows_per_matrix = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
        if let AttnMask::Causal { group } = mask {
            if group == 0 || rows_per_matrix != cols {
                return Err(shape_err(
                    "attention_weights",
                    format!("causal mask needs square trailing dims and group > 0, got {shape:?}"),
                ));
            }
        }
        self.reserve(numel(&shape))?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for (row_idx, (xr, yr)) in src.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let row = row_idx % rows_per_matrix;
            normalize_row(xr, yr, row, mask, norm);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            rg,
            Op::AttnWeights { x, mask, norm },
        ))
    }

    /// Normalizes each last-dimension slice to zero mean and unit variance,
    /// then applies `gain` and `bias` (both shaped like the last dimension).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = shape[shape.len() - 1];
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} must both be [{d}]",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        self.reserve(numel(&shape))?;
        let src = self.value(x).data();
        let (g, bvals) = (self.value(gain).data(), self.value(bias).data());
        let rows = src.len() / d;
        let (mut means, mut rstds) = (Vec::with_capacity(rows), Vec::with_capacity(rows));
        let mut out = vec![T::zero(); src.len()];
        let inv_d = T::one() / T::of(d as f64);
        let eps = T::of(LAYER_NORM_EPS);
        for (xr, yr) in src.chunks(d).zip(out.chunks_mut(d)) {
            let mean = xr.iter().copied().sum::<T>() * inv_d;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..d {
                yr[j] = (xr[j] - mean) * rstd * g[j] + bvals[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
        ))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    /// Identity in inference mode or when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidParameter(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let shape = self.shape(x).to_vec();
        self.reserve(numel(&shape))?;
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..numel(&shape))
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), rg, Op::Dropout(x, mask)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reserve(1)?;
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(s), rg, Op::SumAll(x)))
    }

    /// Euclidean norm over the last dimension, `[.., M] → [..]`.
    ///
    /// The gradient at an exactly-zero slice is taken to be zero.
    pub fn norm_lastdim(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let m = shape[shape.len() - 1];
        let out_shape = if shape.len() == 1 {
            vec![1]
        } else {
            shape[..shape.len() - 1].to_vec()
        };
        self.reserve(numel(&out_shape))?;
        let data = self
            .value(x)
            .data()
            .chunks(m)
            .map(|r| dot(r, r).sqrt())
            .collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape, data), rg, Op::NormLastDim(x)))
    }
}

/// Shared forward/backward row normalization for [`Tape::attention_weights`].
pub(crate) fn normalize_row<T: Element>(
    x: &[T],
    y: &mut [T],
    row: usize,
    mask: AttnMask,
    norm: Normalizer,
) {
    match norm {
        Normalizer::Softmax => {
            let penalty = T::of(MASK_VALUE);
            let mut max = T::neg_infinity();
            for (c, (yc, &xc)) in y.iter_mut().zip(x).enumerate() {
                *yc = if mask.is_masked(row, c) { xc + penalty } else { xc };
                max = max.max(*yc);
            }
            let mut total = T::zero();
            for yc in y.iter_mut() {
                *yc = (*yc - max).exp();
                total += *yc;
            }
            let inv = T::one() / total;
            for yc in y.iter_mut() {
                *yc *= inv;
            }
        }
        Normalizer::SumNormalize => {
            let mut total = T::zero();
            let mut visible = 0usize;
            for (c, (yc, &xc)) in y.iter_mut().zip(x).enumerate() {
                if mask.is_masked(row, c) {
                    *yc = T::zero();
                } else {
                    visible += 1;
                    *yc = if xc > T::zero() { xc } else { T::zero() };
                    total += *yc;
                }
            }
            if total < T::of(SUM_NORMALIZE_FLOOR) {
                let uniform = T::one() / T::of(visible as f64);
                for (c, yc) in y.iter_mut().enumerate() {
                    *yc = if mask.is_masked(row, c) { T::zero() } else { uniform };
                }
            } else {
                let inv = T::one() / total;
                for yc in y.iter_mut() {
                    *yc *= inv;
                }
            }
        }
    }
}

/// Iteration plan for a broadcasting batched matmul.
pub(crate) struct MatmulPlan {
    pub(crate) batch: Vec<usize>,
    pub(crate) p: usize,
    pub(crate) q: usize,
    pub(crate) r: usize,
    /// When `b` carries no batch dims the batch of `a` folds into its rows.
    pub(crate) folded_rows: Option<usize>,
    a_batch: Vec<usize>,
    b_batch: Vec<usize>,
}

impl MatmulPlan {
    pub(crate) fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", format!("operands must be at least 2-D: {sa:?} × {sb:?}")));
        }
        let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (q2, r) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if q != q2 {
            return Err(shape_err("matmul", format!("inner dimensions differ: {sa:?} × {sb:?}")));
        }
        let a_batch = sa[..sa.len() - 2].to_vec();
        let b_batch = sb[..sb.len() - 2].to_vec();
        let batch = broadcast_shape(&a_batch, &b_batch)
            .map_err(|_| shape_err("matmul", format!("batch dims do not broadcast: {sa:?} × {sb:?}")))?;
        let folded_rows = (numel(&b_batch) == 1).then(|| numel(&a_batch) * p);
        Ok(Self {
            batch,
            p,
            q,
            r,
            folded_rows,
            a_batch,
            b_batch,
        })
    }

    /// Rows handled per call of the visitor.
    pub(crate) fn rows(&self) -> usize {
        self.folded_rows.unwrap_or(self.p)
    }

    /// Calls `visit(a_offset, b_offset, out_offset)` for every matrix product.
    pub(crate) fn for_each(&self, mut visit: impl FnMut(usize, usize, usize)) {
        if self.folded_rows.is_some() {
            visit(0, 0, 0);
            return;
        }
        let (pq, qr, pr) = (self.p * self.q, self.q * self.r, self.p * self.r);
        let sa: Vec<usize> = broadcast_strides(&self.a_batch, &self.batch)
            .into_iter()
            .map(|s| s * pq)
            .collect();
        let sb: Vec<usize> = broadcast_strides(&self.b_batch, &self.batch)
            .into_iter()
            .map(|s| s * qr)
            .collect();
        let so: Vec<usize> = contiguous_strides(&self.batch).into_iter().map(|s| s * pr).collect();
        if self.batch.is_empty() {
            visit(0, 0, 0);
            return;
        }
        for [ia, ib, io] in Odometer::new(&self.batch, [sa, sb, so]) {
            visit(ia, ib, io);
        }
    }
}

pub(crate) struct MhaGeometry {
    pub(crate) batch: Vec<usize>,
    pub(crate) batch_count: usize,
    pub(crate) t: usize,
    pub(crate) s: usize,
    pub(crate) hf: usize,
    pub(crate) f: usize,
}

impl MhaGeometry {
    pub(crate) fn new(sq: &[usize], sk: &[usize], heads: usize, op: &'static str) -> Result<Self> {
        if sq.len() < 2 || sq.len() != sk.len() || sq[..sq.len() - 2] != sk[..sk.len() - 2] {
            return Err(shape_err(op, format!("query {sq:?} and key {sk:?} batch dims differ")));
        }
        let hf = sq[sq.len() - 1];
        if sk[sk.len() - 1] != hf || heads == 0 || hf % heads != 0 {
            return Err(shape_err(
                op,
                format!("feature dims {sq:?}/{sk:?} not divisible into {heads} heads"),
            ));
        }
        let batch = sq[..sq.len() - 2].to_vec();
        Ok(Self {
            batch_count: numel(&batch),
            batch,
            t: sq[sq.len() - 2],
            s: sk[sk.len() - 2],
            hf,
            f: hf / heads,
        })
    }
}

pub(crate) struct MhaApplyGeometry {
    pub(crate) batch: Vec<usize>,
    pub(crate) batch_count: usize,
    pub(crate) t: usize,
    pub(crate) s: usize,
    pub(crate) hf: usize,
    pub(crate) f: usize,
}

impl MhaApplyGeometry {
    pub(crate) fn new(sw: &[usize], sv: &[usize], heads: usize) -> Result<Self> {
        let bad = || shape_err("mha_apply", format!("weights {sw:?} incompatible with values {sv:?} for {heads} heads"));
        if sw.len() < 3 || sv.len() < 2 || sw.len() != sv.len() + 1 {
            return Err(bad());
        }
        let batch = sv[..sv.len() - 2].to_vec();
        let (s, hf) = (sv[sv.len() - 2], sv[sv.len() - 1]);
        let (h, t, s2) = (sw[sw.len() - 3], sw[sw.len() - 2], sw[sw.len() - 1]);
        if sw[..sw.len() - 3] != batch[..] || h != heads || s2 != s || heads == 0 || hf % heads != 0 {
            return Err(bad());
        }
        Ok(Self {
            batch_count: numel(&batch),
            batch,
            t,
            s,
            hf,
            f: hf / heads,
        })
    }
}
