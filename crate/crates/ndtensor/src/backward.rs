use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::kernels::{axpy, dot, gemm_nn, gemm_tn, transpose};
use crate::shape::{broadcast_strides, contiguous_strides, for_each_offset};
use crate::tape::{MatmulPlan, MhaApplyGeometry, MhaGeometry, Normalizer, Op, Tape, Var, SUM_NORMALIZE_FLOOR};
use crate::tensor::Tensor;

/// Gradients of a scalar loss with respect to the tape's trainable leaves.
#[derive(Debug)]
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a leaf; `None` if the leaf does not influence the loss or
    /// does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate<T: Element>(slots: &mut [Option<Tensor<T>>], v: Var, contribution: Tensor<T>) {
    match &mut slots[v.0] {
        Some(existing) => existing.add_assign_slice(contribution.data()),
        slot @ None => *slot = Some(contribution),
    }
}

/// Sums `grad` (shaped `out_shape`) down to the broadcast source shape.
fn reduce_to<T: Element>(grad: &Tensor<T>, src_shape: &[usize]) -> Tensor<T> {
    if grad.shape() == src_shape {
        return grad.clone();
    }
    let out_shape = grad.shape();
    let mut acc = vec![T::zero(); src_shape.iter().product()];
    let strides = [contiguous_strides(out_shape), broadcast_strides(src_shape, out_shape)];
    let g = grad.data();
    for_each_offset(out_shape, strides, |[io, is]| acc[is] += g[io]);
    Tensor::from_parts(src_shape.to_vec(), acc)
}

impl<T: Element> Tape<T> {
    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Every op is visited once in reverse recording order; contributions to a
    /// value used several times are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut pending: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        pending[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![T::one()]));
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[i] = Some(g);
            } else {
                self.backprop(Var(i), &g, &mut pending);
            }
        }
        Ok(Gradients { grads: leaves })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, out: Var, g: &Tensor<T>, slots: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[out.0];
        let y = node.value.data();
        let gd = g.data();
        match &node.op {
            Op::Leaf => unreachable!("leaves are handled by the caller"),
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        accumulate(slots, v, reduce_to(g, self.shape(v)));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(slots, *a, reduce_to(g, self.shape(*a)));
                }
                if self.wants(*b) {
                    let mut neg = reduce_to(g, self.shape(*b));
                    neg.data_mut().iter_mut().for_each(|v| *v = -*v);
                    accumulate(slots, *b, neg);
                }
            }
            Op::Mul(a, b) => {
                let out_shape = g.shape();
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if !self.wants(v) {
                        continue;
                    }
                    let ov = self.value(other);
                    let strides = [broadcast_strides(ov.shape(), out_shape)];
                    let od = ov.data();
                    let mut prod = Vec::with_capacity(gd.len());
                    let mut gi = gd.iter();
                    for_each_offset(out_shape, strides, |[io]| prod.push(*gi.next().expect("same length") * od[io]));
                    let full = Tensor::from_parts(out_shape.to_vec(), prod);
                    accumulate(slots, v, reduce_to(&full, self.shape(v)));
                }
            }
            Op::Scale(x, s) => {
                let data = gd.iter().map(|&v| v * *s).collect();
                accumulate(slots, *x, Tensor::from_parts(g.shape().to_vec(), data));
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                let data = gd
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(slots, *x, Tensor::from_parts(g.shape().to_vec(), data));
            }
            Op::Reshape(x) => {
                accumulate(slots, *x, Tensor::from_parts(self.shape(*x).to_vec(), gd.to_vec()));
            }
            Op::Permute(x, perm) => {
                let in_shape = self.shape(*x);
                let in_strides = contiguous_strides(in_shape);
                let dst: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                let mut acc = vec![T::zero(); gd.len()];
                let mut gi = gd.iter();
                for_each_offset(g.shape(), [dst], |[i]| acc[i] = *gi.next().expect("same length"));
                accumulate(slots, *x, Tensor::from_parts(in_shape.to_vec(), acc));
            }
            Op::MatMul(a, b) => self.backprop_matmul(*a, *b, gd, slots),
            Op::MhaScores { q, k, heads, scale } => {
                let (sq, sk) = (self.shape(*q), self.shape(*k));
                let geo = MhaGeometry::new(sq, sk, *heads, "mha_scores").expect("validated in forward");
                let (qd, kd) = (self.value(*q).data(), self.value(*k).data());
                let (t_len, s_len, hf, f, h_count) = (geo.t, geo.s, geo.hf, geo.f, *heads);
                let mut dq = vec![T::zero(); qd.len()];
                let mut dk = vec![T::zero(); kd.len()];
                for b in 0..geo.batch_count {
                    let qo = b * t_len * hf;
                    let ko = b * s_len * hf;
                    let go = b * h_count * t_len * s_len;
                    for h in 0..h_count {
                        for t in 0..t_len {
                            let grow = &gd[go + (h * t_len + t) * s_len..go + (h * t_len + t + 1) * s_len];
                            let qr = qo + t * hf + h * f;
                            for (s, &gv) in grow.iter().enumerate() {
                                let gs = gv * *scale;
                                let kr = ko + s * hf + h * f;
                                axpy(gs, &kd[kr..kr + f], &mut dq[qr..qr + f]);
                                axpy(gs, &qd[qr..qr + f], &mut dk[kr..kr + f]);
                            }
                        }
                    }
                }
                if self.wants(*q) {
                    accumulate(slots, *q, Tensor::from_parts(sq.to_vec(), dq));
                }
                if self.wants(*k) {
                    accumulate(slots, *k, Tensor::from_parts(sk.to_vec(), dk));
                }
            }
            Op::MhaApply { weights, v, heads } => {
                let (sw, sv) = (self.shape(*weights), self.shape(*v));
                let geo = MhaApplyGeometry::new(sw, sv, *heads).expect("validated in forward");
                let (wd, vd) = (self.value(*weights).data(), self.value(*v).data());
                let (t_len, s_len, hf, f, h_count) = (geo.t, geo.s, geo.hf, geo.f, *heads);
                let mut dw = vec![T::zero(); wd.len()];
                let mut dv = vec![T::zero(); vd.len()];
                for b in 0..geo.batch_count {
                    let wo = b * h_count * t_len * s_len;
                    let vo = b * s_len * hf;
                    let go = b * t_len * hf;
                    for h in 0..h_count {
                        for t in 0..t_len {
                            let gr = go + t * hf + h * f;
                            let grow = &gd[gr..gr + f];
                            let wr = wo + (h * t_len + t) * s_len;
                            for s in 0..s_len {
                                let vr = vo + s * hf + h * f;
                                dw[wr + s] = dot(grow, &vd[vr..vr + f]);
                                axpy(wd[wr + s], grow, &mut dv[vr..vr + f]);
                            }
                        }
                    }
                }
                if self.wants(*weights) {
                    accumulate(slots, *weights, Tensor::from_parts(sw.to_vec(), dw));
                }
                if self.wants(*v) {
                    accumulate(slots, *v, Tensor::from_parts(sv.to_vec(), dv));
                }
            }
            Op::AttnWeights { x, mask, norm } => {
                let shape = self.shape(*x);
                let cols = shape[shape.len() - 1];
                let rows_per_matrix = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
                let xd = self.value(*x).data();
                let mut dx = vec![T::zero(); xd.len()];
                for (row_idx, ((yr, gr), dr)) in y
                    .chunks(cols)
                    .zip(gd.chunks(cols))
                    .zip(dx.chunks_mut(cols))
                    .enumerate()
                {
                    let weighted = dot(gr, yr);
                    match norm {
                        Normalizer::Softmax => {
                            for c in 0..cols {
                                dr[c] = yr[c] * (gr[c] - weighted);
                            }
                        }
                        Normalizer::SumNormalize => {
                            let row = row_idx % rows_per_matrix;
                            let xr = &xd[row_idx * cols..(row_idx + 1) * cols];
                            let mut total = T::zero();
                            for (c, &xc) in xr.iter().enumerate() {
                                if !mask.is_masked(row, c) && xc > T::zero() {
                                    total += xc;
                                }
                            }
                            if total < T::of(SUM_NORMALIZE_FLOOR) {
                                continue;
                            }
                            for c in 0..cols {
                                dr[c] = if !mask.is_masked(row, c) && xr[c] > T::zero() {
                                    (gr[c] - weighted) / total
                                } else {
                                    T::zero()
                                };
                            }
                        }
                    }
                }
                accumulate(slots, *x, Tensor::from_parts(shape.to_vec(), dx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let shape = self.shape(*x);
                let d = shape[shape.len() - 1];
                let xd = self.value(*x).data();
                let gv = self.value(*gain).data();
                let mut dx = vec![T::zero(); xd.len()];
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                let inv_d = T::one() / T::of(d as f64);
                for (row, ((xr, gr), dr)) in xd.chunks(d).zip(gd.chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
                    let (mu, rs) = (mean[row], rstd[row]);
                    for j in 0..d {
                        xhat[j] = (xr[j] - mu) * rs;
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                        dxhat[j] = gr[j] * gv[j];
                    }
                    let mean_dxhat = dxhat.iter().copied().sum::<T>() * inv_d;
                    let mean_dxhat_xhat = dot(&dxhat, &xhat) * inv_d;
                    for j in 0..d {
                        dr[j] = rs * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                if self.wants(*x) {
                    accumulate(slots, *x, Tensor::from_parts(shape.to_vec(), dx));
                }
                if self.wants(*gain) {
                    accumulate(slots, *gain, Tensor::from_parts(vec![d], dgain));
                }
                if self.wants(*bias) {
                    accumulate(slots, *bias, Tensor::from_parts(vec![d], dbias));
                }
            }
            Op::Dropout(x, mask) => {
                let data = gd.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                accumulate(slots, *x, Tensor::from_parts(g.shape().to_vec(), data));
            }
            Op::SumAll(x) => {
                let shape = self.shape(*x).to_vec();
                let n = shape.iter().product();
                accumulate(slots, *x, Tensor::from_parts(shape, vec![gd[0]; n]));
            }
            Op::NormLastDim(x) => {
                let shape = self.shape(*x);
                let m = shape[shape.len() - 1];
                let xd = self.value(*x).data();
                let mut dx = vec![T::zero(); xd.len()];
                for (i, (xr, dr)) in xd.chunks(m).zip(dx.chunks_mut(m)).enumerate() {
                    let n = y[i];
                    if n > T::zero() {
                        let s = gd[i] / n;
                        for j in 0..m {
                            dr[j] = s * xr[j];
                        }
                    }
                }
                accumulate(slots, *x, Tensor::from_parts(shape.to_vec(), dx));
            }
        }
    }

    fn backprop_matmul(&self, a: Var, b: Var, gd: &[T], slots: &mut [Option<Tensor<T>>]) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let plan = MatmulPlan::new(sa, sb).expect("validated in forward");
        let (rows, q, r) = (plan.rows(), plan.q, plan.r);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        if self.wants(a) {
            // dA = dC · Bᵀ, via a transposed copy of every distinct B matrix.
            let bt: Vec<T> = bd.chunks(q * r).flat_map(|m| transpose(m, q, r)).collect();
            let mut da = vec![T::zero(); ad.len()];
            plan.for_each(|ia, ib, ic| {
                gemm_nn(&gd[ic..ic + rows * r], &bt[ib..ib + r * q], &mut da[ia..ia + rows * q], rows, r, q);
            });
            accumulate(slots, a, Tensor::from_parts(sa.to_vec(), da));
        }
        if self.wants(b) {
            // dB = Aᵀ · dC
            let mut db = vec![T::zero(); bd.len()];
            plan.for_each(|ia, ib, ic| {
                gemm_tn(&ad[ia..ia + rows * q], &gd[ic..ic + rows * r], &mut db[ib..ib + q * r], rows, q, r);
            });
            accumulate(slots, b, Tensor::from_parts(sb.to_vec(), db));
        }
    }
}
