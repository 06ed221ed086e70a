//! Differentiable tensor operations.

use std::rc::Rc;

use super::{contiguous_strides, Element, NodeRef, Tensor, TensorError};

impl<E: Element> Tensor<E> {
    pub(crate) fn unary(
        &self,
        shape: Vec<usize>,
        data: Vec<E>,
        backward: impl Fn(&[E]) -> Vec<E> + 'static,
    ) -> Tensor<E> {
        let data: Rc<[E]> = data.into();
        let node = self.node.as_ref().map(|nr| NodeRef {
            trace: nr.trace.clone(),
            id: nr
                .trace
                .push(vec![nr.id], Box::new(move |g| vec![backward(g)])),
        });
        Tensor { shape, data, node }
    }

    fn binary(
        &self,
        other: &Tensor<E>,
        shape: Vec<usize>,
        data: Vec<E>,
        backward: impl Fn(&[E], bool, bool) -> (Option<Vec<E>>, Option<Vec<E>>) + 'static,
    ) -> Tensor<E> {
        let data: Rc<[E]> = data.into();
        let trace = Tensor::trace_of(&[self, other]);
        let node = trace.map(|tr| {
            let need_a = self.node.is_some();
            let need_b = other.node.is_some();
            let mut parents = Vec::new();
            if let Some(n) = &self.node {
                parents.push(n.id);
            }
            if let Some(n) = &other.node {
                parents.push(n.id);
            }
            let id = tr.push(
                parents,
                Box::new(move |g| {
                    let (ga, gb) = backward(g, need_a, need_b);
                    let mut out = Vec::new();
                    if need_a {
                        out.push(ga.expect("gradient for first operand"));
                    }
                    if need_b {
                        out.push(gb.expect("gradient for second operand"));
                    }
                    out
                }),
            );
            NodeRef {
                trace: tr.clone(),
                id,
            }
        });
        Tensor { shape, data, node }
    }

    // ---- elementwise arithmetic with right-aligned broadcasting ----

    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        self.zip_broadcast(other, |a, b| a + b, |g, _, _| (g, g))
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        self.zip_broadcast(other, |a, b| a - b, |g, _, _| (g, -g))
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        self.zip_broadcast(other, |a, b| a * b, |g, a, b| (g * b, g * a))
    }

    /// Elementwise combine with broadcasting; `dfn(g, a, b)` returns the
    /// local gradient contributions for both operands at one element.
    fn zip_broadcast(
        &self,
        other: &Tensor<E>,
        vfn: impl Fn(E, E) -> E + Copy + 'static,
        dfn: impl Fn(E, E, E) -> (E, E) + Copy + 'static,
    ) -> Result<Tensor<E>, TensorError> {
        let shape = broadcast_shapes(&self.shape, &other.shape)?;
        let numel: usize = shape.iter().product();
        let a_map = BroadcastMap::new(&shape, &self.shape);
        let b_map = BroadcastMap::new(&shape, &other.shape);
        let mut data = Vec::with_capacity(numel);
        if self.shape == other.shape {
            data.extend(self.data.iter().zip(other.data.iter()).map(|(&a, &b)| vfn(a, b)));
        } else {
            let mut ai = a_map.iter();
            let mut bi = b_map.iter();
            for _ in 0..numel {
                data.push(vfn(self.data[ai.next()], other.data[bi.next()]));
            }
        }
        let a_data = self.data.clone();
        let b_data = other.data.clone();
        let a_len = self.data.len();
        let b_len = other.data.len();
        Ok(self.binary(other, shape, data, move |g, need_a, need_b| {
            let mut ga = need_a.then(|| vec![E::ZERO; a_len]);
            let mut gb = need_b.then(|| vec![E::ZERO; b_len]);
            let mut ai = a_map.iter();
            let mut bi = b_map.iter();
            for &gv in g {
                let (ao, bo) = (ai.next(), bi.next());
                let (da, db) = dfn(gv, a_data[ao], b_data[bo]);
                if let Some(ga) = ga.as_mut() {
                    ga[ao] += da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[bo] += db;
                }
            }
            (ga, gb)
        }))
    }

    pub fn neg(&self) -> Tensor<E> {
        let data = self.data.iter().map(|&v| -v).collect();
        self.unary(self.shape.clone(), data, |g| {
            g.iter().map(|&v| -v).collect()
        })
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, factor: E) -> Tensor<E> {
        let data = self.data.iter().map(|&v| v * factor).collect();
        self.unary(self.shape.clone(), data, move |g| {
            g.iter().map(|&v| v * factor).collect()
        })
    }

    // ---- shape manipulation ----

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<E>, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(self.unary(shape, self.data.to_vec(), |g| g.to_vec()))
    }

    /// Swap two axes, materializing the permuted layout.
    pub fn transpose(&self, axis_a: usize, axis_b: usize) -> Result<Tensor<E>, TensorError> {
        let rank = self.shape.len();
        for axis in [axis_a, axis_b] {
            if axis >= rank {
                return Err(TensorError::AxisOutOfRange { axis, rank });
            }
        }
        let mut shape = self.shape.clone();
        shape.swap(axis_a, axis_b);
        let data = permute_two(&self.data, &self.shape, axis_a, axis_b);
        let out_shape = shape.clone();
        Ok(self.unary(shape, data, move |g| {
            permute_two(g, &out_shape, axis_a, axis_b)
        }))
    }

    /// Restrict one axis to `start..start + len`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<E>, TensorError> {
        let rank = self.shape.len();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange { axis, rank });
        }
        if start + len > self.shape[axis] {
            return Err(TensorError::ShapeMismatch(format!(
                "narrow {start}..{} exceeds axis extent {}",
                start + len,
                self.shape[axis]
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let extent = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut shape = self.shape.clone();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let full_len = self.data.len();
        Ok(self.unary(shape, data, move |g| {
            let mut out = vec![E::ZERO; full_len];
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                out[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            out
        }))
    }

    // ---- contractions ----

    /// Batched matrix product. Trailing two axes contract; leading axes
    /// broadcast.
    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        let (ra, rb) = (self.shape.len(), other.shape.len());
        if ra < 2 || rb < 2 {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul needs rank >= 2, got {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k) = (self.shape[ra - 2], self.shape[ra - 1]);
        let (k2, n) = (other.shape[rb - 2], other.shape[rb - 1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul inner extents {k} and {k2} differ ({:?} x {:?})",
                self.shape, other.shape
            )));
        }
        let batch = broadcast_shapes(&self.shape[..ra - 2], &other.shape[..rb - 2])?;
        let a_map = BroadcastMap::new(&batch, &self.shape[..ra - 2]);
        let b_map = BroadcastMap::new(&batch, &other.shape[..rb - 2]);
        let batches: usize = batch.iter().product();
        let mut data = vec![E::ZERO; batches * m * n];
        {
            let mut ai = a_map.iter();
            let mut bi = b_map.iter();
            for batch_idx in 0..batches {
                let a_off = ai.next() * m * k;
                let b_off = bi.next() * k * n;
                mm_acc(
                    &self.data[a_off..a_off + m * k],
                    &other.data[b_off..b_off + k * n],
                    &mut data[batch_idx * m * n..(batch_idx + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = batch.clone();
        shape.extend([m, n]);
        let a_data = self.data.clone();
        let b_data = other.data.clone();
        let (a_len, b_len) = (self.data.len(), other.data.len());
        Ok(self.binary(other, shape, data, move |g, need_a, need_b| {
            let mut ga = need_a.then(|| vec![E::ZERO; a_len]);
            let mut gb = need_b.then(|| vec![E::ZERO; b_len]);
            let mut ai = a_map.iter();
            let mut bi = b_map.iter();
            for batch_idx in 0..batches {
                let a_off = ai.next() * m * k;
                let b_off = bi.next() * k * n;
                let gc = &g[batch_idx * m * n..(batch_idx + 1) * m * n];
                if let Some(ga) = ga.as_mut() {
                    // dA += dC . B^T
                    mm_abt_acc(
                        gc,
                        &b_data[b_off..b_off + k * n],
                        &mut ga[a_off..a_off + m * k],
                        m,
                        n,
                        k,
                    );
                }
                if let Some(gb) = gb.as_mut() {
                    // dB += A^T . dC
                    mm_atb_acc(
                        &a_data[a_off..a_off + m * k],
                        gc,
                        &mut gb[b_off..b_off + k * n],
                        m,
                        k,
                        n,
                    );
                }
            }
            (ga, gb)
        }))
    }

    // ---- nonlinearities and normalization ----

    /// Numerically stable softmax along `axis`: the slice maximum is
    /// subtracted before exponentiation.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<E>, TensorError> {
        let rank = self.shape.len();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange { axis, rank });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let extent = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = vec![E::ZERO; self.data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                let mut max = self.data[base];
                for j in 1..extent {
                    max = max.maximum(self.data[base + j * inner]);
                }
                let mut sum = E::ZERO;
                for j in 0..extent {
                    let e = (self.data[base + j * inner] - max).exp();
                    data[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..extent {
                    data[base + j * inner] = data[base + j * inner] / sum;
                }
            }
        }
        let y: Rc<[E]> = data.clone().into();
        let out = self.unary(self.shape.clone(), data, move |g| {
            // dx_j = y_j * (g_j - sum_k g_k y_k) per slice
            let mut dx = vec![E::ZERO; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * extent * inner + i;
                    let mut dot = E::ZERO;
                    for j in 0..extent {
                        let idx = base + j * inner;
                        dot += g[idx] * y[idx];
                    }
                    for j in 0..extent {
                        let idx = base + j * inner;
                        dx[idx] = y[idx] * (g[idx] - dot);
                    }
                }
            }
            dx
        });
        Ok(out)
    }

    /// Normalize the last axis to zero mean and unit variance (biased
    /// estimate, `eps` inside the square root), then apply `y = gain * x + bias`.
    pub fn layer_norm(
        &self,
        gain: &Tensor<E>,
        bias: &Tensor<E>,
        eps: f64,
    ) -> Result<Tensor<E>, TensorError> {
        let rank = self.shape.len();
        if rank == 0 {
            return Err(TensorError::ShapeMismatch("layer_norm on scalar".into()));
        }
        let dim = self.shape[rank - 1];
        if gain.shape != [dim] || bias.shape != [dim] {
            return Err(TensorError::ShapeMismatch(format!(
                "layer_norm gain {:?} / bias {:?} against last axis {dim}",
                gain.shape, bias.shape
            )));
        }
        let rows = self.data.len() / dim;
        let eps = E::from_f64(eps);
        let inv_dim = E::from_f64(1.0 / dim as f64);
        let mut data = vec![E::ZERO; self.data.len()];
        let mut normalized = vec![E::ZERO; self.data.len()];
        let mut inv_stds = vec![E::ZERO; rows];
        for r in 0..rows {
            let row = &self.data[r * dim..(r + 1) * dim];
            let mut mean = E::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean * inv_dim;
            let mut var = E::ZERO;
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var = var * inv_dim;
            let inv_std = E::ONE / (var + eps).sqrt();
            inv_stds[r] = inv_std;
            for (j, &v) in row.iter().enumerate() {
                let xhat = (v - mean) * inv_std;
                normalized[r * dim + j] = xhat;
                data[r * dim + j] = gain.data[j] * xhat + bias.data[j];
            }
        }
        let xhat: Rc<[E]> = normalized.into();
        let inv_stds: Rc<[E]> = inv_stds.into();
        let gain_data = gain.data.clone();
        let shape = self.shape.clone();
        let out_data = data;
        // three-way node: parents are whichever of (x, gain, bias) are traced
        let xhat_b = xhat.clone();
        let inv_stds_b = inv_stds.clone();
        let x_traced = self.node.is_some();
        let g_traced = gain.node.is_some();
        let b_traced = bias.node.is_some();
        let trace = Tensor::trace_of(&[self, gain, bias]);
        let node = trace.map(|tr| {
            let mut parents = Vec::new();
            for t in [&self.node, &gain.node, &bias.node].into_iter().flatten() {
                parents.push(t.id);
            }
            let id = tr.push(
                parents,
                Box::new(move |g| {
                    let mut out = Vec::new();
                    if x_traced {
                        let mut dx = vec![E::ZERO; rows * dim];
                        for r in 0..rows {
                            let inv_std = inv_stds_b[r];
                            // reduce the two row sums the gradient needs
                            let mut sum_dxhat = E::ZERO;
                            let mut sum_dxhat_xhat = E::ZERO;
                            for j in 0..dim {
                                let dxhat = g[r * dim + j] * gain_data[j];
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat_b[r * dim + j];
                            }
                            for j in 0..dim {
                                let idx = r * dim + j;
                                let dxhat = g[idx] * gain_data[j];
                                dx[idx] = inv_std
                                    * (dxhat
                                        - inv_dim * sum_dxhat
                                        - inv_dim * xhat_b[idx] * sum_dxhat_xhat);
                            }
                        }
                        out.push(dx);
                    }
                    if g_traced {
                        let mut dg = vec![E::ZERO; dim];
                        for r in 0..rows {
                            for j in 0..dim {
                                dg[j] += g[r * dim + j] * xhat_b[r * dim + j];
                            }
                        }
                        out.push(dg);
                    }
                    if b_traced {
                        let mut db = vec![E::ZERO; dim];
                        for r in 0..rows {
                            for j in 0..dim {
                                db[j] += g[r * dim + j];
                            }
                        }
                        out.push(db);
                    }
                    out
                }),
            );
            NodeRef {
                trace: tr.clone(),
                id,
            }
        });
        Ok(Tensor {
            shape,
            data: out_data.into(),
            node,
        })
    }

    /// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&self) -> Tensor<E> {
        let c = E::from_f64(0.7978845608028654); // sqrt(2/pi)
        let a = E::from_f64(0.044715);
        let half = E::from_f64(0.5);
        let three = E::from_f64(3.0);
        let data: Vec<E> = self
            .data
            .iter()
            .map(|&x| {
                let u = c * (x + a * x * x * x);
                half * x * (E::ONE + u.tanh())
            })
            .collect();
        let x_data = self.data.clone();
        self.unary(self.shape.clone(), data, move |g| {
            g.iter()
                .zip(x_data.iter())
                .map(|(&gv, &x)| {
                    let u = c * (x + a * x * x * x);
                    let t = u.tanh();
                    let sech2 = E::ONE - t * t;
                    let du = c * (E::ONE + three * a * x * x);
                    gv * (half * (E::ONE + t) + half * x * sech2 * du)
                })
                .collect()
        })
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Tensor<E> {
        let mut sum = E::ZERO;
        for &v in self.data.iter() {
            sum += v;
        }
        let len = self.data.len();
        self.unary(vec![], vec![sum], move |g| vec![g[0]; len])
    }

    pub fn mean_all(&self) -> Tensor<E> {
        let inv = E::from_f64(1.0 / self.data.len() as f64);
        self.sum_all().scale(inv)
    }
}

/// Concatenate along `axis`; all other extents must agree.
pub fn concat<E: Element>(inputs: &[&Tensor<E>], axis: usize) -> Result<Tensor<E>, TensorError> {
    let first = inputs
        .first()
        .ok_or_else(|| TensorError::ShapeMismatch("concat of zero tensors".into()))?;
    let rank = first.shape.len();
    if axis >= rank {
        return Err(TensorError::AxisOutOfRange { axis, rank });
    }
    let mut total_extent = 0;
    for t in inputs {
        if t.shape.len() != rank
            || t.shape[..axis] != first.shape[..axis]
            || t.shape[axis + 1..] != first.shape[axis + 1..]
        {
            return Err(TensorError::ShapeMismatch(format!(
                "concat of {:?} with {:?} along axis {axis}",
                first.shape, t.shape
            )));
        }
        total_extent += t.shape[axis];
    }
    let outer: usize = first.shape[..axis].iter().product();
    let inner: usize = first.shape[axis + 1..].iter().product();
    let mut shape = first.shape.clone();
    shape[axis] = total_extent;
    let mut data = Vec::with_capacity(outer * total_extent * inner);
    for o in 0..outer {
        for t in inputs {
            let extent = t.shape[axis];
            let base = o * extent * inner;
            data.extend_from_slice(&t.data[base..base + extent * inner]);
        }
    }
    let extents: Vec<usize> = inputs.iter().map(|t| t.shape[axis]).collect();
    let traced: Vec<bool> = inputs.iter().map(|t| t.node.is_some()).collect();
    let trace = Tensor::trace_of(inputs);
    let data: Rc<[E]> = data.into();
    let node = trace.map(|tr| {
        let parents: Vec<usize> = inputs.iter().filter_map(|t| t.node.as_ref().map(|n| n.id)).collect();
        let extents = extents.clone();
        let traced = traced.clone();
        let id = tr.push(
            parents,
            Box::new(move |g| {
                let mut grads: Vec<Vec<E>> = extents
                    .iter()
                    .map(|&e| vec![E::ZERO; outer * e * inner])
                    .collect();
                let mut cursor = 0;
                for o in 0..outer {
                    for (t_idx, &extent) in extents.iter().enumerate() {
                        let chunk = extent * inner;
                        grads[t_idx][o * chunk..(o + 1) * chunk]
                            .copy_from_slice(&g[cursor..cursor + chunk]);
                        cursor += chunk;
                    }
                }
                grads
                    .into_iter()
                    .zip(&traced)
                    .filter(|(_, &t)| t)
                    .map(|(g, _)| g)
                    .collect()
            }),
        );
        NodeRef {
            trace: tr.clone(),
            id,
        }
    });
    Ok(Tensor { shape, data, node })
}

// ---- raw kernels ----

/// out[m,n] += a[m,k] . b[k,n]
fn mm_acc<E: Element>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,k] += a[m,n] . b[k,n]^T
fn mm_abt_acc<E: Element>(a: &[E], b: &[E], out: &mut [E], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = E::ZERO;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            out[i * k + p] += acc;
        }
    }
}

/// out[k,n] += a[m,k]^T . b[m,n]
fn mm_atb_acc<E: Element>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

fn permute_two<E: Element>(data: &[E], shape: &[usize], axis_a: usize, axis_b: usize) -> Vec<E> {
    let mut out_shape = shape.to_vec();
    out_shape.swap(axis_a, axis_b);
    let out_strides = contiguous_strides(&out_shape);
    let mut out = vec![data[0]; data.len()];
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    for &v in data {
        let mut off = 0;
        for d in 0..rank {
            let out_d = if d == axis_a {
                axis_b
            } else if d == axis_b {
                axis_a
            } else {
                d
            };
            off += idx[d] * out_strides[out_d];
        }
        out[off] = v;
        // odometer increment over the input index
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>, TensorError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(TensorError::ShapeMismatch(format!(
                "cannot broadcast {a:?} with {b:?}"
            )));
        };
    }
    Ok(out)
}

/// Maps linear indices in an output shape onto linear offsets of an input
/// shape that broadcasts into it (stride 0 along expanded axes).
#[derive(Clone)]
pub(crate) struct BroadcastMap {
    out_shape: Vec<usize>,
    strides: Vec<usize>,
}

impl BroadcastMap {
    fn new(out_shape: &[usize], in_shape: &[usize]) -> Self {
        let rank = out_shape.len();
        let offset = rank - in_shape.len();
        let in_strides = contiguous_strides(in_shape);
        let mut strides = vec![0usize; rank];
        for d in 0..in_shape.len() {
            strides[offset + d] = if in_shape[d] == 1 { 0 } else { in_strides[d] };
        }
        BroadcastMap {
            out_shape: out_shape.to_vec(),
            strides,
        }
    }

    fn iter(&self) -> BroadcastIter<'_> {
        BroadcastIter {
            map: self,
            idx: vec![0; self.out_shape.len()],
            offset: 0,
        }
    }
}

struct BroadcastIter<'a> {
    map: &'a BroadcastMap,
    idx: Vec<usize>,
    offset: usize,
}

impl BroadcastIter<'_> {
    /// Offset for the current output position, then advance the odometer.
    fn next(&mut self) -> usize {
        let current = self.offset;
        for d in (0..self.idx.len()).rev() {
            self.idx[d] += 1;
            self.offset += self.map.strides[d];
            if self.idx[d] < self.map.out_shape[d] {
                return current;
            }
            self.offset -= self.map.strides[d] * self.map.out_shape[d];
            self.idx[d] = 0;
        }
        current
    }
}
