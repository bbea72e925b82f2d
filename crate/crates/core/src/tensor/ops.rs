//! Primitive operations: forward construction and backward rules.

use std::rc::Rc;

use super::{Graph, Result, Scalar, TensorError, TensorId, Value};
use crate::rng::StreamRng;
use rand::RngCore;

#[derive(Clone)]
pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        a: TensorId,
        factor: T,
    },
    /// Flattened [m,k] @ shared [k,n].
    Matmul {
        a: TensorId,
        b: TensorId,
        m: usize,
        k: usize,
        n: usize,
    },
    /// Per-batch [m,k] @ [k,n] (or [n,k] when `b_trans`).
    Bmm {
        a: TensorId,
        b: TensorId,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_trans: bool,
    },
    GatherRows {
        table: TensorId,
        ids: Rc<Vec<u32>>,
    },
    Reshape {
        a: TensorId,
    },
    Transpose12 {
        a: TensorId,
        b: usize,
        x: usize,
        y: usize,
        d: usize,
    },
    SplitHeads {
        a: TensorId,
        heads: usize,
    },
    MergeHeads {
        a: TensorId,
        heads: usize,
    },
    Softmax {
        a: TensorId,
        axis: usize,
    },
    LayerNorm {
        a: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: T,
    },
    Conv3x3 {
        x: TensorId,
        w: TensorId,
        cols: Rc<Vec<T>>,
        b: usize,
        h: usize,
        wd: usize,
        cin: usize,
        cout: usize,
    },
    Gelu {
        a: TensorId,
    },
    Dropout {
        a: TensorId,
        keep: Rc<Vec<T>>,
    },
    Sum {
        a: TensorId,
    },
    MaskedCrossEntropy {
        logits: TensorId,
        targets: Rc<Vec<u8>>,
        weights: Rc<Vec<T>>,
        weight_sum: T,
    },
}

impl<T: Scalar> Op<T> {
    pub(crate) fn clone_for_backward(&self) -> Self {
        self.clone()
    }
}

// ---------------------------------------------------------------------------
// broadcasting helpers

pub(crate) fn broadcast_shape(lhs: &[usize], rhs: &[usize]) -> Result<Vec<usize>> {
    let ndim = lhs.len().max(rhs.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let l = dim_from_right(lhs, ndim, i);
        let r = dim_from_right(rhs, ndim, i);
        out[ndim - 1 - i] = if l == r || r == 1 {
            l
        } else if l == 1 {
            r
        } else {
            return Err(TensorError::NotBroadcastable {
                lhs: lhs.to_vec(),
                rhs: rhs.to_vec(),
            });
        };
    }
    Ok(out)
}

fn dim_from_right(shape: &[usize], ndim: usize, i: usize) -> usize {
    if i < shape.len() {
        shape[shape.len() - 1 - i]
    } else {
        let _ = ndim;
        1
    }
}

/// Row-major strides with zeros on broadcast dimensions, aligned to `out`.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let ndim = out.len();
    let mut strides = vec![0usize; ndim];
    let mut acc = 1usize;
    for i in 0..shape.len() {
        let d = shape.len() - 1 - i;
        strides[ndim - 1 - i] = if shape[d] == 1 { 0 } else { acc };
        acc *= shape[d];
    }
    for (i, s) in strides.iter_mut().enumerate() {
        if out[i] == 1 {
            *s = 0;
        }
    }
    strides
}

/// Walks the output linearly, yielding (a_index, b_index) per element.
struct Odometer<'a> {
    shape: &'a [usize],
    idx: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
    ai: usize,
    bi: usize,
}

impl<'a> Odometer<'a> {
    fn new(out: &'a [usize], a_shape: &[usize], b_shape: &[usize]) -> Self {
        Self {
            shape: out,
            idx: vec![0; out.len()],
            a_strides: broadcast_strides(a_shape, out),
            b_strides: broadcast_strides(b_shape, out),
            ai: 0,
            bi: 0,
        }
    }

    #[inline]
    fn step(&mut self) {
        for d in (0..self.shape.len()).rev() {
            self.idx[d] += 1;
            self.ai += self.a_strides[d];
            self.bi += self.b_strides[d];
            if self.idx[d] < self.shape[d] {
                return;
            }
            self.idx[d] = 0;
            self.ai -= self.a_strides[d] * self.shape[d];
            self.bi -= self.b_strides[d] * self.shape[d];
        }
    }
}

fn binary_forward<T: Scalar>(
    a: &Value<T>,
    b: &Value<T>,
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let numel: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    if a.shape == b.shape {
        for (&x, &y) in a.data.iter().zip(b.data.iter()) {
            out.push(f(x, y));
        }
        return out;
    }
    let mut odo = Odometer::new(out_shape, &a.shape, &b.shape);
    for _ in 0..numel {
        out.push(f(a.data[odo.ai], b.data[odo.bi]));
        odo.step();
    }
    out
}

/// Accumulate d(out)/d(operand) for a broadcast binary op: contribution of
/// each output cell lands on the operand cell it was read from, optionally
/// weighted by the other operand (product rule).
fn binary_backward_into<T: Scalar>(
    grad_out: &[T],
    out_shape: &[usize],
    operand_shape: &[usize],
    other: Option<(&[T], &[usize])>,
    target: &mut [T],
) {
    if operand_shape == out_shape {
        match other {
            None => {
                for (t, &g) in target.iter_mut().zip(grad_out) {
                    *t += g;
                }
            }
            Some((odata, oshape)) if oshape == out_shape => {
                for ((t, &g), &o) in target.iter_mut().zip(grad_out).zip(odata) {
                    *t += g * o;
                }
            }
            Some((odata, oshape)) => {
                let mut odo = Odometer::new(out_shape, operand_shape, oshape);
                for &g in grad_out {
                    target[odo.ai] += g * odata[odo.bi];
                    odo.step();
                }
            }
        }
        return;
    }
    let dummy: [usize; 0] = [];
    let (odata, oshape): (&[T], &[usize]) = match other {
        Some((d, s)) => (d, s),
        None => (&[], &dummy),
    };
    let mut odo = Odometer::new(out_shape, operand_shape, oshape);
    for &g in grad_out {
        let contribution = if odata.is_empty() { g } else { g * odata[odo.bi] };
        target[odo.ai] += contribution;
        odo.step();
    }
}

// ---------------------------------------------------------------------------
// forward builders

impl<T: Scalar> Graph<T> {
    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let out_shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let data = binary_forward(self.value(a), self.value(b), &out_shape, |x, y| x + y);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(
            Value {
                shape: out_shape,
                data: Rc::new(data),
            },
            Op::Add { a, b },
            rg,
        ))
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let out_shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let data = binary_forward(self.value(a), self.value(b), &out_shape, |x, y| x * y);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(
            Value {
                shape: out_shape,
                data: Rc::new(data),
            },
            Op::Mul { a, b },
            rg,
        ))
    }

    pub fn scale(&mut self, a: TensorId, factor: T) -> TensorId {
        let data: Vec<T> = self.data(a).iter().map(|&x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a);
        self.push(
            Value {
                shape,
                data: Rc::new(data),
            },
            Op::Scale { a, factor },
            rg,
        )
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let nb = self.scale(b, -T::one());
        self.add(a, nb)
    }

    /// `a @ b` where `a` is [..., m, k]. A 2-d `b` is shared across leading
    /// dimensions; otherwise leading dimensions must match exactly.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let a_shape = self.shape(a).to_vec();
        let b_shape = self.shape(b).to_vec();
        if a_shape.len() < 2 || b_shape.len() < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a_shape,
                rhs: b_shape,
            });
        }
        let k = a_shape[a_shape.len() - 1];
        if b_shape.len() == 2 {
            if b_shape[0] != k {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: a_shape,
                    rhs: b_shape,
                });
            }
            let n = b_shape[1];
            let m: usize = a_shape[..a_shape.len() - 1].iter().product();
            let mut out = vec![T::zero(); m * n];
            T::gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
            let mut out_shape = a_shape.clone();
            *out_shape.last_mut().unwrap() = n;
            let rg = self.requires_grad(a) || self.requires_grad(b);
            Ok(self.push(
                Value {
                    shape: out_shape,
                    data: Rc::new(out),
                },
                Op::Matmul { a, b, m, k, n },
                rg,
            ))
        } else {
            if a_shape[..a_shape.len() - 2] != b_shape[..b_shape.len() - 2]
                || b_shape[b_shape.len() - 2] != k
            {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: a_shape,
                    rhs: b_shape,
                });
            }
            self.bmm(a, b, false)
        }
    }

    /// Batched matmul: a [N.., m, k] @ b [N.., k, n] (`b_trans`: b is [N.., n, k]).
    pub fn bmm(&mut self, a: TensorId, b: TensorId, b_trans: bool) -> Result<TensorId> {
        let a_shape = self.shape(a).to_vec();
        let b_shape = self.shape(b).to_vec();
        let nd = a_shape.len();
        if nd < 3
            || b_shape.len() != nd
            || a_shape[..nd - 2] != b_shape[..nd - 2]
        {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: a_shape,
                rhs: b_shape,
            });
        }
        let m = a_shape[nd - 2];
        let k = a_shape[nd - 1];
        let (bk, n) = if b_trans {
            (b_shape[nd - 1], b_shape[nd - 2])
        } else {
            (b_shape[nd - 2], b_shape[nd - 1])
        };
        if bk != k {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: a_shape,
                rhs: b_shape,
            });
        }
        let batch: usize = a_shape[..nd - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        {
            let a_data = self.data(a);
            let b_data = self.data(b);
            batched_gemm(batch, m, k, n, a_data, b_data, b_trans, &mut out);
        }
        let mut out_shape = a_shape.clone();
        out_shape[nd - 2] = m;
        out_shape[nd - 1] = n;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(
            Value {
                shape: out_shape,
                data: Rc::new(out),
            },
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_trans,
            },
            rg,
        ))
    }

    /// Row lookup: `table` [v, d] indexed by `ids` -> [len(ids), d].
    pub fn gather_rows(&mut self, table: TensorId, ids: &[u32]) -> Result<TensorId> {
        let t_shape = self.shape(table).to_vec();
        if t_shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "gather_rows",
                lhs: t_shape,
                rhs: vec![ids.len()],
            });
        }
        let (v, d) = (t_shape[0], t_shape[1]);
        for &id in ids {
            if id as usize >= v {
                return Err(TensorError::IndexOutOfRange {
                    index: id as usize,
                    bound: v,
                });
            }
        }
        let t_data = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&t_data[id as usize * d..(id as usize + 1) * d]);
        }
        let rg = self.requires_grad(table);
        Ok(self.push(
            Value {
                shape: vec![ids.len(), d],
                data: Rc::new(out),
            },
            Op::GatherRows {
                table,
                ids: Rc::new(ids.to_vec()),
            },
            rg,
        ))
    }

    /// Zero-copy reshape.
    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = Rc::clone(&self.nodes[a.0].value.data);
        let rg = self.requires_grad(a);
        Ok(self.push(
            Value {
                shape: shape.to_vec(),
                data,
            },
            Op::Reshape { a },
            rg,
        ))
    }

    /// Swap axes 1 and 2 of a 4-d tensor: [b, x, y, d] -> [b, y, x, d].
    pub fn transpose_12(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose_12",
                lhs: shape,
                rhs: vec![],
            });
        }
        let (b, x, y, d) = (shape[0], shape[1], shape[2], shape[3]);
        let data = transpose_12_data(self.data(a), b, x, y, d);
        let rg = self.requires_grad(a);
        Ok(self.push(
            Value {
                shape: vec![b, y, x, d],
                data: Rc::new(data),
            },
            Op::Transpose12 { a, b, x, y, d },
            rg,
        ))
    }

    /// [n, l, d] -> [n*heads, l, d/heads].
    pub fn split_heads(&mut self, a: TensorId, heads: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 || shape[2] % heads != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "split_heads",
                lhs: shape,
                rhs: vec![heads],
            });
        }
        let (n, l, d) = (shape[0], shape[1], shape[2]);
        let dh = d / heads;
        let data = split_heads_data(self.data(a), n, l, d, heads);
        let rg = self.requires_grad(a);
        Ok(self.push(
            Value {
                shape: vec![n * heads, l, dh],
                data: Rc::new(data),
            },
            Op::SplitHeads { a, heads },
            rg,
        ))
    }

    /// Inverse of [`split_heads`]: [n*heads, l, dh] -> [n, l, dh*heads].
    pub fn merge_heads(&mut self, a: TensorId, heads: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 || shape[0] % heads != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "merge_heads",
                lhs: shape,
                rhs: vec![heads],
            });
        }
        let (nh, l, dh) = (shape[0], shape[1], shape[2]);
        let n = nh / heads;
        let data = merge_heads_data(self.data(a), n, l, dh, heads);
        let rg = self.requires_grad(a);
        Ok(self.push(
            Value {
                shape: vec![n, l, dh * heads],
                data: Rc::new(data),
            },
            Op::MergeHeads { a, heads },
            rg,
        ))
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                ndim: shape.len(),
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.data(a);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    let v = src[base + j * inner];
                    if v > max {
                        max = v;
                    }
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (src[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                let inv = T::one() / sum;
                for j in 0..len {
                    out[base + j * inner] *= inv;
                }
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(
            Value {
                shape,
                data: Rc::new(out),
            },
            Op::Softmax { a, axis },
            rg,
        ))
    }

    /// Layer normalization over the last axis with affine gain/bias.
    pub fn layer_norm(&mut self, a: TensorId, gain: TensorId, bias: TensorId, eps: T) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or(TensorError::ShapeMismatch {
            op: "layer_norm",
            lhs: shape.clone(),
            rhs: vec![],
        })?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(gain).to_vec(),
                rhs: vec![d],
            });
        }
        let src = self.data(a);
        let g = self.data(gain);
        let b = self.data(bias);
        let mut out = vec![T::zero(); src.len()];
        let lanes = src.len() / d;
        let dt = T::from_f64(d as f64);
        for lane in 0..lanes {
            let xs = &src[lane * d..(lane + 1) * d];
            let mut mean = T::zero();
            for &x in xs {
                mean += x;
            }
            mean = mean / dt;
            let mut var = T::zero();
            for &x in xs {
                let c = x - mean;
                var += c * c;
            }
            var = var / dt;
            let inv_std = T::one() / (var + eps).sqrt();
            let dst = &mut out[lane * d..(lane + 1) * d];
            for j in 0..d {
                dst[j] = (xs[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(gain) || self.requires_grad(bias);
        Ok(self.push(
            Value {
                shape,
                data: Rc::new(out),
            },
            Op::LayerNorm { a, gain, bias, eps },
            rg,
        ))
    }

    /// 3x3 same-padding convolution on [b, h, w, c_in] (or [h, w, c_in]) with
    /// kernel [3, 3, c_in, c_out]. Bias is composed separately via `add`.
    pub fn conv2d_same(&mut self, x: TensorId, w: TensorId) -> Result<TensorId> {
        let x_shape = self.shape(x).to_vec();
        let w_shape = self.shape(w).to_vec();
        let (bsz, h, wd, cin, batched) = match x_shape.len() {
            4 => (x_shape[0], x_shape[1], x_shape[2], x_shape[3], true),
            3 => (1, x_shape[0], x_shape[1], x_shape[2], false),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d_same",
                    lhs: x_shape,
                    rhs: w_shape,
                })
            }
        };
        if w_shape.len() != 4 || w_shape[0] != 3 || w_shape[1] != 3 || w_shape[2] != cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d_same",
                lhs: x_shape,
                rhs: w_shape,
            });
        }
        let cout = w_shape[3];
        let cols = im2col(self.data(x), bsz, h, wd, cin);
        let cells = bsz * h * wd;
        let mut out = vec![T::zero(); cells * cout];
        T::gemm(cells, 9 * cin, cout, &cols, false, self.data(w), false, &mut out, false);
        let out_shape = if batched {
            vec![bsz, h, wd, cout]
        } else {
            vec![h, wd, cout]
        };
        let rg = self.requires_grad(x) || self.requires_grad(w);
        Ok(self.push(
            Value {
                shape: out_shape,
                data: Rc::new(out),
            },
            Op::Conv3x3 {
                x,
                w,
                cols: Rc::new(cols),
                b: bsz,
                h,
                wd,
                cin,
                cout,
            },
            rg,
        ))
    }

    /// Gaussian error linear unit (tanh approximation).
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<T> = self.data(a).iter().map(|&x| gelu_value(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a);
        self.push(
            Value {
                shape,
                data: Rc::new(data),
            },
            Op::Gelu { a },
            rg,
        )
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by
    /// 1/(1-p). Identity when not training or p == 0.
    pub fn dropout(
        &mut self,
        a: TensorId,
        p: f64,
        training: bool,
        rng: &mut StreamRng,
    ) -> Result<TensorId> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidProbability { p });
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let scale = T::from_f64(1.0 / (1.0 - p));
        let threshold = (p * (1u64 << 53) as f64) as u64;
        let keep: Vec<T> = (0..self.value(a).numel())
            .map(|_| {
                if (rng.next_u64() >> 11) < threshold {
                    T::zero()
                } else {
                    scale
                }
            })
            .collect();
        let data: Vec<T> = self
            .data(a)
            .iter()
            .zip(&keep)
            .map(|(&x, &k)| x * k)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a);
        Ok(self.push(
            Value {
                shape,
                data: Rc::new(data),
            },
            Op::Dropout {
                a,
                keep: Rc::new(keep),
            },
            rg,
        ))
    }

    /// Gradient barrier: same value, no history.
    pub fn detach(&mut self, a: TensorId) -> TensorId {
        let value = Value {
            shape: self.shape(a).to_vec(),
            data: Rc::clone(&self.nodes[a.0].value.data),
        };
        self.push(value, Op::Leaf, false)
    }

    /// Sum of all elements -> shape [1].
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let mut acc = T::zero();
        for &x in self.data(a) {
            acc += x;
        }
        let rg = self.requires_grad(a);
        self.push(
            Value {
                shape: vec![1],
                data: Rc::new(vec![acc]),
            },
            Op::Sum { a },
            rg,
        )
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let numel = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, T::from_f64(1.0 / numel as f64))
    }

    /// Mean per-row cross-entropy over rows with nonzero weight.
    ///
    /// `logits` [n, classes], `targets` class index per row, `weights` one
    /// inclusion weight per row. Errors if every weight is zero.
    pub fn masked_cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[u8],
        weights: &[T],
    ) -> Result<TensorId> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() || shape[0] != weights.len() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_cross_entropy",
                lhs: shape,
                rhs: vec![targets.len(), weights.len()],
            });
        }
        let classes = shape[1];
        for &t in targets {
            if t as usize >= classes {
                return Err(TensorError::IndexOutOfRange {
                    index: t as usize,
                    bound: classes,
                });
            }
        }
        let mut weight_sum = T::zero();
        for &w in weights {
            weight_sum += w;
        }
        if weight_sum <= T::zero() {
            return Err(TensorError::EmptyMask);
        }
        let data = self.data(logits);
        let mut acc = T::zero();
        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if w == T::zero() {
                continue;
            }
            let row = &data[r * classes..(r + 1) * classes];
            let mut max = T::neg_infinity();
            for &v in row {
                if v > max {
                    max = v;
                }
            }
            let mut lse = T::zero();
            for &v in row {
                lse += (v - max).exp();
            }
            let lse = lse.ln() + max;
            acc += w * (lse - row[t as usize]);
        }
        let loss = acc / weight_sum;
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Value {
                shape: vec![1],
                data: Rc::new(vec![loss]),
            },
            Op::MaskedCrossEntropy {
                logits,
                targets: Rc::new(targets.to_vec()),
                weights: Rc::new(weights.to_vec()),
                weight_sum,
            },
            rg,
        ))
    }
}

// ---------------------------------------------------------------------------
// data movement helpers (shared by forward and backward)

fn transpose_12_data<T: Scalar>(src: &[T], b: usize, x: usize, y: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for bb in 0..b {
        for xx in 0..x {
            for yy in 0..y {
                let s = ((bb * x + xx) * y + yy) * d;
                let t = ((bb * y + yy) * x + xx) * d;
                out[t..t + d].copy_from_slice(&src[s..s + d]);
            }
        }
    }
    out
}

fn split_heads_data<T: Scalar>(src: &[T], n: usize, l: usize, d: usize, heads: usize) -> Vec<T> {
    let dh = d / heads;
    let mut out = vec![T::zero(); src.len()];
    for nn in 0..n {
        for hh in 0..heads {
            for ll in 0..l {
                let s = (nn * l + ll) * d + hh * dh;
                let t = ((nn * heads + hh) * l + ll) * dh;
                out[t..t + dh].copy_from_slice(&src[s..s + dh]);
            }
        }
    }
    out
}

fn merge_heads_data<T: Scalar>(src: &[T], n: usize, l: usize, dh: usize, heads: usize) -> Vec<T> {
    let d = dh * heads;
    let mut out = vec![T::zero(); src.len()];
    for nn in 0..n {
        for hh in 0..heads {
            for ll in 0..l {
                let s = ((nn * heads + hh) * l + ll) * dh;
                let t = (nn * l + ll) * d + hh * dh;
                out[t..t + dh].copy_from_slice(&src[s..s + dh]);
            }
        }
    }
    out
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Patch extraction for a 3x3 same-padding convolution:
/// rows indexed by (b, y, x), columns by (ky, kx, c).
fn im2col<T: Scalar>(x: &[T], b: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let mut cols = vec![T::zero(); b * h * w * 9 * c];
    for bb in 0..b {
        for y in 0..h {
            for ky in 0..3usize {
                let iy = y as isize + ky as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let iy = iy as usize;
                for x_out in 0..w {
                    let row_base = (((bb * h + y) * w) + x_out) * 9 * c + ky * 3 * c;
                    for kx in 0..3usize {
                        let ix = x_out as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((bb * h + iy) * w + ix as usize) * c;
                        let dst = row_base + kx * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn batched_gemm<T: Scalar>(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    b_trans: bool,
    out: &mut [T],
) {
    use rayon::prelude::*;
    let work = batch * m * k * n;
    if work >= 1 << 21 && batch > 1 {
        out.par_chunks_mut(m * n).enumerate().for_each(|(i, c)| {
            T::gemm(
                m,
                k,
                n,
                &a[i * m * k..(i + 1) * m * k],
                false,
                &b[i * k * n..(i + 1) * k * n],
                b_trans,
                c,
                false,
            );
        });
    } else {
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &a[i * m * k..(i + 1) * m * k],
                false,
                &b[i * k * n..(i + 1) * k * n],
                b_trans,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
    }
}

fn gelu_value<T: Scalar>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    let d_inner = c * (T::one() + three * k * x * x);
    half * (T::one() + t) + half * x * sech2 * d_inner
}

// ---------------------------------------------------------------------------
// backward

pub(crate) fn backward_step<T: Scalar>(graph: &mut Graph<T>, node_idx: usize, op: &Op<T>) {
    let grad_out = graph.nodes[node_idx]
        .grad
        .clone()
        .expect("backward_step called without output grad");
    let out_shape = graph.nodes[node_idx].value.shape.clone();
    match *op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            for &(operand, _other) in &[(a, b), (b, a)] {
                if graph.requires_grad(operand) {
                    let op_shape = graph.shape(operand).to_vec();
                    if let Some(buf) = graph.grad_buffer(operand) {
                        let mut target = std::mem::take(buf);
                        binary_backward_into(&grad_out, &out_shape, &op_shape, None, &mut target);
                        *graph.grad_buffer(operand).unwrap() = target;
                    }
                }
            }
        }
        Op::Mul { a, b } => {
            for &(operand, other) in &[(a, b), (b, a)] {
                if graph.requires_grad(operand) {
                    let op_shape = graph.shape(operand).to_vec();
                    let other_val = graph.nodes[other.0].value.clone();
                    if let Some(buf) = graph.grad_buffer(operand) {
                        let mut target = std::mem::take(buf);
                        binary_backward_into(
                            &grad_out,
                            &out_shape,
                            &op_shape,
                            Some((&other_val.data, &other_val.shape)),
                            &mut target,
                        );
                        *graph.grad_buffer(operand).unwrap() = target;
                    }
                }
            }
        }
        Op::Scale { a, factor } => {
            if graph.requires_grad(a) {
                let contrib: Vec<T> = grad_out.iter().map(|&g| g * factor).collect();
                graph.accumulate_grad(a, &contrib);
            }
        }
        Op::Matmul { a, b, m, k, n } => {
            let a_data = Rc::clone(&graph.nodes[a.0].value.data);
            let b_data = Rc::clone(&graph.nodes[b.0].value.data);
            if graph.requires_grad(a) {
                if let Some(buf) = graph.grad_buffer(a) {
                    // dA = dC * B^T
                    T::gemm(m, n, k, &grad_out, false, &b_data, true, buf, true);
                }
            }
            if graph.requires_grad(b) {
                if let Some(buf) = graph.grad_buffer(b) {
                    // dB = A^T * dC
                    T::gemm(k, m, n, &a_data, true, &grad_out, false, buf, true);
                }
            }
        }
        Op::Bmm {
            a,
            b,
            batch,
            m,
            k,
            n,
            b_trans,
        } => {
            let a_data = Rc::clone(&graph.nodes[a.0].value.data);
            let b_data = Rc::clone(&graph.nodes[b.0].value.data);
            if graph.requires_grad(a) {
                if let Some(buf) = graph.grad_buffer(a) {
                    for i in 0..batch {
                        let g = &grad_out[i * m * n..(i + 1) * m * n];
                        let bm = &b_data[i * k * n..(i + 1) * k * n];
                        // dA = dC * op(B)^T
                        T::gemm(m, n, k, g, false, bm, !b_trans, &mut buf[i * m * k..(i + 1) * m * k], true);
                    }
                }
            }
            if graph.requires_grad(b) {
                if let Some(buf) = graph.grad_buffer(b) {
                    for i in 0..batch {
                        let g = &grad_out[i * m * n..(i + 1) * m * n];
                        let am = &a_data[i * m * k..(i + 1) * m * k];
                        let bslice = &mut buf[i * k * n..(i + 1) * k * n];
                        if b_trans {
                            // B stored [n, k]; dB = dC^T * A
                            T::gemm(n, m, k, g, true, am, false, bslice, true);
                        } else {
                            // dB = A^T * dC
                            T::gemm(k, m, n, am, true, g, false, bslice, true);
                        }
                    }
                }
            }
        }
        Op::GatherRows { table, ref ids } => {
            if graph.requires_grad(table) {
                let d = graph.shape(table)[1];
                if let Some(buf) = graph.grad_buffer(table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut buf[id as usize * d..(id as usize + 1) * d];
                        let src = &grad_out[r * d..(r + 1) * d];
                        for (dv, &g) in dst.iter_mut().zip(src) {
                            *dv += g;
                        }
                    }
                }
            }
        }
        Op::Reshape { a } => {
            graph.accumulate_grad(a, &grad_out);
        }
        Op::Transpose12 { a, b, x, y, d } => {
            // output is [b, y, x, d]; transpose back
            let contrib = transpose_12_data(&grad_out, b, y, x, d);
            graph.accumulate_grad(a, &contrib);
        }
        Op::SplitHeads { a, heads } => {
            let a_shape = graph.shape(a).to_vec();
            let (n, l, d) = (a_shape[0], a_shape[1], a_shape[2]);
            let contrib = merge_heads_data(&grad_out, n, l, d / heads, heads);
            graph.accumulate_grad(a, &contrib);
        }
        Op::MergeHeads { a, heads } => {
            let out_sh = out_shape;
            let (n, l, d) = (out_sh[0], out_sh[1], out_sh[2]);
            let contrib = split_heads_data(&grad_out, n, l, d, heads);
            graph.accumulate_grad(a, &contrib);
        }
        Op::Softmax { a, axis } => {
            let s = Rc::clone(&graph.nodes[node_idx].value.data);
            let (outer, len, inner) = axis_split(&out_shape, axis);
            let mut contrib = vec![T::zero(); s.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = T::zero();
                    for j in 0..len {
                        let idx = base + j * inner;
                        dot += grad_out[idx] * s[idx];
                    }
                    for j in 0..len {
                        let idx = base + j * inner;
                        contrib[idx] = s[idx] * (grad_out[idx] - dot);
                    }
                }
            }
            graph.accumulate_grad(a, &contrib);
        }
        Op::LayerNorm { a, gain, bias, eps } => {
            let x = Rc::clone(&graph.nodes[a.0].value.data);
            let g = Rc::clone(&graph.nodes[gain.0].value.data);
            let d = *out_shape.last().unwrap();
            let lanes = x.len() / d;
            let dt = T::from_f64(d as f64);
            let mut dx = vec![T::zero(); x.len()];
            let mut dgain = vec![T::zero(); d];
            let mut dbias = vec![T::zero(); d];
            for lane in 0..lanes {
                let xs = &x[lane * d..(lane + 1) * d];
                let gs = &grad_out[lane * d..(lane + 1) * d];
                let mut mean = T::zero();
                for &v in xs {
                    mean += v;
                }
                mean = mean / dt;
                let mut var = T::zero();
                for &v in xs {
                    let c = v - mean;
                    var += c * c;
                }
                var = var / dt;
                let inv_std = T::one() / (var + eps).sqrt();
                let mut dxhat_sum = T::zero();
                let mut dxhat_xhat_sum = T::zero();
                for j in 0..d {
                    let xhat = (xs[j] - mean) * inv_std;
                    let dxhat = gs[j] * g[j];
                    dgain[j] += gs[j] * xhat;
                    dbias[j] += gs[j];
                    dxhat_sum += dxhat;
                    dxhat_xhat_sum += dxhat * xhat;
                }
                for j in 0..d {
                    let xhat = (xs[j] - mean) * inv_std;
                    let dxhat = gs[j] * g[j];
                    dx[lane * d + j] =
                        inv_std / dt * (dt * dxhat - dxhat_sum - xhat * dxhat_xhat_sum);
                }
            }
            graph.accumulate_grad(a, &dx);
            graph.accumulate_grad(gain, &dgain);
            graph.accumulate_grad(bias, &dbias);
        }
        Op::Conv3x3 {
            x,
            w,
            ref cols,
            b,
            h,
            wd,
            cin,
            cout,
        } => {
            let cells = b * h * wd;
            if graph.requires_grad(w) {
                if let Some(buf) = graph.grad_buffer(w) {
                    // dW = cols^T * dY
                    T::gemm(9 * cin, cells, cout, cols, true, &grad_out, false, buf, true);
                }
            }
            if graph.requires_grad(x) {
                // dX = im2col(dY) * flip(W); flip swaps spatial taps and
                // transposes the channel axes.
                let w_data = Rc::clone(&graph.nodes[w.0].value.data);
                let mut wflip = vec![T::zero(); 9 * cout * cin];
                for ky in 0..3 {
                    for kx in 0..3 {
                        for ci in 0..cin {
                            for co in 0..cout {
                                let src = (((2 - ky) * 3 + (2 - kx)) * cin + ci) * cout + co;
                                let dst = ((ky * 3 + kx) * cout + co) * cin + ci;
                                wflip[dst] = w_data[src];
                            }
                        }
                    }
                }
                let cols_dy = im2col(&grad_out, b, h, wd, cout);
                if let Some(buf) = graph.grad_buffer(x) {
                    T::gemm(cells, 9 * cout, cin, &cols_dy, false, &wflip, false, buf, true);
                }
            }
        }
        Op::Gelu { a } => {
            let x = Rc::clone(&graph.nodes[a.0].value.data);
            let contrib: Vec<T> = grad_out
                .iter()
                .zip(x.iter())
                .map(|(&g, &v)| g * gelu_grad(v))
                .collect();
            graph.accumulate_grad(a, &contrib);
        }
        Op::Dropout { a, ref keep } => {
            let contrib: Vec<T> = grad_out
                .iter()
                .zip(keep.iter())
                .map(|(&g, &k)| g * k)
                .collect();
            graph.accumulate_grad(a, &contrib);
        }
        Op::Sum { a } => {
            let g = grad_out[0];
            let n = graph.nodes[a.0].value.numel();
            let contrib = vec![g; n];
            graph.accumulate_grad(a, &contrib);
        }
        Op::MaskedCrossEntropy {
            logits,
            ref targets,
            ref weights,
            weight_sum,
        } => {
            let data = Rc::clone(&graph.nodes[logits.0].value.data);
            let classes = graph.shape(logits)[1];
            let g = grad_out[0] / weight_sum;
            let mut contrib = vec![T::zero(); data.len()];
            for (r, (&t, &w)) in targets.iter().zip(weights.iter()).enumerate() {
                if w == T::zero() {
                    continue;
                }
                let row = &data[r * classes..(r + 1) * classes];
                let mut max = T::neg_infinity();
                for &v in row {
                    if v > max {
                        max = v;
                    }
                }
                let mut sum = T::zero();
                for &v in row {
                    sum += (v - max).exp();
                }
                for c in 0..classes {
                    let p = (row[c] - max).exp() / sum;
                    let indicator = if c == t as usize { T::one() } else { T::zero() };
                    contrib[r * classes + c] = g * w * (p - indicator);
                }
            }
            graph.accumulate_grad(logits, &contrib);
        }
    }
}
