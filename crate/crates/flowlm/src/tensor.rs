//! Minimal reverse-mode autodiff over `ndarray` tensors.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! replays the record in reverse and accumulates gradients for every
//! recorded variable. Ops are fused at the granularity the model needs
//! (linear, layer norm, masked softmax, cross-entropy) so each backward is a
//! small closed-form kernel rather than a long chain of primitive nodes.
//!
//! The engine is generic over [`Scalar`] (`f32` for training, `f64` for
//! finite-difference gradient verification) and is single-threaded and
//! deterministic: identical inputs produce bitwise identical outputs.

use std::sync::Arc;

use ndarray::{ArrayD, ArrayView2, ArrayViewMut2, Axis, Ix2, Ix3};
use serde::{Deserialize, Serialize};

/// Element dtype tag used by checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl Dtype {
    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

/// Float element the engine runs on.
pub trait Scalar: ndarray::NdFloat {
    const DTYPE: Dtype;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Append the little-endian encoding of `self` to `out`.
    fn write_le(self, out: &mut Vec<u8>);
    /// Decode from little-endian bytes of width `DTYPE.byte_width()`.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte f32"))
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte f64"))
    }
}

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Position in the tape's value table; indexes the slice returned by
    /// [`Tape::backward`].
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Scalar> {
    /// y = x @ w + b over the flattened leading dims of x.
    Linear { x: Var, w: Var, b: Var, y: Var },
    /// Per-slice matmul on 3-D tensors; `trans_b` multiplies by bᵀ.
    BatchMatmul {
        a: Var,
        b: Var,
        trans_b: bool,
        y: Var,
    },
    /// Elementwise sum of two same-shaped tensors.
    Add { a: Var, b: Var, y: Var },
    /// x [B,L,H] plus the first L rows of pos [Lmax,H], broadcast over B.
    AddPositional { x: Var, pos: Var, y: Var },
    Scale { x: Var, c: f64, y: Var },
    Gelu { x: Var, y: Var },
    /// Normalization over the last axis with learned gain/bias.
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
        y: Var,
    },
    /// Row softmax of [B*heads, L, L] scores with masked (false) keys
    /// excluded; a fully masked row yields zeros. Backward only needs the
    /// probabilities: zeroed keys contribute nothing either way.
    MaskedSoftmax { scores: Var, y: Var },
    /// y[p] = table[ids[p]] reshaped to [B, L, E].
    EmbeddingGather {
        table: Var,
        ids: Arc<Vec<usize>>,
        y: Var,
    },
    /// Concatenate 3-D parts along the last axis.
    ConcatLast { parts: Vec<Var>, y: Var },
    /// y[s] = x.row(rows[s]) where x is [B,L,H] flattened to [B*L, H].
    GatherRows {
        x: Var,
        rows: Arc<Vec<usize>>,
        y: Var,
    },
    /// [B,L,H] -> [B*heads, L, H/heads].
    SplitHeads { x: Var, heads: usize, y: Var },
    /// Inverse of SplitHeads.
    MergeHeads { x: Var, heads: usize, y: Var },
    /// Elementwise product with a constant tensor (dropout mask).
    MulConst {
        x: Var,
        c: Arc<ArrayD<T>>,
        y: Var,
    },
    /// Scalar y = scale * sum_s cross_entropy(logits[s], targets[s]).
    SoftmaxXent {
        logits: Var,
        targets: Arc<Vec<usize>>,
        scale: f64,
        y: Var,
    },
}

/// One forward pass worth of tensors and the ops that produced them.
pub struct Tape<T: Scalar> {
    values: Vec<ArrayD<T>>,
    ops: Vec<Op<T>>,
}

fn as2<T: Scalar>(a: &ArrayD<T>, rows: usize, cols: usize) -> ArrayView2<'_, T> {
    a.view()
        .into_shape_with_order((rows, cols))
        .expect("contiguous reshape")
}

fn as2_mut<T: Scalar>(a: &mut ArrayD<T>, rows: usize, cols: usize) -> ArrayViewMut2<'_, T> {
    a.view_mut()
        .into_shape_with_order((rows, cols))
        .expect("contiguous reshape")
}

/// Reshape an owned 2-D array to a dynamic shape, copying first if the
/// source is not row-major (ndarray's matmul can return F-order results).
fn reshape_dyn<T: Scalar>(a: ndarray::Array2<T>, dim: ndarray::IxDyn) -> ArrayD<T> {
    let a = if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    };
    a.into_shape_with_order(dim).expect("same element count")
}

fn gelu_scalar<T: Scalar>(x: T) -> T {
    // tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    let c = T::from_f64(0.797_884_560_802_865_4);
    let a = T::from_f64(0.044_715);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let a = T::from_f64(0.044_715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
        }
    }

    fn push(&mut self, value: ArrayD<T>) -> Var {
        // Stored values must be row-major: later ops reshape them through
        // views, and ndarray hands back F-order results from some builders.
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        self.values.push(value);
        Var(self.values.len() - 1)
    }

    /// Record an input tensor (parameter or data) with no producing op.
    pub fn leaf(&mut self, value: ArrayD<T>) -> Var {
        self.push(value)
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.values[v.0]
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let arr = self.value(v);
        debug_assert_eq!(arr.len(), 1, "expected a scalar tensor");
        Scalar::as_f64(*arr.iter().next().expect("non-empty"))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (m, k, n, mut shape) = {
            let xv = &self.values[x.0];
            let wv = &self.values[w.0];
            let k = *xv.shape().last().expect("linear input has an axis");
            assert_eq!(k, wv.shape()[0], "linear: inner dims disagree");
            let n = wv.shape()[1];
            (xv.len() / k, k, n, xv.shape().to_vec())
        };
        *shape.last_mut().unwrap() = n;
        let y2 = {
            let x2 = as2(&self.values[x.0], m, k);
            let w2 = self.values[w.0]
                .view()
                .into_dimensionality::<Ix2>()
                .expect("linear weight is 2-D");
            let mut y2 = x2.dot(&w2);
            let bv = &self.values[b.0];
            let b1 = bv.view().into_shape_with_order(n).expect("bias is 1-D");
            y2 += &b1;
            y2
        };
        let y = self.push(reshape_dyn(y2, ndarray::IxDyn(&shape)));
        self.ops.push(Op::Linear { x, w, b, y });
        y
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (n, m, p) = {
            let av = self.values[a.0].view().into_dimensionality::<Ix3>().unwrap();
            let bv = self.values[b.0].view().into_dimensionality::<Ix3>().unwrap();
            let (n, m, k) = av.dim();
            let (nb, b1, b2) = bv.dim();
            assert_eq!(n, nb, "batch_matmul: batch dims disagree");
            let (kb, p) = if trans_b { (b2, b1) } else { (b1, b2) };
            assert_eq!(k, kb, "batch_matmul: inner dims disagree");
            (n, m, p)
        };
        let mut out = ndarray::Array3::<T>::zeros((n, m, p));
        {
            let av = self.values[a.0].view().into_dimensionality::<Ix3>().unwrap();
            let bv = self.values[b.0].view().into_dimensionality::<Ix3>().unwrap();
            for i in 0..n {
                let ai = av.index_axis(Axis(0), i);
                let bi = bv.index_axis(Axis(0), i);
                let prod = if trans_b {
                    ai.dot(&bi.t())
                } else {
                    ai.dot(&bi)
                };
                out.index_axis_mut(Axis(0), i).assign(&prod);
            }
        }
        let y = self.push(out.into_dyn());
        self.ops.push(Op::BatchMatmul { a, b, trans_b, y });
        y
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.values[a.0].shape(),
            self.values[b.0].shape(),
            "add: shapes disagree"
        );
        let out = &self.values[a.0] + &self.values[b.0];
        let y = self.push(out);
        self.ops.push(Op::Add { a, b, y });
        y
    }

    pub fn add_positional(&mut self, x: Var, pos: Var) -> Var {
        let out = {
            let xv = self.values[x.0].view().into_dimensionality::<Ix3>().unwrap();
            let pv = self.values[pos.0].view().into_dimensionality::<Ix2>().unwrap();
            let (bsz, l, h) = xv.dim();
            assert!(l <= pv.dim().0, "sequence longer than positional table");
            assert_eq!(h, pv.dim().1, "positional width disagrees");
            let mut out = xv.to_owned();
            for bi in 0..bsz {
                let mut row = out.index_axis_mut(Axis(0), bi);
                row += &pv.slice(ndarray::s![..l, ..]);
            }
            out
        };
        let y = self.push(out.into_dyn());
        self.ops.push(Op::AddPositional { x, pos, y });
        y
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.values[x.0].mapv(|v| v * T::from_f64(c));
        let y = self.push(out);
        self.ops.push(Op::Scale { x, c, y });
        y
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.values[x.0].mapv(gelu_scalar);
        let y = self.push(out);
        self.ops.push(Op::Gelu { x, y });
        y
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let h = *self.values[x.0].shape().last().expect("layer_norm input");
        let rows = self.values[x.0].len() / h;
        let mut out = self.values[x.0].clone();
        {
            let gainv = &self.values[gain.0];
            let biasv = &self.values[bias.0];
            let g1 = gainv.view().into_shape_with_order(h).unwrap();
            let b1 = biasv.view().into_shape_with_order(h).unwrap();
            let mut o2 = as2_mut(&mut out, rows, h);
            let epst = T::from_f64(eps);
            let hn = T::from_f64(h as f64);
            for mut row in o2.rows_mut() {
                let mean = row.sum() / hn;
                let mut var = T::zero();
                for v in row.iter() {
                    let d = *v - mean;
                    var += d * d;
                }
                var /= hn;
                let inv = T::one() / (var + epst).sqrt();
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - mean) * inv * g1[j] + b1[j];
                }
            }
        }
        let y = self.push(out);
        self.ops.push(Op::LayerNorm { x, gain, bias, eps, y });
        y
    }

    /// Softmax over the last axis of `[B*heads, L, L]` scores. `key_mask` is
    /// the flattened `[B, L]` pad mask; masked keys get zero probability.
    pub fn masked_softmax(&mut self, scores: Var, key_mask: Arc<Vec<bool>>, heads: usize) -> Var {
        let mut out = self.values[scores.0]
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap()
            .to_owned();
        let (slices, l) = {
            let d = out.dim();
            (d.0, d.2)
        };
        assert_eq!(key_mask.len() % l, 0, "key mask length mismatch");
        for i in 0..slices {
            let b = i / heads;
            let mask = &key_mask[b * l..(b + 1) * l];
            let mut slice = out.index_axis_mut(Axis(0), i);
            for mut row in slice.rows_mut() {
                let mut maxv = T::neg_infinity();
                for (k, v) in row.iter().enumerate() {
                    if mask[k] && *v > maxv {
                        maxv = *v;
                    }
                }
                if maxv == T::neg_infinity() {
                    row.fill(T::zero());
                    continue;
                }
                let mut sum = T::zero();
                for (k, v) in row.iter_mut().enumerate() {
                    if mask[k] {
                        *v = (*v - maxv).exp();
                        sum += *v;
                    } else {
                        *v = T::zero();
                    }
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
        }
        let y = self.push(out.into_dyn());
        self.ops.push(Op::MaskedSoftmax { scores, y });
        y
    }

    /// Gather embedding rows: `ids` has length B*L, output is [B, L, E].
    pub fn embedding_gather(
        &mut self,
        table: Var,
        ids: Arc<Vec<usize>>,
        batch: usize,
        seq_len: usize,
    ) -> Var {
        assert_eq!(ids.len(), batch * seq_len, "id count mismatch");
        let tv = self.values[table.0]
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap();
        let e = tv.dim().1;
        let mut out = ndarray::Array2::<T>::zeros((ids.len(), e));
        for (p, &id) in ids.iter().enumerate() {
            out.row_mut(p).assign(&tv.row(id));
        }
        let out = out
            .into_shape_with_order((batch, seq_len, e))
            .unwrap()
            .into_dyn();
        let y = self.push(out);
        self.ops.push(Op::EmbeddingGather { table, ids, y });
        y
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts
            .iter()
            .map(|p| {
                self.values[p.0]
                    .view()
                    .into_dimensionality::<Ix3>()
                    .expect("concat parts are 3-D")
            })
            .collect();
        let out = ndarray::concatenate(
            Axis(2),
            &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
        )
        .expect("concat shapes compatible");
        let y = self.push(out.into_dyn());
        self.ops.push(Op::ConcatLast {
            parts: parts.to_vec(),
            y,
        });
        y
    }

    /// Select rows of the position-flattened input: x [B,L,H] -> y [S,H]
    /// with y[s] = x_flat.row(rows[s]).
    pub fn gather_rows(&mut self, x: Var, rows: Arc<Vec<usize>>) -> Var {
        let h = *self.values[x.0].shape().last().unwrap();
        let total = self.values[x.0].len() / h;
        let x2 = as2(&self.values[x.0], total, h);
        let mut out = ndarray::Array2::<T>::zeros((rows.len(), h));
        for (s, &r) in rows.iter().enumerate() {
            out.row_mut(s).assign(&x2.row(r));
        }
        let y = self.push(out.into_dyn());
        self.ops.push(Op::GatherRows { x, rows, y });
        y
    }

    pub fn split_heads(&mut self, x: Var, heads: usize) -> Var {
        let xv = self.values[x.0].view().into_dimensionality::<Ix3>().unwrap();
        let (bsz, l, h) = xv.dim();
        assert_eq!(h % heads, 0, "hidden dim not divisible by heads");
        let dh = h / heads;
        let mut out = ndarray::Array3::<T>::zeros((bsz * heads, l, dh));
        for b in 0..bsz {
            for a in 0..heads {
                for q in 0..l {
                    for d in 0..dh {
                        out[[b * heads + a, q, d]] = xv[[b, q, a * dh + d]];
                    }
                }
            }
        }
        let y = self.push(out.into_dyn());
        self.ops.push(Op::SplitHeads { x, heads, y });
        y
    }

    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Var {
        let xv = self.values[x.0].view().into_dimensionality::<Ix3>().unwrap();
        let (bh, l, dh) = xv.dim();
        assert_eq!(bh % heads, 0, "batch*heads not divisible by heads");
        let bsz = bh / heads;
        let mut out = ndarray::Array3::<T>::zeros((bsz, l, heads * dh));
        for b in 0..bsz {
            for a in 0..heads {
                for q in 0..l {
                    for d in 0..dh {
                        out[[b, q, a * dh + d]] = xv[[b * heads + a, q, d]];
                    }
                }
            }
        }
        let y = self.push(out.into_dyn());
        self.ops.push(Op::MergeHeads { x, heads, y });
        y
    }

    pub fn mul_const(&mut self, x: Var, c: Arc<ArrayD<T>>) -> Var {
        assert_eq!(self.values[x.0].shape(), c.shape(), "mul_const shape");
        let out = &self.values[x.0] * &*c;
        let y = self.push(out);
        self.ops.push(Op::MulConst { x, c, y });
        y
    }

    /// Scalar loss: `scale * sum_s CE(logits[s], targets[s])` with a
    /// numerically stable log-sum-exp.
    pub fn softmax_xent(&mut self, logits: Var, targets: Arc<Vec<usize>>, scale: f64) -> Var {
        let lv = self.values[logits.0]
            .view()
            .into_dimensionality::<Ix2>()
            .expect("xent logits are 2-D");
        assert_eq!(lv.dim().0, targets.len(), "target count mismatch");
        let mut total = T::zero();
        for (s, row) in lv.rows().into_iter().enumerate() {
            let maxv = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for &v in row.iter() {
                sum += (v - maxv).exp();
            }
            let lse = maxv + sum.ln();
            total += lse - row[targets[s]];
        }
        let out = ndarray::arr0(total * T::from_f64(scale)).into_dyn();
        let y = self.push(out);
        self.ops.push(Op::SoftmaxXent {
            logits,
            targets,
            scale,
            y,
        });
        y
    }

    /// Reverse pass from `root` (a scalar). Returns one gradient slot per
    /// recorded variable; variables the root does not depend on stay `None`.
    pub fn backward(&self, root: Var) -> Vec<Option<ArrayD<T>>> {
        let mut grads: Vec<Option<ArrayD<T>>> = vec![None; self.values.len()];
        grads[root.0] = Some(ArrayD::ones(self.values[root.0].raw_dim()));

        for op in self.ops.iter().rev() {
            match op {
                Op::Linear { x, w, b, y } => {
                    let Some(dy) = grads[y.0].take() else { continue };
                    let k = self.values[w.0].shape()[0];
                    let n = self.values[w.0].shape()[1];
                    let m = self.values[x.0].len() / k;
                    {
                        let dy2 = as2(&dy, m, n);
                        let x2 = as2(&self.values[x.0], m, k);
                        let w2 = self.values[w.0]
                            .view()
                            .into_dimensionality::<Ix2>()
                            .unwrap();
                        let dx = dy2.dot(&w2.t());
                        let dw = x2.t().dot(&dy2);
                        let db = dy2.sum_axis(Axis(0));
                        accumulate(
                            &mut grads,
                            *x,
                            reshape_dyn(dx, self.values[x.0].raw_dim()),
                        );
                        accumulate(
                            &mut grads,
                            *w,
                            reshape_dyn(dw, self.values[w.0].raw_dim()),
                        );
                        accumulate(&mut grads, *b, db.into_dyn());
                    }
                    grads[y.0] = Some(dy);
                }
                Op::BatchMatmul { a, b, trans_b, y } => {
                    let Some(dy) = grads[y.0].take() else { continue };
                    let dyv = dy.view().into_dimensionality::<Ix3>().unwrap();
                    let av = self.values[a.0].view().into_dimensionality::<Ix3>().unwrap();
                    let bv = self.values[b.0].view().into_dimensionality::<Ix3>().unwrap();
                    let n = av.dim().0;
                    let mut da = ndarray::Array3::<T>::zeros(av.dim());
                    let mut db = ndarray::Array3::<T>::zeros(bv.dim());
                    for i in 0..n {
                        let dyi = dyv.index_axis(Axis(0), i);
                        let ai = av.index_axis(Axis(0), i);
                        let bi = bv.index_axis(Axis(0), i);
                        if *trans_b {
                            // y = a b^T : da = dy b ; db = dy^T a
                            da.index_axis_mut(Axis(0), i).assign(&dyi.dot(&bi));
                            db.index_axis_mut(Axis(0), i).assign(&dyi.t().dot(&ai));
                        } else {
                            // y = a b : da = dy b^T ; db = a^T dy
                            da.index_axis_mut(Axis(0), i).assign(&dyi.dot(&bi.t()));
                            db.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&dyi));
                        }
                    }
                    accumulate(&mut grads, *a, da.into_dyn());
                    accumulate(&mut grads, *b, db.into_dyn());
                    grads[y.0] = Some(dy);
                }
                Op::Add { a, b, y } => {
                    let Some(dy) = grads[y.0].take() else { continue };
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, dy.clone());
                    grads[y.0] = Some(dy);
                }
                Op::AddPositional { x, pos, y } => {
                    let Some(dy) = grads[y.0].take() else { continue };
                    accumulate(&mut grads, *x, dy.clone());
                    let dyv = dy.view().into_dimensionality::<Ix3>().unwrap();
                    let (bsz, l, _h) = dyv.dim();
                    let mut dpos = ArrayD::<T>::zeros(self.values[pos.0].raw_dim());
                    {
                        let mut dp = dpos.view_mut().into_dimensionality::<Ix2>().unwrap();
                        for bi in 0..bsz {
                            let slice = dyv.index_axis(Axis(0), bi);
                            let mut head = dp.slice_mut(ndarray::s![..l, ..]);
                            head += &slice;
                        }
                    }
                    accumulate(&mut grads, *pos, dpos);
                    grads[y.0] = Some(dy);
                }
                Op::Scale { x, c, y } => {
                    let Some(dy) = grads[y.0].take() else { continue };
                    accumulate(&mut grads, *x, dy.mapv(|v| v * T::from_f64(*c)));
                    grads[y.0] = Some(dy);
                }
                Op::Gelu { x, y } => {
                    let Some(dy) = grads[y.0].take() else { continue };
                    let dx = ndarray::Zip::from(&dy)
                        .and(&self.values[x.0])
                        .map_collect(|&g, &v| g * gelu_grad_scalar(v));
                    accumulate(&mut grads, *x, dx);
                    grads[y.0] = Some(dy);
                }
                Op::LayerNorm { x, gain, bias, eps, y } => {
                    let Some(dy) = grads[y.0].take() else { continue };
                    let h = *self.values[x.0].shape().last().unwrap();
                    let rows = self.values[x.0].len() / h;
                    let xv = as2(&self.values[x.0], rows, h);
                    let dyv = as2(&dy, rows, h);
                    let g1v = &self.values[gain.0];
                    let g1 = g1v.view().into_shape_with_order(h).unwrap();
                    let mut dx = ndarray::Array2::<T>::zeros((rows, h));
                    let mut dgain = ndarray::Array1::<T>::zeros(h);
                    let mut dbias = ndarray::Array1::<T>::zeros(h);
                    let epst = T::from_f64(*eps);
                    let hn = T::from_f64(h as f64);
                    for r in 0..rows {
                        let xrow = xv.row(r);
                        let dyrow = dyv.row(r);
                        let mean = xrow.sum() / hn;
                        let mut var = T::zero();
                        for &v in xrow.iter() {
                            let d = v - mean;
                            var += d * d;
                        }
                        var /= hn;
                        let inv = T::one() / (var + epst).sqrt();
                        // xhat = (x - mean) * inv ; dxhat = dy * gain
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xhat = T::zero();
                        for j in 0..h {
                            let xhat = (xrow[j] - mean) * inv;
                            let dxhat = dyrow[j] * g1[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                            dgain[j] += dyrow[j] * xhat;
                            dbias[j] += dyrow[j];
                        }
                        let mean_dxhat = sum_dxhat / hn;
                        let mean_dxhat_xhat = sum_dxhat_xhat / hn;
                        for j in 0..h {
                            let xhat = (xrow[j] - mean) * inv;
                            let dxhat = dyrow[j] * g1[j];
                            dx[[r, j]] = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                    accumulate(
                        &mut grads,
                        *x,
                        dx.into_shape_with_order(self.values[x.0].raw_dim())
                            .unwrap(),
                    );
                    accumulate(
                        &mut grads,
                        *gain,
                        dgain
                            .into_shape_with_order(self.values[gain.0].raw_dim())
                            .unwrap(),
                    );
                    accumulate(
                        &mut grads,
                        *bias,
                        dbias
                            .into_shape_with_order(self.values[bias.0].raw_dim())
                            .unwrap(),
                    );
                    grads[y.0] = Some(dy);
                }
                Op::MaskedSoftmax { scores, y } => {
                    let Some(dy) = grads[y.0].take() else { continue };
                    let yv = self.values[y.0].view().into_dimensionality::<Ix3>().unwrap();
                    let dyv = dy.view().into_dimensionality::<Ix3>().unwrap();
                    let (n, l, _) = yv.dim();
                    let mut ds = ndarray::Array3::<T>::zeros(yv.dim());
                    for i in 0..n {
                        for q in 0..l {
                            let yrow = yv.slice(ndarray::s![i, q, ..]);
                            let dyrow = dyv.slice(ndarray::s![i, q, ..]);
                            let mut dot = T::zero();
                            for (yj, gj) in yrow.iter().zip(dyrow.iter()) {
                                dot += *yj * *gj;
                            }
                            let mut drow = ds.slice_mut(ndarray::s![i, q, ..]);
                            for (k, d) in drow.iter_mut().enumerate() {
                                *d = yrow[k] * (dyrow[k] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, *scores, ds.into_dyn());
                    grads[y.0] = Some(dy);
                }
                Op::EmbeddingGather { table, ids, y } => {
                    let Some(dy) = grads[y.0].take() else { continue };
                    let e = *self.values[y.0].shape().last().unwrap();
                    let dy2 = as2(&dy, ids.len(), e);
                    let mut dtable = ArrayD::<T>::zeros(self.values[table.0].raw_dim());
                    {
                        let mut dt2 = dtable.view_mut().into_dimensionality::<Ix2>().unwrap();
                        for (p, &id) in ids.iter().enumerate() {
                            let mut row = dt2.row_mut(id);
                            row += &dy2.row(p);
                        }
                    }
                    accumulate(&mut grads, *table, dtable);
                    grads[y.0] = Some(dy);
                }
                Op::ConcatLast { parts, y } => {
                    let Some(dy) = grads[y.0].take() else { continue };
                    let dyv = dy.view().into_dimensionality::<Ix3>().unwrap();
                    let mut offset = 0;
                    for p in parts {
                        let w = *self.values[p.0].shape().last().unwrap();
                        let slice = dyv.slice(ndarray::s![.., .., offset..offset + w]);
                        accumulate(&mut grads, *p, slice.to_owned().into_dyn());
                        offset += w;
                    }
                    grads[y.0] = Some(dy);
                }
                Op::GatherRows { x, rows, y } => {
                    let Some(dy) = grads[y.0].take() else { continue };
                    let h = *self.values[x.0].shape().last().unwrap();
                    let total = self.values[x.0].len() / h;
                    let dy2 = as2(&dy, rows.len(), h);
                    let mut dx = ArrayD::<T>::zeros(self.values[x.0].raw_dim());
                    {
                        let mut dx2 = as2_mut(&mut dx, total, h);
                        for (s, &r) in rows.iter().enumerate() {
                            let mut row = dx2.row_mut(r);
                            row += &dy2.row(s);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    grads[y.0] = Some(dy);
                }
                Op::SplitHeads { x, heads, y } => {
                    let Some(dy) = grads[y.0].take() else { continue };
                    let dyv = dy.view().into_dimensionality::<Ix3>().unwrap();
                    let (bh, l, dh) = dyv.dim();
                    let bsz = bh / heads;
                    let mut dx = ndarray::Array3::<T>::zeros((bsz, l, heads * dh));
                    for b in 0..bsz {
                        for a in 0..*heads {
                            for q in 0..l {
                                for d in 0..dh {
                                    dx[[b, q, a * dh + d]] = dyv[[b * heads + a, q, d]];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx.into_dyn());
                    grads[y.0] = Some(dy);
                }
                Op::MergeHeads { x, heads, y } => {
                    let Some(dy) = grads[y.0].take() else { continue };
                    let dyv = dy.view().into_dimensionality::<Ix3>().unwrap();
                    let (bsz, l, h) = dyv.dim();
                    let dh = h / heads;
                    let mut dx = ndarray::Array3::<T>::zeros((bsz * heads, l, dh));
                    for b in 0..bsz {
                        for a in 0..*heads {
                            for q in 0..l {
                                for d in 0..dh {
                                    dx[[b * heads + a, q, d]] = dyv[[b, q, a * dh + d]];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx.into_dyn());
                    grads[y.0] = Some(dy);
                }
                Op::MulConst { x, c, y } => {
                    let Some(dy) = grads[y.0].take() else { continue };
                    accumulate(&mut grads, *x, &dy * &**c);
                    grads[y.0] = Some(dy);
                }
                Op::SoftmaxXent {
                    logits,
                    targets,
                    scale,
                    y,
                } => {
                    let Some(dy) = grads[y.0].take() else { continue };
                    let g = dy.iter().next().copied().unwrap_or_else(T::zero);
                    let lv = self.values[logits.0]
                        .view()
                        .into_dimensionality::<Ix2>()
                        .unwrap();
                    let (s_count, v) = lv.dim();
                    let mut dl = ndarray::Array2::<T>::zeros((s_count, v));
                    let factor = g * T::from_f64(*scale);
                    for s in 0..s_count {
                        let row = lv.row(s);
                        let maxv = row.iter().cloned().fold(T::neg_infinity(), T::max);
                        let mut sum = T::zero();
                        for &x in row.iter() {
                            sum += (x - maxv).exp();
                        }
                        let mut drow = dl.row_mut(s);
                        for (j, d) in drow.iter_mut().enumerate() {
                            let p = (row[j] - maxv).exp() / sum;
                            *d = p * factor;
                        }
                        drow[targets[s]] -= factor;
                    }
                    accumulate(&mut grads, *logits, dl.into_dyn());
                    grads[y.0] = Some(dy);
                }
            }
        }
        grads
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<ArrayD<T>>], var: Var, delta: ArrayD<T>) {
    // Keep stored gradients row-major for the same reason as tape values.
    let delta = if delta.is_standard_layout() {
        delta
    } else {
        delta.as_standard_layout().to_owned()
    };
    match &mut grads[var.0] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}
