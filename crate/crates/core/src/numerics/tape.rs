//! Reverse-mode differentiation over coarse tensor ops.
//!
//! A [`GradientTape`] records every op of one forward pass as a node holding
//! its value and whatever the backward rule needs. Parameters are borrowed
//! from a [`ParamStore`] instead of copied. [`GradientTape::backward`] takes
//! `&self` and allocates fresh gradient buffers, so it can be replayed.
//!
//! Variable-length sequences are packed row-wise without padding; a
//! [`SeqLayout`] tells the attention ops where each sequence starts.
//! Shape errors inside the tape are programming errors and panic.

use std::collections::BTreeMap;
use std::rc::Rc;

use super::kernels::{axpy, dot, gemm_nn, gemm_nt, gemm_tn};
use super::ops::{gelu_derivative, gelu_unchecked, sigmoid};
use super::{NumericsError, Scalar, Tensor};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    /// Adds or replaces a tensor, returning its slot.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = tensor;
            return i;
        }
        let i = self.tensors.len();
        self.index.insert(name.clone(), i);
        self.names.push(name);
        self.tensors.push(tensor);
        i
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Row ranges of packed sequences plus offsets of their `len x len` blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    starts: Vec<usize>,
    lens: Vec<usize>,
    block_offsets: Vec<usize>,
    rows: usize,
    block_len: usize,
}

impl SeqLayout {
    pub fn new(lens: &[usize]) -> Self {
        assert!(lens.iter().all(|&l| l > 0), "empty sequence in layout");
        let mut starts = Vec::with_capacity(lens.len());
        let mut block_offsets = Vec::with_capacity(lens.len());
        let (mut row, mut block) = (0, 0);
        for &l in lens {
            starts.push(row);
            block_offsets.push(block);
            row += l;
            block += l * l;
        }
        Self {
            starts,
            lens: lens.to_vec(),
            block_offsets,
            rows: row,
            block_len: block,
        }
    }

    pub fn single(len: usize) -> Self {
        Self::new(&[len])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn num_segments(&self) -> usize {
        self.lens.len()
    }

    /// `(first row, length, block offset)` of segment `s`.
    pub fn segment(&self, s: usize) -> (usize, usize, usize) {
        (self.starts[s], self.lens[s], self.block_offsets[s])
    }

    pub fn segments(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..self.lens.len()).map(|s| self.segment(s))
    }
}

// Caps exp() in the attention weight gradient so masked or tiny weights
// keep it finite.
const MASKED_EXP_CAP: f64 = 60.0;

enum Op<T> {
    Leaf,
    Param(usize),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    MulBroadcast(Var, Var),
    Scale(Var, T),
    MaskMul(Var, Rc<Vec<T>>),
    Gelu(Var),
    Sigmoid(Var),
    Min(Var, Var),
    Max(Var, Var),
    Normalize {
        x: Var,
        inv_std: Vec<T>,
    },
    Attention(Box<AttentionSaved<T>>),
    PairSoftmax {
        left: Var,
        right: Var,
        layout: Rc<SeqLayout>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
        floor: T,
    },
}

struct AttentionSaved<T> {
    q: Var,
    k: Var,
    v: Var,
    weights: Option<Var>,
    layout: Rc<SeqLayout>,
    heads: usize,
    scale: T,
    scores: Vec<T>,
    // exp(score - max) / Z, before multiplying by the edge weight
    unweighted: Vec<T>,
    probs: Vec<T>,
}

struct Node<T> {
    op: Op<T>,
    value: Option<Tensor<T>>,
    requires_grad: bool,
}

/// Attention intermediates of one head for one packed sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps<T> {
    /// Scaled affinities `a_ik`, row-major `len x len`.
    pub scores: Vec<T>,
    /// Attention weights `alpha_ik`, row-major `len x len`.
    pub probs: Vec<T>,
}

pub struct GradientTape<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

/// Result of one backward pass.
pub struct Gradients<T> {
    node_grads: Vec<Option<Tensor<T>>>,
    param_grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a leaf variable or parameter node.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.node_grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of the parameter in slot `i`, `None` if it did not take part.
    pub fn param(&self, i: usize) -> Option<&Tensor<T>> {
        self.param_grads.get(i).and_then(Option::as_ref)
    }

    /// One gradient per parameter, zero-filled where a parameter was unused.
    pub fn dense(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| match self.param(i) {
                Some(g) => g.clone(),
                None => Tensor::zeros(t.shape()),
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.param_grads.iter().flatten().all(Tensor::is_finite)
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) {
    assert_eq!(a.shape(), b.shape(), "shape mismatch in {what}");
}

impl<'p, T: Scalar> GradientTape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Option<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match (&self.nodes[v.0].op, &self.nodes[v.0].value) {
            (Op::Param(i), _) => &self.params.tensors()[*i],
            (_, Some(t)) => t,
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    /// Leaf bound to a named parameter (cached per tape).
    pub fn param(&mut self, name: &str) -> Result<Var, NumericsError> {
        let i = self
            .params
            .index_of(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))?;
        if let Some(v) = self.param_vars[i] {
            return Ok(v);
        }
        let v = self.push(Op::Param(i), None, true);
        self.param_vars[i] = Some(v);
        Ok(v)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, Some(t), false)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, Some(t), true)
    }

    /// Row lookup `table[ids[r]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let cols = t.cols();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            assert!(id < t.rows(), "gather index {id} out of range {}", t.rows());
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor::from_parts(vec![ids.len(), cols], out);
        let rg = self.rg(table);
        self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            Some(value),
            rg,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        assert_eq!(bv.rows(), k, "matmul inner dimension");
        let mut out = vec![T::zero(); m * n];
        gemm_nn(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), Some(Tensor::from_parts(vec![m, n], out)), rg)
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, "elementwise op");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(op, Some(value), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Min(a, b), |x, y| if x <= y { x } else { y })
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Max(a, b), |x, y| if x >= y { x } else { y })
    }

    fn broadcast(&mut self, a: Var, b_var: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let (av, bv) = (self.value(a), self.value(b_var));
        let cols = av.cols();
        assert!(
            bv.len() == cols || bv.len() == 1,
            "broadcast operand of length {} against {} columns",
            bv.len(),
            cols
        );
        let b = bv.data();
        let data = if b.len() == 1 {
            av.data().iter().map(|&x| f(x, b[0])).collect()
        } else {
            av.data()
                .chunks_exact(cols)
                .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| f(x, y)))
                .collect()
        };
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b_var);
        self.push(op, Some(value), rg)
    }

    /// `a + b` with `b` of length `cols` (per column) or 1 (scalar).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Var {
        self.broadcast(a, b, Op::AddBroadcast(a, b), |x, y| x + y)
    }

    /// `a * g` with `g` of length `cols` (per column) or 1 (scalar).
    pub fn mul_broadcast(&mut self, a: Var, g: Var) -> Var {
        self.broadcast(a, g, Op::MulBroadcast(a, g), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let value = self.value(a).map(|x| x * k);
        let rg = self.rg(a);
        self.push(Op::Scale(a, k), Some(value), rg)
    }

    /// Elementwise product with a fixed mask (dropout).
    pub fn mask_mul(&mut self, a: Var, mask: Rc<Vec<T>>) -> Var {
        let av = self.value(a);
        assert_eq!(av.len(), mask.len(), "mask length");
        let data = av.data().iter().zip(mask.iter()).map(|(&x, &m)| x * m).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push(Op::MaskMul(a, mask), Some(value), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu_unchecked);
        let rg = self.rg(a);
        self.push(Op::Gelu(a), Some(value), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(Op::Sigmoid(a), Some(value), rg)
    }

    /// Per-row `(x - mean) / sqrt(var + eps)` with population variance.
    pub fn normalize(&mut self, x: Var, eps: T) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let n = T::of(cols as f64);
        let mut out = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.rows());
        for row in xv.data().chunks_exact(cols) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            out.extend(row.iter().map(|&v| (v - mean) * inv));
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(Op::Normalize { x, inv_std }, Some(value), rg)
    }

    /// Multi-head attention within each packed sequence.
    ///
    /// Per head, `alpha_ik = w_ik exp(s_ik) / sum_j w_ij exp(s_ij)` with
    /// `s_ik = scale * q_i . k_k`, restricted to the sequence containing `i`.
    /// `weights` holds one `len x len` block per sequence (see
    /// [`SeqLayout::block_len`]); `None` means all ones. Zero weights give an
    /// exact zero attention weight. Output row `i` is `sum_k alpha_ik v_k`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        weights: Option<Var>,
        layout: Rc<SeqLayout>,
        heads: usize,
        scale: T,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        same_shape(qv, kv, "attention q/k");
        assert_eq!(qv.rows(), layout.rows(), "attention rows vs layout");
        assert_eq!(vv.rows(), layout.rows(), "attention value rows vs layout");
        let (dq, dv) = (qv.cols(), vv.cols());
        assert!(heads > 0 && dq % heads == 0 && dv % heads == 0, "head split");
        let (hq, hv) = (dq / heads, dv / heads);
        let wv = weights.map(|w| self.value(w));
        if let Some(w) = wv {
            assert_eq!(w.len(), layout.block_len(), "attention weight blocks");
        }
        let block = layout.block_len();
        let mut scores = vec![T::zero(); heads * block];
        let mut unweighted = vec![T::zero(); heads * block];
        let mut probs = vec![T::zero(); heads * block];
        let mut out = vec![T::zero(); layout.rows() * dv];
        let cap = T::of(MASKED_EXP_CAP);
        for h in 0..heads {
            for (start, len, boff) in layout.segments() {
                for i in 0..len {
                    let row = start + i;
                    let qi = &qv.row(row)[h * hq..(h + 1) * hq];
                    let base = h * block + boff + i * len;
                    let s = &mut scores[base..base + len];
                    for (j, sj) in s.iter_mut().enumerate() {
                        *sj = scale * dot(qi, &kv.row(start + j)[h * hq..(h + 1) * hq]);
                    }
                    let r = &mut unweighted[base..base + len];
                    let p = &mut probs[base..base + len];
                    match wv {
                        Some(w) => {
                            let wrow = &w.data()[boff + i * len..boff + (i + 1) * len];
                            // log-sum-exp of s + ln w over the positive weights
                            let m = s
                                .iter()
                                .zip(wrow)
                                .filter(|(_, &wj)| wj > T::zero())
                                .fold(T::neg_infinity(), |m, (&sj, &wj)| m.max(sj + wj.ln()));
                            assert!(m > T::neg_infinity(), "attention row {row} has no positive weight");
                            let mut z = T::zero();
                            for j in 0..len {
                                if wrow[j] > T::zero() {
                                    p[j] = (s[j] + wrow[j].ln() - m).exp();
                                    z += p[j];
                                }
                            }
                            let lse = m + z.ln();
                            for j in 0..len {
                                p[j] = p[j] / z;
                                // d alpha / d w; capped so tiny weights keep finite gradients
                                r[j] = (s[j] - lse).min(cap).exp();
                            }
                        }
                        None => {
                            let m = s.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
                            let mut z = T::zero();
                            for j in 0..len {
                                r[j] = (s[j] - m).exp();
                                z += r[j];
                            }
                            for j in 0..len {
                                r[j] = r[j] / z;
                                p[j] = r[j];
                            }
                        }
                    }
                    let orow = &mut out[row * dv + h * hv..row * dv + (h + 1) * hv];
                    for j in 0..len {
                        if p[j] != T::zero() {
                            axpy(p[j], &vv.row(start + j)[h * hv..(h + 1) * hv], orow);
                        }
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![layout.rows(), dv], out);
        let rg = self.rg(q) || self.rg(k) || self.rg(v) || weights.is_some_and(|w| self.rg(w));
        let saved = AttentionSaved {
            q,
            k,
            v,
            weights,
            layout,
            heads,
            scale,
            scores,
            unweighted,
            probs,
        };
        self.push(Op::Attention(Box::new(saved)), Some(value), rg)
    }

    /// Row softmax of `left_i . right_k` within each packed sequence,
    /// returned as the concatenated `len x len` blocks.
    pub fn pair_softmax(&mut self, left: Var, right: Var, layout: Rc<SeqLayout>) -> Var {
        let (lv, rv) = (self.value(left), self.value(right));
        same_shape(lv, rv, "pair_softmax");
        assert_eq!(lv.rows(), layout.rows(), "pair_softmax rows vs layout");
        let mut out = vec![T::zero(); layout.block_len()];
        for (start, len, boff) in layout.segments() {
            for i in 0..len {
                let p = &mut out[boff + i * len..boff + (i + 1) * len];
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj = dot(lv.row(start + i), rv.row(start + j));
                }
                let m = p.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
                let mut z = T::zero();
                for pj in p.iter_mut() {
                    *pj = (*pj - m).exp();
                    z += *pj;
                }
                for pj in p.iter_mut() {
                    *pj = *pj / z;
                }
            }
        }
        let value = Tensor::from_parts(vec![layout.block_len()], out);
        let rg = self.rg(left) || self.rg(right);
        self.push(Op::PairSoftmax { left, right, layout }, Some(value), rg)
    }

    /// `sum_r weights[r] * -ln max(softmax(logits_r)[targets[r]], floor)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T], floor: T) -> Var {
        let lv = self.value(logits);
        let k = lv.cols();
        assert_eq!(lv.rows(), targets.len(), "one target per row");
        assert_eq!(targets.len(), weights.len(), "one weight per row");
        let mut probs = Vec::with_capacity(lv.len());
        let mut loss = T::zero();
        for (r, row) in lv.data().chunks_exact(k).enumerate() {
            assert!(targets[r] < k, "target class out of range");
            let m = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let start = probs.len();
            let mut z = T::zero();
            for &x in row {
                let e = (x - m).exp();
                z += e;
                probs.push(e);
            }
            for p in &mut probs[start..] {
                *p = *p / z;
            }
            loss -= weights[r] * probs[start + targets[r]].max(floor).ln();
        }
        let value = Tensor::from_parts(vec![1], vec![loss]);
        let rg = self.rg(logits);
        self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                floor,
            },
            Some(value),
            rg,
        )
    }

    /// Probabilities computed by a [`Self::softmax_cross_entropy`] node.
    pub fn softmax_probs(&self, loss: Var) -> Option<Tensor<T>> {
        match &self.nodes[loss.0].op {
            Op::SoftmaxCrossEntropy { logits, probs, .. } => {
                let shape = self.value(*logits).shape().to_vec();
                Some(Tensor::from_parts(shape, probs.clone()))
            }
            _ => None,
        }
    }

    /// Every attention node recorded so far, in recording order.
    pub fn attention_nodes(&self) -> Vec<Var> {
        (0..self.nodes.len())
            .filter(|&i| matches!(self.nodes[i].op, Op::Attention(_)))
            .map(Var)
            .collect()
    }

    /// Scores and weights of head `head` for packed sequence `segment` of an
    /// attention node.
    pub fn attention_maps(&self, node: Var, head: usize, segment: usize) -> Option<AttentionMaps<T>> {
        match &self.nodes[node.0].op {
            Op::Attention(a) => {
                let (_, len, boff) = a.layout.segment(segment);
                let base = head * a.layout.block_len() + boff;
                Some(AttentionMaps {
                    scores: a.scores[base..base + len * len].to_vec(),
                    probs: a.probs[base..base + len * len].to_vec(),
                })
            }
            _ => None,
        }
    }

    /// All heads of an attention node: `(heads, scores, probs)`, each slice
    /// holding `heads` consecutive copies of the layout's blocks.
    pub fn attention_blocks(&self, node: Var) -> Option<(usize, &[T], &[T])> {
        match &self.nodes[node.0].op {
            Op::Attention(a) => Some((a.heads, &a.scores[..], &a.probs[..])),
            _ => None,
        }
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(&[1], T::one()));
        let mut kept: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            if matches!(self.nodes[idx].op, Op::Leaf | Op::Param(_)) {
                kept[idx] = Some(g);
            }
        }

        let mut param_grads: Vec<Option<Tensor<T>>> = (0..self.params.len()).map(|_| None).collect();
        for (i, slot) in self.param_vars.iter().enumerate() {
            if let Some(v) = slot {
                param_grads[i] = kept[v.0].clone();
            }
        }
        Gradients {
            node_grads: kept,
            param_grads,
        }
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.value(v).shape();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut())
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Gather { table, ids } => {
                if let Some(buf) = self.grad_buf(grads, *table) {
                    let cols = g.cols();
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(
                            T::one(),
                            &gd[r * cols..(r + 1) * cols],
                            &mut buf[id * cols..(id + 1) * cols],
                        );
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(buf) = self.grad_buf(grads, *a) {
                    gemm_nt(gd, bv.data(), buf, m, k, n);
                }
                if let Some(buf) = self.grad_buf(grads, *b) {
                    gemm_tn(av.data(), gd, buf, m, k, n);
                }
            }
            Op::Add(a, b) => {
                if let Some(buf) = self.grad_buf(grads, *a) {
                    axpy(T::one(), gd, buf);
                }
                if let Some(buf) = self.grad_buf(grads, *b) {
                    axpy(T::one(), gd, buf);
                }
            }
            Op::Sub(a, b) => {
                if let Some(buf) = self.grad_buf(grads, *a) {
                    axpy(T::one(), gd, buf);
                }
                if let Some(buf) = self.grad_buf(grads, *b) {
                    axpy(-T::one(), gd, buf);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(buf) = self.grad_buf(grads, *a) {
                    for ((o, &gi), &bi) in buf.iter_mut().zip(gd).zip(bv.data()) {
                        *o += gi * bi;
                    }
                }
                if let Some(buf) = self.grad_buf(grads, *b) {
                    for ((o, &gi), &ai) in buf.iter_mut().zip(gd).zip(av.data()) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Min(a, b) | Op::Max(a, b) => {
                let is_min = matches!(self.nodes[idx].op, Op::Min(..));
                let (av, bv) = (self.value(*a), self.value(*b));
                let pick_a: Vec<bool> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&x, &y)| if is_min { x <= y } else { x >= y })
                    .collect();
                if let Some(buf) = self.grad_buf(grads, *a) {
                    for ((o, &gi), &p) in buf.iter_mut().zip(gd).zip(&pick_a) {
                        if p {
                            *o += gi;
                        }
                    }
                }
                if let Some(buf) = self.grad_buf(grads, *b) {
                    for ((o, &gi), &p) in buf.iter_mut().zip(gd).zip(&pick_a) {
                        if !p {
                            *o += gi;
                        }
                    }
                }
            }
            Op::AddBroadcast(a, b) => {
                if let Some(buf) = self.grad_buf(grads, *a) {
                    axpy(T::one(), gd, buf);
                }
                let cols = g.cols();
                if let Some(buf) = self.grad_buf(grads, *b) {
                    if buf.len() == 1 {
                        buf[0] += gd.iter().copied().sum::<T>();
                    } else {
                        for row in gd.chunks_exact(cols) {
                            axpy(T::one(), row, buf);
                        }
                    }
                }
            }
            Op::MulBroadcast(a, s) => {
                let (av, sv) = (self.value(*a), self.value(*s));
                let cols = g.cols();
                let sd = sv.data();
                if let Some(buf) = self.grad_buf(grads, *a) {
                    if sd.len() == 1 {
                        axpy(sd[0], gd, buf);
                    } else {
                        for (brow, grow) in buf.chunks_exact_mut(cols).zip(gd.chunks_exact(cols)) {
                            for ((o, &gi), &si) in brow.iter_mut().zip(grow).zip(sd) {
                                *o += gi * si;
                            }
                        }
                    }
                }
                if let Some(buf) = self.grad_buf(grads, *s) {
                    if buf.len() == 1 {
                        buf[0] += dot(gd, av.data());
                    } else {
                        for (grow, arow) in gd.chunks_exact(cols).zip(av.data().chunks_exact(cols)) {
                            for ((o, &gi), &ai) in buf.iter_mut().zip(grow).zip(arow) {
                                *o += gi * ai;
                            }
                        }
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(buf) = self.grad_buf(grads, *a) {
                    axpy(*k, gd, buf);
                }
            }
            Op::MaskMul(a, mask) => {
                if let Some(buf) = self.grad_buf(grads, *a) {
                    for ((o, &gi), &m) in buf.iter_mut().zip(gd).zip(mask.iter()) {
                        *o += gi * m;
                    }
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                if let Some(buf) = self.grad_buf(grads, *a) {
                    for ((o, &gi), &x) in buf.iter_mut().zip(gd).zip(av.data()) {
                        *o += gi * gelu_derivative(x);
                    }
                }
            }
            Op::Sigmoid(a) => {
                let out = self.nodes[idx].value.as_ref().expect("sigmoid value");
                if let Some(buf) = self.grad_buf(grads, *a) {
                    for ((o, &gi), &s) in buf.iter_mut().zip(gd).zip(out.data()) {
                        *o += gi * s * (T::one() - s);
                    }
                }
            }
            Op::Normalize { x, inv_std } => {
                let out = self.nodes[idx].value.as_ref().expect("normalize value");
                let cols = g.cols();
                let n = T::of(cols as f64);
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for (r, ((brow, grow), nrow)) in buf
                        .chunks_exact_mut(cols)
                        .zip(gd.chunks_exact(cols))
                        .zip(out.data().chunks_exact(cols))
                        .enumerate()
                    {
                        let mean_g = grow.iter().copied().sum::<T>() / n;
                        let mean_gn = dot(grow, nrow) / n;
                        let inv = inv_std[r];
                        for ((o, &gi), &ni) in brow.iter_mut().zip(grow).zip(nrow) {
                            *o += inv * (gi - mean_g - ni * mean_gn);
                        }
                    }
                }
            }
            Op::Attention(a) => self.backprop_attention(a, gd, grads),
            Op::PairSoftmax { left, right, layout } => {
                let probs = self.nodes[idx].value.as_ref().expect("pair softmax value").data();
                let (lv, rv) = (self.value(*left), self.value(*right));
                let d = lv.cols();
                let mut dl = self.nodes[left.0].requires_grad.then(|| vec![T::zero(); lv.len()]);
                let mut dr = self.nodes[right.0].requires_grad.then(|| vec![T::zero(); rv.len()]);
                let mut da = Vec::new();
                for (start, len, boff) in layout.segments() {
                    for i in 0..len {
                        let p = &probs[boff + i * len..boff + (i + 1) * len];
                        let gr = &gd[boff + i * len..boff + (i + 1) * len];
                        let s = dot(p, gr);
                        da.clear();
                        da.extend(p.iter().zip(gr).map(|(&pj, &gj)| pj * (gj - s)));
                        let row_i = start + i;
                        for (j, &daj) in da.iter().enumerate() {
                            let row_j = start + j;
                            if let Some(dl) = dl.as_mut() {
                                axpy(daj, rv.row(row_j), &mut dl[row_i * d..(row_i + 1) * d]);
                            }
                            if let Some(dr) = dr.as_mut() {
                                axpy(daj, lv.row(row_i), &mut dr[row_j * d..(row_j + 1) * d]);
                            }
                        }
                    }
                }
                if let (Some(buf), Some(dl)) = (self.grad_buf(grads, *left), dl) {
                    axpy(T::one(), &dl, buf);
                }
                if let (Some(buf), Some(dr)) = (self.grad_buf(grads, *right), dr) {
                    axpy(T::one(), &dr, buf);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                weights,
                probs,
                floor,
            } => {
                let k = self.value(*logits).cols();
                let upstream = gd[0];
                if let Some(buf) = self.grad_buf(grads, *logits) {
                    for (r, (brow, prow)) in buf.chunks_exact_mut(k).zip(probs.chunks_exact(k)).enumerate() {
                        if prow[targets[r]] < *floor {
                            continue;
                        }
                        let w = upstream * weights[r];
                        for (j, (o, &p)) in brow.iter_mut().zip(prow).enumerate() {
                            let target = if j == targets[r] { T::one() } else { T::zero() };
                            *o += w * (p - target);
                        }
                    }
                }
            }
        }
    }

    fn backprop_attention(&self, a: &AttentionSaved<T>, gd: &[T], grads: &mut [Option<Tensor<T>>]) {
        let (qv, kv, vv) = (self.value(a.q), self.value(a.k), self.value(a.v));
        let (dq_cols, dv_cols) = (qv.cols(), vv.cols());
        let (hq, hv) = (dq_cols / a.heads, dv_cols / a.heads);
        let block = a.layout.block_len();
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let mut dq = need(a.q).then(|| vec![T::zero(); qv.len()]);
        let mut dk = need(a.k).then(|| vec![T::zero(); kv.len()]);
        let mut dvv = need(a.v).then(|| vec![T::zero(); vv.len()]);
        let mut dw = a.weights.filter(|&w| need(w)).map(|_| vec![T::zero(); block]);
        let mut dp = Vec::new();
        for h in 0..a.heads {
            let (qs, vs) = (h * hq..(h + 1) * hq, h * hv..(h + 1) * hv);
            for (start, len, boff) in a.layout.segments() {
                for i in 0..len {
                    let row = start + i;
                    let base = h * block + boff + i * len;
                    let p = &a.probs[base..base + len];
                    let grow = &gd[row * dv_cols + vs.start..row * dv_cols + vs.end];
                    dp.clear();
                    dp.extend((0..len).map(|j| dot(grow, &vv.row(start + j)[vs.clone()])));
                    let s = dot(p, &dp);
                    if let Some(dvv) = dvv.as_mut() {
                        for (j, &pj) in p.iter().enumerate() {
                            if pj != T::zero() {
                                let r = (start + j) * dv_cols;
                                axpy(pj, grow, &mut dvv[r + vs.start..r + vs.end]);
                            }
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        let r = &a.unweighted[base..base + len];
                        for j in 0..len {
                            dw[boff + i * len + j] += r[j] * (dp[j] - s);
                        }
                    }
                    for j in 0..len {
                        let da = p[j] * (dp[j] - s) * a.scale;
                        if da == T::zero() {
                            continue;
                        }
                        if let Some(dq) = dq.as_mut() {
                            let r = row * dq_cols;
                            axpy(da, &kv.row(start + j)[qs.clone()], &mut dq[r + qs.start..r + qs.end]);
                        }
                        if let Some(dk) = dk.as_mut() {
                            let r = (start + j) * dq_cols;
                            axpy(da, &qv.row(row)[qs.clone()], &mut dk[r + qs.start..r + qs.end]);
                        }
                    }
                }
            }
        }
        for (var, local) in [(Some(a.q), dq), (Some(a.k), dk), (Some(a.v), dvv), (a.weights, dw)] {
            if let (Some(var), Some(local)) = (var, local) {
                if let Some(buf) = self.grad_buf(grads, var) {
                    axpy(T::one(), &local, buf);
                }
            }
        }
    }
}
