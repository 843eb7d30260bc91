//! Forward pass as tape operations, plus the recorded trace.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{self, LeftNames, RightNames};
use super::{Batch, Fusion, GraphMode, ModelConfig, ModelError};
use crate::numerics::{GradientTape, Scalar, SeqLayout, Tensor, Var};

/// Per-call switches that are not part of the model.
#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Replace the gate `e_s` by this constant.
    pub gate_override: Option<f64>,
    /// Enables dropout (at `config.dropout`) when present.
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
}

pub struct RightNodes {
    pub attention: Var,
    pub o: Var,
    pub o_bar: Var,
    pub ffn: Var,
    pub out: Var,
}

pub struct DynamicNodes {
    pub tag_repr: Var,
    pub keys: Var,
    pub queries: Var,
    pub probs: Var,
}

/// Tape handles of every intermediate of one forward pass.
pub struct ForwardNodes {
    pub v: Var,
    pub e_b: Var,
    pub right: Vec<RightNodes>,
    pub dynamic: Option<DynamicNodes>,
    pub e_t: Option<Var>,
    pub gate: Option<Var>,
    pub e: Var,
    pub logits: Var,
}

fn check_ids(ids: &[usize], rows: usize, what: &str) -> Result<(), ModelError> {
    match ids.iter().find(|&&id| id >= rows) {
        Some(&id) => Err(ModelError::IdOutOfRange {
            what: what.to_string(),
            id,
            rows,
        }),
        None => Ok(()),
    }
}

/// `v_i = tokenEmb + typeEmb + posEmb`.
pub fn embed_inputs<T: Scalar>(
    tape: &mut GradientTape<'_, T>,
    token_ids: &[usize],
    type_ids: &[usize],
    positions: &[usize],
) -> Result<Var, ModelError> {
    if token_ids.len() != type_ids.len() || token_ids.len() != positions.len() {
        return Err(ModelError::LengthMismatch {
            expected: token_ids.len(),
            actual: type_ids.len().min(positions.len()),
        });
    }
    let tok = tape.param(params::TOKEN_EMB)?;
    let typ = tape.param(params::TYPE_EMB)?;
    let pos = tape.param(params::POS_EMB)?;
    check_ids(token_ids, tape.value(tok).rows(), "token")?;
    check_ids(type_ids, tape.value(typ).rows(), "token type")?;
    check_ids(positions, tape.value(pos).rows(), "position")?;
    let a = tape.gather(tok, token_ids);
    let b = tape.gather(typ, type_ids);
    let c = tape.gather(pos, positions);
    let ab = tape.add(a, b);
    Ok(tape.add(ab, c))
}

/// Per-dimension layer normalization with learned `gamma`/`beta` vectors.
fn layer_norm_vec<T: Scalar>(
    tape: &mut GradientTape<'_, T>,
    x: Var,
    gamma: &str,
    beta: &str,
    eps: T,
) -> Result<Var, ModelError> {
    let g = tape.param(gamma)?;
    let b = tape.param(beta)?;
    let n = tape.normalize(x, eps);
    let scaled = tape.mul_broadcast(n, g);
    Ok(tape.add_broadcast(scaled, b))
}

fn linear<T: Scalar>(tape: &mut GradientTape<'_, T>, x: Var, w: &str, b: Option<&str>) -> Result<Var, ModelError> {
    let w = tape.param(w)?;
    let y = tape.matmul(x, w);
    match b {
        Some(b) => {
            let b = tape.param(b)?;
            Ok(tape.add_broadcast(y, b))
        }
        None => Ok(y),
    }
}

fn dropout<T: Scalar>(tape: &mut GradientTape<'_, T>, x: Var, p: f64, rng: &mut Option<&mut ChaCha8Rng>) -> Var {
    let Some(rng) = rng.as_deref_mut() else { return x };
    if p <= 0.0 {
        return x;
    }
    let keep = T::of(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..tape.value(x).len())
        .map(|_| if rng.gen_bool(p) { T::zero() } else { keep })
        .collect();
    tape.mask_mul(x, Rc::new(mask))
}

/// One post-norm transformer encoder layer of the left tower.
#[allow(clippy::too_many_arguments)]
fn left_layer<T: Scalar>(
    tape: &mut GradientTape<'_, T>,
    x: Var,
    names: &LeftNames,
    layout: &Rc<SeqLayout>,
    heads: usize,
    eps: T,
    p_drop: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<Var, ModelError> {
    let d = tape.value(x).cols();
    let q = linear(tape, x, &names.wq, Some(&names.bq))?;
    let k = linear(tape, x, &names.wk, Some(&names.bk))?;
    let v = linear(tape, x, &names.wv, Some(&names.bv))?;
    let scale = T::one() / T::of((d / heads) as f64).sqrt();
    let att = tape.attention(q, k, v, None, layout.clone(), heads, scale);
    let att = linear(tape, att, &names.wo, Some(&names.bo))?;
    let att = dropout(tape, att, p_drop, rng);
    let res = tape.add(x, att);
    let x = layer_norm_vec(tape, res, &names.ln1_gamma, &names.ln1_beta, eps)?;
    let h = linear(tape, x, &names.ff1_w, Some(&names.ff1_b))?;
    let h = tape.gelu(h);
    let f = linear(tape, h, &names.ff2_w, Some(&names.ff2_b))?;
    let f = dropout(tape, f, p_drop, rng);
    let res = tape.add(x, f);
    layer_norm_vec(tape, res, &names.ln2_gamma, &names.ln2_beta, eps)
}

/// `a_ik = (v_i W1)(v_k W2)^T`, alpha restricted to positive edge weights,
/// `o_i = (sum_k alpha_ik v_k W3) W4`. Returns the attention node and `o`.
pub fn graph_masked_attention<T: Scalar>(
    tape: &mut GradientTape<'_, T>,
    v: Var,
    weights: Option<Var>,
    layout: &Rc<SeqLayout>,
    names: &RightNames,
    heads: usize,
) -> Result<(Var, Var), ModelError> {
    if let Some(w) = weights {
        let got = tape.value(w).len();
        if got != layout.block_len() {
            return Err(ModelError::LengthMismatch {
                expected: layout.block_len(),
                actual: got,
            });
        }
        let wv = tape.value(w);
        for (_, len, boff) in layout.segments() {
            for i in 0..len {
                let row = &wv.data()[boff + i * len..boff + (i + 1) * len];
                if row.iter().all(|&w| w <= T::zero()) {
                    return Err(ModelError::EmptyNeighborhood { row: i });
                }
            }
        }
    }
    let q = linear(tape, v, &names.w1, None)?;
    let k = linear(tape, v, &names.w2, None)?;
    let val = linear(tape, v, &names.w3, None)?;
    let att = tape.attention(q, k, val, weights, layout.clone(), heads, T::one());
    let o = linear(tape, att, &names.w4, None)?;
    Ok((att, o))
}

/// `v + gamma * norm(x) + beta` with scalar `gamma`, `beta`.
fn add_norm_scalar<T: Scalar>(
    tape: &mut GradientTape<'_, T>,
    residual: Var,
    x: Var,
    gamma: &str,
    beta: &str,
    eps: T,
) -> Result<Var, ModelError> {
    let g = tape.param(gamma)?;
    let b = tape.param(beta)?;
    let n = tape.normalize(x, eps);
    let scaled = tape.mul_broadcast(n, g);
    let shifted = tape.add_broadcast(scaled, b);
    Ok(tape.add(residual, shifted))
}

/// One right-tower layer: graph-masked attention, Add&Norm, GELU FFN,
/// Add&Norm.
pub fn right_tower_layer<T: Scalar>(
    tape: &mut GradientTape<'_, T>,
    u: Var,
    weights: Option<Var>,
    layout: &Rc<SeqLayout>,
    names: &RightNames,
    heads: usize,
    eps: T,
) -> Result<RightNodes, ModelError> {
    let (attention, o) = graph_masked_attention(tape, u, weights, layout, names, heads)?;
    let o_bar = add_norm_scalar(tape, u, o, &names.gamma, &names.beta, eps)?;
    let h = linear(tape, o_bar, &names.w5, Some(&names.b))?;
    let ffn = tape.gelu(h);
    let out = add_norm_scalar(tape, o_bar, ffn, &names.gamma2, &names.beta2, eps)?;
    Ok(RightNodes {
        attention,
        o,
        o_bar,
        ffn,
        out,
    })
}

/// Tag-to-tag probabilities `alpha^t = softmax_k((t_i W7)(t_k W8)^T)` with
/// `t_i = tagEmb + tagPosEmb`, one `len x len` block per query.
pub fn dynamic_tag_graph<T: Scalar>(
    tape: &mut GradientTape<'_, T>,
    tag_ids: &[usize],
    positions: &[usize],
    layout: &Rc<SeqLayout>,
) -> Result<DynamicNodes, ModelError> {
    let emb = tape.param(params::TAG_EMB)?;
    let pos = tape.param(params::TAG_POS_EMB)?;
    check_ids(tag_ids, tape.value(emb).rows(), "tag")?;
    check_ids(positions, tape.value(pos).rows(), "tag position")?;
    let a = tape.gather(emb, tag_ids);
    let b = tape.gather(pos, positions);
    let tag_repr = tape.add(a, b);
    let keys = linear(tape, tag_repr, params::W7, None)?;
    let queries = linear(tape, tag_repr, params::W8, None)?;
    let probs = tape.pair_softmax(keys, queries, layout.clone());
    Ok(DynamicNodes {
        tag_repr,
        keys,
        queries,
        probs,
    })
}

/// Combines the two towers. Returns the fused embedding and, for the gated
/// mode, the gate.
pub fn fuse<T: Scalar>(
    tape: &mut GradientTape<'_, T>,
    e_b: Var,
    e_t: Var,
    mode: Fusion,
    gate_override: Option<T>,
) -> Result<(Var, Option<Var>), ModelError> {
    let (sb, st) = (tape.value(e_b).shape().to_vec(), tape.value(e_t).shape().to_vec());
    if sb != st {
        return Err(ModelError::ShapeMismatch { left: sb, right: st });
    }
    Ok(match mode {
        Fusion::Gated => {
            let gate = match gate_override {
                Some(s) => tape.constant(Tensor::filled(&sb, s)),
                None => {
                    let w6 = tape.param(params::W6)?;
                    let c = tape.param(params::C)?;
                    let z = tape.matmul(e_b, w6);
                    let z = tape.add_broadcast(z, c);
                    let s = tape.sigmoid(z);
                    let g = tape.value(s).cols();
                    if g == sb[1] {
                        s
                    } else {
                        let ones = tape.constant(Tensor::filled(&[g, sb[1]], T::one()));
                        tape.matmul(s, ones)
                    }
                }
            };
            // s * e_b + (1 - s) * e_t
            let gb = tape.mul(gate, e_b);
            let gt = tape.mul(gate, e_t);
            let rest = tape.sub(e_t, gt);
            (tape.add(gb, rest), Some(gate))
        }
        Fusion::Mean => {
            let s = tape.add(e_b, e_t);
            (tape.scale(s, T::of(0.5)), None)
        }
        Fusion::Min => (tape.minimum(e_b, e_t), None),
        Fusion::Max => (tape.maximum(e_b, e_t), None),
    })
}

/// Linear classifier head producing logits.
pub fn classify<T: Scalar>(tape: &mut GradientTape<'_, T>, e: Var) -> Result<Var, ModelError> {
    linear(tape, e, params::HEAD_W, Some(params::HEAD_B))
}

/// Records the complete forward pass for `batch` on `tape`.
pub fn forward_nodes<T: Scalar>(
    tape: &mut GradientTape<'_, T>,
    config: &ModelConfig,
    batch: &Batch<T>,
    opts: ForwardOptions<'_>,
) -> Result<ForwardNodes, ModelError> {
    if let Some(&p) = batch.positions.iter().max() {
        if p >= config.max_len {
            return Err(ModelError::TooLong {
                len: p + 1,
                max_len: config.max_len,
            });
        }
    }
    let eps = T::of(config.eps);
    let mut rng = opts.dropout_rng;
    let layout = &batch.layout;
    let v = embed_inputs(tape, &batch.token_ids, &batch.type_ids, &batch.positions)?;

    let mut x = layer_norm_vec(tape, v, params::EMB_LN_GAMMA, params::EMB_LN_BETA, eps)?;
    x = dropout(tape, x, config.dropout, &mut rng);
    for l in 0..config.n_layers {
        x = left_layer(
            tape,
            x,
            &LeftNames::new(l),
            layout,
            config.n_heads,
            eps,
            config.dropout,
            &mut rng,
        )?;
    }
    let e_b = x;

    let mut right = Vec::new();
    let mut dynamic = None;
    let (e, e_t, gate) = if config.two_tower() {
        let weights = match config.graph {
            GraphMode::Static => {
                let adj = batch
                    .adjacency
                    .clone()
                    .ok_or_else(|| ModelError::Config("static mode needs a tag graph".into()))?;
                Some(tape.constant(adj))
            }
            GraphMode::Dynamic => {
                let d = dynamic_tag_graph(tape, &batch.tag_ids, &batch.positions, layout)?;
                let p = d.probs;
                dynamic = Some(d);
                Some(p)
            }
            GraphMode::None => unreachable!(),
        };
        let mut u = v;
        for r in 0..config.right_layers {
            let nodes = right_tower_layer(tape, u, weights, layout, &RightNames::new(r), config.right_heads, eps)?;
            u = nodes.out;
            right.push(nodes);
        }
        let (e, gate) = fuse(tape, e_b, u, config.fusion, opts.gate_override.map(T::of))?;
        (e, Some(u), gate)
    } else {
        (e_b, None, None)
    };
    let logits = classify(tape, e)?;
    Ok(ForwardNodes {
        v,
        e_b,
        right,
        dynamic,
        e_t,
        gate,
        e,
        logits,
    })
}

/// Row-wise softmax of a logits matrix.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.cols();
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(k) {
        let m = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let start = out.len();
        let mut z = T::zero();
        for &x in row {
            let e = (x - m).exp();
            z += e;
            out.push(e);
        }
        for p in &mut out[start..] {
            *p = *p / z;
        }
    }
    Tensor::new(vec![logits.rows(), k], out).expect("softmax of finite logits")
}

#[derive(Clone, Debug)]
pub struct RightTrace<T> {
    pub heads: usize,
    /// Affinities `a_ik`, `heads` copies of the layout blocks.
    pub affinity: Vec<T>,
    /// Attention weights `alpha_ik`, same layout as `affinity`.
    pub alpha: Vec<T>,
    pub o: Tensor<T>,
    pub o_bar: Tensor<T>,
    pub ffn: Tensor<T>,
    pub out: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct DynamicTrace<T> {
    /// `a^t_ik` blocks.
    pub affinity: Vec<T>,
    /// `alpha^t_ik` blocks.
    pub probs: Vec<T>,
    /// `sum_k alpha^t_ik (t_k W9)`; not consumed downstream.
    pub context: Tensor<T>,
}

/// Values of every intermediate of a forward pass over a packed batch.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    pub layout: Rc<SeqLayout>,
    pub v: Tensor<T>,
    pub e_b: Tensor<T>,
    pub right: Vec<RightTrace<T>>,
    pub dynamic: Option<DynamicTrace<T>>,
    pub e_t: Option<Tensor<T>>,
    pub gate: Option<Tensor<T>>,
    pub e: Tensor<T>,
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn capture(tape: &GradientTape<'_, T>, nodes: &ForwardNodes, layout: Rc<SeqLayout>) -> Self {
        let val = |v: Var| tape.value(v).clone();
        let right = nodes
            .right
            .iter()
            .map(|r| {
                let (heads, scores, probs) = tape.attention_blocks(r.attention).expect("attention node");
                RightTrace {
                    heads,
                    affinity: scores.to_vec(),
                    alpha: probs.to_vec(),
                    o: val(r.o),
                    o_bar: val(r.o_bar),
                    ffn: val(r.ffn),
                    out: val(r.out),
                }
            })
            .collect();
        let dynamic = nodes.dynamic.as_ref().map(|d| {
            let keys = tape.value(d.keys);
            let queries = tape.value(d.queries);
            let probs = tape.value(d.probs).data().to_vec();
            let mut affinity = vec![T::zero(); layout.block_len()];
            for (start, len, boff) in layout.segments() {
                for i in 0..len {
                    for k in 0..len {
                        affinity[boff + i * len + k] = keys
                            .row(start + i)
                            .iter()
                            .zip(queries.row(start + k))
                            .map(|(&a, &b)| a * b)
                            .sum();
                    }
                }
            }
            let repr = tape.value(d.tag_repr);
            let w9 = tape.params().get(params::W9).expect("W9 present in dynamic mode");
            let values = matmul_plain(repr, w9);
            let mut context = Tensor::zeros(&[layout.rows(), w9.cols()]);
            for (start, len, boff) in layout.segments() {
                for i in 0..len {
                    for k in 0..len {
                        let p = probs[boff + i * len + k];
                        let src = values.row(start + k).to_vec();
                        for (c, s) in context.row_mut(start + i).iter_mut().zip(src) {
                            *c += p * s;
                        }
                    }
                }
            }
            DynamicTrace {
                affinity,
                probs,
                context,
            }
        });
        let logits = val(nodes.logits);
        Self {
            probs: softmax_rows(&logits),
            v: val(nodes.v),
            e_b: val(nodes.e_b),
            right,
            dynamic,
            e_t: nodes.e_t.map(val),
            gate: nodes.gate.map(val),
            e: val(nodes.e),
            logits,
            layout,
        }
    }

    pub fn num_queries(&self) -> usize {
        self.layout.num_segments()
    }

    /// Row range of query `q` in the packed tensors.
    pub fn rows(&self, q: usize) -> std::ops::Range<usize> {
        let (start, len, _) = self.layout.segment(q);
        start..start + len
    }

    /// `len x len` block of query `q` from a block-layout buffer.
    pub fn block(&self, data: &[T], q: usize) -> Tensor<T> {
        let (_, len, boff) = self.layout.segment(q);
        Tensor::new(vec![len, len], data[boff..boff + len * len].to_vec()).expect("finite block")
    }

    /// Right-tower attention weights of `layer`/`head` for query `q`.
    pub fn alpha(&self, layer: usize, head: usize, q: usize) -> Option<Tensor<T>> {
        let r = self.right.get(layer)?;
        let off = head * self.layout.block_len();
        Some(self.block(&r.alpha[off..off + self.layout.block_len()], q))
    }

    /// Rows of `t` belonging to query `q`.
    pub fn query_rows(&self, t: &Tensor<T>, q: usize) -> Tensor<T> {
        let r = self.rows(q);
        let cols = t.cols();
        Tensor::new(vec![r.len(), cols], t.data()[r.start * cols..r.end * cols].to_vec()).expect("finite rows")
    }
}

fn matmul_plain<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![T::zero(); m * n];
    crate::numerics::kernels_gemm(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out).expect("finite product")
}
