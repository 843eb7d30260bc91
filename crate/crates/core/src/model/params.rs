//! Parameter names and initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Fusion, GraphMode, ModelConfig};
use crate::numerics::{ParamStore, Scalar, Tensor};
use crate::util::fnv1a;

pub const TOKEN_EMB: &str = "token_emb";
pub const TYPE_EMB: &str = "type_emb";
pub const POS_EMB: &str = "pos_emb";
pub const TAG_EMB: &str = "tag_emb";
pub const TAG_POS_EMB: &str = "tag_pos_emb";
pub const W6: &str = "W6";
pub const C: &str = "c";
pub const W7: &str = "W7";
pub const W8: &str = "W8";
pub const W9: &str = "W9";
pub const HEAD_W: &str = "Wc";
pub const HEAD_B: &str = "bc";
pub const EMB_LN_GAMMA: &str = "left.emb_ln.gamma";
pub const EMB_LN_BETA: &str = "left.emb_ln.beta";

/// Names of one left-tower layer.
pub struct LeftNames {
    pub wq: String,
    pub bq: String,
    pub wk: String,
    pub bk: String,
    pub wv: String,
    pub bv: String,
    pub wo: String,
    pub bo: String,
    pub ln1_gamma: String,
    pub ln1_beta: String,
    pub ff1_w: String,
    pub ff1_b: String,
    pub ff2_w: String,
    pub ff2_b: String,
    pub ln2_gamma: String,
    pub ln2_beta: String,
}

impl LeftNames {
    pub fn new(layer: usize) -> Self {
        let n = |s: &str| format!("left.{layer}.{s}");
        Self {
            wq: n("wq"),
            bq: n("bq"),
            wk: n("wk"),
            bk: n("bk"),
            wv: n("wv"),
            bv: n("bv"),
            wo: n("wo"),
            bo: n("bo"),
            ln1_gamma: n("ln1.gamma"),
            ln1_beta: n("ln1.beta"),
            ff1_w: n("ff1.w"),
            ff1_b: n("ff1.b"),
            ff2_w: n("ff2.w"),
            ff2_b: n("ff2.b"),
            ln2_gamma: n("ln2.gamma"),
            ln2_beta: n("ln2.beta"),
        }
    }
}

/// Names of one right-tower layer; layer 0 uses the bare symbols.
pub struct RightNames {
    pub w1: String,
    pub w2: String,
    pub w3: String,
    pub w4: String,
    pub gamma: String,
    pub beta: String,
    pub w5: String,
    pub b: String,
    pub gamma2: String,
    pub beta2: String,
}

impl RightNames {
    pub fn new(layer: usize) -> Self {
        let n = |s: &str| {
            if layer == 0 {
                s.to_string()
            } else {
                format!("{s}.{layer}")
            }
        };
        Self {
            w1: n("W1"),
            w2: n("W2"),
            w3: n("W3"),
            w4: n("W4"),
            gamma: n("gamma"),
            beta: n("beta"),
            w5: n("W5"),
            b: n("b"),
            gamma2: n("gamma2"),
            beta2: n("beta2"),
        }
    }
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Every parameter of `config` with its shape, in a fixed order.
fn layout(config: &ModelConfig, vocab_tokens: usize, vocab_tags: usize) -> Vec<(String, Vec<usize>, Init)> {
    let d = config.d_model;
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push = |name: &str, shape: Vec<usize>, init: Init| out.push((name.to_string(), shape, init));
    push(TOKEN_EMB, vec![vocab_tokens, d], Init::Normal);
    push(TYPE_EMB, vec![config.type_vocab, d], Init::Normal);
    push(POS_EMB, vec![config.max_len, d], Init::Normal);
    push(EMB_LN_GAMMA, vec![d], Init::Ones);
    push(EMB_LN_BETA, vec![d], Init::Zeros);
    for l in 0..config.n_layers {
        let n = LeftNames::new(l);
        for (w, b) in [(&n.wq, &n.bq), (&n.wk, &n.bk), (&n.wv, &n.bv), (&n.wo, &n.bo)] {
            push(w, vec![d, d], Init::Normal);
            push(b, vec![d], Init::Zeros);
        }
        push(&n.ln1_gamma, vec![d], Init::Ones);
        push(&n.ln1_beta, vec![d], Init::Zeros);
        push(&n.ff1_w, vec![d, config.d_ff], Init::Normal);
        push(&n.ff1_b, vec![config.d_ff], Init::Zeros);
        push(&n.ff2_w, vec![config.d_ff, d], Init::Normal);
        push(&n.ff2_b, vec![d], Init::Zeros);
        push(&n.ln2_gamma, vec![d], Init::Ones);
        push(&n.ln2_beta, vec![d], Init::Zeros);
    }
    if config.two_tower() {
        for r in 0..config.right_layers {
            let n = RightNames::new(r);
            for w in [&n.w1, &n.w2, &n.w3, &n.w4] {
                push(w, vec![d, d], Init::Normal);
            }
            push(&n.gamma, vec![1], Init::Ones);
            push(&n.beta, vec![1], Init::Zeros);
            push(&n.w5, vec![d, d], Init::Normal);
            push(&n.b, vec![d], Init::Zeros);
            push(&n.gamma2, vec![1], Init::Ones);
            push(&n.beta2, vec![1], Init::Zeros);
        }
        if config.fusion == Fusion::Gated {
            let g = if config.scalar_gate { 1 } else { d };
            push(W6, vec![d, g], Init::Normal);
            push(C, vec![g], Init::Zeros);
        }
        if config.graph == GraphMode::Dynamic {
            let t = config.tag_dim;
            push(TAG_EMB, vec![vocab_tags, t], Init::Normal);
            push(TAG_POS_EMB, vec![config.max_len, t], Init::Normal);
            push(W7, vec![t, t], Init::Normal);
            push(W8, vec![t, t], Init::Normal);
            push(W9, vec![t, t], Init::Normal);
        }
    }
    push(HEAD_W, vec![d, config.num_classes], Init::Normal);
    push(HEAD_B, vec![config.num_classes], Init::Zeros);
    out
}

/// Fresh parameters. Each tensor draws from its own stream keyed by `seed`
/// and its name, so shared parameters start identical across graph and
/// fusion modes.
pub fn init_params<T: Scalar>(
    config: &ModelConfig,
    vocab_tokens: usize,
    vocab_tags: usize,
    seed: u64,
) -> ParamStore<T> {
    let normal = Normal::new(0.0, config.init_std).expect("init_std validated positive");
    let mut store = ParamStore::new();
    for (name, shape, init) in layout(config, vocab_tokens, vocab_tags) {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Normal => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&name));
                (0..n).map(|_| T::of(normal.sample(&mut rng))).collect()
            }
        };
        store.insert(name, Tensor::new(shape, data).expect("finite init"));
    }
    store
}

/// Expected shape of every parameter, for checkpoint validation.
pub fn expected_shapes(config: &ModelConfig, vocab_tokens: usize, vocab_tags: usize) -> Vec<(String, Vec<usize>)> {
    layout(config, vocab_tokens, vocab_tags)
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect()
}
