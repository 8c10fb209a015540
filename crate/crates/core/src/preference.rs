//! Session-level preference mining, fusion, heads and scoring.
//!
//! From the convolved node embeddings of one session we mine two vectors:
//! the price preference (multi-head self-attention over the price-level
//! sequence, last position) and the interest preference (soft attention over
//! the item sequence against its mean). A pair of "remember gates" then
//! cross-fuses them. Training supervises both: which item came next and
//! which price level it had. Final ranking scores every item by
//! `u_p . v_price(level(i)) + u_I . v_id(i)` against the initial embedding
//! tables.

use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;

use crate::autodiff::{Tape, Var};
use crate::params::{softmax_in_place, ParamId, ParameterStore};

/// Input prefixes are truncated upstream to this many items, so the position
/// table has exactly this many rows.
pub const MAX_SESSION_LEN: usize = 19;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    HeadsMustDivideDim { d: usize, heads: usize },
    SessionTooLong { len: usize },
    EmptyPrefix,
    NonFiniteLoss { tensor: String },
    InvalidVariant { reason: String },
}

impl core::fmt::Display for ModelError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ModelError::HeadsMustDivideDim { d, heads } => {
                write!(f, "head count {heads} must divide embedding size {d}")
            }
            ModelError::SessionTooLong { len } => {
                write!(f, "session length {len} exceeds the position table ({MAX_SESSION_LEN})")
            }
            ModelError::EmptyPrefix => write!(f, "session prefix is empty"),
            ModelError::NonFiniteLoss { tensor } => {
                write!(f, "non-finite loss; first bad tensor: {tensor}")
            }
            ModelError::InvalidVariant { reason } => write!(f, "invalid variant: {reason}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ModelError {}

/// Blend temporal information into a sequence: element `j` of `m` becomes
/// `tanh(W [x_j; pos_{m-j}] + b)` with positions counted from the tail (the
/// last element always pairs with the first position row).
pub fn position_enhance<F: Float>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    w: ParamId,
    b: ParamId,
    pos_table: ParamId,
    seq: &[Var],
) -> Result<Vec<Var>, ModelError> {
    let m = seq.len();
    if m == 0 {
        return Err(ModelError::EmptyPrefix);
    }
    if m > MAX_SESSION_LEN {
        return Err(ModelError::SessionTooLong { len: m });
    }
    let mut out = Vec::with_capacity(m);
    for (j, &x) in seq.iter().enumerate() {
        let pos = tape.param_row(store, pos_table, m - 1 - j);
        let cat = tape.concat(&[x, pos]);
        let lin = tape.matvec(store, w, cat);
        let biased = tape.add_param(store, lin, b);
        out.push(tape.tanh(biased));
    }
    Ok(out)
}

/// Per-head projection parameters (query, key, value), each `(d/h) x d`.
#[derive(Debug, Clone, Copy)]
pub struct HeadIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

/// Multi-head self-attention over the enhanced price sequence, reading off
/// the last position: per head, the last element's query attends over all
/// keys (scaled by sqrt(d/h)) and mixes the values; heads concatenate back
/// to a d-vector. Only the last position feeds the preference vector, so
/// other query positions are never materialized.
pub fn price_preference<F: Float>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    heads: &[HeadIds],
    seq: &[Var],
) -> Result<Var, ModelError> {
    if seq.is_empty() {
        return Err(ModelError::EmptyPrefix);
    }
    let last = *seq.last().unwrap();
    let (dh, _) = store.shape(heads[0].wq);
    let scale = F::from(1.0 / (dh as f64).sqrt()).unwrap();
    let mut parts = Vec::with_capacity(heads.len());
    for head in heads {
        let q = tape.matvec(store, head.wq, last);
        let keys: Vec<Var> = seq.iter().map(|&x| tape.matvec(store, head.wk, x)).collect();
        let vals: Vec<Var> = seq.iter().map(|&x| tape.matvec(store, head.wv, x)).collect();
        let logits: Vec<Var> = keys
            .iter()
            .map(|&k| {
                let dq = tape.dot(q, k);
                tape.scale(dq, scale)
            })
            .collect();
        let stacked = tape.stack(&logits);
        let alpha = tape.softmax(stacked);
        parts.push(tape.weighted_sum(alpha, &vals));
    }
    Ok(tape.concat(&parts))
}

/// Soft-attention parameters of the interest head.
#[derive(Debug, Clone, Copy)]
pub struct InterestIds {
    pub a1: ParamId,
    pub a2: ParamId,
    pub bias: ParamId,
    pub z: ParamId,
}

/// Interest preference: `beta_j = z . sigmoid(A1 v*_j + A2 mean(v*) + b)`
/// (unnormalized scalars over the enhanced sequence), applied to the
/// convolved item vectors.
pub fn interest_preference<F: Float>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    ids: InterestIds,
    enhanced: &[Var],
    raw: &[Var],
) -> Result<Var, ModelError> {
    if enhanced.is_empty() || enhanced.len() != raw.len() {
        return Err(ModelError::EmptyPrefix);
    }
    let mean = tape.mean_vecs(enhanced);
    let a2m = tape.matvec(store, ids.a2, mean);
    let z = tape.param_vec(store, ids.z);
    let mut betas = Vec::with_capacity(enhanced.len());
    for &v in enhanced {
        let a1v = tape.matvec(store, ids.a1, v);
        let sum = tape.add(a1v, a2m);
        let pre = tape.add_param(store, sum, ids.bias);
        let act = tape.sigmoid(pre);
        betas.push(tape.dot(z, act));
    }
    let weights = tape.stack(&betas);
    Ok(tape.weighted_sum(weights, raw))
}

/// The six gate matrices and bias of the preference fusion.
#[derive(Debug, Clone, Copy)]
pub struct FusionIds {
    pub w1_price: ParamId,
    pub w2_price: ParamId,
    pub w1_interest: ParamId,
    pub w2_interest: ParamId,
    pub w1_merge: ParamId,
    pub w2_merge: ParamId,
    pub bias_merge: ParamId,
}

/// Cross-fuse the two raw preferences through "remember gates":
/// `m = tanh(W1 up + W2 ui + b)`, `r_p = σ(..)`, `r_I = σ(..)`,
/// `u_p = r_p ⊙ up + (1-r_p) ⊙ ui`, `u_I = r_I ⊙ ui + (1-r_I) ⊙ up`.
pub fn fuse_preferences<F: Float>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    ids: FusionIds,
    price_hat: Var,
    interest_hat: Var,
) -> (Var, Var) {
    let m1 = tape.matvec(store, ids.w1_merge, price_hat);
    let m2 = tape.matvec(store, ids.w2_merge, interest_hat);
    let msum = tape.add(m1, m2);
    let mb = tape.add_param(store, msum, ids.bias_merge);
    let merged = tape.tanh(mb);

    let rp1 = tape.matvec(store, ids.w1_price, price_hat);
    let rp2 = tape.matvec(store, ids.w2_price, merged);
    let rp_pre = tape.add(rp1, rp2);
    let r_p = tape.sigmoid(rp_pre);

    let ri1 = tape.matvec(store, ids.w1_interest, interest_hat);
    let ri2 = tape.matvec(store, ids.w2_interest, merged);
    let ri_pre = tape.add(ri1, ri2);
    let r_i = tape.sigmoid(ri_pre);

    let keep_p = tape.mul(r_p, price_hat);
    let inv_p = tape.one_minus(r_p);
    let mix_p = tape.mul(inv_p, interest_hat);
    let u_p = tape.add(keep_p, mix_p);

    let keep_i = tape.mul(r_i, interest_hat);
    let inv_i = tape.one_minus(r_i);
    let mix_i = tape.mul(inv_i, price_hat);
    let u_i = tape.add(keep_i, mix_i);

    (u_p, u_i)
}

/// Logits of the interest head: one dot product per item against the
/// initial ID table.
pub fn interest_logits<F: Float>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    id_table: ParamId,
    u_interest: Var,
) -> Var {
    tape.matvec(store, id_table, u_interest)
}

/// Logits of the price head: one dot product per level against the initial
/// price-level table.
pub fn price_logits<F: Float>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    price_table: ParamId,
    u_price: Var,
) -> Var {
    tape.matvec(store, price_table, u_price)
}

/// Final ranking logits: `u_p . v_price(level(i)) + u_I . v_id(i)`.
/// `level_map[i]` is the 0-based level index of item `i`.
pub fn combined_logits<F: Float>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    id_table: ParamId,
    price_table: ParamId,
    u_price: Var,
    u_interest: Var,
    level_map: &[usize],
) -> Var {
    let base = tape.matvec(store, id_table, u_interest);
    let per_level = tape.matvec(store, price_table, u_price);
    tape.add_indexed(base, per_level, level_map)
}

/// Two-task loss over already-softmaxed distributions:
/// `-log p_interest[target_item] - log p_price[target_level]`, probabilities
/// clamped at 1e-12 (the returned flag reports whether the clamp fired).
pub fn joint_loss(
    interest: &[f64],
    target_item: usize,
    price: &[f64],
    target_level: usize,
) -> (f64, bool) {
    let pi = interest[target_item];
    let pp = price[target_level];
    let clamped = pi < 1e-12 || pp < 1e-12;
    (-(pi.max(1e-12)).ln() - (pp.max(1e-12)).ln(), clamped)
}

/// Softmax over plain logit slices (scoring paths that bypass the tape).
pub fn softmax_probs<F: Float>(logits: &[F]) -> Vec<F> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Descending-score ranking with ties broken by ascending item index.
pub fn rank_descending<F: Float>(scores: &[F]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..scores.len() as u32).collect();
    order.sort_by(|&a, &b| {
        scores[b as usize]
            .partial_cmp(&scores[a as usize])
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}
