//! Per-decoder-step attention over encoder states: query attention and
//! query-conditioned document attention. Energies are computed over the
//! true (unpadded) positions only; padded positions carry weight
//! exactly zero in the reported weight vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::params::{BoundParams, ParamSet};
use crate::tensor::{NodeId, Tape, Tensor, TensorError};

/// Bound attention parameter nodes. `z` couples the dynamic query
/// representation into document attention and is absent for the query
/// attention head (and for models without a query path).
#[derive(Clone, Copy)]
pub struct AttnNodes {
    pub w: NodeId,
    pub u: NodeId,
    pub v: NodeId,
    pub z: Option<NodeId>,
}

/// Register attention parameters under `prefix`. `attn_dim` is the
/// encoder hidden size the energies live in, `state_dim` the decoder
/// state size, `query_dim` the query representation size when coupled.
pub fn register_attention(
    params: &mut ParamSet,
    prefix: &str,
    attn_dim: usize,
    state_dim: usize,
    query_dim: Option<usize>,
    seed: u64,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (attn_dim as f64).sqrt();
    let mut mat = |rows: usize, cols: usize| -> Tensor {
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor::matrix(rows, cols, data)
    };
    let w = mat(attn_dim, state_dim);
    let u = mat(attn_dim, attn_dim);
    params.insert(&format!("{prefix}.w"), w);
    params.insert(&format!("{prefix}.u"), u);
    if let Some(qd) = query_dim {
        let z = mat(attn_dim, qd);
        params.insert(&format!("{prefix}.z"), z);
    }
    let v: Vec<f64> = (0..attn_dim).map(|_| rng.gen_range(-bound..bound)).collect();
    params.insert(&format!("{prefix}.v"), Tensor::vector(v));
}

pub fn bind_attention(bound: &BoundParams, prefix: &str) -> AttnNodes {
    AttnNodes {
        w: bound.node(&format!("{prefix}.w")),
        u: bound.node(&format!("{prefix}.u")),
        v: bound.node(&format!("{prefix}.v")),
        z: bound.try_node(&format!("{prefix}.z")),
    }
}

/// Attention weights and context for one decoder step.
pub struct AttentionResult {
    /// Softmax weights over the first `valid` positions (tape node).
    pub weights: NodeId,
    /// Weighted sum of the attended encoder states (tape node).
    pub context: NodeId,
    /// Weights over all positions, padded tail exactly 0.
    pub full_weights: Vec<f64>,
}

/// a_i = v^T tanh(W s_t + U h_i [+ Z q_t]); alpha = softmax(a);
/// context = sum_i alpha_i h_i over the first `valid` states.
pub fn attend(
    tape: &mut Tape,
    p: &AttnNodes,
    s_t: NodeId,
    states: &[NodeId],
    valid: usize,
    query_ctx: Option<NodeId>,
) -> Result<AttentionResult, TensorError> {
    let valid = valid.min(states.len());
    if valid == 0 {
        return Err(TensorError::EmptyInput { op: "attend" });
    }
    let ws = tape.matvec(p.w, s_t)?;
    let zq = match (p.z, query_ctx) {
        (Some(z), Some(q)) => {
            let zq = tape.matvec(z, q)?;
            Some(tape.add(ws, zq)?)
        }
        _ => None,
    };
    let base = zq.unwrap_or(ws);
    let mut energies = Vec::with_capacity(valid);
    for &h in &states[..valid] {
        let uh = tape.matvec(p.u, h)?;
        let pre = tape.add(base, uh)?;
        let th = tape.tanh(pre);
        energies.push(tape.dot(p.v, th)?);
    }
    let stacked = tape.stack(&energies)?;
    let weights = tape.softmax(stacked)?;
    let context = tape.weighted_sum(weights, &states[..valid])?;
    let mut full_weights = tape.value(weights).data.clone();
    full_weights.resize(states.len(), 0.0);
    Ok(AttentionResult {
        weights,
        context,
        full_weights,
    })
}
