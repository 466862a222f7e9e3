//! Diversity mechanisms over decoder context vectors. Each mode
//! transforms the raw document context d_t into a diversity-enforced
//! d'_t carried to the decoder:
//!
//! - D1: subtract the projection onto the previous diverse context.
//! - SD1: same, scaled by a learned elementwise gate.
//! - D2: run contexts through an LSTM whose cell state is
//!   orthogonalized against its predecessor before producing output.
//! - SD2: D2 with a sigmoid gate on the subtracted projection.
//! - B1: the plain LSTM ablation (no orthogonalization).
//! - M1: subtract an accumulated context history inside a tanh.
//! - M2: M1 plus attention energies penalized by accumulated attention
//!   weights (handled where attention is computed; see `m2_attention`).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::params::{BoundParams, ParamSet};
use crate::tensor::{NodeId, Tape, Tensor, TensorError, PROJECTION_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DiversityMode {
    None,
    D1,
    Sd1,
    D2,
    Sd2,
    B1,
    M1,
    M2,
}

impl DiversityMode {
    pub const ALL: [DiversityMode; 8] = [
        DiversityMode::None,
        DiversityMode::D1,
        DiversityMode::Sd1,
        DiversityMode::D2,
        DiversityMode::Sd2,
        DiversityMode::B1,
        DiversityMode::M1,
        DiversityMode::M2,
    ];

    pub fn uses_lstm(&self) -> bool {
        matches!(self, DiversityMode::D2 | DiversityMode::Sd2 | DiversityMode::B1)
    }
}

impl fmt::Display for DiversityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DiversityMode::None => "NONE",
            DiversityMode::D1 => "D1",
            DiversityMode::Sd1 => "SD1",
            DiversityMode::D2 => "D2",
            DiversityMode::Sd2 => "SD2",
            DiversityMode::B1 => "B1",
            DiversityMode::M1 => "M1",
            DiversityMode::M2 => "M2",
        };
        f.write_str(s)
    }
}

impl FromStr for DiversityMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "NONE" => Ok(DiversityMode::None),
            "D1" => Ok(DiversityMode::D1),
            "SD1" => Ok(DiversityMode::Sd1),
            "D2" => Ok(DiversityMode::D2),
            "SD2" => Ok(DiversityMode::Sd2),
            "B1" => Ok(DiversityMode::B1),
            "M1" => Ok(DiversityMode::M1),
            "M2" => Ok(DiversityMode::M2),
            other => Err(format!("unknown diversity mode `{other}`")),
        }
    }
}

/// Behavior switches for ablations.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct DiversitySwitches {
    /// Squash the SD1 gate through a sigmoid (the printed form is an
    /// unsquashed affine gate).
    pub sd1_sigmoid_gate: bool,
    /// Carry the raw cell c_t instead of c_t^diverse as D2/SD2 history.
    pub carry_raw_cell: bool,
}

impl Default for DiversitySwitches {
    fn default() -> Self {
        DiversitySwitches {
            sd1_sigmoid_gate: false,
            carry_raw_cell: false,
        }
    }
}

/// Recurrent state carried across decoder steps. Only the fields the
/// active mode needs are populated; everything starts at zero at t=1.
#[derive(Default)]
pub struct DiversityState {
    /// d'_{t-1} (D1/SD1).
    pub prev_context: Option<NodeId>,
    /// Raw d_{t-1}, feeds the SD1 gate.
    pub prev_raw_context: Option<NodeId>,
    /// LSTM cell history (D2/SD2/B1).
    pub cell: Option<NodeId>,
    /// LSTM hidden history (D2/SD2/B1).
    pub hidden: Option<NodeId>,
    /// sum over j<t of d'_j (M1/M2).
    pub context_sum: Option<NodeId>,
    /// sum over j<t of alpha'_j (M2), over document positions.
    pub attention_sum: Option<NodeId>,
}

/// Bound diversity parameter nodes for the active mode.
pub struct DiversityNodes {
    pub gate_w: Option<NodeId>,
    pub gate_u: Option<NodeId>,
    pub gate_b: Option<NodeId>,
    pub lstm: Option<LstmNodes>,
    pub m1_w: Option<NodeId>,
    pub m1_u: Option<NodeId>,
    pub m2_w_a: Option<NodeId>,
    pub m2_u_a: Option<NodeId>,
    pub m2_b_a: Option<NodeId>,
    pub m2_v_a: Option<NodeId>,
}

#[derive(Clone, Copy)]
pub struct LstmNodes {
    pub w_i: NodeId,
    pub u_i: NodeId,
    pub b_i: NodeId,
    pub w_f: NodeId,
    pub u_f: NodeId,
    pub b_f: NodeId,
    pub w_o: NodeId,
    pub u_o: NodeId,
    pub b_o: NodeId,
    pub w_c: NodeId,
    pub u_c: NodeId,
    pub b_c: NodeId,
}

/// Register parameters for `mode`. `ctx_dim` is l4 (= l5: the LSTM
/// hidden size equals the context size so d'_t substitutes for d_t),
/// `dec_dim` is the decoder hidden size l1 (M2 only).
pub fn register_diversity(
    params: &mut ParamSet,
    mode: DiversityMode,
    ctx_dim: usize,
    dec_dim: usize,
    seed: u64,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (ctx_dim as f64).sqrt();
    let mat = |rng: &mut ChaCha8Rng, rows: usize, cols: usize, b: f64| -> Tensor {
        let data = (0..rows * cols).map(|_| rng.gen_range(-b..b)).collect();
        Tensor::matrix(rows, cols, data)
    };
    let vecp = |rng: &mut ChaCha8Rng, n: usize, b: f64| -> Tensor {
        Tensor::vector((0..n).map(|_| rng.gen_range(-b..b)).collect())
    };
    match mode {
        DiversityMode::None | DiversityMode::D1 => {}
        DiversityMode::Sd1 => {
            let w = mat(&mut rng, ctx_dim, ctx_dim, bound);
            params.insert("div.gate_w", w);
            params.insert("div.gate_b", Tensor::vector(vec![0.0; ctx_dim]));
        }
        DiversityMode::D2 | DiversityMode::B1 | DiversityMode::Sd2 => {
            for gate in ["i", "f", "o", "c"] {
                let w = mat(&mut rng, ctx_dim, ctx_dim, bound);
                let u = mat(&mut rng, ctx_dim, ctx_dim, bound);
                params.insert(&format!("div.w_{gate}"), w);
                params.insert(&format!("div.u_{gate}"), u);
                params.insert(&format!("div.b_{gate}"), Tensor::vector(vec![0.0; ctx_dim]));
            }
            if mode == DiversityMode::Sd2 {
                let w = mat(&mut rng, ctx_dim, ctx_dim, bound);
                let u = mat(&mut rng, ctx_dim, ctx_dim, bound);
                params.insert("div.gate_w", w);
                params.insert("div.gate_u", u);
                params.insert("div.gate_b", Tensor::vector(vec![0.0; ctx_dim]));
            }
        }
        DiversityMode::M1 => {
            // diagonal matrices stored as vectors
            let w = vecp(&mut rng, ctx_dim, bound);
            let u = vecp(&mut rng, ctx_dim, bound);
            params.insert("div.m1_w", w);
            params.insert("div.m1_u", u);
        }
        DiversityMode::M2 => {
            let db = 1.0 / (dec_dim as f64).sqrt();
            let w_a = mat(&mut rng, dec_dim, dec_dim, db);
            let u_a = mat(&mut rng, dec_dim, ctx_dim, db);
            let v_a = vecp(&mut rng, dec_dim, db);
            params.insert("div.m2_w_a", w_a);
            params.insert("div.m2_u_a", u_a);
            params.insert("div.m2_b_a", Tensor::vector(vec![0.0; dec_dim]));
            params.insert("div.m2_v_a", v_a);
            // M2 also applies the M1 context transform on its recomputed context
            let w = vecp(&mut rng, ctx_dim, bound);
            let u = vecp(&mut rng, ctx_dim, bound);
            params.insert("div.m1_w", w);
            params.insert("div.m1_u", u);
        }
    }
}

pub fn bind_diversity(bound: &BoundParams, mode: DiversityMode) -> DiversityNodes {
    let n = |name: &str| bound.try_node(name);
    let lstm = if mode.uses_lstm() {
        Some(LstmNodes {
            w_i: bound.node("div.w_i"),
            u_i: bound.node("div.u_i"),
            b_i: bound.node("div.b_i"),
            w_f: bound.node("div.w_f"),
            u_f: bound.node("div.u_f"),
            b_f: bound.node("div.b_f"),
            w_o: bound.node("div.w_o"),
            u_o: bound.node("div.u_o"),
            b_o: bound.node("div.b_o"),
            w_c: bound.node("div.w_c"),
            u_c: bound.node("div.u_c"),
            b_c: bound.node("div.b_c"),
        })
    } else {
        None
    };
    DiversityNodes {
        gate_w: n("div.gate_w"),
        gate_u: n("div.gate_u"),
        gate_b: n("div.gate_b"),
        lstm,
        m1_w: n("div.m1_w"),
        m1_u: n("div.m1_u"),
        m2_w_a: n("div.m2_w_a"),
        m2_u_a: n("div.m2_u_a"),
        m2_b_a: n("div.m2_b_a"),
        m2_v_a: n("div.m2_v_a"),
    }
}

/// d'_t = d_t minus its projection onto d'_{t-1}. At t=1 the zero
/// history trips the epsilon guard and d'_1 = d_1.
pub fn d1_step(
    tape: &mut Tape,
    d_t: NodeId,
    state: &mut DiversityState,
) -> Result<NodeId, TensorError> {
    let out = match state.prev_context {
        Some(prev) => tape.project_out(d_t, prev, None)?,
        None => d_t,
    };
    state.prev_context = Some(out);
    Ok(out)
}

/// Gated projection: gamma_t = W_g d_{t-1} + b_g (optionally squashed),
/// d'_t = d_t - gamma_t . proj(d_t onto d'_{t-1}).
pub fn sd1_step(
    tape: &mut Tape,
    nodes: &DiversityNodes,
    switches: &DiversitySwitches,
    d_t: NodeId,
    state: &mut DiversityState,
) -> Result<NodeId, TensorError> {
    let out = match (state.prev_context, state.prev_raw_context) {
        (Some(prev), Some(prev_raw)) => {
            let wd = tape.matvec(nodes.gate_w.unwrap(), prev_raw)?;
            let mut gamma = tape.add(wd, nodes.gate_b.unwrap())?;
            if switches.sd1_sigmoid_gate {
                gamma = tape.sigmoid(gamma);
            }
            tape.project_out(d_t, prev, Some(gamma))?
        }
        _ => d_t,
    };
    state.prev_context = Some(out);
    state.prev_raw_context = Some(d_t);
    Ok(out)
}

struct LstmOut {
    cell_raw: NodeId,
    out_gate: NodeId,
}

fn lstm_gates(
    tape: &mut Tape,
    l: &LstmNodes,
    d_t: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
) -> Result<LstmOut, TensorError> {
    let pre = |tape: &mut Tape, w, u, b| -> Result<NodeId, TensorError> {
        let wd = tape.matvec(w, d_t)?;
        let uh = tape.matvec(u, h_prev)?;
        let s = tape.add(wd, uh)?;
        tape.add(s, b)
    };
    let i_pre = pre(tape, l.w_i, l.u_i, l.b_i)?;
    let i = tape.sigmoid(i_pre);
    let f_pre = pre(tape, l.w_f, l.u_f, l.b_f)?;
    let f = tape.sigmoid(f_pre);
    let o_pre = pre(tape, l.w_o, l.u_o, l.b_o)?;
    let o = tape.sigmoid(o_pre);
    let c_pre = pre(tape, l.w_c, l.u_c, l.b_c)?;
    let chat = tape.tanh(c_pre);
    let ic = tape.mul(i, chat)?;
    let fc = tape.mul(f, c_prev)?;
    let cell_raw = tape.add(ic, fc)?;
    Ok(LstmOut { cell_raw, out_gate: o })
}

fn lstm_history(
    tape: &mut Tape,
    ctx_dim: usize,
    state: &DiversityState,
) -> (NodeId, NodeId) {
    let c = state.cell.unwrap_or_else(|| tape.zeros(vec![ctx_dim]));
    let h = state.hidden.unwrap_or_else(|| tape.zeros(vec![ctx_dim]));
    (c, h)
}

/// Diversity LSTM: the new cell state is orthogonalized against the
/// previous one before the output gate sees it.
pub fn d2_cell_step(
    tape: &mut Tape,
    nodes: &DiversityNodes,
    switches: &DiversitySwitches,
    d_t: NodeId,
    state: &mut DiversityState,
) -> Result<NodeId, TensorError> {
    let ctx_dim = tape.value(d_t).numel();
    let (c_prev, h_prev) = lstm_history(tape, ctx_dim, state);
    let l = nodes.lstm.as_ref().unwrap();
    let LstmOut { cell_raw, out_gate } = lstm_gates(tape, l, d_t, h_prev, c_prev)?;
    let c_diverse = tape.project_out(cell_raw, c_prev, None)?;
    let tc = tape.tanh(c_diverse);
    let h = tape.mul(out_gate, tc)?;
    state.cell = Some(if switches.carry_raw_cell { cell_raw } else { c_diverse });
    state.hidden = Some(h);
    Ok(h)
}

/// SD2: gated relaxation of the D2 orthogonality,
/// g_t = sigma(W_g d_t + U_g h_{t-1} + b_g),
/// c^diverse = c_t - g_t . (c_t.c_{t-1} / c_{t-1}.c_{t-1}) c_{t-1}.
pub fn sd2_cell_step(
    tape: &mut Tape,
    nodes: &DiversityNodes,
    switches: &DiversitySwitches,
    d_t: NodeId,
    state: &mut DiversityState,
) -> Result<NodeId, TensorError> {
    let ctx_dim = tape.value(d_t).numel();
    let (c_prev, h_prev) = lstm_history(tape, ctx_dim, state);
    let l = nodes.lstm.as_ref().unwrap();
    let LstmOut { cell_raw, out_gate } = lstm_gates(tape, l, d_t, h_prev, c_prev)?;
    let wd = tape.matvec(nodes.gate_w.unwrap(), d_t)?;
    let uh = tape.matvec(nodes.gate_u.unwrap(), h_prev)?;
    let s = tape.add(wd, uh)?;
    let g_pre = tape.add(s, nodes.gate_b.unwrap())?;
    let g = tape.sigmoid(g_pre);
    let c_diverse = tape.project_out(cell_raw, c_prev, Some(g))?;
    let tc = tape.tanh(c_diverse);
    let h = tape.mul(out_gate, tc)?;
    state.cell = Some(if switches.carry_raw_cell { cell_raw } else { c_diverse });
    state.hidden = Some(h);
    Ok(h)
}

/// B1 ablation: plain LSTM over contexts, c^diverse = c_t.
pub fn b1_cell_step(
    tape: &mut Tape,
    nodes: &DiversityNodes,
    d_t: NodeId,
    state: &mut DiversityState,
) -> Result<NodeId, TensorError> {
    let ctx_dim = tape.value(d_t).numel();
    let (c_prev, h_prev) = lstm_history(tape, ctx_dim, state);
    let l = nodes.lstm.as_ref().unwrap();
    let LstmOut { cell_raw, out_gate } = lstm_gates(tape, l, d_t, h_prev, c_prev)?;
    let tc = tape.tanh(cell_raw);
    let h = tape.mul(out_gate, tc)?;
    state.cell = Some(cell_raw);
    state.hidden = Some(h);
    Ok(h)
}

/// Distraction baseline: d'_t = tanh(W_c d_t - U_c sum_{j<t} d'_j)
/// with diagonal W_c, U_c.
pub fn m1_step(
    tape: &mut Tape,
    nodes: &DiversityNodes,
    d_t: NodeId,
    state: &mut DiversityState,
) -> Result<NodeId, TensorError> {
    let ctx_dim = tape.value(d_t).numel();
    let sum = state
        .context_sum
        .unwrap_or_else(|| tape.zeros(vec![ctx_dim]));
    let wd = tape.mul(nodes.m1_w.unwrap(), d_t)?;
    let us = tape.mul(nodes.m1_u.unwrap(), sum)?;
    let pre = tape.sub(wd, us)?;
    let out = tape.tanh(pre);
    state.context_sum = Some(tape.add(sum, out)?);
    Ok(out)
}

/// M2 attention: energies carry a penalty proportional to the
/// accumulated attention mass at each position,
/// a_i = v_a^T tanh(W_a s_t + U_a h_i - b_a * sum_{j<t} alpha'_{j,i}),
/// then the recomputed context goes through the M1 transform.
/// Returns (weights, d'_t).
pub fn m2_attention(
    tape: &mut Tape,
    nodes: &DiversityNodes,
    s_t: NodeId,
    doc_states: &[NodeId],
    valid: usize,
    state: &mut DiversityState,
) -> Result<(NodeId, NodeId), TensorError> {
    let valid = valid.min(doc_states.len());
    if valid == 0 {
        return Err(TensorError::EmptyInput { op: "m2_attention" });
    }
    let attn_sum = state
        .attention_sum
        .unwrap_or_else(|| tape.zeros(vec![valid]));
    let ws = tape.matvec(nodes.m2_w_a.unwrap(), s_t)?;
    let mut energies = Vec::with_capacity(valid);
    for (i, &h) in doc_states[..valid].iter().enumerate() {
        let uh = tape.matvec(nodes.m2_u_a.unwrap(), h)?;
        let base = tape.add(ws, uh)?;
        let hist_i = tape.pick(attn_sum, i)?;
        let penalty = tape.scalar_mul(nodes.m2_b_a.unwrap(), hist_i)?;
        let pre = tape.sub(base, penalty)?;
        let th = tape.tanh(pre);
        energies.push(tape.dot(nodes.m2_v_a.unwrap(), th)?);
    }
    let stacked = tape.stack(&energies)?;
    let weights = tape.softmax(stacked)?;
    let context = tape.weighted_sum(weights, &doc_states[..valid])?;
    let out = m1_step(tape, nodes, context, state)?;
    state.attention_sum = Some(tape.add(attn_sum, weights)?);
    Ok((weights, out))
}

/// Dispatch for the modes that transform an already-computed context.
/// M2 is handled at attention time instead.
pub fn apply_context_transform(
    tape: &mut Tape,
    mode: DiversityMode,
    nodes: &DiversityNodes,
    switches: &DiversitySwitches,
    d_t: NodeId,
    state: &mut DiversityState,
) -> Result<NodeId, TensorError> {
    match mode {
        DiversityMode::None | DiversityMode::M2 => Ok(d_t),
        DiversityMode::D1 => d1_step(tape, d_t, state),
        DiversityMode::Sd1 => sd1_step(tape, nodes, switches, d_t, state),
        DiversityMode::D2 => d2_cell_step(tape, nodes, switches, d_t, state),
        DiversityMode::Sd2 => sd2_cell_step(tape, nodes, switches, d_t, state),
        DiversityMode::B1 => b1_cell_step(tape, nodes, d_t, state),
        DiversityMode::M1 => m1_step(tape, nodes, d_t, state),
    }
}

/// |<a, b>| <= tol * ||a|| * ||b||, the orthogonality certificate.
pub fn relative_inner_product(a: &[f64], b: &[f64]) -> f64 {
    let ip: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na * nb <= PROJECTION_EPS {
        0.0
    } else {
        ip.abs() / (na * nb)
    }
}
