//! Unidirectional GRU cells and sequence encoders. The query and
//! document encoders are two instances of the same cell with disjoint
//! parameter sets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::params::{BoundParams, ParamSet};
use crate::tensor::{NodeId, Tape, Tensor, TensorError};

/// Bound GRU parameter nodes on one tape.
#[derive(Clone, Copy)]
pub struct GruNodes {
    pub w_z: NodeId,
    pub u_z: NodeId,
    pub b_z: NodeId,
    pub w_r: NodeId,
    pub u_r: NodeId,
    pub b_r: NodeId,
    pub w_h: NodeId,
    pub u_h: NodeId,
    pub b_h: NodeId,
}

const GATES: [&str; 3] = ["z", "r", "h"];

/// Register the six matrices and three biases of one GRU under `prefix`.
/// Matrices init uniform(-1/sqrt(hidden), 1/sqrt(hidden)), biases zero.
pub fn register_gru(
    params: &mut ParamSet,
    prefix: &str,
    hidden: usize,
    input: usize,
    seed: u64,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (hidden as f64).sqrt();
    for gate in GATES {
        let w: Vec<f64> = (0..hidden * input)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let u: Vec<f64> = (0..hidden * hidden)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        params.insert(&format!("{prefix}.w_{gate}"), Tensor::matrix(hidden, input, w));
        params.insert(&format!("{prefix}.u_{gate}"), Tensor::matrix(hidden, hidden, u));
        params.insert(&format!("{prefix}.b_{gate}"), Tensor::vector(vec![0.0; hidden]));
    }
}

pub fn bind_gru(bound: &BoundParams, prefix: &str) -> GruNodes {
    let n = |s: String| bound.node(&s);
    GruNodes {
        w_z: n(format!("{prefix}.w_z")),
        u_z: n(format!("{prefix}.u_z")),
        b_z: n(format!("{prefix}.b_z")),
        w_r: n(format!("{prefix}.w_r")),
        u_r: n(format!("{prefix}.u_r")),
        b_r: n(format!("{prefix}.b_r")),
        w_h: n(format!("{prefix}.w_h")),
        u_h: n(format!("{prefix}.u_h")),
        b_h: n(format!("{prefix}.b_h")),
    }
}

/// One GRU step:
/// z = sigma(W_z x + U_z h + b_z), r = sigma(W_r x + U_r h + b_r),
/// hhat = tanh(W_h x + U_h (r . h) + b_h), h' = (1-z) . h + z . hhat.
pub fn gru_step(
    tape: &mut Tape,
    p: &GruNodes,
    h_prev: NodeId,
    x: NodeId,
) -> Result<NodeId, TensorError> {
    let gate = |tape: &mut Tape, w, u, b, h| -> Result<NodeId, TensorError> {
        let wx = tape.matvec(w, x)?;
        let uh = tape.matvec(u, h)?;
        let s = tape.add(wx, uh)?;
        tape.add(s, b)
    };
    let z_pre = gate(tape, p.w_z, p.u_z, p.b_z, h_prev)?;
    let z = tape.sigmoid(z_pre);
    let r_pre = gate(tape, p.w_r, p.u_r, p.b_r, h_prev)?;
    let r = tape.sigmoid(r_pre);
    let rh = tape.mul(r, h_prev)?;
    let cand_pre = gate(tape, p.w_h, p.u_h, p.b_h, rh)?;
    let cand = tape.tanh(cand_pre);
    let one_minus_z = tape.affine(z, -1.0, 1.0);
    let keep = tape.mul(one_minus_z, h_prev)?;
    let new = tape.mul(z, cand)?;
    tape.add(keep, new)
}

/// Run the GRU left to right from a zero initial state.
pub fn encode(
    tape: &mut Tape,
    p: &GruNodes,
    inputs: &[NodeId],
    hidden: usize,
) -> Result<Vec<NodeId>, TensorError> {
    if inputs.is_empty() {
        return Err(TensorError::EmptyInput { op: "encode" });
    }
    let mut h = tape.zeros(vec![hidden]);
    let mut states = Vec::with_capacity(inputs.len());
    for &x in inputs {
        h = gru_step(tape, p, h, x)?;
        states.push(h);
    }
    Ok(states)
}
