//! Additive attention gates for skip connections.
//!
//! A gate scores every spatial position of a skip feature map against a
//! coarser gating signal from one level below:
//!
//!   q     = psi . relu(Wx x + Wg g + b_g) + b_psi
//!   alpha = sigmoid(q)                       in (0, 1)
//!   gated = x * alpha                        (alpha broadcast over channels)
//!
//! All linear maps are pointwise (1x1) convolutions. The gating signal is
//! bilinearly upsampled to the skip resolution first when it arrives at half
//! size.

use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;
use rand::Rng;

/// Parameter bundle of one gate. `b_g` is a per-channel bias and `b_psi` a
/// scalar, both broadcast over space.
#[derive(Debug, Clone)]
pub struct AttentionGateParams {
    pub w_x: Tensor,
    pub w_g: Tensor,
    pub b_g: Tensor,
    pub psi: Tensor,
    pub b_psi: Tensor,
}

impl AttentionGateParams {
    pub fn init(c_x: usize, c_g: usize, c_int: usize, rng: &mut impl Rng) -> Self {
        AttentionGateParams {
            w_x: Tensor::uniform(&[c_int, c_x], 1.0 / (c_x as f64).sqrt(), rng),
            w_g: Tensor::uniform(&[c_int, c_g], 1.0 / (c_g as f64).sqrt(), rng),
            b_g: Tensor::zeros(&[c_int]),
            psi: Tensor::uniform(&[1, c_int], 1.0 / (c_int as f64).sqrt(), rng),
            b_psi: Tensor::zeros(&[1]),
        }
    }
}

/// Intermediate width of a gate: half the skip channels, at least one.
pub fn intermediate_channels(c_skip: usize) -> usize {
    (c_skip / 2).max(1)
}

pub fn register_attention_gate(
    store: &mut ParamStore,
    prefix: &str,
    c_x: usize,
    c_g: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let p = AttentionGateParams::init(c_x, c_g, intermediate_channels(c_x), rng);
    store.insert(&format!("{prefix}.w_x"), p.w_x)?;
    store.insert(&format!("{prefix}.w_g"), p.w_g)?;
    store.insert(&format!("{prefix}.b_g"), p.b_g)?;
    store.insert(&format!("{prefix}.psi"), p.psi)?;
    store.insert(&format!("{prefix}.b_psi"), p.b_psi)?;
    Ok(())
}

/// Gated skip features and the attention map that produced them.
pub struct GateOutput {
    pub gated: Var,
    pub alpha: Var,
}

/// Apply a gate on the tape. `x: [B,Cx,H,W]`; `gate` must already share the
/// spatial size (callers upsample coarser signals first).
pub fn attention_gate_vars(
    tape: &mut GradTape,
    x: Var,
    gate: Var,
    w_x: Var,
    w_g: Var,
    b_g: Var,
    psi: Var,
    b_psi: Var,
) -> Result<GateOutput> {
    let xs = tape.value(x).shape().to_vec();
    let gs = tape.value(gate).shape().to_vec();
    if xs.len() != 4 || gs.len() != 4 {
        return Err(Error::shape("attention gate expects [B,C,H,W] inputs"));
    }
    if xs[0] != gs[0] || xs[2] != gs[2] || xs[3] != gs[3] {
        return Err(Error::shape(format!(
            "attention gate: skip {:?} and gating signal {:?} disagree",
            xs, gs
        )));
    }
    let xt = tape.conv1x1(x, w_x, None)?;
    let gt = tape.conv1x1(gate, w_g, Some(b_g))?;
    let pre = tape.add(xt, gt)?;
    let act = tape.relu(pre);
    let q = tape.conv1x1(act, psi, Some(b_psi))?;
    let alpha = tape.sigmoid(q);
    let gated = tape.mul_bcast_channel(x, alpha)?;
    Ok(GateOutput { gated, alpha })
}

/// Store-backed variant used by the network: loads the five parameter
/// tensors registered under `prefix` and upsamples the gating signal when it
/// arrives at half resolution.
pub fn attention_gate_forward(
    tape: &mut GradTape,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    gate: Var,
) -> Result<GateOutput> {
    let (h, w) = {
        let s = tape.value(x).shape();
        (s[2], s[3])
    };
    let gshape = tape.value(gate).shape().to_vec();
    let gate = if gshape[2] == h && gshape[3] == w {
        gate
    } else if gshape[2] * 2 == h && gshape[3] * 2 == w {
        tape.bilinear_up2x(gate)?
    } else {
        return Err(Error::shape(format!(
            "attention gate {prefix}: gating signal {}x{} cannot reach {}x{}",
            gshape[2], gshape[3], h, w
        )));
    };
    let w_x = tape.param(store, &format!("{prefix}.w_x"))?;
    let w_g = tape.param(store, &format!("{prefix}.w_g"))?;
    let b_g = tape.param(store, &format!("{prefix}.b_g"))?;
    let psi = tape.param(store, &format!("{prefix}.psi"))?;
    let b_psi = tape.param(store, &format!("{prefix}.b_psi"))?;
    attention_gate_vars(tape, x, gate, w_x, w_g, b_g, psi, b_psi)
}

/// Pure evaluation with explicit parameters; returns (gated, alpha) values.
pub fn attention_gate(
    x: &Tensor,
    gate: &Tensor,
    params: &AttentionGateParams,
) -> Result<(Tensor, Tensor)> {
    let mut tape = GradTape::new();
    let xv = tape.constant(x.clone());
    let gv = tape.constant(gate.clone());
    let gv = if gate.shape()[2] != x.shape()[2] || gate.shape()[3] != x.shape()[3] {
        tape.bilinear_up2x(gv)?
    } else {
        gv
    };
    let w_x = tape.constant(params.w_x.clone());
    let w_g = tape.constant(params.w_g.clone());
    let b_g = tape.constant(params.b_g.clone());
    let psi = tape.constant(params.psi.clone());
    let b_psi = tape.constant(params.b_psi.clone());
    let out = attention_gate_vars(&mut tape, xv, gv, w_x, w_g, b_g, psi, b_psi)?;
    Ok((tape.value(out.gated).clone(), tape.value(out.alpha).clone()))
}

/// Concatenate gated skip features (first) with the upsampled decoder
/// features (second) along the channel axis.
pub fn fuse_skip(gated: &Tensor, upsampled: &Tensor) -> Result<Tensor> {
    let mut tape = GradTape::new();
    let a = tape.constant(gated.clone());
    let b = tape.constant(upsampled.clone());
    let out = tape.concat_channels(a, b)?;
    Ok(tape.value(out).clone())
}
