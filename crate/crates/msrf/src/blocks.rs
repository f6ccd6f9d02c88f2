//! Composite layers shared by the network: CLR, squeeze-and-excitation,
//! residual block, gated convolution, and the attention gate.
//!
//! Each block reads its weights from a [`ParamStore`] namespace and exposes
//! a `*_specs` companion that declares exactly the tensors the forward pass
//! will fetch.

use crate::error::{Error, Result};
use crate::kernels::conv::Pad;
use crate::params::{conv_spec, convt_spec, dense_spec, ParamSpec, ParamStore};
use crate::tape::{Tape, Var};

/// 3x3 convolution (stride 1, same padding) followed by LeakyReLU.
pub fn clr(tape: &mut Tape, params: &ParamStore, prefix: &str, x: Var, slope: f64) -> Result<Var> {
    let w = tape.param(params, &format!("{prefix}.w"))?;
    let b = tape.param(params, &format!("{prefix}.b"))?;
    let y = tape.conv2d(x, w, b, 1, Pad::Same)?;
    Ok(tape.leaky_relu(y, slope))
}

pub fn clr_specs(prefix: &str, cout: usize, cin: usize) -> Vec<ParamSpec> {
    conv_spec(prefix, cout, cin, 3).to_vec()
}

/// Squeeze-and-excitation: global average pool, two dense layers with a
/// bottleneck of `channels / reduction`, sigmoid scales applied per channel.
/// Returns `(scaled_x, scales)`.
pub fn se_block(
    tape: &mut Tape,
    params: &ParamStore,
    prefix: &str,
    x: Var,
    reduction: usize,
) -> Result<(Var, Var)> {
    let (_, c, _, _) = tape.value(x).dims4()?;
    if reduction == 0 || c % reduction != 0 {
        return Err(Error::config(format!(
            "se_block: {} channels not divisible by reduction {}",
            c, reduction
        )));
    }
    let squeezed = tape.global_avg_pool(x)?;
    let w1 = tape.param(params, &format!("{prefix}.fc1.w"))?;
    let b1 = tape.param(params, &format!("{prefix}.fc1.b"))?;
    let hidden = tape.dense(squeezed, w1, b1)?;
    let hidden = tape.relu(hidden);
    let w2 = tape.param(params, &format!("{prefix}.fc2.w"))?;
    let b2 = tape.param(params, &format!("{prefix}.fc2.b"))?;
    let excite = tape.dense(hidden, w2, b2)?;
    let scales = tape.sigmoid(excite);
    let out = tape.scale_channels(x, scales)?;
    Ok((out, scales))
}

pub fn se_specs(prefix: &str, channels: usize, reduction: usize) -> Vec<ParamSpec> {
    let hidden = channels / reduction;
    let mut specs = dense_spec(&format!("{prefix}.fc1"), hidden, channels).to_vec();
    specs.extend(dense_spec(&format!("{prefix}.fc2"), channels, hidden));
    specs
}

/// `x + CLR(CLR(x))`, channel preserving.
pub fn residual_block(
    tape: &mut Tape,
    params: &ParamStore,
    prefix: &str,
    x: Var,
    slope: f64,
) -> Result<Var> {
    let h = clr(tape, params, &format!("{prefix}.conv1"), x, slope)?;
    let h = clr(tape, params, &format!("{prefix}.conv2"), h, slope)?;
    tape.add(x, h)
}

pub fn residual_specs(prefix: &str, channels: usize) -> Vec<ParamSpec> {
    let mut specs = clr_specs(&format!("{prefix}.conv1"), channels, channels);
    specs.extend(clr_specs(&format!("{prefix}.conv2"), channels, channels));
    specs
}

/// Shape-stream gate: `alpha = sigmoid(conv1x1(S ⊕ X))`, then
/// `S' = residual_block(S ⊗ alpha)`. The caller must resize `X` to `S`'s
/// spatial dims beforehand. Returns `(S_next, alpha)`.
pub fn gated_conv(
    tape: &mut Tape,
    params: &ParamStore,
    prefix: &str,
    s: Var,
    x: Var,
    slope: f64,
) -> Result<(Var, Var)> {
    let (sn, _, sh, sw) = tape.value(s).dims4()?;
    let (xn, _, xh, xw) = tape.value(x).dims4()?;
    if sn != xn || sh != xh || sw != xw {
        return Err(Error::usage(format!(
            "gated_conv: gating features {:?} not resized to stream dims {:?}",
            tape.value(x).shape,
            tape.value(s).shape
        )));
    }
    let cat = tape.concat(&[s, x])?;
    let w = tape.param(params, &format!("{prefix}.gate.w"))?;
    let b = tape.param(params, &format!("{prefix}.gate.b"))?;
    let pre = tape.conv2d(cat, w, b, 1, Pad::Same)?;
    let alpha = tape.sigmoid(pre);
    let gated = tape.mul_spatial1(s, alpha)?;
    let next = residual_block(tape, params, &format!("{prefix}.rb"), gated, slope)?;
    Ok((next, alpha))
}

pub fn gated_conv_specs(prefix: &str, stream_ch: usize, gating_ch: usize) -> Vec<ParamSpec> {
    let mut specs = conv_spec(&format!("{prefix}.gate"), 1, stream_ch + gating_ch, 1).to_vec();
    specs.extend(residual_specs(&format!("{prefix}.rb"), stream_ch));
    specs
}

/// Attention gate over a skip tensor `x` and the previous decoder output
/// `d_minus` at half resolution: stride-2 1x1 conv on `x`, 1x1 conv on
/// `d_minus`, combined through a 1x1 conv to one channel, sigmoid, then a
/// learnable stride-2 transposed conv back to `x`'s resolution.
pub fn attention_gate(
    tape: &mut Tape,
    params: &ParamStore,
    prefix: &str,
    x: Var,
    d_minus: Var,
) -> Result<Var> {
    let (xn, _, xh, xw) = tape.value(x).dims4()?;
    let (dn, _, dh, dw) = tape.value(d_minus).dims4()?;
    if xn != dn || xh != dh * 2 || xw != dw * 2 {
        return Err(Error::shape(format!(
            "attention_gate: skip {:?} must be exactly 2x the decoder {:?}",
            tape.value(x).shape,
            tape.value(d_minus).shape
        )));
    }
    let tw = tape.param(params, &format!("{prefix}.theta.w"))?;
    let tb = tape.param(params, &format!("{prefix}.theta.b"))?;
    let theta = tape.conv2d(x, tw, tb, 2, Pad::Same)?;
    let pw = tape.param(params, &format!("{prefix}.phi.w"))?;
    let pb = tape.param(params, &format!("{prefix}.phi.b"))?;
    let phi = tape.conv2d(d_minus, pw, pb, 1, Pad::Same)?;
    let mixed = tape.add(theta, phi)?;
    let qw = tape.param(params, &format!("{prefix}.psi.w"))?;
    let qb = tape.param(params, &format!("{prefix}.psi.b"))?;
    let pre = tape.conv2d(mixed, qw, qb, 1, Pad::Same)?;
    let act = tape.sigmoid(pre);
    let ow = tape.param(params, &format!("{prefix}.omega.w"))?;
    let ob = tape.param(params, &format!("{prefix}.omega.b"))?;
    tape.conv_transpose2d(act, ow, ob, 2)
}

/// Intermediate channel count `G` is the previous decoder's channel count.
pub fn attention_gate_specs(prefix: &str, skip_ch: usize, dec_ch: usize) -> Vec<ParamSpec> {
    let g = dec_ch;
    let mut specs = conv_spec(&format!("{prefix}.theta"), g, skip_ch, 1).to_vec();
    specs.extend(conv_spec(&format!("{prefix}.phi"), g, dec_ch, 1));
    specs.extend(conv_spec(&format!("{prefix}.psi"), 1, g, 1));
    specs.extend(convt_spec(&format!("{prefix}.omega"), 1, 1, 3));
    specs
}
