use super::{conv, BoundModel, NormParams, RtbConfig, RtbParams};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

const NORM_EPS: f64 = 1e-5;

fn norm<T: Scalar>(g: &mut Graph<T>, m: &BoundModel<'_>, p: &NormParams, x: Var) -> Result<Var> {
    g.layer_norm_channels(x, m.vars[p.weight], m.vars[p.bias], T::of(NORM_EPS))
}

/// One residual block; shape-preserving for either variant.
pub fn rtb_forward<T: Scalar>(
    g: &mut Graph<T>,
    m: &BoundModel<'_>,
    p: &RtbParams,
    cfg: &RtbConfig,
    x: Var,
) -> Result<Var> {
    cfg.validate()?;
    match g.shape(x) {
        [_, c, _, _] if *c == cfg.channels => {}
        s => return Err(Error::shape(format!("block expects {} channels, got {s:?}", cfg.channels))),
    }
    match p {
        RtbParams::SimpleResidual { norm: n, conv1, conv2 } => {
            let y = norm(g, m, n, x)?;
            let y = conv(g, m, conv1, y)?;
            let y = g.gelu(y);
            let y = conv(g, m, conv2, y)?;
            g.add(x, y)
        }
        RtbParams::TransposedAttention { norm1, norm2, ffn_gate, ffn_value, ffn_gate_dw, ffn_value_dw, ffn_out, .. } => {
            let y = norm(g, m, norm1, x)?;
            let (attn_out, _) = channel_attention(g, m, p, cfg.heads, y)?;
            let x = g.add(x, attn_out)?;

            let y = norm(g, m, norm2, x)?;
            let gate = conv(g, m, ffn_gate, y)?;
            let gate = conv(g, m, ffn_gate_dw, gate)?;
            let gate = g.gelu(gate);
            let value = conv(g, m, ffn_value, y)?;
            let value = conv(g, m, ffn_value_dw, value)?;
            let y = g.mul(gate, value)?;
            let y = conv(g, m, ffn_out, y)?;
            g.add(x, y)
        }
    }
}

/// Multi-head attention across channels (the attention matrix is
/// `C/heads × C/heads` per head). Returns the projected output and the
/// softmax-normalised attention map of shape `B×heads×d×d`.
pub fn channel_attention<T: Scalar>(
    g: &mut Graph<T>,
    m: &BoundModel<'_>,
    p: &RtbParams,
    heads: usize,
    x: Var,
) -> Result<(Var, Var)> {
    let RtbParams::TransposedAttention { temperature, q, k, v, q_dw, k_dw, v_dw, proj, .. } = p else {
        return Err(Error::shape("channel attention needs a transposed-attention block"));
    };
    let [b, c, h, w] = g.shape(x)[..] else {
        return Err(Error::shape("channel attention expects rank 4"));
    };
    if heads == 0 || c % heads != 0 {
        return Err(Error::shape(format!("{c} channels not divisible by {heads} heads")));
    }
    let split = [b, heads, c / heads, h * w];
    let mut branch = |pw, dw| -> Result<Var> {
        let y = conv(g, m, pw, x)?;
        let y = conv(g, m, dw, y)?;
        g.reshape(y, &split)
    };
    let qv = branch(q, q_dw)?;
    let kv = branch(k, k_dw)?;
    let vv = branch(v, v_dw)?;
    let eps = T::of(1e-12);
    let qn = g.l2_normalize_last(qv, eps)?;
    let kn = g.l2_normalize_last(kv, eps)?;
    let logits = g.bmm(qn, kn, true)?;
    let logits = g.mul(logits, m.vars[*temperature])?;
    let attn = g.softmax_last(logits)?;
    let out = g.bmm(attn, vv, false)?;
    let out = g.reshape(out, &[b, c, h, w])?;
    let out = conv(g, m, proj, out)?;
    Ok((out, attn))
}
