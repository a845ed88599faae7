use crate::error::Result;
use crate::model::ParamVars;
use crate::numerics::{Scalar, Tape, Var};

/// Multi-head self-attention over `[N, T, D]`.
fn self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    prefix: &str,
    x: Var,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (n, t, d) = (shape[0], shape[1], shape[2]);
    let dh = d / heads;
    let qkv = tape.linear(x, p.get(&format!("{prefix}.qkv.w"))?, p.get(&format!("{prefix}.qkv.b"))?)?;
    let qkv = tape.reshape(qkv, &[n, t, 3, heads, dh])?;
    // [3, N, H, T, dh]
    let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
    let qkv = tape.reshape(qkv, &[3, n * heads, t, dh])?;
    let q = tape.slice_axis(qkv, 0, 0, 1)?;
    let k = tape.slice_axis(qkv, 0, 1, 1)?;
    let v = tape.slice_axis(qkv, 0, 2, 1)?;
    let q = tape.reshape(q, &[n * heads, t, dh])?;
    let k = tape.reshape(k, &[n * heads, t, dh])?;
    let v = tape.reshape(v, &[n * heads, t, dh])?;
    let scores = tape.bmm(q, k, true)?;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let attn = tape.softmax(scores, scale, causal)?;
    let ctx = tape.bmm(attn, v, false)?;
    let ctx = tape.reshape(ctx, &[n, heads, t, dh])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[n, t, d])?;
    tape.linear(ctx, p.get(&format!("{prefix}.proj.w"))?, p.get(&format!("{prefix}.proj.b"))?)
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
pub fn transformer_block<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    prefix: &str,
    x: Var,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let h = tape.layer_norm(x, p.get(&format!("{prefix}.ln1.g"))?, p.get(&format!("{prefix}.ln1.b"))?)?;
    let h = self_attention(tape, p, &format!("{prefix}.attn"), h, heads, causal)?;
    let x = tape.add(x, h)?;
    let h = tape.layer_norm(x, p.get(&format!("{prefix}.ln2.g"))?, p.get(&format!("{prefix}.ln2.b"))?)?;
    let h = tape.linear(h, p.get(&format!("{prefix}.mlp.fc1.w"))?, p.get(&format!("{prefix}.mlp.fc1.b"))?)?;
    let h = tape.gelu(h)?;
    let h = tape.linear(h, p.get(&format!("{prefix}.mlp.fc2.w"))?, p.get(&format!("{prefix}.mlp.fc2.b"))?)?;
    tape.add(x, h)
}
