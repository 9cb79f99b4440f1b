use rand::{Rng, RngCore};

use super::{Tape, Var};
use crate::error::{Error, Result};

/// Projection matrices of one multi-head attention block, registered on a
/// tape. Each is `d × d` and applied as `x · W`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub output: Var,
}

/// Inverted dropout driven by a caller-owned RNG.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut dyn RngCore,
}

impl Dropout<'_> {
    pub fn apply(&mut self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let mask: Vec<f64> = (0..tape.value(x).len())
            .map(|_| {
                if self.rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let m = tape.constant(tape.shape(x).to_vec(), mask)?;
        tape.mul(x, m)
    }
}

/// Scaled dot-product attention with `heads` heads.
///
/// `query` is `[q, d]` (or `[B, q, d]`), `keys` and `values` are `[s, d]`
/// (or `[B, s, d]`, one key set per batch entry). Q/K/V are projected, split
/// into `heads` slices of width `d / heads`, attended with scale
/// `1/sqrt(d / heads)`, concatenated and passed through the output
/// projection. No residual path and no normalisation.
pub fn multi_head_attention(
    tape: &mut Tape<'_>,
    query: Var,
    keys: Var,
    values: Var,
    heads: usize,
    params: &AttentionVars,
    dropout: Option<&mut Dropout<'_>>,
) -> Result<Var> {
    let q_shape = tape.shape(query).to_vec();
    let k_shape = tape.shape(keys).to_vec();
    if tape.shape(values) != k_shape.as_slice() {
        return Err(Error::Shape {
            op: "attention keys/values",
            lhs: k_shape,
            rhs: tape.shape(values).to_vec(),
        });
    }
    let (batch, q, s, d) = match (q_shape.as_slice(), k_shape.as_slice()) {
        (&[q, d], &[s, dk]) if d == dk => (1, q, s, d),
        (&[b, q, d], &[bk, s, dk]) if b == bk && d == dk => (b, q, s, d),
        _ => {
            return Err(Error::Shape {
                op: "attention",
                lhs: q_shape,
                rhs: k_shape,
            })
        }
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!(
            "model width {d} is not divisible by {heads} attention heads"
        )));
    }
    let qf = tape.reshape(query, &[batch * q, d])?;
    let kf = tape.reshape(keys, &[batch * s, d])?;
    let vf = tape.reshape(values, &[batch * s, d])?;
    let qp = tape.matmul(qf, params.query)?;
    let kp = tape.matmul(kf, params.key)?;
    let vp = tape.matmul(vf, params.value)?;
    let qp = tape.reshape(qp, &[batch, q, d])?;
    let kp = tape.reshape(kp, &[batch, s, d])?;
    let vp = tape.reshape(vp, &[batch, s, d])?;
    let out = attend(tape, qp, kp, vp, heads, params.output, None, dropout)?;
    tape.reshape(out, &q_shape)
}

/// The attention core on already projected inputs.
///
/// `q` is `[B, q, d]`, `k` and `v` are `[B, s, d]`. With `key_mask`
/// (length `B * s`), keys marked false get zero weight. Returns
/// `[B, q, d]` after the output projection.
#[allow(clippy::too_many_arguments)]
pub fn attend(
    tape: &mut Tape<'_>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    output: Var,
    key_mask: Option<&[bool]>,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<Var> {
    let (batch, nq, d) = match *tape.shape(q) {
        [b, n, d] => (b, n, d),
        _ => return Err(Error::contract("attend expects [B, q, d] queries")),
    };
    let s = tape.shape(k)[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!(
            "model width {d} is not divisible by {heads} attention heads"
        )));
    }
    let dh = d / heads;
    let keep: Option<Vec<bool>> = key_mask.map(|m| {
        (0..batch)
            .flat_map(|b| (0..nq).flat_map(move |_| (0..s).map(move |j| m[b * s + j])))
            .collect()
    });
    let scale = 1.0 / (dh as f64).sqrt();
    let mut contexts = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_last(q, h * dh, dh)?,
                tape.slice_last(k, h * dh, dh)?,
                tape.slice_last(v, h * dh, dh)?,
            )
        };
        let scores = tape.bmm_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let mut weights = match &keep {
            Some(m) => tape.softmax_masked(scores, 2, m)?,
            None => tape.softmax(scores, 2)?,
        };
        if let Some(dr) = dropout.as_deref_mut() {
            weights = dr.apply(tape, weights)?;
        }
        contexts.push(tape.bmm(weights, vh)?);
    }
    let joined = if heads == 1 {
        contexts[0]
    } else {
        tape.concat_last(&contexts)?
    };
    let joined = tape.reshape(joined, &[batch * nq, d])?;
    let out = tape.matmul(joined, output)?;
    tape.reshape(out, &[batch, nq, d])
}
