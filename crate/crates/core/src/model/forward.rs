use rand::RngCore;

use super::{ModelConfig, ParamVars, ParameterSet};
use crate::dataset::{interval_matrix, FixedSequence, IntervalMatrix};
use crate::error::{Error, Result};
use crate::tensor::{attend, Dropout, Tape, Tensor, Var};

/// Training mode draws dropout masks from the given RNG; evaluation is
/// deterministic.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut dyn RngCore),
}

impl Mode<'_> {
    fn dropout(&mut self, rate: f64) -> Option<Dropout<'_>> {
        match self {
            Mode::Train(rng) if rate > 0.0 => Some(Dropout {
                rate,
                rng: &mut **rng,
            }),
            _ => None,
        }
    }
}

/// Tape handles of the extracted interests.
#[derive(Clone, Debug)]
pub struct InterestVars {
    /// `K × d`.
    pub vectors: Var,
    /// `K × len` over the real slots only.
    pub attention: Var,
    /// Window slot of each attention column.
    pub positions: Vec<usize>,
}

/// Interest vectors of one window with their attention over the slots.
#[derive(Clone, Debug, PartialEq)]
pub struct InterestMatrix {
    /// `K × d`.
    pub vectors: Tensor,
    /// `K × n`; each row sums to one over real slots, padded columns are 0.
    pub attention: Tensor,
}

impl InterestMatrix {
    pub fn interests(&self) -> usize {
        self.vectors.rows()
    }

    pub fn vector(&self, k: usize) -> &[f64] {
        self.vectors.row(k)
    }
}

/// Real slots of a batch of windows, stored window after window as the
/// rows of one `[R, d]` matrix. Padded slots never get a row.
#[derive(Clone, Debug, PartialEq)]
pub struct Packing {
    /// Window slot of each real item, per window.
    pub slots: Vec<Vec<usize>>,
    /// First packed row of each window.
    pub offsets: Vec<usize>,
    /// Total real items `R`.
    pub rows: usize,
    /// Longest window, the padded width of per-window blocks.
    pub width: usize,
}

impl Packing {
    /// Fails if any window has no real slot.
    pub fn new<'m>(masks: impl IntoIterator<Item = &'m [bool]>) -> Result<Self> {
        let mut p = Packing {
            slots: Vec::new(),
            offsets: Vec::new(),
            rows: 0,
            width: 0,
        };
        for mask in masks {
            let pos: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
            if pos.is_empty() {
                return Err(Error::input(None, "window has no real items"));
            }
            p.offsets.push(p.rows);
            p.rows += pos.len();
            p.width = p.width.max(pos.len());
            p.slots.push(pos);
        }
        Ok(p)
    }

    pub fn windows(&self) -> usize {
        self.slots.len()
    }

    pub fn len(&self, window: usize) -> usize {
        self.slots[window].len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    /// `B * width` packed row indices, `None` past the end of a window.
    fn padded(&self) -> Vec<Option<usize>> {
        let w = self.width;
        (0..self.windows())
            .flat_map(|i| (0..w).map(move |j| (i, j)))
            .map(|(i, j)| (j < self.len(i)).then(|| self.offsets[i] + j))
            .collect()
    }

    /// Scatters the packed rows of one window back to its `n` slots.
    fn unpack_index(&self, window: usize, n: usize) -> Vec<Option<usize>> {
        let mut idx = vec![None; n];
        for (j, &slot) in self.slots[window].iter().enumerate() {
            idx[slot] = Some(self.offsets[window] + j);
        }
        idx
    }
}

fn pack_one(tape: &mut Tape<'_>, x: Var, packing: &Packing) -> Result<Var> {
    let idx: Vec<Option<usize>> = packing.slots[0].iter().copied().map(Some).collect();
    tape.gather_rows(x, &idx)
}

fn unpack_one(tape: &mut Tape<'_>, x: Var, packing: &Packing, n: usize) -> Result<Var> {
    tape.gather_rows(x, &packing.unpack_index(0, n))
}

/// Item embeddings of every real slot, `[R, d]`.
pub fn embed_packed(
    tape: &mut Tape<'_>,
    vars: &ParamVars,
    seqs: &[&FixedSequence],
    packing: &Packing,
) -> Result<Var> {
    let mut idx = Vec::with_capacity(packing.rows);
    for (seq, slots) in seqs.iter().zip(&packing.slots) {
        for &slot in slots {
            let id = seq.item_ids[slot];
            if id == 0 {
                return Err(Error::contract("real slot holds the padding item"));
            }
            idx.push(Some(id));
        }
    }
    tape.gather_rows(vars.item_embeddings, &idx)
}

/// Time-interval representation of every real slot, `[R, d]`.
///
/// Row `a` of a window is the softmax-weighted sum over its real `b` of the
/// interval embedding for the clamped gap between `a` and `b`, with scores
/// `embedding · w1`.
pub fn periodicity_packed(
    tape: &mut Tape<'_>,
    vars: &ParamVars,
    intervals: &[&IntervalMatrix],
    packing: &Packing,
    dropout: Option<&mut Dropout<'_>>,
) -> Result<Var> {
    let table_rows = tape.shape(vars.interval_embeddings)[0];
    let (b, w) = (packing.windows(), packing.width);
    if intervals.len() != b {
        return Err(Error::contract("one interval matrix per window"));
    }
    let mut idx = Vec::with_capacity(b * w * w);
    let mut keep = Vec::with_capacity(b * w * w);
    for (m, slots) in intervals.iter().zip(&packing.slots) {
        if m.threshold() as usize + 1 != table_rows {
            return Err(Error::Shape {
                op: "periodicity_encode",
                lhs: vec![m.size(), m.threshold() as usize + 1],
                rhs: vec![table_rows],
            });
        }
        for a in 0..w {
            for c in 0..w {
                let real = a < slots.len() && c < slots.len();
                idx.push(real.then(|| m.get(slots[a], slots[c]) as usize));
                keep.push(real);
            }
        }
    }

    // Scoring each table row once is cheaper than scoring each pair.
    let row_scores = tape.matmul(vars.interval_embeddings, vars.w1)?;
    let scores = tape.gather_rows(row_scores, &idx)?;
    let scores = tape.reshape(scores, &[b * w, w])?;
    let mut a1 = tape.softmax_masked(scores, 1, &keep)?;
    if let Some(dp) = dropout {
        a1 = dp.apply(tape, a1)?;
    }
    // Summing weights per distinct interval first needs one product with
    // the table instead of a gathered `[w, d]` block per row.
    let a1 = tape.scatter_cols(a1, &idx, table_rows)?;
    let et = tape.matmul(a1, vars.interval_embeddings)?;
    let rows: Vec<Option<usize>> = (0..b)
        .flat_map(|i| (0..packing.len(i)).map(move |j| Some(i * w + j)))
        .collect();
    tape.gather_rows(et, &rows)
}

/// Per-window mean of packed rows, `[B, d]`.
fn window_mean(tape: &mut Tape<'_>, h: Var, packing: &Packing) -> Result<Var> {
    let (b, w) = (packing.windows(), packing.width);
    let d = tape.shape(h)[1];
    let padded = tape.gather_rows(h, &packing.padded())?;
    let padded = tape.reshape(padded, &[b, w, d])?;
    let weights: Vec<f64> = (0..b)
        .flat_map(|i| {
            let len = packing.len(i);
            (0..w).map(move |j| if j < len { 1.0 / len as f64 } else { 0.0 })
        })
        .collect();
    let weights = tape.constant(vec![b, 1, w], weights)?;
    let mean = tape.bmm(weights, padded)?;
    tape.reshape(mean, &[b, d])
}

/// Star-graph refinement of `E^I + E^T` on packed rows, `[R, d]`.
///
/// Each round first updates every item node from its predecessor, the
/// central node of its window, itself and its own item embedding, all read
/// from the previous round; then each central node attends over itself and
/// the new states of its window. With the central node disabled item nodes
/// see only the other three tokens. Zero rounds return `E^I + E^T`.
pub fn interactivity_packed(
    tape: &mut Tape<'_>,
    vars: &ParamVars,
    e_i: Var,
    e_t: Var,
    packing: &Packing,
    config: &ModelConfig,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<Var> {
    let (r, b, w) = (packing.rows, packing.windows(), packing.width);
    let d = config.dim;
    let central = !config.ablation.disable_central_node;
    let mut h = tape.add(e_i, e_t)?;
    if vars.layers.is_empty() {
        return Ok(h);
    }
    let mut c = if central {
        Some(window_mean(tape, h, packing)?)
    } else {
        None
    };

    // Token table layout: [h (R rows), c (B rows)?, e (R rows)].
    let e_base = r + if central { b } else { 0 };
    let per_node = 3 + usize::from(central);
    let mut idx = Vec::with_capacity(r * per_node);
    for i in 0..b {
        let off = packing.offsets[i];
        for j in 0..packing.len(i) {
            idx.push(j.checked_sub(1).map(|p| off + p));
            if central {
                idx.push(Some(r + i));
            }
            idx.push(Some(off + j));
            idx.push(Some(e_base + off + j));
        }
    }
    // Central keys: [c (B rows), h (R rows)] gathered to `[B, 1 + width]`.
    let mut cidx = Vec::with_capacity(b * (w + 1));
    let mut ckeep = Vec::with_capacity(b * (w + 1));
    for i in 0..b {
        cidx.push(Some(i));
        ckeep.push(true);
        for j in 0..w {
            let real = j < packing.len(i);
            cidx.push(real.then(|| b + packing.offsets[i] + j));
            ckeep.push(real);
        }
    }

    for (item_attn, central_attn) in &vars.layers {
        let parts: Vec<Var> = [Some(h), c, Some(e_i)].into_iter().flatten().collect();
        let table = tape.concat_rows(&parts)?;
        // Projecting the table before gathering projects each token once.
        let kt = tape.matmul(table, item_attn.key)?;
        let vt = tape.matmul(table, item_attn.value)?;
        let keys = tape.gather_rows(kt, &idx)?;
        let keys = tape.reshape(keys, &[r, per_node, d])?;
        let values = tape.gather_rows(vt, &idx)?;
        let values = tape.reshape(values, &[r, per_node, d])?;
        let q = tape.matmul(h, item_attn.query)?;
        let q = tape.reshape(q, &[r, 1, d])?;
        let updated = attend(
            tape,
            q,
            keys,
            values,
            config.heads,
            item_attn.output,
            None,
            dropout.as_deref_mut(),
        )?;
        let updated = tape.reshape(updated, &[r, d])?;
        if let Some(c_prev) = c {
            let table = tape.concat_rows(&[c_prev, updated])?;
            let kt = tape.matmul(table, central_attn.key)?;
            let vt = tape.matmul(table, central_attn.value)?;
            let keys = tape.gather_rows(kt, &cidx)?;
            let keys = tape.reshape(keys, &[b, w + 1, d])?;
            let values = tape.gather_rows(vt, &cidx)?;
            let values = tape.reshape(values, &[b, w + 1, d])?;
            let q = tape.matmul(c_prev, central_attn.query)?;
            let q = tape.reshape(q, &[b, 1, d])?;
            let next = attend(
                tape,
                q,
                keys,
                values,
                config.heads,
                central_attn.output,
                Some(&ckeep),
                dropout.as_deref_mut(),
            )?;
            c = Some(tape.reshape(next, &[b, d])?);
        }
        h = updated;
    }
    Ok(h)
}

/// Per-window `A2 = softmax(W3 · tanh(W2 · Hᵀ))` over real slots and
/// `M = A2 · H`. Returns `M` as `[B, K, d]` and `A2` as `[B, K, width]`,
/// zero past the end of each window.
pub fn extract_packed(
    tape: &mut Tape<'_>,
    vars: &ParamVars,
    h: Var,
    packing: &Packing,
    dropout: Option<&mut Dropout<'_>>,
) -> Result<(Var, Var)> {
    let (b, w) = (packing.windows(), packing.width);
    let d = tape.shape(h)[1];
    let k = tape.shape(vars.w3)[0];
    let h = match dropout {
        Some(dp) => dp.apply(tape, h)?,
        None => h,
    };
    let hidden = tape.matmul_nt(h, vars.w2)?;
    let hidden = tape.tanh(hidden);
    let scores = tape.matmul_nt(hidden, vars.w3)?;
    let padded = packing.padded();
    let scores = tape.gather_rows(scores, &padded)?;
    let scores = tape.reshape(scores, &[b, w, k])?;
    let scores = tape.transpose(scores)?;
    let keep: Vec<bool> = (0..b)
        .flat_map(|i| {
            let len = packing.len(i);
            (0..k).flat_map(move |_| (0..w).map(move |j| j < len))
        })
        .collect();
    let attention = tape.softmax_masked(scores, 2, &keep)?;
    let hp = tape.gather_rows(h, &padded)?;
    let hp = tape.reshape(hp, &[b, w, d])?;
    let vectors = tape.bmm(attention, hp)?;
    Ok((vectors, attention))
}

/// Interests of a batch of windows.
#[derive(Clone, Debug)]
pub struct BatchInterests {
    /// `[B, K, d]`.
    pub vectors: Var,
    /// `[B, K, width]`; column `j` of window `i` is `packing.slots[i][j]`.
    pub attention: Var,
    pub packing: Packing,
}

/// Full pass from a batch of windows to their interests.
///
/// In evaluation mode every window's result is bit-identical to running
/// it alone.
pub fn forward_batch(
    tape: &mut Tape<'_>,
    vars: &ParamVars,
    seqs: &[&FixedSequence],
    config: &ModelConfig,
    mut mode: Mode<'_>,
) -> Result<BatchInterests> {
    for seq in seqs {
        if seq.window() != config.max_len
            || seq.mask.len() != seq.window()
            || seq.timestamps.len() != seq.window()
        {
            return Err(Error::Shape {
                op: "forward window",
                lhs: vec![config.max_len],
                rhs: vec![seq.item_ids.len(), seq.timestamps.len(), seq.mask.len()],
            });
        }
    }
    if seqs.is_empty() {
        return Err(Error::contract("forward needs at least one window"));
    }
    let packing = Packing::new(seqs.iter().map(|s| s.mask.as_slice()))?;
    let mut dropout = mode.dropout(config.dropout);
    let e_i = embed_packed(tape, vars, seqs, &packing)?;
    let e_t = if config.ablation.disable_periodicity {
        tape.constant(
            vec![packing.rows, config.dim],
            vec![0.0; packing.rows * config.dim],
        )?
    } else {
        let ms: Vec<IntervalMatrix> = seqs
            .iter()
            .map(|s| interval_matrix(s, config.interval_threshold))
            .collect();
        let refs: Vec<&IntervalMatrix> = ms.iter().collect();
        periodicity_packed(tape, vars, &refs, &packing, dropout.as_mut())?
    };
    let h = if config.ablation.disable_interactivity {
        tape.add(e_i, e_t)?
    } else {
        interactivity_packed(tape, vars, e_i, e_t, &packing, config, dropout.as_mut())?
    };
    let (vectors, attention) = extract_packed(tape, vars, h, &packing, dropout.as_mut())?;
    Ok(BatchInterests {
        vectors,
        attention,
        packing,
    })
}

/// Item embeddings of one window, `n × d`, zero in padded slots.
pub fn embed_items(tape: &mut Tape<'_>, vars: &ParamVars, seq: &FixedSequence) -> Result<Var> {
    let packing = Packing::new([seq.mask.as_slice()])?;
    let e = embed_packed(tape, vars, &[seq], &packing)?;
    unpack_one(tape, e, &packing, seq.window())
}

/// [`periodicity_packed`] for one window, `n × d`, zero in padded slots.
pub fn periodicity_encode(
    tape: &mut Tape<'_>,
    vars: &ParamVars,
    intervals: &IntervalMatrix,
    mask: &[bool],
    dropout: Option<&mut Dropout<'_>>,
) -> Result<Var> {
    if intervals.size() != mask.len() {
        return Err(Error::Shape {
            op: "periodicity_encode",
            lhs: vec![intervals.size()],
            rhs: vec![mask.len()],
        });
    }
    let packing = Packing::new([mask])?;
    let et = periodicity_packed(tape, vars, &[intervals], &packing, dropout)?;
    unpack_one(tape, et, &packing, mask.len())
}

/// [`interactivity_packed`] for one window of `n × d` inputs; the result
/// is `n × d`, zero in padded slots.
pub fn interactivity_encode(
    tape: &mut Tape<'_>,
    vars: &ParamVars,
    e_i: Var,
    e_t: Var,
    mask: &[bool],
    config: &ModelConfig,
    dropout: Option<&mut Dropout<'_>>,
) -> Result<Var> {
    let packing = Packing::new([mask])?;
    let e_i = pack_one(tape, e_i, &packing)?;
    let e_t = pack_one(tape, e_t, &packing)?;
    let h = interactivity_packed(tape, vars, e_i, e_t, &packing, config, dropout)?;
    unpack_one(tape, h, &packing, mask.len())
}

/// [`extract_packed`] for one window of `n × d` states.
pub fn extract_interests(
    tape: &mut Tape<'_>,
    vars: &ParamVars,
    h: Var,
    mask: &[bool],
    dropout: Option<&mut Dropout<'_>>,
) -> Result<InterestVars> {
    let packing = Packing::new([mask])?;
    let hp = pack_one(tape, h, &packing)?;
    let (vectors, attention) = extract_packed(tape, vars, hp, &packing, dropout)?;
    single(tape, vectors, attention, packing)
}

fn single(
    tape: &mut Tape<'_>,
    vectors: Var,
    attention: Var,
    packing: Packing,
) -> Result<InterestVars> {
    let s = tape.shape(vectors).to_vec();
    let vectors = tape.reshape(vectors, &s[1..])?;
    let a = tape.shape(attention).to_vec();
    let attention = tape.reshape(attention, &a[1..])?;
    let positions = packing.slots.into_iter().next().unwrap_or_default();
    Ok(InterestVars {
        vectors,
        attention,
        positions,
    })
}

/// Full pass from one window to its interests.
pub fn forward(
    tape: &mut Tape<'_>,
    vars: &ParamVars,
    seq: &FixedSequence,
    config: &ModelConfig,
    mode: Mode<'_>,
) -> Result<InterestVars> {
    let out = forward_batch(tape, vars, &[seq], config, mode)?;
    single(tape, out.vectors, out.attention, out.packing)
}

/// Deterministic forward pass without gradient bookkeeping.
pub fn forward_eval(
    params: &ParameterSet,
    config: &ModelConfig,
    seq: &FixedSequence,
) -> Result<InterestMatrix> {
    let mut tape = Tape::no_grad();
    let vars = params.register(&mut tape);
    let out = forward(&mut tape, &vars, seq, config, Mode::Eval)?;
    let vectors = tape.to_tensor(out.vectors);
    let k = vectors.rows();
    let len = out.positions.len();
    let a = tape.value(out.attention);
    let mut attention = Tensor::zeros(&[k, seq.window()]);
    for r in 0..k {
        for (j, &slot) in out.positions.iter().enumerate() {
            attention.row_mut(r)[slot] = a[r * len + j];
        }
    }
    Ok(InterestMatrix { vectors, attention })
}
