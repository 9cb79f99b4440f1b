//! Hard interest selection, sampled softmax and the optimisation loop.

mod report;
mod sampler;

pub use report::{EvalRecord, TrainReport};
pub use sampler::{NegativeSampler, SamplerKind};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{build_training_samples, FixedSequence, InteractionLog, TrainingSample};
use crate::error::{Error, Result};
use crate::model::{forward_batch, save_checkpoint, Mode, ModelConfig, ParamVars, ParameterSet};
use crate::retrieval::evaluate;
use crate::tensor::{dot, AdamConfig, AdamState, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Negatives per positive.
    pub negatives: usize,
    pub max_iterations: usize,
    pub eval_every: usize,
    /// Non-improving evaluations tolerated before stopping.
    pub patience: usize,
    pub learning_rate: f64,
    pub sampler: SamplerKind,
    /// N values reported at each validation.
    pub topn: Vec<usize>,
    /// Early stopping watches recall at this N.
    pub early_stop_topn: usize,
    pub prefix_ratio: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            negatives: 10,
            max_iterations: 10_000,
            eval_every: 500,
            patience: 5,
            learning_rate: 1e-3,
            sampler: SamplerKind::Uniform,
            topn: vec![20, 50],
            early_stop_topn: 50,
            prefix_ratio: 0.8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch_size", self.batch_size),
            ("negatives", self.negatives),
            ("max_iterations", self.max_iterations),
            ("eval_every", self.eval_every),
            ("patience", self.patience),
            ("early_stop_topn", self.early_stop_topn),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("field `{name}` must be at least 1")));
        }
        if self.topn.is_empty() || self.topn.contains(&0) {
            return Err(Error::config("field `topn` needs positive entries"));
        }
        if !self.topn.contains(&self.early_stop_topn) {
            return Err(Error::config(format!(
                "field `early_stop_topn`: {} is not in topn {:?}",
                self.early_stop_topn, self.topn
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(
                "field `learning_rate` must be finite and non-negative",
            ));
        }
        if !(self.prefix_ratio > 0.0 && self.prefix_ratio < 1.0) {
            return Err(Error::config("field `prefix_ratio` must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Index of the row of `interests` (`K × d`) with the largest inner
/// product with `target`; ties go to the smallest index.
pub fn select_interest(interests: &[f64], dim: usize, target: &[f64]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, row) in interests.chunks_exact(dim).enumerate() {
        let s = dot(row, target);
        if s > best.1 {
            best = (k, s);
        }
    }
    best.0
}

/// Mean over rows of `-log softmax` of the target against its negatives.
///
/// `user` is `[B, d]`; row `b` scores `targets[b]` followed by
/// `negatives[b]` and the target sits at logit 0.
pub fn sampled_softmax_loss(
    tape: &mut Tape<'_>,
    item_embeddings: Var,
    user: Var,
    targets: &[usize],
    negatives: &[Vec<usize>],
) -> Result<Var> {
    let b = targets.len();
    let width = negatives.first().map_or(0, Vec::len) + 1;
    if b == 0 || negatives.len() != b || negatives.iter().any(|n| n.len() + 1 != width) {
        return Err(Error::contract(
            "each target needs the same number of negatives",
        ));
    }
    let d = tape.shape(user)[1];
    let idx: Vec<Option<usize>> = targets
        .iter()
        .zip(negatives)
        .flat_map(|(&t, neg)| std::iter::once(t).chain(neg.iter().copied()).map(Some))
        .collect();
    let cands = tape.gather_rows(item_embeddings, &idx)?;
    let cands = tape.reshape(cands, &[b, width, d])?;
    let u = tape.reshape(user, &[b, 1, d])?;
    let logits = tape.bmm_nt(u, cands)?;
    let logits = tape.reshape(logits, &[b, width])?;
    tape.cross_entropy(logits, &vec![0; b])
}

/// Forward every sample, select its interest against the target and return
/// the batch's sampled-softmax loss. `rng` switches on dropout.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    tape: &mut Tape<'_>,
    vars: &ParamVars,
    params: &ParameterSet,
    config: &ModelConfig,
    samples: &[&TrainingSample],
    negatives: &[Vec<usize>],
    rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let mode = match rng {
        Some(r) => Mode::Train(r),
        None => Mode::Eval,
    };
    let seqs: Vec<&FixedSequence> = samples.iter().map(|s| &s.input).collect();
    let out = forward_batch(tape, vars, &seqs, config, mode)?;
    let (k, d) = (config.interests, config.dim);
    let values = tape.value(out.vectors);
    let picks: Vec<Option<usize>> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let block = &values[i * k * d..(i + 1) * k * d];
            Some(i * k + select_interest(block, d, params.item_embeddings.row(s.target)))
        })
        .collect();
    let flat = tape.reshape(out.vectors, &[samples.len() * k, d])?;
    let user = tape.gather_rows(flat, &picks)?;
    let targets: Vec<usize> = samples.iter().map(|s| s.target).collect();
    sampled_softmax_loss(tape, vars.item_embeddings, user, &targets, negatives)
}

pub struct TrainOutcome {
    pub report: TrainReport,
    /// Parameters at the best validation; the final ones if none improved.
    pub best: ParameterSet,
}

/// Trains from a seeded initialisation, validating every `eval_every`
/// iterations and at the last one. With `checkpoint`, every new best is
/// written there.
pub fn train(
    train_log: &InteractionLog,
    valid_log: &InteractionLog,
    model: &ModelConfig,
    config: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome> {
    model.validate()?;
    config.validate()?;
    let samples = build_training_samples(train_log, model.max_len);
    if samples.is_empty() {
        return Err(Error::input(None, "training log yields no samples"));
    }
    let num_items = train_log.num_items();
    let max_n = config.topn.iter().copied().max().unwrap_or(0);
    if max_n > num_items {
        return Err(Error::config(format!(
            "field `topn`: {max_n} exceeds the {num_items} items in the vocabulary"
        )));
    }
    let sampler = NegativeSampler::new(config.sampler, train_log)?;
    if config.negatives + 1 > num_items {
        return Err(Error::config(format!(
            "field `negatives`: {} negatives need more than {num_items} items",
            config.negatives
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ParameterSet::init(model, num_items, &mut rng);
    let adam_cfg = AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(adam_cfg, params.tensors());

    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut report = TrainReport::default();
    let mut best: Option<(f64, ParameterSet)> = None;
    let mut stale = 0;
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);

    for iteration in 1..=config.max_iterations {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(samples.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&samples[order[cursor]]);
            cursor += 1;
        }
        let negatives = batch
            .iter()
            .map(|s| sampler.sample(s.target, config.negatives, &mut rng))
            .collect::<Result<Vec<_>>>()?;

        let (loss, mut grads, vars) = {
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let loss = batch_loss(
                &mut tape,
                &vars,
                &params,
                model,
                &batch,
                &negatives,
                Some(&mut rng),
            )?;
            let value = tape.value(loss)[0];
            if !value.is_finite() {
                return Err(Error::Divergence {
                    iteration,
                    loss: value,
                });
            }
            (value, tape.backward(loss)?, vars)
        };
        params.accumulate_grads(&mut grads, &vars);
        adam.step(params.tensors_mut())?;
        params.zero_padding_row();
        loss_sum += loss;
        loss_count += 1;

        if iteration % config.eval_every == 0 || iteration == config.max_iterations {
            let eval = evaluate(&params, model, valid_log, &config.topn, config.prefix_ratio)?;
            let watched = eval
                .report
                .get(config.early_stop_topn)
                .map_or(0.0, |m| m.recall);
            report.records.push(EvalRecord {
                iteration,
                train_loss: loss_sum / loss_count as f64,
                validation: eval.report,
            });
            (loss_sum, loss_count) = (0.0, 0);
            report.iterations = iteration;
            if best.as_ref().is_none_or(|(b, _)| watched > *b) {
                if let Some(path) = checkpoint {
                    save_checkpoint(path, model, &params)?;
                    report.best_checkpoint = Some(path.to_path_buf());
                }
                best = Some((watched, params.clone()));
                report.best_iteration = Some(iteration);
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    report.stopped_early = true;
                    break;
                }
            }
        }
    }
    let best = best.map_or(params, |(_, p)| p);
    Ok(TrainOutcome { report, best })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_prefers_largest_then_smallest_index() {
        let m = [1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        assert_eq!(select_interest(&m, 2, &[0.0, 2.0]), 1);
        assert_eq!(select_interest(&m, 2, &[1.0, 1.0]), 0);
        assert_eq!(select_interest(&m[..2], 2, &[-5.0, 0.0]), 0);
    }

    #[test]
    fn equal_logits_give_log_of_width() {
        let mut tape = Tape::new();
        let table = tape.constant(vec![12, 2], vec![0.5; 24]).unwrap();
        let user = tape.constant(vec![1, 2], vec![0.3, -0.2]).unwrap();
        let neg = vec![(2..12).collect::<Vec<_>>()];
        let loss = sampled_softmax_loss(&mut tape, table, user, &[1], &neg).unwrap();
        assert!((tape.value(loss)[0] - 11f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn config_rejects_zero_counts() {
        let cfg = TrainConfig {
            patience: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
