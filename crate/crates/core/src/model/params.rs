use rand::{Rng, RngCore};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{AttentionVars, Gradients, Tape, Tensor, Var};

/// Scale of the uniform initialisation for embedding tables.
const EMBEDDING_INIT: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    pub output: Tensor,
}

/// Attention weights of one graph round: one block updates item nodes, the
/// other the central node.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub item: AttentionParams,
    pub central: AttentionParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    /// `(|I| + 1) × d`; row 0 is padding and stays zero.
    pub item_embeddings: Tensor,
    /// `(p + 1) × d`, indexed by clamped day count.
    pub interval_embeddings: Tensor,
    /// `d × 1` scoring vector for interval attention.
    pub w1: Tensor,
    /// `4d × d`.
    pub w2: Tensor,
    /// `K × 4d`.
    pub w3: Tensor,
    pub layers: Vec<LayerParams>,
}

/// The tape handles of a registered [`ParameterSet`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub item_embeddings: Var,
    pub interval_embeddings: Var,
    pub w1: Var,
    pub w2: Var,
    pub w3: Var,
    pub layers: Vec<(AttentionVars, AttentionVars)>,
    /// Every handle, in [`ParameterSet::named`] order.
    pub all: Vec<Var>,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut dyn RngCore) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).unwrap().with_grad()
}

fn attention(d: usize, rng: &mut dyn RngCore) -> AttentionParams {
    let b = 1.0 / (d as f64).sqrt();
    AttentionParams {
        query: uniform(&[d, d], b, rng),
        key: uniform(&[d, d], b, rng),
        value: uniform(&[d, d], b, rng),
        output: uniform(&[d, d], b, rng),
    }
}

impl ParameterSet {
    pub fn init(config: &ModelConfig, num_items: usize, rng: &mut dyn RngCore) -> Self {
        let d = config.dim;
        let mut item_embeddings = uniform(&[num_items + 1, d], EMBEDDING_INIT, rng);
        item_embeddings.row_mut(0).fill(0.0);
        let interval_embeddings = uniform(
            &[config.interval_threshold as usize + 1, d],
            EMBEDDING_INIT,
            rng,
        );
        let w1 = uniform(&[d, 1], 1.0 / (d as f64).sqrt(), rng);
        let w2 = uniform(&[4 * d, d], 1.0 / (d as f64).sqrt(), rng);
        let w3 = uniform(
            &[config.interests, 4 * d],
            1.0 / ((4 * d) as f64).sqrt(),
            rng,
        );
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                item: attention(d, rng),
                central: attention(d, rng),
            })
            .collect();
        ParameterSet {
            item_embeddings,
            interval_embeddings,
            w1,
            w2,
            w3,
            layers,
        }
    }

    pub fn num_items(&self) -> usize {
        self.item_embeddings.rows() - 1
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("item_embeddings".to_owned(), &self.item_embeddings),
            ("interval_embeddings".to_owned(), &self.interval_embeddings),
            ("w1".to_owned(), &self.w1),
            ("w2".to_owned(), &self.w2),
            ("w3".to_owned(), &self.w3),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (role, a) in [("item", &layer.item), ("central", &layer.central)] {
                for (proj, t) in [
                    ("query", &a.query),
                    ("key", &a.key),
                    ("value", &a.value),
                    ("output", &a.output),
                ] {
                    out.push((format!("layer{l}.{role}.{proj}"), t));
                }
            }
        }
        out
    }

    /// Mutable counterpart of [`ParameterSet::named`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.item_embeddings,
            &mut self.interval_embeddings,
            &mut self.w1,
            &mut self.w2,
            &mut self.w3,
        ];
        for layer in &mut self.layers {
            for a in [&mut layer.item, &mut layer.central] {
                out.extend([&mut a.query, &mut a.key, &mut a.value, &mut a.output]);
            }
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    /// Expected `(name, shape)` pairs for a configuration and vocabulary size.
    pub fn expected_shapes(config: &ModelConfig, num_items: usize) -> Vec<(String, Vec<usize>)> {
        let d = config.dim;
        let mut out = vec![
            ("item_embeddings".to_owned(), vec![num_items + 1, d]),
            (
                "interval_embeddings".to_owned(),
                vec![config.interval_threshold as usize + 1, d],
            ),
            ("w1".to_owned(), vec![d, 1]),
            ("w2".to_owned(), vec![4 * d, d]),
            ("w3".to_owned(), vec![config.interests, 4 * d]),
        ];
        for l in 0..config.layers {
            for role in ["item", "central"] {
                for proj in ["query", "key", "value", "output"] {
                    out.push((format!("layer{l}.{role}.{proj}"), vec![d, d]));
                }
            }
        }
        out
    }

    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = Self::expected_shapes(config, self.num_items());
        let named = self.named();
        if expected.len() != named.len() {
            return Err(Error::config(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(&named) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Shape {
                    op: "parameter set",
                    lhs: shape.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Registers every tensor as a borrowed leaf on `tape`.
    pub fn register<'a>(&'a self, tape: &mut Tape<'a>) -> ParamVars {
        let item_embeddings = tape.leaf(&self.item_embeddings);
        let interval_embeddings = tape.leaf(&self.interval_embeddings);
        let w1 = tape.leaf(&self.w1);
        let w2 = tape.leaf(&self.w2);
        let w3 = tape.leaf(&self.w3);
        let mut all = vec![item_embeddings, interval_embeddings, w1, w2, w3];
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut reg = |a: &'a AttentionParams| {
                let v = AttentionVars {
                    query: tape.leaf(&a.query),
                    key: tape.leaf(&a.key),
                    value: tape.leaf(&a.value),
                    output: tape.leaf(&a.output),
                };
                all.extend([v.query, v.key, v.value, v.output]);
                v
            };
            let item = reg(&layer.item);
            let central = reg(&layer.central);
            layers.push((item, central));
        }
        ParamVars {
            item_embeddings,
            interval_embeddings,
            w1,
            w2,
            w3,
            layers,
            all,
        }
    }

    /// Adds the gradients of `vars` into each tensor's `grad`; tensors the
    /// loss never reached receive zeros. The padding row's gradient is
    /// always cleared.
    pub fn accumulate_grads(&mut self, grads: &mut Gradients, vars: &ParamVars) {
        for (t, &v) in self.tensors_mut().into_iter().zip(&vars.all) {
            let n = t.numel();
            let acc = t.grad.get_or_insert_with(|| vec![0.0; n]);
            if let Some(g) = grads.take(v) {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        let d = self.item_embeddings.cols();
        if let Some(g) = self.item_embeddings.grad.as_mut() {
            g[..d].fill(0.0);
        }
    }

    pub fn zero_padding_row(&mut self) {
        self.item_embeddings.row_mut(0).fill(0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }
}
