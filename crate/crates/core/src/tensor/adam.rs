use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments, one pair of buffers per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new<'t>(config: AdamConfig, params: impl IntoIterator<Item = &'t Tensor>) -> Self {
        let first: Vec<Vec<f64>> = params.into_iter().map(|t| vec![0.0; t.numel()]).collect();
        let second = first.clone();
        AdamState {
            config,
            first,
            second,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the populated `grad` fields, then zeroes them.
    /// Fails without touching anything if any gradient is missing.
    pub fn step<'t>(&mut self, params: impl IntoIterator<Item = &'t mut Tensor>) -> Result<()> {
        let mut params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != self.first.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} tensors, got {}",
                self.first.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            match &p.grad {
                None => return Err(Error::contract(format!("parameter {i} has no gradient"))),
                Some(g) if g.len() != p.numel() || g.len() != self.first[i].len() => {
                    return Err(Error::Shape {
                        op: "adam",
                        lhs: p.shape().to_vec(),
                        rhs: vec![g.len()],
                    })
                }
                _ => {}
            }
        }

        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let mut grad = p.grad.take().unwrap();
            let data = p.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                data[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
            grad.iter_mut().for_each(|g| *g = 0.0);
            p.grad = Some(grad);
        }
        Ok(())
    }
}
