use super::params::ParamSet;
use super::tensor::{NumericsError, Result};

/// Adagrad: per-coordinate step sizes shrink with the accumulated squared gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct AdagradState {
    accumulators: Vec<Vec<f64>>,
    pub learning_rate: f64,
    pub epsilon: f64,
}

impl AdagradState {
    pub fn new(params: &ParamSet, learning_rate: f64) -> Self {
        AdagradState {
            accumulators: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            learning_rate,
            epsilon: 1e-8,
        }
    }

    pub fn accumulators(&self) -> &[Vec<f64>] {
        &self.accumulators
    }

    /// `acc += g²; p -= lr·g / (sqrt(acc) + ε)`, then zeroes the gradients.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if self.accumulators.len() != params.len() {
            return Err(NumericsError::Contract(format!(
                "optimizer tracks {} tensors but the parameter set has {}",
                self.accumulators.len(),
                params.len()
            )));
        }
        let ids: Vec<_> = params.ids().collect();
        for (id, acc) in ids.into_iter().zip(&mut self.accumulators) {
            let t = params.get_mut(id);
            if !t.requires_grad() {
                return Err(NumericsError::Contract("adagrad step on a tensor without gradient".into()));
            }
            let grad = t.grad().map(<[f64]>::to_vec).unwrap_or_default();
            let data = t.data_mut();
            for ((p, a), g) in data.iter_mut().zip(acc.iter_mut()).zip(&grad) {
                if *g == 0.0 {
                    continue;
                }
                *a += g * g;
                *p -= self.learning_rate * g / (a.sqrt() + self.epsilon);
            }
            t.zero_grad();
        }
        Ok(())
    }
}
