use candle_core::{backprop::GradStore, Tensor, Var};

use crate::error::{contract, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.0,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

/// Adam over a fixed set of named variables. Moments are exposed so they
/// can be checkpointed and restored exactly.
#[derive(Debug)]
pub struct Adam {
    config: AdamConfig,
    params: Vec<(String, Var)>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, config: AdamConfig) -> Result<Self> {
        let zeros = |(_, v): &(String, Var)| v.zeros_like();
        let first = params.iter().map(zeros).collect::<candle_core::Result<Vec<_>>>()?;
        let second = params.iter().map(zeros).collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Adam {
            config,
            params,
            first,
            second,
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    /// Applies one update. Variables without a gradient in `grads` are
    /// left untouched, as are their moments.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.steps += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.steps as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, (_, var)) in self.params.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let m = ((&self.first[i] * beta1)? + (g * (1.0 - beta1))?)?;
            let v = ((&self.second[i] * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&m / c1)?;
            let v_hat = (&v / c2)?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
            self.first[i] = m;
            self.second[i] = v;
        }
        Ok(())
    }

    /// `(name, first moment, second moment)` per variable.
    pub fn moments(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.params
            .iter()
            .zip(self.first.iter().zip(&self.second))
            .map(|((n, _), (m, v))| (n.as_str(), m, v))
    }

    pub fn restore(&mut self, steps: u64, first: Vec<Tensor>, second: Vec<Tensor>) -> Result<()> {
        if first.len() != self.params.len() || second.len() != self.params.len() {
            return Err(contract("optimizer state does not match its parameter list"));
        }
        for (i, (name, var)) in self.params.iter().enumerate() {
            if first[i].shape() != var.shape() || second[i].shape() != var.shape() {
                return Err(contract(format!("optimizer moment shape mismatch for {name}")));
            }
        }
        self.steps = steps;
        self.first = first;
        self.second = second;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let v = Var::new(&[1.5f32, -2.0], &Device::Cpu).unwrap();
        let mut opt = Adam::new(vec![("p".into(), v.clone())], AdamConfig::default()).unwrap();
        let loss = (v.as_tensor() * 0.0).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        opt.step(&grads).unwrap();
        assert_eq!(v.to_vec1::<f32>().unwrap(), vec![1.5, -2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let v = Var::new(&[1.0f64], &Device::Cpu).unwrap();
        let cfg = AdamConfig { lr: 0.1, beta1: 0.5, beta2: 0.9, eps: 0.0 };
        let mut opt = Adam::new(vec![("p".into(), v.clone())], cfg).unwrap();
        let grads = v.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
        opt.step(&grads).unwrap();
        // bias-corrected first step is lr * sign(g)
        assert!((v.to_vec1::<f64>().unwrap()[0] - 0.9).abs() < 1e-12);
    }
}
