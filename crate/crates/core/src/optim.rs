//! Adam with bias correction and optional global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Rescale gradients so their global L2 norm is at most this value.
    pub max_grad_norm: Option<f32>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: Some(1.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl OptimizerState {
    /// Zero moments shaped like `params`.
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let first: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        let second = first.clone();
        Self {
            config,
            first,
            second,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `params` and `grads` are matched by position.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor)], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::ShapeMismatch {
                op: "optimizer_step",
                lhs: vec![params.len(), self.first.len()],
                rhs: vec![grads.len()],
            });
        }
        for ((name, p), (g, m)) in params.iter().zip(grads.iter().zip(&self.first)) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }

        let clip = match self.config.max_grad_norm {
            Some(max) => {
                let sq = grads
                    .iter()
                    .flat_map(|g| g.data())
                    .fold(0.0f64, |acc, &v| acc + (v as f64) * (v as f64));
                let norm = sq.sqrt() as f32;
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((_, p), g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let pd = p.data_mut();
            for (((w, &gr), mm), vv) in pd
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gr = gr * clip;
                *mm = beta1 * *mm + (1.0 - beta1) * gr;
                *vv = beta2 * *vv + (1.0 - beta2) * gr * gr;
                if lr != 0.0 {
                    let mhat = *mm / bc1;
                    let vhat = *vv / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f32) -> Tensor {
        Tensor::from_vec(vec![v]).unwrap()
    }

    #[test]
    fn zero_lr_leaves_params_bitwise() {
        let mut w = Tensor::from_vec(vec![0.3, -1.25, 7.0]).unwrap();
        let before = w.clone();
        let cfg = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        let mut st = OptimizerState::new(cfg, [&w]);
        for _ in 0..5 {
            let g = Tensor::from_vec(vec![0.5, -2.0, 1e-3]).unwrap();
            st.step(&mut [("w".into(), &mut w)], &[g]).unwrap();
        }
        assert!(w.bit_eq(&before));
        assert_eq!(st.steps_taken(), 5);
    }

    #[test]
    fn moves_against_gradient_sign() {
        let mut w = one(0.0);
        let mut st = OptimizerState::new(AdamConfig::default(), [&w]);
        st.step(&mut [("w".into(), &mut w)], &[one(1.0)]).unwrap();
        assert!(w.data()[0] < 0.0);
    }

    #[test]
    fn quadratic_strictly_decreases() {
        let mut w = one(1.0);
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        let mut st = OptimizerState::new(cfg, [&w]);
        let mut prev = w.data()[0].powi(2);
        for _ in 0..10 {
            let g = one(2.0 * w.data()[0]);
            st.step(&mut [("w".into(), &mut w)], &[g]).unwrap();
            let f = w.data()[0].powi(2);
            assert!(f < prev, "{f} !< {prev}");
            prev = f;
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut w = one(1.0);
        let mut st = OptimizerState::new(AdamConfig::default(), [&w]);
        let bad = Tensor::from_parts(vec![1], vec![f32::NAN]);
        let err = st.step(&mut [("layers.0.wq".into(), &mut w)], &[bad]).unwrap_err();
        assert!(err.to_string().contains("layers.0.wq"));
    }

    #[test]
    fn deterministic_updates() {
        let run = || {
            let mut w = Tensor::from_vec(vec![0.1, 0.2]).unwrap();
            let mut st = OptimizerState::new(AdamConfig::default(), [&w]);
            for i in 0..7 {
                let g = Tensor::from_vec(vec![i as f32 * 0.3 - 1.0, 0.7]).unwrap();
                st.step(&mut [("w".into(), &mut w)], &[g]).unwrap();
            }
            w
        };
        assert!(run().bit_eq(&run()));
    }
}
