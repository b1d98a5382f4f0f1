//! Adam with decoupled weight decay.

use ndarray::{Array2, Zip};

use super::config::OptimizerConfig;
use crate::error::{domain, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    config: OptimizerConfig,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(config: OptimizerConfig, shapes: &[(usize, usize)]) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            t: 0,
        })
    }

    /// Restores saved moments and step count.
    pub fn from_state(config: OptimizerConfig, m: Vec<Array2<f64>>, v: Vec<Array2<f64>>, t: u64) -> Result<Self> {
        config.validate()?;
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.dim() != b.dim()) {
            return Err(domain("first and second moments disagree in shape"));
        }
        Ok(Self { config, m, v, t })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Array2<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Array2<f64>] {
        &self.v
    }

    /// One update with a learning rate per tensor. Applies global-norm
    /// clipping first when configured; returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>], lrs: &[f64]) -> Result<f64> {
        if params.len() != self.m.len() || grads.len() != self.m.len() || lrs.len() != self.m.len() {
            return Err(domain("parameter, gradient and learning-rate lists must match the optimizer"));
        }
        if params.iter().zip(grads).zip(&self.m).any(|((p, g), m)| p.dim() != m.dim() || g.dim() != m.dim()) {
            return Err(domain("tensor shape does not match the optimizer state"));
        }
        let norm = grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
        let scale = match self.config.max_grad_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.t += 1;
        let OptimizerConfig {
            beta1: b1,
            beta2: b2,
            eps,
            weight_decay: wd,
            ..
        } = self.config;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let lr = lrs[i];
            Zip::from(p)
                .and(&grads[i])
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .for_each(|p, &g, m, v| {
                    let g = g * scale;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
                });
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_is_sign_like() {
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &[(1, 3)]).unwrap();
        let mut p = vec![array![[1.0, -2.0, 0.5]]];
        let g = vec![array![[0.3, -4.0, 0.0]]];
        let norm = opt.step(&mut p, &g, &[0.1]).unwrap();
        assert!((norm - (0.09f64 + 16.0).sqrt()).abs() < 1e-12);
        let expect = |p0: f64, g: f64| p0 - 0.1 * g / (g.abs() + 1e-8);
        assert!((p[0][[0, 0]] - expect(1.0, 0.3)).abs() < 1e-12);
        assert!((p[0][[0, 1]] - expect(-2.0, -4.0)).abs() < 1e-12);
        assert_eq!(p[0][[0, 2]], 0.5);
    }

    #[test]
    fn second_step_matches_hand_recurrence() {
        let cfg = OptimizerConfig::default();
        let mut opt = AdamW::new(cfg, &[(1, 1)]).unwrap();
        let mut p = vec![array![[1.0]]];
        opt.step(&mut p, &[array![[1.0]]], &[0.01]).unwrap();
        let p1 = p[0][[0, 0]];
        opt.step(&mut p, &[array![[-0.5]]], &[0.01]).unwrap();
        let m = 0.9 * 0.1 + 0.1 * -0.5;
        let v = 0.999 * 0.001 + 0.001 * 0.25;
        let m_hat = m / (1.0 - 0.81);
        let v_hat = v / (1.0 - 0.999f64.powi(2));
        let expect = p1 - 0.01 * (m_hat / (v_hat.sqrt() + 1e-8) + 0.01 * p1);
        assert!((p[0][[0, 0]] - expect).abs() < 1e-15);
        assert_eq!(opt.steps(), 2);
    }

    #[test]
    fn clipping_and_shape_errors() {
        let cfg = OptimizerConfig {
            max_grad_norm: Some(1.0),
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &[(1, 2)]).unwrap();
        let mut p = vec![array![[0.0, 0.0]]];
        assert_eq!(opt.step(&mut p, &[array![[3.0, 4.0]]], &[1.0]).unwrap(), 5.0);
        assert!((opt.first_moments()[0][[0, 0]] - 0.1 * 0.6).abs() < 1e-15);
        assert!(opt.step(&mut p, &[array![[1.0]]], &[1.0]).is_err());
        assert!(opt.step(&mut p, &[array![[1.0, 1.0]]], &[]).is_err());
    }
}
