//! Adadelta with a learning-rate scale, accumulator state in f64.

use super::backbone::{ModelParams, ParamGrads};
use crate::tensor::Scalar;

pub const ADADELTA_RHO: f64 = 0.95;
pub const ADADELTA_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Adadelta {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    acc_grad: Vec<Vec<f64>>,
    acc_update: Vec<Vec<f64>>,
}

impl Adadelta {
    pub fn new(lr: f64) -> Self {
        Adadelta {
            lr,
            rho: ADADELTA_RHO,
            eps: ADADELTA_EPS,
            acc_grad: Vec::new(),
            acc_update: Vec::new(),
        }
    }

    pub fn step<T: Scalar>(&mut self, params: &mut ModelParams<T>, grads: &ParamGrads<T>) {
        if self.acc_grad.is_empty() {
            self.acc_grad = grads.parts.iter().map(|p| vec![0.0; p.len()]).collect();
            self.acc_update = self.acc_grad.clone();
        }
        for (pi, (_, tensor)) in params.named_mut().into_iter().enumerate() {
            let g = &grads.parts[pi];
            let acc_g = &mut self.acc_grad[pi];
            let acc_u = &mut self.acc_update[pi];
            for (i, v) in tensor.data_mut().iter_mut().enumerate() {
                let gi = g[i].to_f64();
                acc_g[i] = self.rho * acc_g[i] + (1.0 - self.rho) * gi * gi;
                let update = ((acc_u[i] + self.eps).sqrt() / (acc_g[i] + self.eps).sqrt()) * gi;
                acc_u[i] = self.rho * acc_u[i] + (1.0 - self.rho) * update * update;
                *v -= T::from_f64(self.lr * update);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BackboneConfig, GridSpec};

    fn cfg() -> BackboneConfig {
        BackboneConfig {
            grid: GridSpec::new(4, 2, 40.0, 20.0),
            num_classes: 13,
            d_enc: 4,
            obs_len: 2,
            total_len: 4,
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let c = cfg();
        let mut params = ModelParams::<f32>::init(&c, 7);
        let before: Vec<Vec<f32>> = params
            .named()
            .iter()
            .map(|(_, t)| t.data().to_vec())
            .collect();
        let grads = ParamGrads::zeros_like(&params);
        let mut opt = Adadelta::new(0.3);
        opt.step(&mut params, &grads);
        let after: Vec<Vec<f32>> = params
            .named()
            .iter()
            .map(|(_, t)| t.data().to_vec())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn first_step_matches_hand_computed_update() {
        // scalar gradient g: acc = (1-rho) g^2,
        // update = sqrt(eps) / sqrt(acc + eps) * g, param -= lr * update
        let c = cfg();
        let mut params = ModelParams::<f32>::zeros(&c);
        let mut grads = ParamGrads::zeros_like(&params);
        let g = 0.7f64;
        grads.parts[0][0] = g as f32;
        let mut opt = Adadelta::new(0.3);
        opt.step(&mut params, &grads);

        let acc = (1.0 - ADADELTA_RHO) * g * g;
        let update = (ADADELTA_EPS).sqrt() / (acc + ADADELTA_EPS).sqrt() * g;
        let expected = -(0.3 * update) as f32;
        let got = params.named()[0].1.data()[0];
        assert!(
            (got - expected).abs() < 1e-9,
            "got {got}, expected {expected}"
        );
    }

    #[test]
    fn updates_are_deterministic() {
        let c = cfg();
        let run = || {
            let mut params = ModelParams::<f32>::init(&c, 3);
            let mut grads = ParamGrads::zeros_like(&params);
            for p in &mut grads.parts {
                for (i, v) in p.iter_mut().enumerate() {
                    *v = ((i % 7) as f32 - 3.0) * 0.01;
                }
            }
            let mut opt = Adadelta::new(0.3);
            for _ in 0..5 {
                opt.step(&mut params, &grads);
            }
            params
                .named()
                .iter()
                .flat_map(|(_, t)| t.data().to_vec())
                .collect::<Vec<f32>>()
        };
        assert_eq!(run(), run());
    }
}
