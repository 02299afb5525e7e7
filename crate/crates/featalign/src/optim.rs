//! Adam optimizer with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Network;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            eta: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_eta(eta: f64) -> Self {
        AdamConfig { eta, ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentPair {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Per-parameter first/second moment buffers plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub t: u64,
    pub moments: Vec<MomentPair>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, params: &[&Tensor]) -> Self {
        AdamState {
            cfg,
            t: 0,
            moments: params
                .iter()
                .map(|p| MomentPair {
                    m: vec![0.0; p.len()],
                    v: vec![0.0; p.len()],
                })
                .collect(),
        }
    }

    pub fn for_network(cfg: AdamConfig, net: &Network) -> Self {
        Self::new(cfg, &net.params())
    }

    /// One Adam update over an explicit parameter list. Gradients must be
    /// present on every parameter; they are consumed (zeroed) by the step.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if params.len() != self.moments.len() {
            return Err(Error::InvalidArg(format!(
                "adam state tracks {} parameters, got {}",
                self.moments.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            match &p.grad {
                Some(g) if g.len() == p.len() => {}
                _ => return Err(Error::MissingGradient(format!("parameter #{}", i))),
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let AdamConfig { eta, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (p, mom) in params.iter_mut().zip(&mut self.moments) {
            let g = p.grad.as_ref().expect("checked above").clone();
            for i in 0..p.len() {
                mom.m[i] = beta1 * mom.m[i] + (1.0 - beta1) * g[i];
                mom.v[i] = beta2 * mom.v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = mom.m[i] / bc1;
                let v_hat = mom.v[i] / bc2;
                p.values[i] -= eta * m_hat / (v_hat.sqrt() + eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}

/// Adam update over a single network's parameters.
pub fn adam_step(net: &mut Network, state: &mut AdamState) -> Result<()> {
    let mut params = net.params_mut();
    state.step(&mut params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_network, clamp_weights, LayerSpec};

    fn toy_net(seed: u64) -> Network {
        build_network(
            "t",
            &[3],
            &[LayerSpec::Linear { fan_in: 3, fan_out: 2, bias: true }],
            seed,
        )
        .unwrap()
    }

    #[test]
    fn first_step_with_unit_gradient_moves_by_eta() {
        let mut net = toy_net(1);
        let before = net.params()[0].values.clone();
        for p in net.params_mut() {
            p.grad = Some(vec![1.0; p.len()]);
        }
        let cfg = AdamConfig { eta: 1e-3, ..Default::default() };
        let mut state = AdamState::for_network(cfg, &net);
        adam_step(&mut net, &mut state).unwrap();
        let after = &net.params()[0].values;
        for (b, a) in before.iter().zip(after) {
            let delta = a - b;
            // -eta * 1/(1+eps)
            assert!((delta + 1e-3 / (1.0 + 1e-8)).abs() < 1e-12);
        }
        assert_eq!(state.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut net = toy_net(2);
        let before = net.clone();
        for p in net.params_mut() {
            p.grad = Some(vec![0.0; p.len()]);
        }
        let mut state = AdamState::for_network(AdamConfig::default(), &net);
        adam_step(&mut net, &mut state).unwrap();
        for (pa, pb) in net.params().iter().zip(before.params()) {
            assert_eq!(pa.values, pb.values);
        }
    }

    #[test]
    fn missing_gradient_rejected() {
        let mut net = toy_net(3);
        let mut state = AdamState::for_network(AdamConfig::default(), &net);
        assert!(matches!(
            adam_step(&mut net, &mut state),
            Err(crate::Error::MissingGradient(_))
        ));
    }

    #[test]
    fn identical_runs_produce_identical_trajectories() {
        let run = || {
            let mut net = toy_net(4);
            let mut state = AdamState::for_network(AdamConfig::with_eta(1e-2), &net);
            for step in 0..20 {
                for p in net.params_mut() {
                    let g: Vec<f64> =
                        (0..p.len()).map(|i| ((step * 7 + i) as f64).sin()).collect();
                    p.grad = Some(g);
                }
                adam_step(&mut net, &mut state).unwrap();
                clamp_weights(&mut net);
            }
            net
        };
        let a = run();
        let b = run();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert!(pa.values.iter().zip(&pb.values).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
