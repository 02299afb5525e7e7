//! Variational feature alignment: a probabilistic latent head on top of the
//! encoder trunk, KL regularization with a per-example random beta weight,
//! sampling, interpolation, and optional class conditioning.
//!
//! The latent draw is z = mu + eps (.) sigma^2 — the variance multiplies eps
//! directly. The conventional z = mu + eps (.) sigma form is available behind
//! the `std_reparam` switch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::align::{extraction_loop, FeatureConfig};
use crate::error::{Error, Result};
use crate::model::{clamp_weights, BindMode, LayerSpec, Network};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::{NodeId, Reduction, Tape, Tensor};

/// One draw from the latent posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub mu: Tensor,
    pub sigma2: Tensor,
    pub eps: Tensor,
    pub z: Tensor,
    pub class_logits: Option<Tensor>,
}

/// How the KL weight beta is chosen each step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BetaMode {
    /// One U(0,1) draw per example from a seeded stream.
    Uniform { seed: u64 },
    Fixed { value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VfaConfig {
    pub feature: FeatureConfig,
    pub beta: BetaMode,
    /// Seed for the eps stream, independent of the beta stream.
    pub eps_seed: u64,
    /// Multiply eps by sigma instead of sigma^2.
    #[serde(default)]
    pub std_reparam: bool,
    /// Weight on the reconstruction term (1.0 normally; 0 isolates the KL).
    #[serde(default = "one")]
    pub recon_weight: f64,
}

fn one() -> f64 {
    1.0
}

impl VfaConfig {
    pub fn validate(&self) -> Result<()> {
        self.feature.validate()?;
        if let BetaMode::Fixed { value } = self.beta {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(Error::InvalidArg(format!("fixed beta must be finite and >= 0, got {}", value)));
            }
        }
        if !self.recon_weight.is_finite() || self.recon_weight < 0.0 {
            return Err(Error::InvalidArg(format!("recon_weight must be finite and >= 0, got {}", self.recon_weight)));
        }
        Ok(())
    }
}

/// Encoder trunk plus parallel mu / log-variance heads and an optional
/// class-logit head.
#[derive(Debug, Clone, PartialEq)]
pub struct VfaModel {
    pub trunk: Network,
    pub mu_head: Network,
    pub logvar_head: Network,
    pub class_head: Option<Network>,
}

/// Optimizer state for each sub-network of a [`VfaModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct VfaAdam {
    pub trunk: AdamState,
    pub mu: AdamState,
    pub logvar: AdamState,
    pub class: Option<AdamState>,
}

impl VfaModel {
    /// Attaches fresh linear heads to `trunk`.
    pub fn build(trunk: Network, latent: usize, classes: Option<usize>, seed: u64) -> Result<VfaModel> {
        let hidden = trunk.output_len();
        let head = |name: &str, out: usize, s: u64| {
            crate::model::build_network(
                name,
                &[hidden],
                &[LayerSpec::Linear { fan_in: hidden, fan_out: out, bias: true }],
                s,
            )
        };
        Ok(VfaModel {
            mu_head: head("mu", latent, seed ^ 0x6d75)?,
            logvar_head: head("logvar", latent, seed ^ 0x6c76)?,
            class_head: match classes {
                Some(c) => Some(head("class", c, seed ^ 0x636c)?),
                None => None,
            },
            trunk,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.mu_head.output_len()
    }

    pub fn input_len(&self) -> usize {
        self.trunk.input_len()
    }

    pub fn class_count(&self) -> Option<usize> {
        self.class_head.as_ref().map(|h| h.output_len())
    }

    pub fn all_finite(&self) -> bool {
        self.trunk.all_finite()
            && self.mu_head.all_finite()
            && self.logvar_head.all_finite()
            && self.class_head.as_ref().map_or(true, |h| h.all_finite())
    }

    /// (mu, sigma^2, class logits) for a batch, outside any training tape.
    pub fn encode_stats(&self, x: &Tensor) -> Result<(Tensor, Tensor, Option<Tensor>)> {
        let mut tape = Tape::new();
        let xn = tape.constant(x);
        let tb = self.trunk.bind(&mut tape, BindMode::Frozen);
        let mb = self.mu_head.bind(&mut tape, BindMode::Frozen);
        let lb = self.logvar_head.bind(&mut tape, BindMode::Frozen);
        let h = tb.forward(&mut tape, xn)?;
        let mu = mb.forward(&mut tape, h)?;
        let lv = lb.forward(&mut tape, h)?;
        let sig2 = tape.exp(lv);
        let n = x.shape[0];
        let d = self.latent_dim();
        let mu_t = Tensor::new(vec![n, d], tape.value(mu).to_vec())?;
        let sig2_t = Tensor::new(vec![n, d], tape.value(sig2).to_vec())?;
        let logits = match &self.class_head {
            Some(ch) => {
                let cb = ch.bind(&mut tape, BindMode::Frozen);
                let lg = cb.forward(&mut tape, h)?;
                Some(Tensor::new(vec![n, ch.output_len()], tape.value(lg).to_vec())?)
            }
            None => None,
        };
        Ok((mu_t, sig2_t, logits))
    }
}

impl VfaAdam {
    pub fn for_model(cfg: AdamConfig, model: &VfaModel) -> VfaAdam {
        VfaAdam {
            trunk: AdamState::for_network(cfg, &model.trunk),
            mu: AdamState::for_network(cfg, &model.mu_head),
            logvar: AdamState::for_network(cfg, &model.logvar_head),
            class: model.class_head.as_ref().map(|h| AdamState::for_network(cfg, h)),
        }
    }
}

/// A ChaCha stream dedicated to (seed, step); distinct seeds or steps never
/// share draws.
pub fn substream(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

pub fn draw_standard_normal(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let values = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, values).expect("consistent extent")
}

/// One U(0,1) draw.
pub fn sample_beta(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen::<f64>()
}

fn beta_batch(mode: BetaMode, step: u64, n: usize) -> Vec<f64> {
    match mode {
        BetaMode::Fixed { value } => vec![value; n],
        BetaMode::Uniform { seed } => {
            let mut rng = substream(seed, step);
            (0..n).map(|_| sample_beta(&mut rng)).collect()
        }
    }
}

/// z = mu + eps (.) sigma^2 with a fixed eps; the non-tape form of the
/// latent draw.
pub fn reparameterize_with(mu: &Tensor, sigma2: &Tensor, eps: &Tensor, std_reparam: bool) -> Result<Tensor> {
    if mu.shape != sigma2.shape || mu.shape != eps.shape {
        return Err(Error::shape(format!(
            "reparameterize extents differ: mu {:?}, sigma2 {:?}, eps {:?}",
            mu.shape, sigma2.shape, eps.shape
        )));
    }
    if sigma2.values.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidArg("sigma2 must be elementwise positive".into()));
    }
    let values = mu
        .values
        .iter()
        .zip(&sigma2.values)
        .zip(&eps.values)
        .map(|((m, s2), e)| {
            let factor = if std_reparam { s2.sqrt() } else { *s2 };
            m + e * factor
        })
        .collect();
    Tensor::new(mu.shape.clone(), values)
}

/// Draws eps from the seeded stream and forms the latent sample.
pub fn reparameterize(mu: &Tensor, sigma2: &Tensor, seed: u64, std_reparam: bool) -> Result<LatentSample> {
    let mut rng = substream(seed, 0);
    let eps = draw_standard_normal(&mut rng, mu.shape.clone());
    let z = reparameterize_with(mu, sigma2, &eps, std_reparam)?;
    Ok(LatentSample {
        mu: mu.clone(),
        sigma2: sigma2.clone(),
        eps,
        z,
        class_logits: None,
    })
}

/// Differentiable latent draw from (mu, log sigma^2) nodes and a constant
/// eps node.
pub fn reparameterize_nodes(
    tape: &mut Tape,
    mu: NodeId,
    logvar: NodeId,
    eps: NodeId,
    std_reparam: bool,
) -> Result<NodeId> {
    let factor = if std_reparam {
        let half = tape.scale(logvar, 0.5);
        tape.exp(half)
    } else {
        tape.exp(logvar)
    };
    let scaled = tape.mul(eps, factor)?;
    tape.add(mu, scaled)
}

/// (1/2) * sum_i (mu_i^2 + sigma2_i - ln sigma2_i - 1), the KL from a
/// diagonal Gaussian to N(0, I), summed over every entry.
pub fn kl_std_normal(mu: &Tensor, sigma2: &Tensor) -> Result<f64> {
    if mu.shape != sigma2.shape {
        return Err(Error::shape(format!(
            "kl extents differ: mu {:?}, sigma2 {:?}",
            mu.shape, sigma2.shape
        )));
    }
    if sigma2.values.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidArg("sigma2 must be elementwise positive".into()));
    }
    let s: f64 = mu
        .values
        .iter()
        .zip(&sigma2.values)
        .map(|(m, s2)| m * m + s2 - s2.ln() - 1.0)
        .sum();
    Ok(0.5 * s)
}

/// Per-example KL as a [N] node, from (mu, log sigma^2) batch nodes.
pub fn kl_rows_nodes(tape: &mut Tape, mu: NodeId, logvar: NodeId) -> Result<NodeId> {
    let mu2 = tape.mul(mu, mu)?;
    let sig2 = tape.exp(logvar);
    let neg_lv = tape.neg(logvar);
    let a = tape.add(mu2, sig2)?;
    let b = tape.add(a, neg_lv)?;
    let c = tape.add_const(b, -1.0);
    let rows = tape.sum_cols(c)?;
    Ok(tape.scale(rows, 0.5))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VfaReport {
    /// ||x - r_hat||^2, mean over the batch.
    pub recon_loss: f64,
    /// Mean per-example KL (unweighted).
    pub kl: f64,
    /// Mean beta over the batch.
    pub beta_mean: f64,
    /// Mean cross-entropy when labels were supplied.
    pub ce: Option<f64>,
    pub aux_loss_trace: Vec<f64>,
}

/// One training step. The extraction target is the reparameterized latent
/// (plus class logits when a class head exists), held constant; the total
/// loss is recon + beta*KL (+ cross-entropy), backpropagated through the
/// unrolled extraction.
pub fn vfa_train_step(
    model: &mut VfaModel,
    adam: &mut VfaAdam,
    x_batch: &Tensor,
    labels: Option<&[usize]>,
    cfg: &VfaConfig,
    step: u64,
) -> Result<VfaReport> {
    cfg.validate()?;
    let batch = *x_batch
        .shape
        .first()
        .ok_or_else(|| Error::shape("x_batch must be batched"))?;
    if let Some(l) = labels {
        if l.len() != batch {
            return Err(Error::shape(format!("{} labels for a batch of {}", l.len(), batch)));
        }
        if model.class_head.is_none() {
            return Err(Error::InvalidArg("labels supplied but the model has no class head".into()));
        }
    }
    let latent = model.latent_dim();

    let mut tape = Tape::new();
    let xn = tape.constant(x_batch);
    let tb = model.trunk.bind(&mut tape, BindMode::Trainable);
    let mb = model.mu_head.bind(&mut tape, BindMode::Trainable);
    let lb = model.logvar_head.bind(&mut tape, BindMode::Trainable);
    let cb = model.class_head.as_ref().map(|h| h.bind(&mut tape, BindMode::Trainable));

    let h_x = tb.forward(&mut tape, xn)?;
    let mu_x = mb.forward(&mut tape, h_x)?;
    let lv_x = lb.forward(&mut tape, h_x)?;
    let logits_x = match &cb {
        Some(c) => Some(c.forward(&mut tape, h_x)?),
        None => None,
    };

    let mut eps_rng = substream(cfg.eps_seed, step);
    let eps = tape.constant(&draw_standard_normal(&mut eps_rng, vec![batch, latent]));
    let z_x = reparameterize_nodes(&mut tape, mu_x, lv_x, eps, cfg.std_reparam)?;
    let z_det = tape.detach(z_x);
    let target = match logits_x {
        Some(lg) => {
            let lg_det = tape.detach(lg);
            tape.concat_cols(z_det, lg_det)?
        }
        None => z_det,
    };

    // during extraction z_r carries no eps draw: it is mu of r (plus logits)
    let encode = |t: &mut Tape, r: NodeId| -> Result<NodeId> {
        let h = tb.forward(t, r)?;
        let m = mb.forward(t, h)?;
        match &cb {
            Some(c) => {
                let lg = c.forward(t, h)?;
                t.concat_cols(m, lg)
            }
            None => Ok(m),
        }
    };
    let r0 = tape.constant(&cfg.feature.init_r(batch, model.input_len()));
    let (r_hat, aux_loss_trace) = extraction_loop(&mut tape, encode, target, r0, &cfg.feature)?;

    let x_flat = tape.reshape(xn, vec![batch, model.input_len()])?;
    let recon = tape.mse(x_flat, r_hat, Reduction::MeanBatch)?;
    let recon_loss = tape.value(recon)[0];
    if !recon_loss.is_finite() {
        return Err(Error::NonFinite { step: cfg.feature.t_steps, value: recon_loss });
    }

    let betas = beta_batch(cfg.beta, step, batch);
    let beta_mean = betas.iter().sum::<f64>() / batch.max(1) as f64;
    let kl_rows = kl_rows_nodes(&mut tape, mu_x, lv_x)?;
    let kl = tape.value(kl_rows).iter().sum::<f64>() / batch.max(1) as f64;
    let beta_node = tape.constant(&Tensor::new(vec![batch], betas)?);
    let weighted = tape.mul(kl_rows, beta_node)?;
    let kl_term = tape.sum_all(weighted);
    let kl_term = tape.scale(kl_term, 1.0 / batch.max(1) as f64);

    let recon_term = tape.scale(recon, cfg.recon_weight);
    let mut total = tape.add(recon_term, kl_term)?;
    let mut ce = None;
    if let (Some(l), Some(lg)) = (labels, logits_x) {
        let ce_node = tape.softmax_cross_entropy(lg, l)?;
        ce = Some(tape.value(ce_node)[0]);
        total = tape.add(total, ce_node)?;
    }

    tape.backward(total)?;
    let pull = |net: &mut Network, layers: Vec<crate::model::BoundLayer>, tape: &Tape| -> Result<()> {
        net.pull_grads(tape, &layers)
    };
    let (tl, ml, ll) = (tb.layers.clone(), mb.layers.clone(), lb.layers.clone());
    let cl = cb.as_ref().map(|c| c.layers.clone());
    pull(&mut model.trunk, tl, &tape)?;
    pull(&mut model.mu_head, ml, &tape)?;
    pull(&mut model.logvar_head, ll, &tape)?;
    if let (Some(h), Some(layers)) = (model.class_head.as_mut(), cl) {
        h.pull_grads(&tape, &layers)?;
    }
    crate::optim::adam_step(&mut model.trunk, &mut adam.trunk)?;
    crate::optim::adam_step(&mut model.mu_head, &mut adam.mu)?;
    crate::optim::adam_step(&mut model.logvar_head, &mut adam.logvar)?;
    if let (Some(h), Some(a)) = (model.class_head.as_mut(), adam.class.as_mut()) {
        crate::optim::adam_step(h, a)?;
    }
    clamp_weights(&mut model.trunk);
    clamp_weights(&mut model.mu_head);
    clamp_weights(&mut model.logvar_head);
    if let Some(h) = model.class_head.as_mut() {
        clamp_weights(h);
    }

    Ok(VfaReport { recon_loss, kl, beta_mean, ce, aux_loss_trace })
}

/// Samples `n` images: z ~ N(0, I), optionally with scale*one_hot(class)
/// appended to the extraction target, then feature extraction with frozen
/// parameters.
pub fn generate(
    model: &VfaModel,
    n: usize,
    seed: u64,
    class: Option<usize>,
    scale: f64,
    cfg: &FeatureConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    if !model.all_finite() {
        return Err(Error::InvalidArg("model parameters are not finite".into()));
    }
    if let Some(c) = class {
        match model.class_count() {
            None => return Err(Error::InvalidArg("class requested but the model has no class head".into())),
            Some(k) if c >= k => {
                return Err(Error::InvalidArg(format!("class {} out of range for {} classes", c, k)))
            }
            _ => {}
        }
    }
    let input_len = model.input_len();
    if n == 0 {
        return Tensor::new(vec![0, input_len], Vec::new());
    }
    let latent = model.latent_dim();
    let mut rng = substream(seed, 0);
    let z = draw_standard_normal(&mut rng, vec![n, latent]);

    let mut tape = Tape::new();
    let tb = model.trunk.bind(&mut tape, BindMode::Frozen);
    let mb = model.mu_head.bind(&mut tape, BindMode::Frozen);
    let cb = model.class_head.as_ref().map(|h| h.bind(&mut tape, BindMode::Frozen));
    let want_logits = cb.is_some();

    let target = if want_logits {
        let k = model.class_count().expect("class head present");
        let mut logit_block = vec![0.0; n * k];
        if let Some(c) = class {
            for row in 0..n {
                logit_block[row * k + c] = scale;
            }
        }
        let zt = tape.constant(&z);
        let lg = tape.constant(&Tensor::new(vec![n, k], logit_block)?);
        tape.concat_cols(zt, lg)?
    } else {
        tape.constant(&z)
    };

    let encode = |t: &mut Tape, r: NodeId| -> Result<NodeId> {
        let h = tb.forward(t, r)?;
        let m = mb.forward(t, h)?;
        match &cb {
            Some(c) => {
                let lg = c.forward(t, h)?;
                t.concat_cols(m, lg)
            }
            None => Ok(m),
        }
    };
    let r0 = tape.constant(&cfg.init_r(n, input_len));
    let (r_hat, _) = extraction_loop(&mut tape, encode, target, r0, cfg)?;
    Tensor::new(vec![n, input_len], tape.value(r_hat).to_vec())
}

/// Linear interpolation between two latents, endpoints inclusive.
pub fn interpolate(z_a: &Tensor, z_b: &Tensor, steps: usize) -> Result<Vec<Tensor>> {
    if z_a.shape != z_b.shape {
        return Err(Error::shape(format!(
            "latent extents differ: {:?} vs {:?}",
            z_a.shape, z_b.shape
        )));
    }
    if steps < 2 {
        return Err(Error::InvalidArg("interpolate needs steps >= 2".into()));
    }
    let mut out = Vec::with_capacity(steps);
    for i in 0..steps {
        let t = i as f64 / (steps - 1) as f64;
        let values = z_a
            .values
            .iter()
            .zip(&z_b.values)
            .map(|(a, b)| a * (1.0 - t) + b * t)
            .collect();
        out.push(Tensor::new(z_a.shape.clone(), values)?);
    }
    Ok(out)
}
