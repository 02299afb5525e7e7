//! Least-squares adversarial refinement on top of the aligned features: a
//! generator that polishes extracted features and a discriminator scored
//! against +1 (real) / -1 (fake) targets, plus latent search through a
//! trained generator.


use crate::align::extraction_loop;
use crate::error::{Error, Result};
use crate::model::{clamp_weights, BindMode, LayerSpec, Network};
use crate::optim::AdamState;
use crate::tensor::{NodeId, Reduction, Tape, Tensor};
use crate::vfa::{
    draw_standard_normal, reparameterize_nodes, substream, vfa_train_step, VfaAdam, VfaConfig,
    VfaModel, VfaReport,
};

#[derive(Debug, Clone, PartialEq)]
pub struct GanBundle {
    /// Feature refiner: input and output extents equal the data extent.
    pub generator: Network,
    /// Image to one scalar per example.
    pub discriminator: Network,
    /// Perceptual-loss weight.
    pub lambda: f64,
}

impl GanBundle {
    pub fn new(generator: Network, discriminator: Network, lambda: f64) -> Result<GanBundle> {
        if generator.input_len() != generator.output_len() {
            return Err(Error::shape(format!(
                "generator must preserve the data extent, maps {} -> {}",
                generator.input_len(),
                generator.output_len()
            )));
        }
        if discriminator.output_len() != 1 {
            return Err(Error::shape(format!(
                "discriminator must emit one scalar per example, emits {}",
                discriminator.output_len()
            )));
        }
        if generator.input_len() != discriminator.input_len() {
            return Err(Error::shape("generator and discriminator disagree on the data extent"));
        }
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::InvalidArg(format!("lambda must be finite and >= 0, got {}", lambda)));
        }
        Ok(GanBundle { generator, discriminator, lambda })
    }

    /// Three same-width convolutions with LeakyReLU between them, preserving
    /// the [C,H,W] extent.
    pub fn conv_generator(data_shape: &[usize], filters: usize, seed: u64) -> Result<Network> {
        if data_shape.len() != 3 {
            return Err(Error::shape(format!("conv generator expects [C,H,W], got {:?}", data_shape)));
        }
        let c = data_shape[0];
        let conv = |in_ch, out_ch| LayerSpec::Conv2d {
            in_ch,
            out_ch,
            kernel: 3,
            stride: 1,
            padding: 1,
            bias: true,
        };
        crate::model::build_network(
            "generator",
            data_shape,
            &[
                conv(c, filters),
                LayerSpec::LeakyRelu { slope: 0.01 },
                conv(filters, filters),
                LayerSpec::LeakyRelu { slope: 0.01 },
                conv(filters, c),
            ],
            seed,
        )
    }
}

/// Per-step losses for the three networks.
#[derive(Debug, Clone, PartialEq)]
pub struct GanReport {
    pub encoder: VfaReport,
    pub g_loss: f64,
    pub d_loss: f64,
}

fn ones_node(tape: &mut Tape, n: usize, value: f64) -> NodeId {
    let mut t = Tensor::zeros(vec![n, 1]);
    t.values.fill(value);
    tape.constant(&t)
}

/// ||1 - D(G(r_hat))||^2 + lambda * (||mu(x) - mu(G(r_hat))||^2 +
/// ||sigma2(x) - sigma2(G(r_hat))||^2), mean over the batch.
pub fn loss_generator(
    bundle: &GanBundle,
    model: &VfaModel,
    r_hat: &Tensor,
    x: &Tensor,
) -> Result<f64> {
    let n = r_hat.shape[0];
    let mut tape = Tape::new();
    let gb = bundle.generator.bind(&mut tape, BindMode::Frozen);
    let db = bundle.discriminator.bind(&mut tape, BindMode::Frozen);
    let rn = tape.constant(r_hat);
    let g_out = gb.forward(&mut tape, rn)?;
    let d_fake = db.forward(&mut tape, g_out)?;
    let ones = ones_node(&mut tape, n, 1.0);
    let adv = tape.mse(ones, d_fake, Reduction::MeanBatch)?;
    let mut total = tape.value(adv)[0];
    if bundle.lambda != 0.0 {
        let (mu_x, s2_x, _) = model.encode_stats(x)?;
        let g_t = Tensor::new(vec![n, model.input_len()], tape.value(g_out).to_vec())?;
        let (mu_g, s2_g, _) = model.encode_stats(&g_t)?;
        let mx = tape.constant(&mu_x);
        let mg = tape.constant(&mu_g);
        let sx = tape.constant(&s2_x);
        let sg = tape.constant(&s2_g);
        let pm = tape.mse(mx, mg, Reduction::MeanBatch)?;
        let ps = tape.mse(sx, sg, Reduction::MeanBatch)?;
        total += bundle.lambda * (tape.value(pm)[0] + tape.value(ps)[0]);
    }
    Ok(total)
}

/// ||1 - D(x)||^2 + ||-1 - D(G(r_hat))||^2, mean over the batch.
pub fn loss_discriminator(bundle: &GanBundle, x: &Tensor, r_hat: &Tensor) -> Result<f64> {
    let n = x.shape[0];
    let mut tape = Tape::new();
    let gb = bundle.generator.bind(&mut tape, BindMode::Frozen);
    let db = bundle.discriminator.bind(&mut tape, BindMode::Frozen);
    let xn = tape.constant(x);
    let rn = tape.constant(r_hat);
    let d_real = db.forward(&mut tape, xn)?;
    let g_out = gb.forward(&mut tape, rn)?;
    let d_fake = db.forward(&mut tape, g_out)?;
    let ones = ones_node(&mut tape, n, 1.0);
    let neg = ones_node(&mut tape, n, -1.0);
    let lr = tape.mse(ones, d_real, Reduction::MeanBatch)?;
    let lf = tape.mse(neg, d_fake, Reduction::MeanBatch)?;
    Ok(tape.value(lr)[0] + tape.value(lf)[0])
}

/// The encoder's reconstruction path with frozen parameters: reparameterized
/// latent of x as the target, extraction for r_hat. Deterministic in
/// (eps_seed, step).
pub fn vfa_extract(model: &VfaModel, x: &Tensor, cfg: &VfaConfig, step: u64) -> Result<Tensor> {
    let batch = x.shape[0];
    let latent = model.latent_dim();
    let mut tape = Tape::new();
    let xn = tape.constant(x);
    let tb = model.trunk.bind(&mut tape, BindMode::Frozen);
    let mb = model.mu_head.bind(&mut tape, BindMode::Frozen);
    let lb = model.logvar_head.bind(&mut tape, BindMode::Frozen);
    let cb = model.class_head.as_ref().map(|h| h.bind(&mut tape, BindMode::Frozen));
    let h_x = tb.forward(&mut tape, xn)?;
    let mu_x = mb.forward(&mut tape, h_x)?;
    let lv_x = lb.forward(&mut tape, h_x)?;
    let mut eps_rng = substream(cfg.eps_seed, step);
    let eps = tape.constant(&draw_standard_normal(&mut eps_rng, vec![batch, latent]));
    let z_x = reparameterize_nodes(&mut tape, mu_x, lv_x, eps, cfg.std_reparam)?;
    let target = match &cb {
        Some(c) => {
            let lg = c.forward(&mut tape, h_x)?;
            tape.concat_cols(z_x, lg)?
        }
        None => z_x,
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
    let r0 = tape.constant(&cfg.feature.init_r(batch, model.input_len()));
    let (r_hat, _) = extraction_loop(&mut tape, encode, target, r0, &cfg.feature)?;
    Tensor::new(vec![batch, model.input_len()], tape.value(r_hat).to_vec())
}

/// One adversarial training step: encoder first, then discriminator, then
/// generator. The extracted feature is detached before entering G, so the
/// encoder never receives adversarial gradient.
pub fn gan_train_step(
    model: &mut VfaModel,
    vfa_adam: &mut VfaAdam,
    bundle: &mut GanBundle,
    g_adam: &mut AdamState,
    d_adam: &mut AdamState,
    x_batch: &Tensor,
    labels: Option<&[usize]>,
    cfg: &VfaConfig,
    step: u64,
) -> Result<GanReport> {
    let encoder = vfa_train_step(model, vfa_adam, x_batch, labels, cfg, step)?;
    let r_hat = vfa_extract(model, x_batch, cfg, step)?;
    let n = x_batch.shape[0];

    // discriminator step, generator frozen
    let d_loss = {
        let mut tape = Tape::new();
        let gb = bundle.generator.bind(&mut tape, BindMode::Frozen);
        let db = bundle.discriminator.bind(&mut tape, BindMode::Trainable);
        let xn = tape.constant(x_batch);
        let rn = tape.constant(&r_hat);
        let d_real = db.forward(&mut tape, xn)?;
        let g_out = gb.forward(&mut tape, rn)?;
        let d_fake = db.forward(&mut tape, g_out)?;
        let ones = ones_node(&mut tape, n, 1.0);
        let neg = ones_node(&mut tape, n, -1.0);
        let lr = tape.mse(ones, d_real, Reduction::MeanBatch)?;
        let lf = tape.mse(neg, d_fake, Reduction::MeanBatch)?;
        let total = tape.add(lr, lf)?;
        let v = tape.value(total)[0];
        if !v.is_finite() {
            return Err(Error::NonFinite { step: step as usize, value: v });
        }
        tape.backward(total)?;
        let layers = db.layers.clone();
        bundle.discriminator.pull_grads(&tape, &layers)?;
        crate::optim::adam_step(&mut bundle.discriminator, d_adam)?;
        clamp_weights(&mut bundle.discriminator);
        v
    };

    // generator step, discriminator and encoder frozen
    let g_loss = {
        let mut tape = Tape::new();
        let gb = bundle.generator.bind(&mut tape, BindMode::Trainable);
        let db = bundle.discriminator.bind(&mut tape, BindMode::Frozen);
        let rn = tape.constant(&r_hat);
        let g_out = gb.forward(&mut tape, rn)?;
        let d_fake = db.forward(&mut tape, g_out)?;
        let ones = ones_node(&mut tape, n, 1.0);
        let adv = tape.mse(ones, d_fake, Reduction::MeanBatch)?;
        let total = if bundle.lambda != 0.0 {
            let tb = model.trunk.bind(&mut tape, BindMode::Frozen);
            let mb = model.mu_head.bind(&mut tape, BindMode::Frozen);
            let lb = model.logvar_head.bind(&mut tape, BindMode::Frozen);
            let xn = tape.constant(x_batch);
            let h_x = tb.forward(&mut tape, xn)?;
            let mu_x = mb.forward(&mut tape, h_x)?;
            let lv_x = lb.forward(&mut tape, h_x)?;
            let s2_x = tape.exp(lv_x);
            let h_g = tb.forward(&mut tape, g_out)?;
            let mu_g = mb.forward(&mut tape, h_g)?;
            let lv_g = lb.forward(&mut tape, h_g)?;
            let s2_g = tape.exp(lv_g);
            let mu_x = tape.detach(mu_x);
            let s2_x = tape.detach(s2_x);
            let pm = tape.mse(mu_x, mu_g, Reduction::MeanBatch)?;
            let ps = tape.mse(s2_x, s2_g, Reduction::MeanBatch)?;
            let perc = tape.add(pm, ps)?;
            let perc = tape.scale(perc, bundle.lambda);
            tape.add(adv, perc)?
        } else {
            adv
        };
        let v = tape.value(total)[0];
        if !v.is_finite() {
            return Err(Error::NonFinite { step: step as usize, value: v });
        }
        tape.backward(total)?;
        let layers = gb.layers.clone();
        bundle.generator.pull_grads(&tape, &layers)?;
        crate::optim::adam_step(&mut bundle.generator, g_adam)?;
        clamp_weights(&mut bundle.generator);
        v
    };

    Ok(GanReport { encoder, g_loss, d_loss })
}

/// Mean discriminator output on a batch.
pub fn discriminator_score(d: &Network, x: &Tensor) -> Result<f64> {
    let out = crate::model::forward(d, x)?;
    let n = out.values.len().max(1);
    Ok(out.values.iter().sum::<f64>() / n as f64)
}

/// Plain gradient descent on argmin_z ||x - G(z)||^2; returns the best z
/// seen and its loss.
pub fn latent_search(g: &Network, x: &Tensor, steps: usize, lr: f64) -> Result<(Tensor, f64)> {
    if steps < 1 {
        return Err(Error::InvalidArg("latent_search needs steps >= 1".into()));
    }
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::InvalidArg(format!("lr must be finite and > 0, got {}", lr)));
    }
    let batch = *x
        .shape
        .first()
        .ok_or_else(|| Error::shape("latent_search expects a batched x"))?;
    let mut z = Tensor::zeros(vec![batch, g.input_len()]);
    let mut best = z.clone();
    let mut best_loss = f64::INFINITY;
    for step in 0..steps {
        let mut tape = Tape::new();
        let gb = g.bind(&mut tape, BindMode::Frozen);
        let zn = tape.leaf(&z);
        let out = gb.forward(&mut tape, zn)?;
        let xn = tape.constant(x);
        let x_flat = tape.reshape(xn, vec![batch, g.output_len()])?;
        // summed objective: each example's gradient is independent of the
        // batch size
        let loss = tape.mse(x_flat, out, Reduction::Sum)?;
        let v = tape.value(loss)[0] / batch.max(1) as f64;
        if !v.is_finite() {
            return Err(Error::NonFinite { step, value: v });
        }
        if v < best_loss {
            best_loss = v;
            best = z.clone();
        }
        tape.backward(loss)?;
        let grad = tape.grad(zn).ok_or_else(|| Error::MissingGradient("latent".into()))?;
        for (zi, gi) in z.values.iter_mut().zip(grad) {
            *zi -= lr * gi;
        }
    }
    // score the final iterate too
    let out = crate::model::forward(g, &z)?;
    let final_loss = x
        .values
        .iter()
        .zip(&out.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / batch.max(1) as f64;
    if final_loss < best_loss {
        best_loss = final_loss;
        best = z;
    }
    Ok((best, best_loss))
}
