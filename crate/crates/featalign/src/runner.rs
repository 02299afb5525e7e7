//! End-to-end experiment execution: dataset resolution, the training loop,
//! per-epoch metrics/checkpoints, and final image grids.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::align::{extract_feature, fa_train_step, FeatureConfig, RInit};
use crate::checkpoint::save_checkpoint;
use crate::config::{DatasetConfig, ExperimentConfig, Mode};
use crate::data::{load_image_folder, load_mnist_idx, synthetic_dataset, DatasetHandle};
use crate::error::{Error, Result};
use crate::gan::{gan_train_step, vfa_extract, GanBundle};
use crate::imgio::{emit_image_grid, pair_interleave};
use crate::local::{local_adam_states, local_reconstruct, local_train_step, local_units, slice_network};
use crate::metrics::{encoder_feature_stats, frechet_distance, network_feature_stats};
use crate::model::{build_network, forward, Network};
use crate::optim::AdamState;
use crate::tensor::Tensor;
use crate::vfa::{generate, vfa_train_step, VfaAdam, VfaConfig, VfaModel};

/// Examples reconstructed per evaluation tape; bounds peak memory.
const EVAL_CHUNK: usize = 64;
/// Cap on the held-out split.
const HELDOUT_CAP: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub recon_loss: f64,
    pub kl: Option<f64>,
    pub beta_mean: Option<f64>,
    pub g_loss: Option<f64>,
    pub d_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub epoch: usize,
    pub heldout_mse: f64,
    pub encoder_fd: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub epochs: Vec<EpochRow>,
    /// Held-out evaluations; epoch 0 is the untrained model.
    pub evals: Vec<EvalRow>,
}

/// Load and split the configured dataset into (train, held-out).
///
/// With an explicit `limit`, training takes exactly that many leading
/// examples and the held-out split the next up-to-1024. Otherwise the
/// held-out split is the trailing eighth, capped at 1024.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<(DatasetHandle, DatasetHandle)> {
    let (data, limit) = match &cfg.dataset {
        DatasetConfig::Mnist { images, labels, limit } => {
            (load_mnist_idx(images, labels)?, *limit)
        }
        DatasetConfig::SyntheticGaussians { variant, n } => {
            (synthetic_dataset(variant, *n, cfg.seed ^ 0x6461_7461)?, None)
        }
        DatasetConfig::ImageFolder { path } => (load_image_folder(path)?, None),
    };
    let want: usize = cfg.input_shape.iter().product();
    if data.input_len() != want {
        return Err(Error::config(
            "input_shape",
            format!(
                "configured extent {:?} ({} values) but dataset examples hold {}",
                cfg.input_shape,
                want,
                data.input_len()
            ),
        ));
    }
    let total = data.len();
    let (train_n, held_n) = match limit {
        Some(l) => {
            if l + 1 > total {
                return Err(Error::config(
                    "dataset.limit",
                    format!("{} training examples leave no held-out split of {}", l, total),
                ));
            }
            (l, HELDOUT_CAP.min(total - l))
        }
        None => {
            if total < 2 {
                return Err(Error::Data("need at least 2 examples to hold one out".into()));
            }
            let h = HELDOUT_CAP.min((total / 8).max(1));
            (total - h, h)
        }
    };
    Ok((data.slice(0, train_n)?, data.slice(train_n, held_n)?))
}

/// A trained (or in-training) model of any mode.
pub enum TrainedModel {
    Fa(Network),
    Vfa(VfaModel),
    VfaGan { model: VfaModel, bundle: GanBundle },
    Local(Network),
}

impl TrainedModel {
    pub fn all_finite(&self) -> bool {
        match self {
            TrainedModel::Fa(net) | TrainedModel::Local(net) => net.all_finite(),
            TrainedModel::Vfa(model) => model.all_finite(),
            TrainedModel::VfaGan { model, bundle } => {
                model.all_finite()
                    && bundle.generator.all_finite()
                    && bundle.discriminator.all_finite()
            }
        }
    }
}

/// Reconstruct a batch through feature extraction on a plain encoder,
/// chunked to bound tape size.
pub fn reconstruct_fa(net: &Network, x: &Tensor, feat: &FeatureConfig) -> Result<Tensor> {
    let (n, d) = (x.shape[0], x.shape[1]);
    let mut values = Vec::with_capacity(n * d);
    let mut start = 0;
    while start < n {
        let len = EVAL_CHUNK.min(n - start);
        let xb = Tensor::new(vec![len, d], x.values[start * d..(start + len) * d].to_vec())?;
        let z = forward(net, &xb)?;
        let res = extract_feature(net, &z, feat)?;
        values.extend_from_slice(&res.r_hat.values);
        start += len;
    }
    Tensor::new(vec![n, d], values)
}

/// Per-parametric-layer extraction settings for layer-wise reconstruction:
/// evaluation step count, zero init.
fn local_inference_cfgs(cfg: &ExperimentConfig, net: &Network) -> Vec<FeatureConfig> {
    let parametric = net.layers.iter().filter(|l| l.spec.is_parametric()).count();
    vec![
        FeatureConfig {
            tau: cfg.feature.tau,
            t_steps: cfg.inference_t_steps,
            r_init: RInit::Zeros,
        };
        parametric
    ]
}

/// Reconstruct a held-out batch with whatever the mode's reconstruction
/// path is. `tag` keeps variational eps draws distinct across evaluations.
pub fn reconstruct(
    model: &TrainedModel,
    cfg: &ExperimentConfig,
    x: &Tensor,
    tag: u64,
) -> Result<Tensor> {
    let feat = cfg.inference_feature();
    match model {
        TrainedModel::Fa(net) => reconstruct_fa(net, x, &feat),
        TrainedModel::Vfa(m) | TrainedModel::VfaGan { model: m, .. } => {
            let vcfg = VfaConfig { feature: feat, ..cfg.vfa_config()? };
            let (n, d) = (x.shape[0], x.shape[1]);
            let mut values = Vec::with_capacity(n * d);
            let mut start = 0;
            while start < n {
                let len = EVAL_CHUNK.min(n - start);
                let xb =
                    Tensor::new(vec![len, d], x.values[start * d..(start + len) * d].to_vec())?;
                let r = vfa_extract(m, &xb, &vcfg, tag.wrapping_add(start as u64))?;
                values.extend_from_slice(&r.values);
                start += len;
            }
            Tensor::new(vec![n, d], values)
        }
        TrainedModel::Local(net) => {
            let z = forward(net, x)?;
            local_reconstruct(net, &z, &local_inference_cfgs(cfg, net))
        }
    }
}

/// Fréchet distance between features of the originals and of their
/// reconstructions, extracted by `reference`. The runner always passes the
/// run's untrained (epoch-0) model so the feature extractor is fixed and the
/// distance stays comparable across epochs, mirroring how FID fixes its
/// feature network. None when either Gaussian fit fails (e.g. a degenerate
/// covariance).
pub fn encoder_fd(reference: &TrainedModel, x: &Tensor, recon: &Tensor) -> Option<f64> {
    let n = x.shape[0];
    let (sx, sr) = match reference {
        TrainedModel::Fa(net) | TrainedModel::Local(net) => (
            network_feature_stats(net, x, n).ok()?,
            network_feature_stats(net, recon, n).ok()?,
        ),
        TrainedModel::Vfa(m) | TrainedModel::VfaGan { model: m, .. } => (
            encoder_feature_stats(m, x, n).ok()?,
            encoder_feature_stats(m, recon, n).ok()?,
        ),
    };
    frechet_distance(&sx, &sr).ok()
}

/// Mean squared error per pixel over a whole batch.
pub fn per_pixel_mse(x: &Tensor, recon: &Tensor) -> Result<f64> {
    if x.shape != recon.shape {
        return Err(Error::shape(format!(
            "batch extents differ: {:?} vs {:?}",
            x.shape, recon.shape
        )));
    }
    let sum: f64 = x
        .values
        .iter()
        .zip(recon.values.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / x.len() as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn metrics_header(mode: Mode) -> &'static str {
    match mode {
        Mode::Fa | Mode::LocalFa => "epoch,recon_loss\n",
        Mode::Vfa => "epoch,recon_loss,kl,beta_mean\n",
        Mode::VfaGan => "epoch,recon_loss,kl,beta_mean,g_loss,d_loss\n",
    }
}

fn metrics_row(mode: Mode, row: &EpochRow) -> String {
    match mode {
        Mode::Fa | Mode::LocalFa => format!("{},{}\n", row.epoch, row.recon_loss),
        Mode::Vfa => format!(
            "{},{},{},{}\n",
            row.epoch,
            row.recon_loss,
            fmt_opt(row.kl),
            fmt_opt(row.beta_mean)
        ),
        Mode::VfaGan => format!(
            "{},{},{},{},{},{}\n",
            row.epoch,
            row.recon_loss,
            fmt_opt(row.kl),
            fmt_opt(row.beta_mean),
            fmt_opt(row.g_loss),
            fmt_opt(row.d_loss)
        ),
    }
}

/// Re-tag extraction non-finiteness with the global training step.
fn at_step<T>(step: u64, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { value, .. } => Error::NonFinite { step: step as usize, value },
        other => other,
    })
}

enum Trainee {
    Fa {
        net: Network,
        adam: AdamState,
    },
    Vfa {
        model: VfaModel,
        adam: VfaAdam,
        vcfg: VfaConfig,
    },
    VfaGan {
        model: VfaModel,
        adam: VfaAdam,
        bundle: GanBundle,
        g_adam: AdamState,
        d_adam: AdamState,
        vcfg: VfaConfig,
    },
    Local {
        net: Network,
        adams: Vec<AdamState>,
        cfgs: Vec<FeatureConfig>,
    },
}

impl Trainee {
    fn build(cfg: &ExperimentConfig, labeled: bool) -> Result<Trainee> {
        let input: Vec<usize> = cfg.input_shape.clone();
        match cfg.mode {
            Mode::Fa => {
                let net = build_network("encoder", &input, &cfg.layers, cfg.seed)?;
                let adam = AdamState::for_network(cfg.optimizer, &net);
                Ok(Trainee::Fa { net, adam })
            }
            Mode::LocalFa => {
                let net = build_network("encoder", &input, &cfg.layers, cfg.seed)?;
                let adams = local_adam_states(cfg.optimizer, &net)?;
                let cfgs = vec![cfg.feature; local_units(&net)?.len()];
                Ok(Trainee::Local { net, adams, cfgs })
            }
            Mode::Vfa | Mode::VfaGan => {
                let latent = cfg.latent.expect("validated");
                if cfg.classes.is_some() && !labeled {
                    return Err(Error::config(
                        "classes",
                        "class head configured but the dataset has no labels",
                    ));
                }
                let trunk = build_network("trunk", &input, &cfg.layers, cfg.seed)?;
                let model = VfaModel::build(trunk, latent, cfg.classes, cfg.seed)?;
                let adam = VfaAdam::for_model(cfg.optimizer, &model);
                let vcfg = cfg.vfa_config()?;
                if cfg.mode == Mode::Vfa {
                    return Ok(Trainee::Vfa { model, adam, vcfg });
                }
                let generator = build_network(
                    "generator",
                    &input,
                    cfg.generator_layers.as_ref().expect("validated"),
                    cfg.seed ^ 0x6765_6e65,
                )?;
                let discriminator = build_network(
                    "discriminator",
                    &input,
                    cfg.discriminator_layers.as_ref().expect("validated"),
                    cfg.seed ^ 0x6469_7363,
                )?;
                let g_adam = AdamState::for_network(cfg.optimizer, &generator);
                let d_adam = AdamState::for_network(cfg.optimizer, &discriminator);
                let bundle = GanBundle::new(generator, discriminator, cfg.lambda.expect("validated"))?;
                Ok(Trainee::VfaGan { model, adam, bundle, g_adam, d_adam, vcfg })
            }
        }
    }

    fn as_trained(&self) -> TrainedModel {
        match self {
            Trainee::Fa { net, .. } | Trainee::Local { net, .. } => TrainedModel::Fa(net.clone()),
            Trainee::Vfa { model, .. } => TrainedModel::Vfa(model.clone()),
            Trainee::VfaGan { model, bundle, .. } => TrainedModel::VfaGan {
                model: model.clone(),
                bundle: bundle.clone(),
            },
        }
    }

    /// The evaluation view; local mode reconstructs layer-wise.
    fn eval_model(&self) -> TrainedModel {
        match self {
            Trainee::Local { net, .. } => TrainedModel::Local(net.clone()),
            other => other.as_trained(),
        }
    }

    fn save(&self, out_dir: &Path, epoch: usize) -> Result<()> {
        match self {
            Trainee::Fa { net, adam } => {
                save_checkpoint(net, adam, &out_dir.join(format!("epoch-{:03}-encoder.faln", epoch)))
            }
            Trainee::Vfa { model, adam, .. } => save_vfa(model, adam, out_dir, epoch),
            Trainee::VfaGan { model, adam, bundle, g_adam, d_adam, .. } => {
                save_vfa(model, adam, out_dir, epoch)?;
                save_checkpoint(
                    &bundle.generator,
                    g_adam,
                    &out_dir.join(format!("epoch-{:03}-generator.faln", epoch)),
                )?;
                save_checkpoint(
                    &bundle.discriminator,
                    d_adam,
                    &out_dir.join(format!("epoch-{:03}-discriminator.faln", epoch)),
                )
            }
            Trainee::Local { net, adams, .. } => {
                for (i, (range, adam)) in local_units(net)?.iter().zip(adams.iter()).enumerate() {
                    let unit = slice_network(net, range)?;
                    save_checkpoint(
                        &unit,
                        adam,
                        &out_dir.join(format!("epoch-{:03}-unit-{:02}.faln", epoch, i)),
                    )?;
                }
                Ok(())
            }
        }
    }
}

fn save_vfa(model: &VfaModel, adam: &VfaAdam, out_dir: &Path, epoch: usize) -> Result<()> {
    save_checkpoint(&model.trunk, &adam.trunk, &out_dir.join(format!("epoch-{:03}-trunk.faln", epoch)))?;
    save_checkpoint(&model.mu_head, &adam.mu, &out_dir.join(format!("epoch-{:03}-mu.faln", epoch)))?;
    save_checkpoint(
        &model.logvar_head,
        &adam.logvar,
        &out_dir.join(format!("epoch-{:03}-logvar.faln", epoch)),
    )?;
    if let (Some(head), Some(state)) = (&model.class_head, &adam.class) {
        save_checkpoint(head, state, &out_dir.join(format!("epoch-{:03}-class.faln", epoch)))?;
    }
    Ok(())
}

/// Rebuild the untrained model a configuration starts from; deterministic in
/// (config, seed). Used as the fixed encoder-FD feature extractor.
pub fn untrained_model(cfg: &ExperimentConfig, labeled: bool) -> Result<TrainedModel> {
    Ok(Trainee::build(cfg, labeled)?.eval_model())
}

/// Load the model a finished run saved for `epoch`, verifying every stored
/// architecture against the configuration.
pub fn load_trained(cfg: &ExperimentConfig, epoch: usize) -> Result<TrainedModel> {
    cfg.validate()?;
    let dir = &cfg.out_dir;
    let part = |name: &str| -> PathBuf { dir.join(format!("epoch-{:03}-{}.faln", epoch, name)) };
    let load_net = |name: &str, reference: &Network| -> Result<Network> {
        let ck = crate::checkpoint::load_checkpoint(&part(name))?;
        ck.require_arch(&reference.arch())?;
        Ok(ck.network)
    };
    match cfg.mode {
        Mode::Fa => {
            let built = build_network("encoder", &cfg.input_shape, &cfg.layers, cfg.seed)?;
            Ok(TrainedModel::Fa(load_net("encoder", &built)?))
        }
        Mode::LocalFa => {
            let mut net = build_network("encoder", &cfg.input_shape, &cfg.layers, cfg.seed)?;
            for (i, range) in local_units(&net)?.iter().enumerate() {
                let reference = slice_network(&net, range)?;
                let loaded = load_net(&format!("unit-{:02}", i), &reference)?;
                for (dst, src) in net.layers[range.clone()].iter_mut().zip(loaded.layers) {
                    *dst = src;
                }
            }
            Ok(TrainedModel::Local(net))
        }
        Mode::Vfa | Mode::VfaGan => {
            let trunk = build_network("trunk", &cfg.input_shape, &cfg.layers, cfg.seed)?;
            let built = VfaModel::build(trunk, cfg.latent.expect("validated"), cfg.classes, cfg.seed)?;
            let model = VfaModel {
                trunk: load_net("trunk", &built.trunk)?,
                mu_head: load_net("mu", &built.mu_head)?,
                logvar_head: load_net("logvar", &built.logvar_head)?,
                class_head: match &built.class_head {
                    Some(head) => Some(load_net("class", head)?),
                    None => None,
                },
            };
            if cfg.mode == Mode::Vfa {
                return Ok(TrainedModel::Vfa(model));
            }
            let gen_ref = build_network(
                "generator",
                &cfg.input_shape,
                cfg.generator_layers.as_ref().expect("validated"),
                cfg.seed ^ 0x6765_6e65,
            )?;
            let disc_ref = build_network(
                "discriminator",
                &cfg.input_shape,
                cfg.discriminator_layers.as_ref().expect("validated"),
                cfg.seed ^ 0x6469_7363,
            )?;
            let bundle = GanBundle::new(
                load_net("generator", &gen_ref)?,
                load_net("discriminator", &disc_ref)?,
                cfg.lambda.expect("validated"),
            )?;
            Ok(TrainedModel::VfaGan { model, bundle })
        }
    }
}

/// Run one experiment end-to-end, writing metrics.csv, eval.csv, per-epoch
/// checkpoints, the resolved config, and final image grids into the output
/// directory. Fully deterministic in (config, seed).
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let out_dir = cfg.out_dir.clone();
    fs::create_dir_all(&out_dir)?;
    fs::write(
        out_dir.join("config.json"),
        serde_json::to_string_pretty(cfg).map_err(|e| Error::Other(e.to_string()))?,
    )?;

    let (train, heldout) = load_dataset(cfg)?;
    let use_labels = cfg.classes.is_some();
    let mut trainee = Trainee::build(cfg, train.labels.is_some())?;

    let mut metrics = fs::File::create(out_dir.join("metrics.csv"))?;
    metrics.write_all(metrics_header(cfg.mode).as_bytes())?;
    let mut evalcsv = fs::File::create(out_dir.join("eval.csv"))?;
    evalcsv.write_all(b"epoch,heldout_mse,encoder_fd\n")?;
    let mut layercsv = match cfg.mode {
        Mode::LocalFa => {
            let mut f = fs::File::create(out_dir.join("layer_losses.csv"))?;
            f.write_all(b"epoch,unit,recon_loss\n")?;
            Some(f)
        }
        _ => None,
    };

    let mut summary = RunSummary {
        out_dir: out_dir.clone(),
        epochs: Vec::new(),
        evals: Vec::new(),
    };

    // epoch 0: the untrained model's held-out error, for trained/untrained
    // ratios; it also stays around as the fixed encoder-FD feature extractor
    let x_held = heldout.batch(0, heldout.len())?;
    let reference = trainee.eval_model();
    let mut final_recon = {
        let recon = reconstruct(&reference, cfg, &x_held, 0x4556_0000)?;
        let row = EvalRow {
            epoch: 0,
            heldout_mse: per_pixel_mse(&x_held, &recon)?,
            encoder_fd: encoder_fd(&reference, &x_held, &recon),
        };
        evalcsv.write_all(
            format!("{},{},{}\n", row.epoch, row.heldout_mse, fmt_opt(row.encoder_fd)).as_bytes(),
        )?;
        summary.evals.push(row);
        recon
    };

    let mut step: u64 = 0;
    for epoch in 1..=cfg.epochs {
        let mut seen = 0usize;
        let mut recon_sum = 0.0;
        let mut kl_sum = 0.0;
        let mut beta_sum = 0.0;
        let mut g_sum = 0.0;
        let mut d_sum = 0.0;
        let mut unit_sums: Vec<f64> = Vec::new();

        let mut start = 0;
        while start < train.len() {
            let bs = cfg.batch_size.min(train.len() - start);
            let xb = train.batch(start, bs)?;
            let labels = if use_labels { train.batch_labels(start, bs) } else { None };
            let w = bs as f64;
            match &mut trainee {
                Trainee::Fa { net, adam } => {
                    let rep = at_step(step, fa_train_step(net, adam, &xb, &cfg.feature, cfg.grad_mode))?;
                    recon_sum += w * rep.recon_loss;
                }
                Trainee::Vfa { model, adam, vcfg } => {
                    let rep = at_step(
                        step,
                        vfa_train_step(model, adam, &xb, labels.as_deref(), vcfg, step),
                    )?;
                    recon_sum += w * rep.recon_loss;
                    kl_sum += w * rep.kl;
                    beta_sum += w * rep.beta_mean;
                }
                Trainee::VfaGan { model, adam, bundle, g_adam, d_adam, vcfg } => {
                    let rep = at_step(
                        step,
                        gan_train_step(
                            model,
                            adam,
                            bundle,
                            g_adam,
                            d_adam,
                            &xb,
                            labels.as_deref(),
                            vcfg,
                            step,
                        ),
                    )?;
                    recon_sum += w * rep.encoder.recon_loss;
                    kl_sum += w * rep.encoder.kl;
                    beta_sum += w * rep.encoder.beta_mean;
                    g_sum += w * rep.g_loss;
                    d_sum += w * rep.d_loss;
                }
                Trainee::Local { net, adams, cfgs } => {
                    let reps = at_step(step, local_train_step(net, adams, &xb, cfgs, cfg.grad_mode))?;
                    if unit_sums.is_empty() {
                        unit_sums = vec![0.0; reps.len()];
                    }
                    for (sum, rep) in unit_sums.iter_mut().zip(reps.iter()) {
                        *sum += w * rep.recon_loss;
                    }
                    recon_sum +=
                        w * reps.iter().map(|r| r.recon_loss).sum::<f64>() / reps.len() as f64;
                }
            }
            seen += bs;
            start += bs;
            step += 1;
        }

        let n = seen as f64;
        let row = EpochRow {
            epoch,
            recon_loss: recon_sum / n,
            kl: cfg.is_variational().then(|| kl_sum / n),
            beta_mean: cfg.is_variational().then(|| beta_sum / n),
            g_loss: (cfg.mode == Mode::VfaGan).then(|| g_sum / n),
            d_loss: (cfg.mode == Mode::VfaGan).then(|| d_sum / n),
        };
        metrics.write_all(metrics_row(cfg.mode, &row).as_bytes())?;
        if let Some(f) = layercsv.as_mut() {
            for (i, sum) in unit_sums.iter().enumerate() {
                f.write_all(format!("{},{},{}\n", epoch, i, sum / n).as_bytes())?;
            }
        }
        summary.epochs.push(row);

        trainee.save(&out_dir, epoch)?;

        let model = trainee.eval_model();
        let recon = reconstruct(&model, cfg, &x_held, 0x4556_0000 + ((epoch as u64) << 20))?;
        let eval = EvalRow {
            epoch,
            heldout_mse: per_pixel_mse(&x_held, &recon)?,
            encoder_fd: encoder_fd(&reference, &x_held, &recon),
        };
        evalcsv.write_all(
            format!("{},{},{}\n", eval.epoch, eval.heldout_mse, fmt_opt(eval.encoder_fd)).as_bytes(),
        )?;
        summary.evals.push(eval);
        final_recon = recon;
    }

    // final grids, image datasets only
    if heldout.cell_shape.len() >= 2 {
        let n = heldout.len().min(8);
        let d = heldout.input_len();
        let recon = Tensor::new(vec![n, d], final_recon.values[..n * d].to_vec())?;
        let orig = heldout.batch(0, n)?;
        let pairs = pair_interleave(&recon, &orig)?;
        emit_image_grid(&pairs, &heldout.cell_shape, n, 2, &out_dir.join("recon_grid.pgm"))?;
        if let Trainee::Vfa { model, .. } | Trainee::VfaGan { model, .. } = &trainee {
            let samples = generate(
                model,
                16,
                cfg.seed ^ 0x7361_6d70,
                None,
                0.0,
                &cfg.inference_feature(),
            )?;
            emit_image_grid(&samples, &heldout.cell_shape, 4, 4, &out_dir.join("samples.pgm"))?;
        }
    }
    Ok(summary)
}
