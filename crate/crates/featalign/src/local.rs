//! Layer-local training and layer-by-layer reconstruction.
//!
//! A training unit is one parametric layer plus its following activation (if
//! any). Each unit trains against its own detached input, so no gradient
//! ever crosses a unit boundary and no global tape is materialized.
//! Reconstruction walks the raw layers in reverse: activation layers are
//! inverted exactly (sinh undoes arsinh), parametric layers run the
//! extraction loop.

use crate::align::{extract_feature, fa_train_step, FeatureConfig, GradMode, StepReport};
use crate::error::{Error, Result};
use crate::model::{forward, LayerSpec, Network};
use crate::optim::AdamState;
use crate::tensor::Tensor;

/// Layer index ranges of each training unit, in forward order.
pub fn local_units(net: &Network) -> Result<Vec<std::ops::Range<usize>>> {
    let mut units = Vec::new();
    let mut i = 0;
    while i < net.layers.len() {
        if !net.layers[i].spec.is_parametric() {
            return Err(Error::InvalidArg(format!(
                "layer {} is an activation with no preceding parametric layer",
                i
            )));
        }
        let mut end = i + 1;
        if end < net.layers.len() && net.layers[end].spec.is_activation() {
            end += 1;
        }
        units.push(i..end);
        i = end;
    }
    if units.is_empty() {
        return Err(Error::InvalidArg("network has no trainable layers".into()));
    }
    Ok(units)
}

/// Standalone copy of the layers in `range`, with the correct input shape.
pub fn slice_network(net: &Network, range: &std::ops::Range<usize>) -> Result<Network> {
    let mut shape = net.input_shape.clone();
    for layer in &net.layers[..range.start] {
        shape = layer.spec.output_shape(&shape)?;
    }
    Ok(Network {
        name: format!("{}[{}..{}]", net.name, range.start, range.end),
        input_shape: shape,
        layers: net.layers[range.clone()].to_vec(),
    })
}

/// One AdamState per training unit.
pub fn local_adam_states(cfg: crate::optim::AdamConfig, net: &Network) -> Result<Vec<AdamState>> {
    local_units(net)?
        .iter()
        .map(|r| Ok(AdamState::for_network(cfg, &slice_network(net, r)?)))
        .collect()
}

/// One local training step. Each unit sees its predecessor's pre-update
/// output, detached, and is updated exactly as a one-unit global step would
/// be; `cfgs` and `adams` are per-unit, in forward order.
pub fn local_train_step(
    net: &mut Network,
    adams: &mut [AdamState],
    x_batch: &Tensor,
    cfgs: &[FeatureConfig],
    mode: GradMode,
) -> Result<Vec<StepReport>> {
    let units = local_units(net)?;
    if cfgs.len() != units.len() || adams.len() != units.len() {
        return Err(Error::InvalidArg(format!(
            "{} units but {} configs and {} optimizer states",
            units.len(),
            cfgs.len(),
            adams.len()
        )));
    }
    let mut reports = Vec::with_capacity(units.len());
    let mut x = x_batch.clone();
    for ((range, cfg), adam) in units.iter().zip(cfgs).zip(adams.iter_mut()) {
        let mut unit = slice_network(net, range)?;
        // next unit's input comes from the pre-update parameters
        let x_next = forward(&unit, &x)?;
        let report = fa_train_step(&mut unit, adam, &x, cfg, mode)?;
        for (dst, src) in net.layers[range.clone()].iter_mut().zip(unit.layers) {
            *dst = src;
        }
        reports.push(report);
        x = x_next;
    }
    Ok(reports)
}

/// Inverts the network layer by layer: activations are inverted in closed
/// form, parametric layers by feature extraction against the current target.
/// `cfgs` holds one FeatureConfig per parametric layer, in forward order.
pub fn local_reconstruct(net: &Network, z_out: &Tensor, cfgs: &[FeatureConfig]) -> Result<Tensor> {
    for (i, layer) in net.layers.iter().enumerate() {
        if layer.spec.is_activation() && layer.spec != LayerSpec::Arsinh {
            return Err(Error::InvalidArg(format!(
                "layer {} ({:?}) has no exact inverse; reconstruction requires arsinh activations",
                i, layer.spec
            )));
        }
    }
    let parametric = net.layers.iter().filter(|l| l.spec.is_parametric()).count();
    if cfgs.len() != parametric {
        return Err(Error::InvalidArg(format!(
            "{} parametric layers but {} configs",
            parametric,
            cfgs.len()
        )));
    }
    if z_out.shape.len() != 2 || z_out.shape[1] != net.output_len() {
        return Err(Error::shape(format!(
            "target extent {:?} does not match network output of {} per example",
            z_out.shape,
            net.output_len()
        )));
    }
    let mut target = z_out.clone();
    let mut cfg_idx = parametric;
    for l in (0..net.layers.len()).rev() {
        if net.layers[l].spec.is_activation() {
            // arsinh inverted exactly
            for v in &mut target.values {
                *v = v.sinh();
            }
        } else {
            cfg_idx -= 1;
            let single = slice_network(net, &(l..l + 1))?;
            let res = extract_feature(&single, &target, &cfgs[cfg_idx])?;
            target = res.r_hat;
        }
    }
    Ok(target)
}
