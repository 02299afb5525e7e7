//! Finite-difference gradient verification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{NodeId, Reduction, Tape, Tensor};
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar-valued tape function.
pub fn finite_diff_gradient<F>(f: &F, point: &Tensor, h: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArg(format!("finite-difference step must be > 0, got {}", h)));
    }
    let eval = |p: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(p);
        let loss = f(&mut tape, x)?;
        if tape.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(tape.shape(loss).to_vec()));
        }
        Ok(tape.scalar_value(loss))
    };
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.values[i] += h;
        let mut minus = point.clone();
        minus.values[i] -= h;
        grad.push((eval(&plus)? - eval(&minus)?) / (2.0 * h));
    }
    Ok(grad)
}

/// Per-coordinate relative error, falling back to absolute error for tiny
/// magnitudes (< 1e-8).
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let diff = (a - n).abs();
            let mag = a.abs().max(n.abs());
            if mag < 1e-8 {
                diff
            } else {
                diff / mag
            }
        })
        .fold(0.0, f64::max)
}

/// Compare tape gradients of `f` at `point` against central differences.
/// Returns the worst per-coordinate error.
pub fn grad_check<F>(f: &F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point);
    let loss = f(&mut tape, x)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(x)
        .ok_or_else(|| Error::Other("no gradient recorded for grad_check input".into()))?
        .to_vec();
    let numeric = finite_diff_gradient(f, point, h)?;
    Ok(max_rel_err(&analytic, &numeric))
}

type CheckFn = Box<dyn Fn(&mut Tape, NodeId) -> Result<NodeId>>;

struct OpCase {
    name: &'static str,
    shape: Vec<usize>,
    /// Keep sample points away from a kink at zero.
    avoid_zero: bool,
    f: CheckFn,
}

fn gaussian(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let values = (0..n)
        .map(|_| {
            let g: f64 = rng.sample(StandardNormal);
            g * scale
        })
        .collect();
    Tensor::new(shape, values).expect("static shape")
}

/// Wrap an op output into the scalar sum of its squares, so the check
/// exercises a non-constant upstream gradient.
fn sq_sum(tape: &mut Tape, y: NodeId) -> Result<NodeId> {
    let sq = tape.mul(y, y)?;
    Ok(tape.sum_all(sq))
}

fn cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let mut out: Vec<OpCase> = Vec::new();
    let mut case = |name: &'static str, shape: Vec<usize>, avoid_zero: bool, f: CheckFn| {
        out.push(OpCase { name, shape, avoid_zero, f });
    };

    let b = gaussian(rng, vec![4, 2], 1.0);
    case("matmul_lhs", vec![3, 4], false, Box::new(move |t, x| {
        let c = t.constant(&b);
        let y = t.matmul(x, c)?;
        sq_sum(t, y)
    }));
    let a = gaussian(rng, vec![3, 4], 1.0);
    case("matmul_rhs", vec![4, 2], false, Box::new(move |t, x| {
        let c = t.constant(&a);
        let y = t.matmul(c, x)?;
        sq_sum(t, y)
    }));
    case("transpose", vec![3, 4], false, Box::new(|t, x| {
        let y = t.transpose(x)?;
        sq_sum(t, y)
    }));

    let k = gaussian(rng, vec![3, 2, 3, 3], 0.5);
    case("conv2d_input", vec![2, 2, 4, 4], false, Box::new(move |t, x| {
        let c = t.constant(&k);
        let y = t.conv2d(x, c, 1, 1)?;
        sq_sum(t, y)
    }));
    let img = gaussian(rng, vec![2, 2, 4, 4], 0.5);
    case("conv2d_kernel", vec![3, 2, 2, 2], false, Box::new(move |t, x| {
        let c = t.constant(&img);
        let y = t.conv2d(c, x, 2, 0)?;
        sq_sum(t, y)
    }));

    let p = gaussian(rng, vec![2, 5], 1.0);
    case("add", vec![2, 5], false, Box::new({
        let p = p.clone();
        move |t, x| {
            let c = t.constant(&p);
            let y = t.add(x, c)?;
            sq_sum(t, y)
        }
    }));
    case("sub", vec![2, 5], false, Box::new({
        let p = p.clone();
        move |t, x| {
            let c = t.constant(&p);
            let y = t.sub(x, c)?;
            sq_sum(t, y)
        }
    }));
    case("neg", vec![2, 5], false, Box::new(|t, x| {
        let y = t.neg(x);
        sq_sum(t, y)
    }));
    case("mul", vec![2, 5], false, Box::new(move |t, x| {
        let c = t.constant(&p);
        let y = t.mul(x, c)?;
        sq_sum(t, y)
    }));
    // quartic in x: keep points away from zero where the gradient
    // underflows the comparison's absolute-error regime
    case("mul_self", vec![2, 5], true, Box::new(|t, x| {
        let y = t.mul(x, x)?;
        sq_sum(t, y)
    }));
    case("scale", vec![2, 5], false, Box::new(|t, x| {
        let y = t.scale(x, -1.7);
        sq_sum(t, y)
    }));
    case("add_const", vec![2, 5], false, Box::new(|t, x| {
        let y = t.add_const(x, 0.3);
        sq_sum(t, y)
    }));

    let big = gaussian(rng, vec![2, 5], 1.0);
    case("scale_by_scalar_tensor", vec![2, 5], false, Box::new(|t, x| {
        let s = t.scalar_const(0.7);
        let y = t.scale_by_scalar(x, s)?;
        sq_sum(t, y)
    }));
    case("scale_by_scalar_scalar", vec![1], false, Box::new(move |t, x| {
        let c = t.constant(&big);
        let y = t.scale_by_scalar(c, x)?;
        sq_sum(t, y)
    }));

    let mat = gaussian(rng, vec![4, 3], 1.0);
    let bias = gaussian(rng, vec![3], 1.0);
    case("add_bias_input", vec![4, 3], false, Box::new(move |t, x| {
        let c = t.constant(&bias);
        let y = t.add_bias(x, c)?;
        sq_sum(t, y)
    }));
    case("add_bias_bias", vec![3], false, Box::new(move |t, x| {
        let c = t.constant(&mat);
        let y = t.add_bias(c, x)?;
        sq_sum(t, y)
    }));

    let vol = gaussian(rng, vec![2, 3, 2, 2], 1.0);
    let cbias = gaussian(rng, vec![3], 1.0);
    case("add_chan_bias_input", vec![2, 3, 2, 2], false, Box::new(move |t, x| {
        let c = t.constant(&cbias);
        let y = t.add_chan_bias(x, c)?;
        sq_sum(t, y)
    }));
    case("add_chan_bias_bias", vec![3], false, Box::new(move |t, x| {
        let c = t.constant(&vol);
        let y = t.add_chan_bias(c, x)?;
        sq_sum(t, y)
    }));

    case("sum_rows", vec![3, 4], false, Box::new(|t, x| {
        let y = t.sum_rows(x)?;
        sq_sum(t, y)
    }));
    case("sum_cols", vec![3, 4], false, Box::new(|t, x| {
        let y = t.sum_cols(x)?;
        sq_sum(t, y)
    }));
    case("sum_all", vec![3, 4], false, Box::new(|t, x| {
        let y = t.sum_all(x);
        sq_sum(t, y)
    }));

    case("exp", vec![2, 4], false, Box::new(|t, x| {
        let y = t.exp(x);
        sq_sum(t, y)
    }));
    case("sinh", vec![2, 4], false, Box::new(|t, x| {
        let y = t.sinh(x);
        sq_sum(t, y)
    }));
    case("arsinh", vec![2, 4], false, Box::new(|t, x| {
        let y = t.arsinh(x);
        sq_sum(t, y)
    }));
    case("leaky_relu", vec![2, 4], true, Box::new(|t, x| {
        let y = t.leaky_relu(x, 0.01)?;
        sq_sum(t, y)
    }));

    case("reshape", vec![3, 4], false, Box::new(|t, x| {
        let y = t.reshape(x, vec![2, 6])?;
        sq_sum(t, y)
    }));
    let right = gaussian(rng, vec![3, 2], 1.0);
    case("concat_cols_lhs", vec![3, 4], false, Box::new({
        let right = right.clone();
        move |t, x| {
            let c = t.constant(&right);
            let y = t.concat_cols(x, c)?;
            sq_sum(t, y)
        }
    }));
    case("concat_cols_rhs", vec![3, 4], false, Box::new(move |t, x| {
        let c = t.constant(&right);
        let y = t.concat_cols(c, x)?;
        sq_sum(t, y)
    }));
    case("slice_cols", vec![3, 5], false, Box::new(|t, x| {
        let y = t.slice_cols(x, 1, 3)?;
        sq_sum(t, y)
    }));

    case("softmax_cross_entropy", vec![4, 5], false, Box::new(|t, x| {
        t.softmax_cross_entropy(x, &[0, 1, 2, 3])
    }));

    let target = gaussian(rng, vec![3, 4], 1.0);
    for (name, reduction) in [
        ("mse_sum", Reduction::Sum),
        ("mse_mean_batch", Reduction::MeanBatch),
        ("mse_mean_all", Reduction::MeanAll),
    ] {
        let target = target.clone();
        case(name, vec![3, 4], false, Box::new(move |t, x| {
            let c = t.constant(&target);
            t.mse(x, c, reduction)
        }));
    }

    // gradients-of-gradients: the loss is built from grad_nodes output
    case("grad_nodes_double", vec![2, 3], false, Box::new(|t, x| {
        let y = t.sinh(x);
        let aux = sq_sum(t, y)?;
        let g = t.grad_nodes(aux, &[x])?[0];
        sq_sum(t, g)
    }));

    out
}


/// Check every differentiable op against central differences over
/// `instances` random points each. Returns (op name, worst relative error)
/// per op.
pub fn op_sweep(instances: usize, h: f64, seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    for case in cases(&mut rng) {
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let mut point = gaussian(&mut rng, case.shape.clone(), 0.8);
            if case.avoid_zero {
                for v in &mut point.values {
                    // keep |v| >= 0.2 so finite differences never cross the
                    // kink
                    *v += if *v >= 0.0 { 0.2 } else { -0.2 };
                }
            }
            worst = worst.max(grad_check(&case.f, &point, h)?);
        }
        results.push((case.name.to_string(), worst));
    }
    Ok(results)
}
