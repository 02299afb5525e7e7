//! Quantitative evaluation: streaming feature statistics, the Fréchet
//! distance between Gaussian fits, and reconstruction-loss summaries.
//!
//! The Fréchet metric here is computed over this crate's own encoder
//! features and is labeled "encoder-FD" in every output; it is not
//! comparable to Inception-based FID numbers.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::model::{forward, Network};
use crate::tensor::Tensor;
use crate::vfa::VfaModel;

/// Gaussian fit of a feature stream.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major [dim x dim], symmetric.
    pub cov: Vec<f64>,
    pub n: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// One-pass mean and covariance accumulator (Welford's update generalized
/// to the co-moment matrix).
#[derive(Debug, Clone)]
pub struct StatsAccumulator {
    dim: usize,
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
    delta: Vec<f64>,
}

impl StatsAccumulator {
    pub fn new(dim: usize) -> StatsAccumulator {
        StatsAccumulator {
            dim,
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim * dim],
            delta: vec![0.0; dim],
        }
    }

    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::shape(format!(
                "accumulator of dimension {} fed {} values",
                self.dim,
                x.len()
            )));
        }
        self.n += 1;
        let inv = 1.0 / self.n as f64;
        for i in 0..self.dim {
            self.delta[i] = x[i] - self.mean[i];
            self.mean[i] += self.delta[i] * inv;
        }
        for i in 0..self.dim {
            let di = self.delta[i];
            for j in 0..self.dim {
                // delta against the post-update residual
                self.m2[i * self.dim + j] += di * (x[j] - self.mean[j]);
            }
        }
        Ok(())
    }

    /// Unbiased covariance; requires at least two samples. The matrix is
    /// symmetrized to kill accumulation-order noise.
    pub fn finish(self) -> Result<FeatureStats> {
        if self.n < 2 {
            return Err(Error::InvalidArg(format!(
                "covariance needs at least 2 samples, saw {}",
                self.n
            )));
        }
        let d = self.dim;
        let denom = (self.n - 1) as f64;
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] = 0.5 * (self.m2[i * d + j] + self.m2[j * d + i]) / denom;
            }
        }
        Ok(FeatureStats { mean: self.mean, cov, n: self.n })
    }
}

/// Principal square root of a symmetric PSD matrix via eigendecomposition.
/// Eigenvalues below -1e-8 are rejected; tiny negatives are clamped to 0.
pub fn matrix_sqrt_psd(a: &[f64], dim: usize) -> Result<Vec<f64>> {
    if a.len() != dim * dim {
        return Err(Error::shape(format!("{} values for a {0}x{0} matrix", dim)));
    }
    let scale = a.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for i in 0..dim {
        for j in (i + 1)..dim {
            if (a[i * dim + j] - a[j * dim + i]).abs() > 1e-9 * scale {
                return Err(Error::InvalidArg(format!(
                    "matrix is not symmetric at ({}, {})",
                    i, j
                )));
            }
        }
    }
    let m = DMatrix::from_fn(dim, dim, |i, j| 0.5 * (a[i * dim + j] + a[j * dim + i]));
    let eig = SymmetricEigen::new(m);
    let mut lam = eig.eigenvalues.clone();
    for v in lam.iter_mut() {
        if *v < -1e-8 * scale.max(1.0) {
            return Err(Error::NotPsd(format!("eigenvalue {} below tolerance", *v)));
        }
        *v = v.max(0.0).sqrt();
    }
    let q = eig.eigenvectors;
    let root = &q * DMatrix::from_diagonal(&lam) * q.transpose();
    let mut out = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            out[i * dim + j] = root[(i, j)];
        }
    }
    Ok(out)
}

fn matmul_sq(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let v = a[i * d + k];
            if v == 0.0 {
                continue;
            }
            for j in 0..d {
                out[i * d + j] += v * b[k * d + j];
            }
        }
    }
    out
}

fn trace(a: &[f64], d: usize) -> f64 {
    (0..d).map(|i| a[i * d + i]).sum()
}

/// ||mu1 - mu2||^2 + tr(S1 + S2 - 2*sqrt(S1 S2)), with the matrix square
/// root taken through the symmetrized product sqrt(S1^1/2 S2 S1^1/2). A
/// slightly negative trace term from float error is clamped to 0.
pub fn frechet_distance(s1: &FeatureStats, s2: &FeatureStats) -> Result<f64> {
    let d = s1.dim();
    if d != s2.dim() {
        return Err(Error::shape(format!(
            "feature dimensions differ: {} vs {}",
            d,
            s2.dim()
        )));
    }
    let mean_term: f64 = s1
        .mean
        .iter()
        .zip(&s2.mean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let r1 = matrix_sqrt_psd(&s1.cov, d)?;
    let inner = matmul_sq(&matmul_sq(&r1, &s2.cov, d), &r1, d);
    let cross = matrix_sqrt_psd(&inner, d)?;
    let trace_term = trace(&s1.cov, d) + trace(&s2.cov, d) - 2.0 * trace(&cross, d);
    Ok(mean_term + trace_term.max(0.0))
}

/// Gaussian fit of a plain network's outputs over a dataset, streamed in
/// fixed-size chunks.
pub fn network_feature_stats(net: &Network, data: &Tensor, n: usize) -> Result<FeatureStats> {
    if n < 2 {
        return Err(Error::InvalidArg("feature statistics need n >= 2".into()));
    }
    if data.shape.len() != 2 || data.shape[0] < n {
        return Err(Error::shape(format!(
            "dataset {:?} cannot supply {} examples",
            data.shape, n
        )));
    }
    let width = data.shape[1];
    let out = net.output_len();
    let mut acc = StatsAccumulator::new(out);
    let chunk = 256;
    let mut start = 0;
    while start < n {
        let len = chunk.min(n - start);
        let slice = Tensor::new(
            vec![len, width],
            data.values[start * width..(start + len) * width].to_vec(),
        )?;
        let z = forward(net, &slice)?;
        for row in 0..len {
            acc.push(&z.values[row * out..(row + 1) * out])?;
        }
        start += len;
    }
    acc.finish()
}

/// Gaussian fit of the encoder's mu-head features over a dataset, streamed
/// in fixed-size chunks.
pub fn encoder_feature_stats(model: &VfaModel, data: &Tensor, n: usize) -> Result<FeatureStats> {
    if n < 2 {
        return Err(Error::InvalidArg("feature statistics need n >= 2".into()));
    }
    if data.shape.len() != 2 || data.shape[0] < n {
        return Err(Error::shape(format!(
            "dataset {:?} cannot supply {} examples",
            data.shape, n
        )));
    }
    let width = data.shape[1];
    let latent = model.latent_dim();
    let mut acc = StatsAccumulator::new(latent);
    let chunk = 256;
    let mut start = 0;
    while start < n {
        let len = chunk.min(n - start);
        let slice = Tensor::new(
            vec![len, width],
            data.values[start * width..(start + len) * width].to_vec(),
        )?;
        let (mu, _, _) = model.encode_stats(&slice)?;
        for row in 0..len {
            acc.push(&mu.values[row * latent..(row + 1) * latent])?;
        }
        start += len;
    }
    acc.finish()
}

/// Per-example squared L2 between a batch and its reconstruction.
pub fn l2_per_example(x: &Tensor, recon: &Tensor) -> Result<Vec<f64>> {
    if x.shape != recon.shape || x.shape.len() != 2 {
        return Err(Error::shape(format!(
            "batch extents differ or are not 2-D: {:?} vs {:?}",
            x.shape, recon.shape
        )));
    }
    let (n, d) = (x.shape[0], x.shape[1]);
    Ok((0..n)
        .map(|r| {
            x.values[r * d..(r + 1) * d]
                .iter()
                .zip(&recon.values[r * d..(r + 1) * d])
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        })
        .collect())
}

/// Reconstruction-quality summary for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconSummary {
    pub model: String,
    /// Per-example squared L2 losses.
    pub losses: Vec<f64>,
    pub encoder_fd: Option<f64>,
}

impl ReconSummary {
    pub fn mean(&self) -> f64 {
        if self.losses.is_empty() {
            return f64::NAN;
        }
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }

    pub fn median(&self) -> f64 {
        if self.losses.is_empty() {
            return f64::NAN;
        }
        let mut sorted = self.losses.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite losses"));
        let n = sorted.len();
        if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        }
    }
}

/// `model,mean_l2,median_l2,encoder_fd` rows; a model without an FD entry
/// leaves the column empty.
pub fn recon_summary_csv(summaries: &[ReconSummary]) -> String {
    let mut out = String::from("model,mean_l2,median_l2,encoder_fd\n");
    for s in summaries {
        let fd = s.encoder_fd.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", s.model, s.mean(), s.median(), fd));
    }
    out
}

/// Equal-width histogram of per-example losses over [lo, hi]; the final bin
/// is closed so hi itself is counted.
pub fn histogram(losses: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Vec<(f64, f64, usize)>> {
    if bins == 0 || !(hi > lo) {
        return Err(Error::InvalidArg("histogram needs bins >= 1 and hi > lo".into()));
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in losses {
        if v < lo || v > hi {
            continue;
        }
        let idx = (((v - lo) / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (lo + i as f64 * width, lo + (i + 1) as f64 * width, c))
        .collect())
}

/// `bin_low,bin_high,count` rows.
pub fn histogram_csv(bins: &[(f64, f64, usize)]) -> String {
    let mut out = String::from("bin_low,bin_high,count\n");
    for (lo, hi, c) in bins {
        out.push_str(&format!("{},{},{}\n", lo, hi, c));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_network, LayerSpec};
    use crate::vfa::{draw_standard_normal, substream};

    fn stats_of(rows: &[&[f64]]) -> FeatureStats {
        let mut acc = StatsAccumulator::new(rows[0].len());
        for r in rows {
            acc.push(r).unwrap();
        }
        acc.finish().unwrap()
    }

    #[test]
    fn constant_stream_has_zero_covariance() {
        let s = stats_of(&[&[1.5, -2.0], &[1.5, -2.0], &[1.5, -2.0]]);
        assert_eq!(s.mean, vec![1.5, -2.0]);
        assert!(s.cov.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn covariance_uses_the_unbiased_denominator() {
        let s = stats_of(&[&[0.0], &[2.0]]);
        assert!((s.mean[0] - 1.0).abs() < 1e-15);
        // sum of squared deviations 2, over n-1 = 1
        assert!((s.cov[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn interleavings_agree() {
        let a: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()])
            .collect();
        let fwd: Vec<&[f64]> = a.iter().map(|v| v.as_slice()).collect();
        let mut shuffled = fwd.clone();
        shuffled.reverse();
        let s1 = stats_of(&fwd);
        let s2 = stats_of(&shuffled);
        for (x, y) in s1.mean.iter().zip(&s2.mean) {
            assert!((x - y).abs() < 1e-10);
        }
        for (x, y) in s1.cov.iter().zip(&s2.cov) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn standard_normal_covariance_is_near_identity() {
        let d = 4;
        let n = 100_000;
        let mut rng = substream(17, 0);
        let data = draw_standard_normal(&mut rng, vec![n, d]);
        let mut acc = StatsAccumulator::new(d);
        for r in 0..n {
            acc.push(&data.values[r * d..(r + 1) * d]).unwrap();
        }
        let s = acc.finish().unwrap();
        let mut worst = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((s.cov[i * d + j] - want).abs());
            }
        }
        assert!(worst < 0.05, "max deviation {}", worst);
    }

    #[test]
    fn too_few_samples_rejected() {
        let mut acc = StatsAccumulator::new(2);
        acc.push(&[0.0, 0.0]).unwrap();
        assert!(acc.finish().is_err());
    }

    #[test]
    fn sqrt_of_identity_and_diagonals() {
        let i2 = matrix_sqrt_psd(&[1.0, 0.0, 0.0, 1.0], 2).unwrap();
        for (a, b) in i2.iter().zip(&[1.0, 0.0, 0.0, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let r = matrix_sqrt_psd(&[4.0, 0.0, 0.0, 9.0], 2).unwrap();
        for (a, b) in r.iter().zip(&[2.0, 0.0, 0.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sqrt_squares_back_for_random_psd() {
        let d = 5;
        let mut rng = substream(19, 0);
        for _ in 0..5 {
            let g = draw_standard_normal(&mut rng, vec![d, d]);
            // A = G G^T is PSD
            let mut a = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    a[i * d + j] = (0..d).map(|k| g.values[i * d + k] * g.values[j * d + k]).sum();
                }
            }
            let r = matrix_sqrt_psd(&a, d).unwrap();
            let sq = matmul_sq(&r, &r, d);
            for (x, y) in sq.iter().zip(&a) {
                assert!((x - y).abs() < 1e-8, "{} vs {}", x, y);
            }
            // symmetric output
            for i in 0..d {
                for j in 0..d {
                    assert!((r[i * d + j] - r[j * d + i]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn sqrt_rejects_bad_inputs() {
        assert!(matrix_sqrt_psd(&[1.0, 0.5, -0.5, 1.0], 2).is_err()); // asymmetric
        assert!(matches!(
            matrix_sqrt_psd(&[-1.0, 0.0, 0.0, 1.0], 2),
            Err(crate::Error::NotPsd(_))
        ));
    }

    #[test]
    fn frechet_hand_values() {
        let s_base = FeatureStats { mean: vec![0.0, 0.0], cov: vec![1.0, 0.0, 0.0, 1.0], n: 100 };
        assert!(frechet_distance(&s_base, &s_base).unwrap() < 1e-8);
        let shifted = FeatureStats { mean: vec![1.0, 0.0], ..s_base.clone() };
        assert!((frechet_distance(&s_base, &shifted).unwrap() - 1.0).abs() < 1e-8);
        let a = FeatureStats { mean: vec![0.3], cov: vec![4.0], n: 50 };
        let b = FeatureStats { mean: vec![0.3], cov: vec![1.0], n: 50 };
        // 4 + 1 - 2*2 = 1
        assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn frechet_symmetry_and_nonnegativity() {
        let mut rng = substream(23, 0);
        for _ in 0..10 {
            let d = 3;
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
                let g = draw_standard_normal(rng, vec![d + 2, d]);
                let mut acc = StatsAccumulator::new(d);
                for r in 0..d + 2 {
                    acc.push(&g.values[r * d..(r + 1) * d]).unwrap();
                }
                acc.finish().unwrap()
            };
            let s1 = mk(&mut rng);
            let s2 = mk(&mut rng);
            let ab = frechet_distance(&s1, &s2).unwrap();
            let ba = frechet_distance(&s2, &s1).unwrap();
            assert!(ab >= 0.0);
            assert!((ab - ba).abs() < 1e-8, "{} vs {}", ab, ba);
        }
    }

    #[test]
    fn frechet_dimension_mismatch_rejected() {
        let a = FeatureStats { mean: vec![0.0], cov: vec![1.0], n: 10 };
        let b = FeatureStats { mean: vec![0.0, 0.0], cov: vec![1.0, 0.0, 0.0, 1.0], n: 10 };
        assert!(frechet_distance(&a, &b).is_err());
    }

    #[test]
    fn encoder_stats_on_constant_inputs() {
        let trunk = build_network(
            "trunk",
            &[3],
            &[LayerSpec::Linear { fan_in: 3, fan_out: 4, bias: true }],
            1,
        )
        .unwrap();
        let model = VfaModel::build(trunk, 2, None, 1).unwrap();
        let data = Tensor::new(vec![5, 3], vec![0.5; 15]).unwrap();
        let s = encoder_feature_stats(&model, &data, 5).unwrap();
        assert_eq!(s.n, 5);
        assert!(s.cov.iter().all(|v| v.abs() < 1e-20));
        assert!(encoder_feature_stats(&model, &data, 1).is_err());
    }

    #[test]
    fn summary_and_histogram_csv() {
        let s = ReconSummary {
            model: "aligned".into(),
            losses: vec![0.1, 0.3, 0.2, 0.4],
            encoder_fd: Some(1.25),
        };
        assert!((s.mean() - 0.25).abs() < 1e-15);
        assert!((s.median() - 0.25).abs() < 1e-15);
        let none = ReconSummary { model: "baseline".into(), losses: vec![0.5], encoder_fd: None };
        let csv = recon_summary_csv(&[s, none]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "model,mean_l2,median_l2,encoder_fd");
        assert_eq!(lines.next().unwrap(), "aligned,0.25,0.25,1.25");
        assert_eq!(lines.next().unwrap(), "baseline,0.5,0.5,");

        let bins = histogram(&[0.0, 0.05, 0.5, 1.0], 2, 0.0, 1.0).unwrap();
        assert_eq!(bins, vec![(0.0, 0.5, 2), (0.5, 1.0, 2)]);
        let hcsv = histogram_csv(&bins);
        assert!(hcsv.starts_with("bin_low,bin_high,count\n"));
        assert_eq!(hcsv.lines().count(), 3);
        assert!(histogram(&[0.0], 0, 0.0, 1.0).is_err());
    }

    #[test]
    fn network_stats_match_raw_stats_through_identity() {
        // an empty network is the identity, so its feature statistics are
        // the data statistics
        let net = crate::model::build_network("id", &[2], &[], 0).unwrap();
        let data = Tensor::new(vec![4, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]).unwrap();
        let via_net = network_feature_stats(&net, &data, 4).unwrap();
        let mut acc = StatsAccumulator::new(2);
        for row in data.values.chunks(2) {
            acc.push(row).unwrap();
        }
        let raw = acc.finish().unwrap();
        assert_eq!(via_net.mean, raw.mean);
        assert_eq!(via_net.cov, raw.cov);
    }

    #[test]
    fn perfect_reconstruction_masses_the_zero_bin() {
        let x = Tensor::new(vec![3, 2], vec![0.1, 0.9, 0.4, 0.2, 0.7, 0.6]).unwrap();
        let losses = l2_per_example(&x, &x).unwrap();
        let bins = histogram(&losses, 4, 0.0, 1.0).unwrap();
        assert_eq!(bins[0].2, 3);
        assert!(bins[1..].iter().all(|b| b.2 == 0));
    }
}
