//! Frechet-style distribution distance between image sets.
//!
//! Desk scale replaces the usual pretrained feature network with three
//! documented extractors: raw pixels, per-channel pooled statistics, or a
//! small frozen random conv net (the default). The distance itself is the
//! standard Gaussian Frechet formula
//! `|mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa Sb)^(1/2))`, evaluated through a
//! symmetric matrix square root.

use std::fmt;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::{conv, Array};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extractor {
    /// Flatten each image.
    RawPixels,
    /// Per-channel mean, variance and gradient energy (`d = 3 C`).
    PooledStats,
    /// Frozen 2-layer random conv net with per-channel global mean and
    /// standard deviation pooling (`d = 64`).
    FixedRandomConv { seed: u64 },
}

impl Extractor {
    pub fn parse(name: &str, seed: u64) -> Result<Self> {
        match name {
            "raw_pixels" => Ok(Extractor::RawPixels),
            "pooled_stats" => Ok(Extractor::PooledStats),
            "fixed_random_conv" => Ok(Extractor::FixedRandomConv { seed }),
            other => Err(Error::config(format!("unknown extractor {other:?}"))),
        }
    }
}

impl fmt::Display for Extractor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Extractor::RawPixels => write!(f, "raw_pixels"),
            Extractor::PooledStats => write!(f, "pooled_stats"),
            Extractor::FixedRandomConv { .. } => write!(f, "fixed_random_conv"),
        }
    }
}

/// Gaussian summary of a feature set.
#[derive(Debug, Clone)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// `[d, d]` symmetric covariance with the unbiased (N-1) denominator.
    pub cov: Array,
    pub count: usize,
}

fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Map `[C,H,W]` images to `[N, d]` feature rows.
pub fn extract_features(images: &[Array], extractor: &Extractor) -> Result<Array> {
    if images.len() < 2 {
        return Err(Error::config(format!(
            "need at least 2 images for feature statistics, got {}",
            images.len()
        )));
    }
    let shape = images[0].shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::shape(format!("images must be [C,H,W], got {shape:?}")));
    }
    for im in images {
        im.check_same_shape(&images[0], "extract_features")?;
    }
    let rows: Vec<Vec<f64>> = match extractor {
        Extractor::RawPixels => images.iter().map(|im| im.data().to_vec()).collect(),
        Extractor::PooledStats => images.iter().map(|im| pooled_stats_row(im)).collect(),
        Extractor::FixedRandomConv { seed } => {
            let net = RandomConvNet::new(shape[0], *seed);
            images
                .iter()
                .map(|im| net.features(im))
                .collect::<Result<Vec<_>>>()?
        }
    };
    let d = rows[0].len();
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in &rows {
        data.extend_from_slice(r);
    }
    Array::new(vec![images.len(), d], data)
}

/// Per-channel mean, biased variance and gradient energy. Gradient energy
/// is the mean squared forward difference over both axes.
fn pooled_stats_row(im: &Array) -> Vec<f64> {
    let (c, h, w) = (im.shape()[0], im.shape()[1], im.shape()[2]);
    let mut row = Vec::with_capacity(3 * c);
    for ci in 0..c {
        let plane = &im.data()[ci * h * w..(ci + 1) * h * w];
        let n = plane.len() as f64;
        let mean = pairwise_sum(plane) / n;
        let sq: Vec<f64> = plane.iter().map(|v| (v - mean) * (v - mean)).collect();
        let var = pairwise_sum(&sq) / n;
        let mut diffs = Vec::with_capacity(2 * h * w);
        for y in 0..h {
            for x in 0..w.saturating_sub(1) {
                let d = plane[y * w + x + 1] - plane[y * w + x];
                diffs.push(d * d);
            }
        }
        for y in 0..h.saturating_sub(1) {
            for x in 0..w {
                let d = plane[(y + 1) * w + x] - plane[y * w + x];
                diffs.push(d * d);
            }
        }
        let energy = if diffs.is_empty() { 0.0 } else { pairwise_sum(&diffs) / diffs.len() as f64 };
        row.extend_from_slice(&[mean, var, energy]);
    }
    row
}

/// Seeded, frozen conv-relu-conv-relu feature net with global mean/std
/// pooling per channel.
struct RandomConvNet {
    w1: Array,
    w2: Array,
}

const RANDOM_CONV_C1: usize = 16;
const RANDOM_CONV_C2: usize = 32;

impl RandomConvNet {
    fn new(channels: usize, seed: u64) -> Self {
        let mut rng = Prng::derive(seed, &[0x0f1d]);
        let uniform = |rng: &mut Prng, shape: &[usize], fan_in: usize| {
            let b = 1.0 / (fan_in as f64).sqrt();
            let numel: usize = shape.iter().product();
            let data = (0..numel).map(|_| rng.uniform(-b, b)).collect();
            Array::new(shape.to_vec(), data).expect("consistent shape")
        };
        let w1 = uniform(&mut rng, &[RANDOM_CONV_C1, channels, 3, 3], channels * 9);
        let w2 = uniform(&mut rng, &[RANDOM_CONV_C2, RANDOM_CONV_C1, 3, 3], RANDOM_CONV_C1 * 9);
        RandomConvNet { w1, w2 }
    }

    fn features(&self, im: &Array) -> Result<Vec<f64>> {
        let (c, h, w) = (im.shape()[0], im.shape()[1], im.shape()[2]);
        let x = Array::new(vec![1, c, h, w], im.data().to_vec())?;
        let h1 = conv::conv2d_forward(&x, &self.w1, 1, 1)?.map(|v| v.max(0.0));
        let h2 = conv::conv2d_forward(&h1, &self.w2, 1, 1)?.map(|v| v.max(0.0));
        let plane = h * w;
        let mut out = Vec::with_capacity(2 * RANDOM_CONV_C2);
        for ci in 0..RANDOM_CONV_C2 {
            let slice = &h2.data()[ci * plane..(ci + 1) * plane];
            let mean = pairwise_sum(slice) / plane as f64;
            let sq: Vec<f64> = slice.iter().map(|v| (v - mean) * (v - mean)).collect();
            out.push(mean);
            out.push((pairwise_sum(&sq) / plane as f64).sqrt());
        }
        Ok(out)
    }
}

/// Mean and unbiased covariance of `[N, d]` feature rows, accumulated
/// with pairwise summation so the reduction order is fixed.
pub fn feature_stats(features: &Array) -> Result<FeatureStats> {
    let shape = features.shape();
    if shape.len() != 2 {
        return Err(Error::shape(format!("features must be [N,d], got {shape:?}")));
    }
    let (n, d) = (shape[0], shape[1]);
    if n < 2 {
        return Err(Error::config("covariance undefined for fewer than 2 samples".to_string()));
    }
    let fd = features.data();
    let mut mean = vec![0.0; d];
    let mut col = vec![0.0; n];
    for j in 0..d {
        for i in 0..n {
            col[i] = fd[i * d + j];
        }
        mean[j] = pairwise_sum(&col) / n as f64;
    }
    let mut cov = Array::zeros(&[d, d]);
    let mut prod = vec![0.0; n];
    for j in 0..d {
        for k in j..d {
            for i in 0..n {
                prod[i] = (fd[i * d + j] - mean[j]) * (fd[i * d + k] - mean[k]);
            }
            let v = pairwise_sum(&prod) / (n - 1) as f64;
            cov.data_mut()[j * d + k] = v;
            cov.data_mut()[k * d + j] = v;
        }
    }
    Ok(FeatureStats { mean, cov, count: n })
}

fn check_square(m: &Array) -> Result<usize> {
    let shape = m.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::shape(format!("matrix must be square, got {shape:?}")));
    }
    Ok(shape[0])
}

/// Symmetric PSD square root via eigendecomposition; negative eigenvalues
/// within `-1e-10` are clamped to zero, anything lower is an error
/// carrying a condition-number diagnostic.
pub fn psd_sqrt(m: &Array) -> Result<Array> {
    let d = check_square(m)?;
    for j in 0..d {
        for k in 0..d {
            let asym = (m.data()[j * d + k] - m.data()[k * d + j]).abs();
            if asym > 1e-10 {
                return Err(Error::contract(format!(
                    "matrix not symmetric: |m[{j},{k}] - m[{k},{j}]| = {asym:e}"
                )));
            }
        }
    }
    let dm = DMatrix::from_row_slice(d, d, m.data());
    let sym = (&dm + dm.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let lambda_max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lambda_min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if lambda_min < -1e-10 {
        return Err(Error::contract(format!(
            "matrix not PSD: min eigenvalue {lambda_min:e} (condition {:e})",
            lambda_max / lambda_min.abs().max(f64::MIN_POSITIVE)
        )));
    }
    let sqrt_vals = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    let s = &eig.eigenvectors * sqrt_vals * eig.eigenvectors.transpose();
    let s = (&s + s.transpose()) * 0.5;
    let mut data = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            data.push(s[(i, j)]);
        }
    }
    Array::new(vec![d, d], data)
}

/// Ridge added to each covariance before the square root:
/// `1e-6 * trace / d`.
pub fn covariance_ridge(cov: &Array) -> f64 {
    let d = cov.shape()[0];
    let trace: f64 = (0..d).map(|i| cov.data()[i * d + i]).sum();
    1e-6 * trace / d as f64
}

fn ridged(cov: &Array, eps: f64) -> Array {
    let d = cov.shape()[0];
    let mut out = cov.clone();
    for i in 0..d {
        out.data_mut()[i * d + i] += eps;
    }
    out
}

/// Frechet distance between two Gaussian summaries.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::shape(format!(
            "feature dimensions differ: {} vs {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    let d = a.mean.len();
    let cov_a = ridged(&a.cov, covariance_ridge(&a.cov));
    let cov_b = ridged(&b.cov, covariance_ridge(&b.cov));

    let sqrt_a = psd_sqrt(&cov_a)?;
    let ma = DMatrix::from_row_slice(d, d, sqrt_a.data());
    let mb = DMatrix::from_row_slice(d, d, cov_b.data());
    let inner = &ma * mb * &ma;
    let mut inner_data = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            inner_data.push(inner[(i, j)]);
        }
    }
    let inner = Array::new(vec![d, d], inner_data)?;
    let cross = psd_sqrt(&inner)?;

    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let trace = |m: &Array| -> f64 { (0..d).map(|i| m.data()[i * d + i]).sum() };
    let fid = mean_term + trace(&cov_a) + trace(&cov_b) - 2.0 * trace(&cross);
    if fid < -1e-8 {
        return Err(Error::non_finite(format!("frechet distance {fid:e} below tolerance")));
    }
    Ok(fid.max(0.0))
}

/// Distance between two image sets under one extractor.
pub fn fid_between(real: &[Array], generated: &[Array], extractor: &Extractor) -> Result<f64> {
    let fa = feature_stats(&extract_features(real, extractor)?)?;
    let fb = feature_stats(&extract_features(generated, extractor)?)?;
    frechet_distance(&fa, &fb)
}

#[derive(Debug, Clone)]
pub struct FidReport {
    pub direction: String,
    pub extractor: String,
    pub n_real: usize,
    pub n_gen: usize,
    pub fid: f64,
    pub skipped: Vec<String>,
}

impl FidReport {
    /// Report grammar: a header line, then
    /// `direction, extractor, N_real, N_gen, FID`, then one
    /// `# skipped: <file>` line per unreadable input.
    pub fn render(&self) -> String {
        let mut s = String::from("direction, extractor, N_real, N_gen, FID\n");
        s.push_str(&format!(
            "{}, {}, {}, {}, {:.6}\n",
            self.direction, self.extractor, self.n_real, self.n_gen, self.fid
        ));
        for name in &self.skipped {
            s.push_str(&format!("# skipped: {name}\n"));
        }
        s
    }
}

/// Score a generated directory against a real directory and write the
/// report file. Images load at native size; both sets must share
/// dimensions. Unreadable files are listed and skipped.
pub fn fid_report(
    real_dir: &std::path::Path,
    gen_dir: &std::path::Path,
    extractor: &Extractor,
    channels: usize,
    direction: &str,
    out_path: &std::path::Path,
) -> Result<FidReport> {
    use crate::data::{load_folder_native, DomainTag};
    let real = load_folder_native(real_dir, channels, DomainTag::A)?;
    let gen = load_folder_native(gen_dir, channels, DomainTag::B)?;
    if real.dataset.item_shape() != gen.dataset.item_shape() {
        return Err(Error::shape(format!(
            "real images are {:?} but generated are {:?}",
            real.dataset.item_shape(),
            gen.dataset.item_shape()
        )));
    }
    let fid = fid_between(&real.dataset.items, &gen.dataset.items, extractor)?;
    let mut skipped = real.skipped;
    skipped.extend(gen.skipped);
    let report = FidReport {
        direction: direction.to_string(),
        extractor: extractor.to_string(),
        n_real: real.dataset.len(),
        n_gen: gen.dataset.len(),
        fid,
        skipped,
    };
    std::fs::write(out_path, report.render())?;
    Ok(report)
}
