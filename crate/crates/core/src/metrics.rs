//! FID, paired LPIPS distance, LPIPS cluster and latent diagnostics.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, numeric, Error, Result};
use crate::latent::ExtendedLatent;
use crate::perceptual::{lpips, lpips_from_features, FeatureBackbone, PerceptualWeights};

/// Eigenvalue floor of the matrix square root.
pub const EIGEN_FLOOR: f64 = 1e-10;

/// Images per backbone call when extracting features.
const CHUNK: usize = 32;

/// `(N, d)` tensor to a row-major matrix.
pub fn feature_matrix(t: &Tensor) -> Result<DMatrix<f64>> {
    let (n, d) = t.dims2().map_err(|_| invalid!("features must be a 2-D (N, d) matrix, got {:?}", t.dims()))?;
    let data: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    Ok(DMatrix::from_row_slice(n, d, &data))
}

/// Sample mean and unbiased covariance of the rows of `m`.
pub fn gaussian_stats(m: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = m.nrows();
    if n < 2 {
        return Err(invalid!("need at least 2 samples, got {n}"));
    }
    let mean = m.row_mean().transpose();
    let mut centered = m.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mean, cov))
}

fn clamped_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for v in eig.eigenvalues.iter_mut() {
        if v.is_nan() || *v < -1e-6 * scale {
            return Err(numeric!("{what} is not positive semi-definite (eigenvalue {v})"));
        }
        *v = v.max(EIGEN_FLOOR);
    }
    Ok(eig)
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = clamped_eigen(m, "covariance")?;
    let roots = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(&eig.eigenvectors * roots * eig.eigenvectors.transpose())
}

/// Fréchet distance between two Gaussians.
pub fn frechet_distance(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> Result<f64> {
    if mu_a.len() != mu_b.len() || cov_a.shape() != cov_b.shape() || cov_a.nrows() != mu_a.len() {
        return Err(invalid!("feature dimensions differ: {} vs {}", mu_a.len(), mu_b.len()));
    }
    // Tr((Σa Σb)^½) = Tr((Σa^½ Σb Σa^½)^½), which is symmetric.
    let root_a = psd_sqrt(cov_a)?;
    let inner = &root_a * cov_b * &root_a;
    let cross: f64 = clamped_eigen(&inner, "covariance product")?.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let diff = mu_a - mu_b;
    let value = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(numeric!("FID is not finite"));
    }
    Ok(value.max(0.0))
}

pub fn fid_from_matrices(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(invalid!("feature dimensions differ: {} vs {}", a.ncols(), b.ncols()));
    }
    let (mu_a, cov_a) = gaussian_stats(a)?;
    let (mu_b, cov_b) = gaussian_stats(b)?;
    frechet_distance(&mu_a, &cov_a, &mu_b, &cov_b)
}

/// FID between two `(N, d)` / `(M, d)` feature sets.
pub fn fid(feats_a: &Tensor, feats_b: &Tensor) -> Result<f64> {
    fid_from_matrices(&feature_matrix(feats_a)?, &feature_matrix(feats_b)?)
}

/// Spatially averaged activations of the backbone's penultimate tap, `(N, C)`.
pub fn fid_features(images: &Tensor, backbone: &dyn FeatureBackbone) -> Result<Tensor> {
    let taps = backbone.num_taps();
    if taps < 2 {
        return Err(invalid!("FID features need a backbone with >= 2 taps"));
    }
    let n = images.dim(0)?;
    let mut rows = Vec::new();
    let mut start = 0;
    while start < n {
        let len = CHUNK.min(n - start);
        let f = backbone.features(&images.narrow(0, start, len)?)?;
        rows.push(f[taps - 2].mean((2, 3))?.to_dtype(DType::F64)?.detach());
        start += len;
    }
    Ok(Tensor::cat(&rows, 0)?)
}

/// Mean LPIPS over paired inputs and outputs.
pub fn lpips_distance_eval(
    inputs: &Tensor,
    outputs: &Tensor,
    backbone: &dyn FeatureBackbone,
    weights: &PerceptualWeights,
) -> Result<f64> {
    let (n, m) = (inputs.dim(0)?, outputs.dim(0)?);
    if n != m {
        return Err(invalid!("{n} inputs paired with {m} outputs"));
    }
    if n == 0 {
        return Err(invalid!("no image pairs"));
    }
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let len = CHUNK.min(n - start);
        let d = lpips(&inputs.narrow(0, start, len)?, &outputs.narrow(0, start, len)?, backbone, weights)?;
        total += d.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
        start += len;
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub mean: f64,
    /// Population standard deviation across clusters.
    pub std: f64,
    /// Training-image index each generated image was assigned to.
    pub assignment: Vec<usize>,
    pub sizes: Vec<usize>,
    /// Mean intra-cluster distance per training image; `None` below 2 members.
    pub cluster_means: Vec<Option<f64>>,
}

fn single_features(images: &Tensor, backbone: &dyn FeatureBackbone) -> Result<Vec<Vec<Tensor>>> {
    (0..images.dim(0)?).map(|i| backbone.features(&images.narrow(0, i, 1)?)).collect()
}

fn distance(a: &[Tensor], b: &[Tensor], weights: &PerceptualWeights) -> Result<f64> {
    Ok(lpips_from_features(a, b, weights)?.to_dtype(DType::F64)?.flatten_all()?.get(0)?.to_scalar::<f64>()?)
}

/// Assigns each generated image to its nearest training image (lowest index
/// on ties) and averages pairwise distances inside each cluster.
pub fn lpips_cluster(
    generated: &Tensor,
    training: &Tensor,
    backbone: &dyn FeatureBackbone,
    weights: &PerceptualWeights,
) -> Result<ClusterStats> {
    let k = training.dim(0)?;
    if k == 0 {
        return Err(invalid!("no training images"));
    }
    let fg = single_features(generated, backbone)?;
    let ft = single_features(training, backbone)?;
    let mut assignment = Vec::with_capacity(fg.len());
    for g in &fg {
        let mut best = (f64::INFINITY, 0);
        for (j, t) in ft.iter().enumerate() {
            let d = distance(g, t, weights)?;
            if d < best.0 {
                best = (d, j);
            }
        }
        assignment.push(best.1);
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &c) in assignment.iter().enumerate() {
        members[c].push(i);
    }
    let mut cluster_means = Vec::with_capacity(k);
    for m in &members {
        if m.len() < 2 {
            cluster_means.push(None);
            continue;
        }
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for (a, &i) in m.iter().enumerate() {
            for &j in &m[a + 1..] {
                sum += distance(&fg[i], &fg[j], weights)?;
                pairs += 1;
            }
        }
        cluster_means.push(Some(sum / pairs as f64));
    }
    let values: Vec<f64> = cluster_means.iter().flatten().copied().collect();
    if values.is_empty() {
        return Err(Error::UndefinedMetric("no cluster has two or more members".into()));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64).sqrt();
    Ok(ClusterStats { mean, std, assignment, sizes: members.iter().map(Vec::len).collect(), cluster_means })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportCounts {
    pub fid_generated: usize,
    pub fid_reference: usize,
    pub lpips_distance_pairs: usize,
    pub lpips_cluster_generated: usize,
    pub lpips_cluster_training: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fid: Option<f64>,
    pub lpips_distance_mean: Option<f64>,
    pub lpips_cluster_mean: Option<f64>,
    pub lpips_cluster_std: Option<f64>,
    pub counts: ReportCounts,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("fid", self.fid),
            ("lpips_distance_mean", self.lpips_distance_mean),
            ("lpips_cluster_mean", self.lpips_cluster_mean),
            ("lpips_cluster_std", self.lpips_cluster_std),
        ];
        for (name, v) in fields {
            if let Some(v) = v {
                if !v.is_finite() || v < 0.0 {
                    return Err(numeric!("{name} = {v} is not a finite nonnegative value"));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `mean/std` as printed in result tables.
    pub fn cluster_summary(&self) -> Option<String> {
        Some(format!("{:.3}/{:.2}", self.lpips_cluster_mean?, self.lpips_cluster_std?))
    }
}

/// Raw moments of one label's codes, each Z+ row counted as one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMoments {
    pub label: String,
    pub codes: usize,
    pub mean_norm: f64,
    pub covariance_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub x: f64,
    pub y: f64,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticExport {
    pub rows: Vec<EmbeddingRow>,
    pub moments: Vec<LabelMoments>,
}

impl DiagnosticExport {
    /// Tab-separated `x, y, label` table with a header line.
    pub fn to_delimited(&self) -> String {
        let mut out = String::from("x\ty\tlabel\n");
        for r in &self.rows {
            out.push_str(&format!("{}\t{}\t{}\n", r.x, r.y, r.label));
        }
        out
    }
}

/// Per-coordinate mean-vector norm and Frobenius distance of the unbiased
/// covariance from identity, over the rows of `(N, d)`.
pub fn moment_stats(rows: &Tensor) -> Result<(f64, f64)> {
    let m = feature_matrix(rows)?;
    let (mean, cov) = gaussian_stats(&m)?;
    let eye = DMatrix::<f64>::identity(cov.nrows(), cov.ncols());
    Ok((mean.norm(), (cov - eye).norm()))
}

/// Stacks every row of every code into a `(Σn, d)` tensor.
pub fn code_rows(codes: &[ExtendedLatent]) -> Result<Tensor> {
    let first = codes.first().ok_or_else(|| invalid!("no codes"))?;
    let d = first.dim();
    let mut data = Vec::new();
    for c in codes {
        if c.dim() != d {
            return Err(invalid!("codes have mixed dimensions"));
        }
        data.extend(c.as_slice().iter().map(|&v| v as f64));
    }
    let n = data.len() / d;
    Ok(Tensor::from_vec(data, (n, d), &candle_core::Device::Cpu)?)
}

/// 2-D neighbor embedding of flattened codes plus per-label moments.
pub fn latent_diagnostic_export(codes: &[ExtendedLatent], labels: &[String], seed: u64) -> Result<DiagnosticExport> {
    if codes.len() != labels.len() {
        return Err(invalid!("{} codes with {} labels", codes.len(), labels.len()));
    }
    let mut by_label: BTreeMap<&str, Vec<ExtendedLatent>> = BTreeMap::new();
    for (c, l) in codes.iter().zip(labels) {
        by_label.entry(l.as_str()).or_default().push(c.clone());
    }
    if by_label.len() < 2 {
        return Err(invalid!("need at least 2 labels, got {}", by_label.len()));
    }
    let width = codes[0].as_slice().len();
    if codes.iter().any(|c| c.as_slice().len() != width) {
        return Err(invalid!("codes have mixed shapes"));
    }
    let mut moments = Vec::new();
    for (label, group) in &by_label {
        let (mean_norm, covariance_distance) = moment_stats(&code_rows(group)?)?;
        moments.push(LabelMoments { label: label.to_string(), codes: group.len(), mean_norm, covariance_distance });
    }

    let samples: Vec<Vec<f64>> = codes.iter().map(|c| c.as_slice().iter().map(|&v| v as f64).collect()).collect();
    let n = samples.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init_dist = Normal::new(0.0, 1e-4).expect("valid normal");
    let init: Vec<f64> = (0..n * 2).map(|_| init_dist.sample(&mut rng)).collect();
    let perplexity = (((n - 1) / 3) as f64).clamp(1.0, 20.0);
    let mut tsne: bhtsne::tSNE<f64, Vec<f64>> = bhtsne::tSNE::new(&samples);
    tsne.perplexity(perplexity).epochs(500).initial_embedding(init).exact(|a, b| {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
    });
    let emb = tsne.embedding();
    let rows = labels
        .iter()
        .enumerate()
        .map(|(i, l)| EmbeddingRow { x: emb[2 * i], y: emb[2 * i + 1], label: l.clone() })
        .collect();
    Ok(DiagnosticExport { rows, moments })
}
