//! Visual-feature pipeline: PCA compression of high-dimensional foundation
//! model embeddings, per-wheel feature encoding, and missing-data handling
//! with validity flags.

use crate::io::TensorBlob;
use crate::nn::{Activation, BoundDense, DenseSpec, ParamLayout};
use crate::tape::{Tape, VVar};
use crate::TdError;
use nalgebra::DMatrix;
use std::path::Path;

/// Default dimensionality of raw visual features.
pub const N_VFM_DEFAULT: usize = 384;
/// Default number of retained principal components.
pub const N_PCA_DEFAULT: usize = 40;

/// One per-wheel feature observation. A missing observation carries the
/// substituted training mean in `values` and `valid = false`.
#[derive(Clone, Debug)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub valid: bool,
}

impl FeatureVector {
    pub fn observed(values: Vec<f64>) -> Self {
        FeatureVector { values, valid: true }
    }

    /// Missing observation: values substituted with the frozen training mean.
    pub fn missing(mean: &[f64]) -> Self {
        FeatureVector { values: mean.to_vec(), valid: false }
    }

    /// Flag appended to the encoder input: +1 observed, -1 missing.
    pub fn flag(&self) -> f64 {
        if self.valid {
            1.0
        } else {
            -1.0
        }
    }
}

/// PCA basis: mean, orthonormal components (rows), explained variance per
/// component in descending order.
#[derive(Clone, Debug)]
pub struct PcaBasis {
    pub n_vfm: usize,
    pub n_pca: usize,
    mean: Vec<f64>,
    /// Row-major (n_pca x n_vfm); row i is component i.
    components: Vec<f64>,
    explained: Vec<f64>,
}

impl PcaBasis {
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &[f64] {
        &self.components
    }

    pub fn explained_variance(&self) -> &[f64] {
        &self.explained
    }

    /// Keep only the first `k` components. The retained rows are unchanged,
    /// so a truncated basis projects onto a prefix of the full projection.
    pub fn truncate(&self, k: usize) -> PcaBasis {
        assert!(k <= self.n_pca, "cannot truncate {} components to {k}", self.n_pca);
        PcaBasis {
            n_vfm: self.n_vfm,
            n_pca: k,
            mean: self.mean.clone(),
            components: self.components[..k * self.n_vfm].to_vec(),
            explained: self.explained[..k].to_vec(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), TdError> {
        let mut blob = TensorBlob::default();
        blob.push("pca.mean", 1, self.n_vfm, self.mean.clone());
        blob.push("pca.components", self.n_pca, self.n_vfm, self.components.clone());
        blob.push("pca.explained", 1, self.n_pca, self.explained.clone());
        blob.write(path)
    }

    pub fn load(path: &Path) -> Result<Self, TdError> {
        let blob = TensorBlob::read(path)?;
        let (_, n_vfm, mean) = blob.require("pca.mean", path)?;
        let (n_pca, n_vfm2, components) = blob.require("pca.components", path)?;
        let (_, n_pca2, explained) = blob.require("pca.explained", path)?;
        if n_vfm != n_vfm2 || n_pca != n_pca2 {
            return Err(TdError::format(path, "inconsistent PCA tensor shapes"));
        }
        Ok(PcaBasis {
            n_vfm,
            n_pca,
            mean: mean.to_vec(),
            components: components.to_vec(),
            explained: explained.to_vec(),
        })
    }
}

/// Fit a PCA basis by exact eigendecomposition of the sample covariance.
/// Fails if the data has rank below `n_pca`.
pub fn pca_fit(samples: &[Vec<f64>], n_pca: usize) -> Result<PcaBasis, TdError> {
    let n = samples.len();
    assert!(n >= 2, "need at least two samples");
    let d = samples[0].len();
    assert!(samples.iter().all(|s| s.len() == d), "inconsistent sample dims");
    assert!(n_pca >= 1 && n_pca <= d);

    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    let mut centered = DMatrix::<f64>::zeros(n, d);
    for (i, s) in samples.iter().enumerate() {
        for j in 0..d {
            centered[(i, j)] = s[j] - mean[j];
        }
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = cov.symmetric_eigen();

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let lambda_max = eig.eigenvalues[order[0]].max(0.0);
    let rank_tol = f64::max(lambda_max * 1e-10, 1e-12);
    let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > rank_tol).count();
    if rank < n_pca {
        return Err(TdError::RankDeficient { rank, requested: n_pca });
    }

    let mut components = vec![0.0; n_pca * d];
    let mut explained = vec![0.0; n_pca];
    for (row, &idx) in order[..n_pca].iter().enumerate() {
        explained[row] = eig.eigenvalues[idx].max(0.0);
        let col = eig.eigenvectors.column(idx);
        for j in 0..d {
            components[row * d + j] = col[j];
        }
    }
    Ok(PcaBasis { n_vfm: d, n_pca, mean, components, explained })
}

/// Project a raw feature vector: components (x - mean).
pub fn pca_project(basis: &PcaBasis, feature: &[f64]) -> Vec<f64> {
    assert_eq!(feature.len(), basis.n_vfm);
    let mut out = vec![0.0; basis.n_pca];
    for (i, o) in out.iter_mut().enumerate() {
        let row = &basis.components[i * basis.n_vfm..(i + 1) * basis.n_vfm];
        let mut acc = 0.0;
        for j in 0..basis.n_vfm {
            acc += row[j] * (feature[j] - basis.mean[j]);
        }
        *o = acc;
    }
    out
}

/// Approximate inverse of `pca_project`: mean + components^T p.
pub fn pca_reconstruct(basis: &PcaBasis, projected: &[f64]) -> Vec<f64> {
    assert_eq!(projected.len(), basis.n_pca);
    let mut out = basis.mean.clone();
    for i in 0..basis.n_pca {
        let row = &basis.components[i * basis.n_vfm..(i + 1) * basis.n_vfm];
        for j in 0..basis.n_vfm {
            out[j] += row[j] * projected[i];
        }
    }
    out
}

/// Number of wheels; fixed input order FL, FR, RL, RR everywhere.
pub const N_WHEELS: usize = 4;

/// The dynamics-relevant feature encoder: n_pca+1 -> 64 -> 32 -> n_encoder
/// with tanh hidden activations, applied independently per wheel.
#[derive(Clone, Copy, Debug)]
pub struct EncoderSpec {
    pub l1: DenseSpec,
    pub l2: DenseSpec,
    pub l3: DenseSpec,
    pub n_pca: usize,
    pub n_encoder: usize,
}

impl EncoderSpec {
    pub fn register(layout: &mut ParamLayout, n_pca: usize, n_encoder: usize) -> Self {
        let l1 = layout.dense("enc.1", n_pca + 1, 64, Activation::Tanh);
        let l2 = layout.dense("enc.2", 64, 32, Activation::Tanh);
        let l3 = layout.dense("enc.3", 32, n_encoder, Activation::Identity);
        EncoderSpec { l1, l2, l3, n_pca, n_encoder }
    }

    pub fn input_dim(&self) -> usize {
        self.n_pca + 1
    }

    /// Fill one encoder input column from a (possibly missing) observation.
    pub fn fill_input(&self, col: &mut [f64], feature: &FeatureVector) {
        assert_eq!(col.len(), self.input_dim());
        assert_eq!(feature.values.len(), self.n_pca);
        col[..self.n_pca].copy_from_slice(&feature.values);
        col[self.n_pca] = feature.flag();
    }

    /// Forward `n` input columns (column-major) through the three layers.
    pub fn forward_batch_f64(&self, theta: &[f64], input: &[f64], n: usize, out: &mut [f64]) {
        assert_eq!(input.len(), self.input_dim() * n);
        assert_eq!(out.len(), self.n_encoder * n);
        let mut h1 = vec![0.0; 64 * n];
        let mut h2 = vec![0.0; 32 * n];
        self.l1.forward_batch_f64(theta, input, n, &mut h1);
        self.l2.forward_batch_f64(theta, &h1, n, &mut h2);
        self.l3.forward_batch_f64(theta, &h2, n, out);
    }

    /// Encode four wheels and concatenate outputs in fixed wheel order.
    pub fn encode_f64(&self, theta: &[f64], wheels: &[FeatureVector; N_WHEELS], out: &mut [f64]) {
        assert_eq!(out.len(), N_WHEELS * self.n_encoder);
        let dim = self.input_dim();
        let mut input = vec![0.0; dim * N_WHEELS];
        for (w, feature) in wheels.iter().enumerate() {
            self.fill_input(&mut input[w * dim..(w + 1) * dim], feature);
        }
        self.forward_batch_f64(theta, &input, N_WHEELS, out);
    }

    pub fn bind<'t>(&self, tape: &'t Tape, theta: &[f64]) -> BoundEncoder<'t> {
        BoundEncoder {
            l1: self.l1.bind(tape, theta),
            l2: self.l2.bind(tape, theta),
            l3: self.l3.bind(tape, theta),
        }
    }
}

/// Encoder with weights registered on a tape; forwards batched columns.
#[derive(Clone, Copy)]
pub struct BoundEncoder<'t> {
    l1: BoundDense<'t>,
    l2: BoundDense<'t>,
    l3: BoundDense<'t>,
}

impl<'t> BoundEncoder<'t> {
    pub fn forward(&self, input: VVar<'t>, n: usize) -> VVar<'t> {
        self.l3.forward(self.l2.forward(self.l1.forward(input, n), n), n)
    }
}
