//! Synthetic multi-class "encoder feature" datasets with token-level
//! ground truth, standing in for a frozen image encoder.
//!
//! Each class owns an anchor vector and an orthonormal basis of
//! `manifold_rank` directions. A normal sample's latent token at grid cell
//! `p` is `anchor + basis · f(p) + noise`, where `f` is a spatially smoothed
//! unit-variance Gaussian field. Encoder layer `l` sees `A_l z + b_l` for a
//! fixed affine map (layer 0 is a pure rotation). Tokens are rounded to
//! `f32` so datasets survive the on-disk format bit for bit.
//!
//! Anomalies replace a random rectangle with one of three corruptions:
//! tokens from another class, an offset orthogonal to the class basis, or
//! the token's deviation from its anchor amplified 2.5 times.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, DATASET_MAGIC};
use crate::error::{Error, Result};
use crate::rng::RandomState;
use crate::tensor::Tensor;

pub const SPEC_VERSION: u32 = 1;

/// Norm of the off-manifold offset, in units of the field's per-direction std.
const OFF_MANIFOLD_NORM: f64 = 3.0;
const AMPLITUDE_FACTOR: f64 = 2.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AnomalyKind {
    PatchSwap,
    OffManifold,
    Amplitude,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub version: u32,
    pub n_classes: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub d_model: usize,
    pub manifold_rank: usize,
    /// Spatial correlation length of the normal field, in tokens.
    pub smoothness: f64,
    pub normal_noise_std: f64,
    pub anomaly_kinds: Vec<AnomalyKind>,
    /// Range of the anomalous rectangle's area as a fraction of the grid.
    pub anomaly_area_frac: (f64, f64),
    pub n_encoder_layers: usize,
    pub seed: u64,
    pub train_per_class: usize,
    pub test_normal_per_class: usize,
    pub test_anomalous_per_class: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            version: SPEC_VERSION,
            n_classes: 8,
            grid_h: 16,
            grid_w: 16,
            d_model: 64,
            manifold_rank: 6,
            smoothness: 2.0,
            normal_noise_std: 0.05,
            anomaly_kinds: vec![
                AnomalyKind::PatchSwap,
                AnomalyKind::OffManifold,
                AnomalyKind::Amplitude,
            ],
            anomaly_area_frac: (0.05, 0.2),
            n_encoder_layers: 2,
            seed: 0,
            train_per_class: 32,
            test_normal_per_class: 8,
            test_anomalous_per_class: 8,
        }
    }
}

impl SyntheticSpec {
    pub fn n_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.version != SPEC_VERSION {
            p.push(format!("version: expected {SPEC_VERSION}, got {}", self.version));
        }
        if self.n_classes == 0 {
            p.push("n_classes: must be at least 1".into());
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            p.push(format!("grid: {}x{} is empty", self.grid_h, self.grid_w));
        }
        if self.d_model == 0 {
            p.push("d_model: must be at least 1".into());
        }
        if self.manifold_rank >= self.d_model {
            p.push(format!(
                "manifold_rank: {} must be below d_model {}",
                self.manifold_rank, self.d_model
            ));
        }
        if !(self.smoothness >= 0.0) {
            p.push(format!("smoothness: {} must be >= 0", self.smoothness));
        }
        if !(self.normal_noise_std >= 0.0) {
            p.push(format!("normal_noise_std: {} must be >= 0", self.normal_noise_std));
        }
        let (lo, hi) = self.anomaly_area_frac;
        if !(lo > 0.0 && hi <= 0.5 && lo <= hi) {
            p.push(format!(
                "anomaly_area_frac: ({lo}, {hi}) must satisfy 0 < min <= max <= 0.5"
            ));
        }
        if self.n_encoder_layers == 0 {
            p.push("n_encoder_layers: must be at least 1".into());
        }
        if self.test_anomalous_per_class > 0 && self.anomaly_kinds.is_empty() {
            p.push("anomaly_kinds: empty but anomalous test samples were requested".into());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(p))
        }
    }
}

/// A batch of token grids, one tensor per encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub grid: (usize, usize),
    /// `n_encoder_layers` tensors of shape `[B, h·w, d]`.
    pub layers: Vec<Tensor>,
    pub class_ids: Vec<usize>,
    /// Row-major `[B, h, w]`.
    pub anomaly_mask: Vec<bool>,
    pub image_labels: Vec<bool>,
}

impl TokenBatch {
    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn n_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn d_model(&self) -> usize {
        self.layers.first().map_or(0, |t| t.last_dim())
    }

    pub fn is_all_normal(&self) -> bool {
        !self.image_labels.iter().any(|l| *l) && !self.anomaly_mask.iter().any(|m| *m)
    }

    pub fn sample_mask(&self, i: usize) -> &[bool] {
        let n = self.n_tokens();
        &self.anomaly_mask[i * n..(i + 1) * n]
    }

    /// Checks shapes and the mask/label consistency invariant.
    pub fn validate(&self) -> Result<()> {
        let (b, n) = (self.len(), self.n_tokens());
        if self.layers.is_empty() {
            return Err(Error::Contract("token batch has no encoder layers".into()));
        }
        let d = self.d_model();
        for (l, t) in self.layers.iter().enumerate() {
            if t.shape() != [b, n, d] {
                return Err(Error::Dimension(format!(
                    "layer {l} has shape {:?}, expected {:?}",
                    t.shape(),
                    [b, n, d]
                )));
            }
        }
        if self.anomaly_mask.len() != b * n || self.image_labels.len() != b {
            return Err(Error::Dimension("mask/label lengths do not match batch".into()));
        }
        for i in 0..b {
            if self.image_labels[i] != self.sample_mask(i).iter().any(|m| *m) {
                return Err(Error::Contract(format!(
                    "sample {i}: image label disagrees with its token mask"
                )));
            }
        }
        Ok(())
    }

    /// Stacks batches sharing grid and width.
    pub fn concat(parts: &[TokenBatch]) -> Result<TokenBatch> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero batches".into()))?;
        let (n, d, nl) = (first.n_tokens(), first.d_model(), first.layers.len());
        let mut layers: Vec<Vec<f64>> = vec![Vec::new(); nl];
        let mut out = TokenBatch {
            grid: first.grid,
            layers: Vec::new(),
            class_ids: Vec::new(),
            anomaly_mask: Vec::new(),
            image_labels: Vec::new(),
        };
        for p in parts {
            if p.grid != first.grid || p.d_model() != d || p.layers.len() != nl {
                return Err(Error::Dimension("concat of incompatible token batches".into()));
            }
            for (acc, t) in layers.iter_mut().zip(&p.layers) {
                acc.extend_from_slice(t.data());
            }
            out.class_ids.extend(&p.class_ids);
            out.anomaly_mask.extend(&p.anomaly_mask);
            out.image_labels.extend(&p.image_labels);
        }
        let b = out.class_ids.len();
        out.layers = layers
            .into_iter()
            .map(|v| Tensor::new([b, n, d], v))
            .collect::<Result<_>>()?;
        Ok(out)
    }

    /// The samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> TokenBatch {
        let (n, d) = (self.n_tokens(), self.d_model());
        let per = n * d;
        let layers = self
            .layers
            .iter()
            .map(|t| {
                let mut v = Vec::with_capacity(indices.len() * per);
                for &i in indices {
                    v.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
                }
                Tensor::new([indices.len(), n, d], v).expect("select shape")
            })
            .collect();
        TokenBatch {
            grid: self.grid,
            layers,
            class_ids: indices.iter().map(|&i| self.class_ids[i]).collect(),
            anomaly_mask: indices
                .iter()
                .flat_map(|&i| self.sample_mask(i).iter().copied())
                .collect(),
            image_labels: indices.iter().map(|&i| self.image_labels[i]).collect(),
        }
    }
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

fn orthonormalize(vectors: &mut [Vec<f64>]) {
    for i in 0..vectors.len() {
        for j in 0..i {
            let dot: f64 = vectors[i].iter().zip(&vectors[j]).map(|(a, b)| a * b).sum();
            let vj = vectors[j].clone();
            for (a, b) in vectors[i].iter_mut().zip(&vj) {
                *a -= dot * b;
            }
        }
        let norm = vectors[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        for a in vectors[i].iter_mut() {
            *a /= norm;
        }
    }
}

#[derive(Clone, Debug)]
struct LayerMap {
    /// Row-major `d × d`.
    a: Vec<f64>,
    b: Vec<f64>,
}

impl LayerMap {
    fn apply(&self, z: &[f64], out: &mut [f64]) {
        let d = self.b.len();
        for i in 0..d {
            let row = &self.a[i * d..(i + 1) * d];
            out[i] = self.b[i] + row.iter().zip(z).map(|(a, x)| a * x).sum::<f64>();
        }
    }
}

/// The fixed generative law behind a spec: anchors, bases and layer maps.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    spec: SyntheticSpec,
    anchors: Vec<Vec<f64>>,
    bases: Vec<Vec<Vec<f64>>>,
    layer_maps: Vec<LayerMap>,
    kernel: Vec<Vec<(usize, f64)>>,
}

impl SyntheticWorld {
    pub fn new(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let root = RandomState::new(spec.seed);
        let (d, r) = (spec.d_model, spec.manifold_rank);
        let anchor_std = (r.max(1) as f64 / d as f64).sqrt();
        let mut anchors = Vec::new();
        let mut bases = Vec::new();
        for c in 0..spec.n_classes {
            let mut rng = root.derive("class", c as u64);
            anchors.push((0..d).map(|_| anchor_std * rng.normal()).collect());
            let mut basis: Vec<Vec<f64>> =
                (0..r).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
            orthonormalize(&mut basis);
            bases.push(basis);
        }
        let mut layer_maps = Vec::new();
        for l in 0..spec.n_encoder_layers {
            let mut rng = root.derive("layer", l as u64);
            let map = if l == 0 {
                let mut q: Vec<Vec<f64>> =
                    (0..d).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
                orthonormalize(&mut q);
                LayerMap {
                    a: q.concat(),
                    b: vec![0.0; d],
                }
            } else {
                let s = 0.5 / (d as f64).sqrt();
                let a = (0..d * d)
                    .map(|i| if i / d == i % d { 0.7 } else { 0.0 } + s * rng.normal())
                    .collect();
                let b = (0..d).map(|_| anchor_std * rng.normal()).collect();
                LayerMap { a, b }
            };
            layer_maps.push(map);
        }
        let kernel = smoothing_kernel(spec.grid_h, spec.grid_w, spec.smoothness);
        Ok(Self {
            spec: spec.clone(),
            anchors,
            bases,
            layer_maps,
            kernel,
        })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    pub fn anchor(&self, class: usize) -> &[f64] {
        &self.anchors[class]
    }

    pub fn basis(&self, class: usize) -> &[Vec<f64>] {
        &self.bases[class]
    }

    /// Latent tokens `[h·w, d]` of one normal sample.
    fn latent(&self, class: usize, rng: &mut RandomState) -> Vec<f64> {
        let (n, d, r) = (self.spec.n_tokens(), self.spec.d_model, self.spec.manifold_rank);
        let mut z: Vec<f64> = (0..n).flat_map(|_| self.anchors[class].iter().copied()).collect();
        for k in 0..r {
            let white: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let dir = &self.bases[class][k];
            for (p, taps) in self.kernel.iter().enumerate() {
                let f: f64 = taps.iter().map(|(q, w)| w * white[*q]).sum();
                for j in 0..d {
                    z[p * d + j] += f * dir[j];
                }
            }
        }
        if self.spec.normal_noise_std > 0.0 {
            for v in z.iter_mut() {
                *v += self.spec.normal_noise_std * rng.normal();
            }
        }
        z
    }

    fn project(&self, z: &[f64], layer: usize, out: &mut [f64]) {
        let d = self.spec.d_model;
        for (zt, ot) in z.chunks(d).zip(out.chunks_mut(d)) {
            self.layer_maps[layer].apply(zt, ot);
        }
    }

    /// A unit-free offset orthogonal to `class`'s basis, with the
    /// off-manifold norm.
    pub fn off_manifold_direction(&self, class: usize, rng: &mut RandomState) -> Vec<f64> {
        let d = self.spec.d_model;
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        // Two passes keep the residual at round-off level.
        for _ in 0..2 {
            for b in &self.bases[class] {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x *= OFF_MANIFOLD_NORM / norm);
        v
    }

    /// `count` normal samples of one class.
    pub fn generate_normal(&self, class: usize, count: usize, rng: &mut RandomState) -> Result<TokenBatch> {
        if class >= self.spec.n_classes {
            return Err(Error::Contract(format!(
                "class {class} out of range (n_classes = {})",
                self.spec.n_classes
            )));
        }
        let (n, d) = (self.spec.n_tokens(), self.spec.d_model);
        let nl = self.spec.n_encoder_layers;
        let mut layers = vec![vec![0.0; count * n * d]; nl];
        for s in 0..count {
            let z = self.latent(class, rng);
            for (l, buf) in layers.iter_mut().enumerate() {
                self.project(&z, l, &mut buf[s * n * d..(s + 1) * n * d]);
            }
        }
        Ok(TokenBatch {
            grid: (self.spec.grid_h, self.spec.grid_w),
            layers: layers
                .into_iter()
                .map(|v| Tensor::new([count, n, d], v.into_iter().map(f32_round).collect()))
                .collect::<Result<_>>()?,
            class_ids: vec![class; count],
            anomaly_mask: vec![false; count * n],
            image_labels: vec![false; count],
        })
    }

    /// Corrupts one random rectangle per sample of an all-normal batch.
    pub fn inject_anomaly(&self, batch: &TokenBatch, rng: &mut RandomState) -> Result<TokenBatch> {
        if !batch.is_all_normal() {
            return Err(Error::Contract("inject_anomaly needs an all-normal batch".into()));
        }
        let kinds: Vec<AnomalyKind> = self
            .spec
            .anomaly_kinds
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if kinds.is_empty() {
            return Err(Error::Contract("no anomaly kinds configured".into()));
        }
        if kinds.contains(&AnomalyKind::PatchSwap) && self.spec.n_classes < 2 {
            return Err(Error::Contract(
                "PatchSwap needs a donor class but n_classes = 1".into(),
            ));
        }
        let (h, w) = batch.grid;
        let (n, d) = (h * w, batch.d_model());
        let mut out = batch.clone();
        for s in 0..batch.len() {
            let class = batch.class_ids[s];
            let kind = kinds[rng.below(kinds.len())];
            let (r0, c0, rh, rw) = choose_rectangle(h, w, self.spec.anomaly_area_frac, rng);
            let cells: Vec<usize> = (r0..r0 + rh)
                .flat_map(|r| (c0..c0 + rw).map(move |c| r * w + c))
                .collect();
            for &t in &cells {
                out.anomaly_mask[s * n + t] = true;
            }
            out.image_labels[s] = true;
            match kind {
                AnomalyKind::PatchSwap => {
                    let donor = (class + 1 + rng.below(self.spec.n_classes - 1)) % self.spec.n_classes;
                    let z = self.latent(donor, rng);
                    for (l, t) in out.layers.iter_mut().enumerate() {
                        let mut tok = vec![0.0; d];
                        for &c in &cells {
                            self.layer_maps[l].apply(&z[c * d..(c + 1) * d], &mut tok);
                            let base = (s * n + c) * d;
                            for j in 0..d {
                                t.data_mut()[base + j] = f32_round(tok[j]);
                            }
                        }
                    }
                }
                AnomalyKind::OffManifold => {
                    let v = self.off_manifold_direction(class, rng);
                    for (l, t) in out.layers.iter_mut().enumerate() {
                        let map = &self.layer_maps[l];
                        let av: Vec<f64> = (0..d)
                            .map(|i| (0..d).map(|j| map.a[i * d + j] * v[j]).sum())
                            .collect();
                        for &c in &cells {
                            let base = (s * n + c) * d;
                            for j in 0..d {
                                let x = &mut t.data_mut()[base + j];
                                *x = f32_round(*x + av[j]);
                            }
                        }
                    }
                }
                AnomalyKind::Amplitude => {
                    for (l, t) in out.layers.iter_mut().enumerate() {
                        let mut centre = vec![0.0; d];
                        self.layer_maps[l].apply(&self.anchors[class], &mut centre);
                        for &c in &cells {
                            let base = (s * n + c) * d;
                            for j in 0..d {
                                let x = &mut t.data_mut()[base + j];
                                *x = f32_round(centre[j] + AMPLITUDE_FACTOR * (*x - centre[j]));
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Train split: all-normal, one batch per class.
    pub fn generate_train(&self) -> Result<Vec<TokenBatch>> {
        let root = RandomState::new(self.spec.seed);
        (0..self.spec.n_classes)
            .map(|c| {
                let parts = (0..self.spec.train_per_class)
                    .map(|i| {
                        let idx = (c * self.spec.train_per_class + i) as u64;
                        self.generate_normal(c, 1, &mut root.derive("train", idx))
                    })
                    .collect::<Result<Vec<_>>>()?;
                concat_or_empty(self, c, parts)
            })
            .collect()
    }

    /// Test split: per class, a normal batch then an anomalous batch.
    pub fn generate_test(&self) -> Result<Vec<TokenBatch>> {
        let root = RandomState::new(self.spec.seed);
        let mut out = Vec::new();
        for c in 0..self.spec.n_classes {
            let normals = (0..self.spec.test_normal_per_class)
                .map(|i| {
                    let idx = (c * self.spec.test_normal_per_class + i) as u64;
                    self.generate_normal(c, 1, &mut root.derive("test-normal", idx))
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(concat_or_empty(self, c, normals)?);
            let anomalous = (0..self.spec.test_anomalous_per_class)
                .map(|i| {
                    let idx = (c * self.spec.test_anomalous_per_class + i) as u64;
                    let base = self.generate_normal(c, 1, &mut root.derive("test-anomalous", idx))?;
                    self.inject_anomaly(&base, &mut root.derive("inject", idx))
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(concat_or_empty(self, c, anomalous)?);
        }
        Ok(out)
    }
}

fn concat_or_empty(world: &SyntheticWorld, class: usize, parts: Vec<TokenBatch>) -> Result<TokenBatch> {
    if parts.is_empty() {
        world.generate_normal(class, 0, &mut RandomState::new(0))
    } else {
        TokenBatch::concat(&parts)
    }
}

/// Per grid cell, the `(cell, weight)` taps of a truncated Gaussian kernel,
/// normalised so the smoothed white field has unit variance everywhere.
fn smoothing_kernel(h: usize, w: usize, sigma: f64) -> Vec<Vec<(usize, f64)>> {
    let radius = if sigma > 0.0 { (3.0 * sigma).ceil() as isize } else { 0 };
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h as isize {
        for c in 0..w as isize {
            let mut taps = Vec::new();
            for dr in -radius..=radius {
                for dc in -radius..=radius {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                        continue;
                    }
                    let wgt = if sigma > 0.0 {
                        (-((dr * dr + dc * dc) as f64) / (2.0 * sigma * sigma)).exp()
                    } else {
                        1.0
                    };
                    taps.push(((rr * w as isize + cc) as usize, wgt));
                }
            }
            let norm = taps.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
            taps.iter_mut().for_each(|(_, v)| *v /= norm);
            out.push(taps);
        }
    }
    out
}

/// A rectangle `(row, col, height, width)` whose area is as close as possible
/// to a uniformly drawn target fraction, with aspect ratio at most 2.
pub fn choose_rectangle(
    h: usize,
    w: usize,
    frac: (f64, f64),
    rng: &mut RandomState,
) -> (usize, usize, usize, usize) {
    let target = (frac.0 + (frac.1 - frac.0) * rng.uniform()) * (h * w) as f64;
    let mut best: Vec<(usize, usize)> = Vec::new();
    let mut best_err = f64::INFINITY;
    for strict in [true, false] {
        for rh in 1..=h {
            for rw in 1..=w {
                if strict && rh.max(rw) > 2 * rh.min(rw) {
                    continue;
                }
                let err = ((rh * rw) as f64 - target).abs();
                if err < best_err - 1e-12 {
                    best_err = err;
                    best.clear();
                }
                if (err - best_err).abs() <= 1e-12 {
                    best.push((rh, rw));
                }
            }
        }
        if !best.is_empty() {
            break;
        }
    }
    let (rh, rw) = best[rng.below(best.len())];
    let r0 = rng.below(h - rh + 1);
    let c0 = rng.below(w - rw + 1);
    (r0, c0, rh, rw)
}

/// A spec plus the batches generated from it.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub batches: Vec<TokenBatch>,
}

impl Dataset {
    /// Every sample in one batch.
    pub fn flatten(&self) -> Result<TokenBatch> {
        let nonempty: Vec<TokenBatch> =
            self.batches.iter().filter(|b| !b.is_empty()).cloned().collect();
        TokenBatch::concat(&nonempty)
    }

    pub fn is_all_normal(&self) -> bool {
        self.batches.iter().all(|b| b.is_all_normal())
    }

    pub fn sample_count(&self) -> usize {
        self.batches.iter().map(|b| b.len()).sum()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordHeader {
    batch: usize,
    grid: (usize, usize),
    d_model: usize,
    n_layers: usize,
    class_ids: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    spec: SyntheticSpec,
    record_count: usize,
    records: Vec<RecordHeader>,
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut records = Vec::new();
    for b in &ds.batches {
        b.validate()?;
        let offset = payload.len() as u64;
        for t in &b.layers {
            for &v in t.data() {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let mut bits = vec![0u8; b.anomaly_mask.len().div_ceil(8)];
        for (i, &m) in b.anomaly_mask.iter().enumerate() {
            if m {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        payload.extend_from_slice(&bits);
        records.push(RecordHeader {
            batch: b.len(),
            grid: b.grid,
            d_model: b.d_model(),
            n_layers: b.layers.len(),
            class_ids: b.class_ids.clone(),
            offset,
            length: payload.len() as u64 - offset,
        });
    }
    let header = DatasetHeader {
        spec: ds.spec.clone(),
        record_count: records.len(),
        records,
    };
    Ok(container::encode(DATASET_MAGIC, &serde_json::to_vec(&header)?, &payload))
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let (header, payload) = container::decode(DATASET_MAGIC, bytes)?;
    let header: DatasetHeader =
        serde_json::from_slice(header).map_err(|e| Error::Header(e.to_string()))?;
    if header.record_count != header.records.len() {
        return Err(Error::Header(format!(
            "record_count {} but {} records listed",
            header.record_count,
            header.records.len()
        )));
    }
    let mut batches = Vec::new();
    for (ri, r) in header.records.iter().enumerate() {
        let n = r.grid.0 * r.grid.1;
        let floats = r.n_layers * r.batch * n * r.d_model;
        let mask_bits = r.batch * n;
        let want = (floats * 4 + mask_bits.div_ceil(8)) as u64;
        let end = r.offset.checked_add(r.length).unwrap_or(u64::MAX);
        if r.length != want || end > payload.len() as u64 {
            return Err(Error::Truncated(format!(
                "record {ri} expects {want} bytes at offset {}, payload has {}",
                r.offset,
                payload.len()
            )));
        }
        if r.class_ids.len() != r.batch {
            return Err(Error::Header(format!("record {ri}: class_ids length mismatch")));
        }
        let bytes = &payload[r.offset as usize..end as usize];
        let (fl, mk) = bytes.split_at(floats * 4);
        let values: Vec<f64> = fl
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let per = r.batch * n * r.d_model;
        let layers = (0..r.n_layers)
            .map(|l| Tensor::new([r.batch, n, r.d_model], values[l * per..(l + 1) * per].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let anomaly_mask: Vec<bool> = (0..mask_bits).map(|i| mk[i / 8] >> (i % 8) & 1 == 1).collect();
        let image_labels = (0..r.batch)
            .map(|s| anomaly_mask[s * n..(s + 1) * n].iter().any(|m| *m))
            .collect();
        batches.push(TokenBatch {
            grid: r.grid,
            layers,
            class_ids: r.class_ids.clone(),
            anomaly_mask,
            image_labels,
        });
    }
    Ok(Dataset {
        spec: header.spec,
        batches,
    })
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    container::write_file(path, &encode_dataset(ds)?)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&container::read_file(path)?)
}
