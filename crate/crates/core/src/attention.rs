//! Scaled dot-product attention with global redistribution (sigmoid in
//! place of softmax) and global-self masking, next to the vanilla softmax
//! and neighbour-masked baselines.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::RandomState;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionVariant {
    Softmax,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputScale {
    None,
    DivideByN,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub variant: AttentionVariant,
    /// Mask the diagonal of the attention map in every pass.
    pub self_mask: bool,
    /// Probability of masking an off-diagonal entry during training.
    pub attn_dropout_rate: f64,
    /// Chebyshev radius of the neighbour mask (softmax baseline only).
    pub neighbor_mask_radius: Option<usize>,
    pub output_scale_mode: OutputScale,
}

impl AttentionConfig {
    /// Plain softmax attention without any masking.
    pub fn vanilla(d_model: usize, n_heads: usize) -> Self {
        Self {
            d_model,
            n_heads,
            variant: AttentionVariant::Softmax,
            self_mask: false,
            attn_dropout_rate: 0.0,
            neighbor_mask_radius: None,
            output_scale_mode: OutputScale::None,
        }
    }

    /// Sigmoid redistribution with self and random global masking.
    pub fn global_perturbation(d_model: usize, n_heads: usize) -> Self {
        Self {
            d_model,
            n_heads,
            variant: AttentionVariant::Sigmoid,
            self_mask: true,
            attn_dropout_rate: 0.1,
            neighbor_mask_radius: None,
            output_scale_mode: OutputScale::DivideByN,
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            p.push(format!(
                "attention.n_heads: d_model {} is not divisible by {}",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.attn_dropout_rate) {
            p.push(format!(
                "attention.attn_dropout_rate: {} not in [0, 1)",
                self.attn_dropout_rate
            ));
        }
        if self.neighbor_mask_radius.is_some() && self.variant != AttentionVariant::Softmax {
            p.push("attention.neighbor_mask_radius: requires the Softmax variant".into());
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

/// Boolean `n × n` attention mask; `true` means "may attend".
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    keep: Vec<bool>,
}

impl AttentionMask {
    pub fn all(n: usize) -> Self {
        Self {
            n,
            keep: vec![true; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn keep(&self, i: usize, j: usize) -> bool {
        self.keep[i * self.n + j]
    }

    pub fn masked_count(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }

    /// Entry-wise AND.
    pub fn and(&self, other: &AttentionMask) -> AttentionMask {
        AttentionMask {
            n: self.n,
            keep: self.keep.iter().zip(&other.keep).map(|(a, b)| *a && *b).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn([self.n, self.n], |i| if self.keep[i] { 1.0 } else { 0.0 })
    }

    fn has_empty_row(&self) -> Option<usize> {
        (0..self.n).find(|&i| (0..self.n).all(|j| !self.keep(i, j)))
    }
}

/// Global-self mask: the diagonal when `self_mask`, plus (training only)
/// each off-diagonal entry independently with probability `dropout_rate`.
pub fn build_gsm_mask(
    n: usize,
    self_mask: bool,
    dropout_rate: f64,
    training: bool,
    rng: &mut RandomState,
) -> Result<AttentionMask> {
    if n == 0 {
        return Err(Error::Contract("attention mask over zero tokens".into()));
    }
    if !(0.0..1.0).contains(&dropout_rate) {
        return Err(Error::Parameter(format!(
            "attention dropout rate {dropout_rate} not in [0, 1)"
        )));
    }
    let mut keep = vec![true; n * n];
    for i in 0..n {
        for j in 0..n {
            keep[i * n + j] = if i == j {
                !self_mask
            } else {
                !(training && dropout_rate > 0.0 && rng.bernoulli(dropout_rate))
            };
        }
    }
    Ok(AttentionMask { n, keep })
}

/// Neighbour mask over a `grid_h × grid_w` token grid: token `(r, c)` may not
/// attend to any token within Chebyshev distance `radius`, itself included.
pub fn build_neighbor_mask(grid_h: usize, grid_w: usize, radius: usize) -> Result<AttentionMask> {
    let n = grid_h * grid_w;
    if n == 0 {
        return Err(Error::Contract("neighbour mask over an empty grid".into()));
    }
    let mut keep = vec![true; n * n];
    for i in 0..n {
        let (ri, ci) = (i / grid_w, i % grid_w);
        for j in 0..n {
            let (rj, cj) = (j / grid_w, j % grid_w);
            if ri.abs_diff(rj) <= radius && ci.abs_diff(cj) <= radius {
                keep[i * n + j] = false;
            }
        }
    }
    let mask = AttentionMask { n, keep };
    if let Some(row) = mask.has_empty_row() {
        return Err(Error::Contract(format!(
            "neighbour radius {radius} masks every token for row {row} on a {grid_h}x{grid_w} grid"
        )));
    }
    Ok(mask)
}

/// Result of one attention call: the output and the post-mask attention map.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    pub map: Var,
}

/// Attention over `q, k, v: [B, H, N, d_k]`.
///
/// Scores are `q·kᵀ/√d_k`. The softmax variant normalises over the tokens a
/// row may attend to (masked entries are exact zeros). The sigmoid variant
/// applies an elementwise sigmoid, multiplies by the mask, and optionally
/// divides by `N`. `grid` is only consulted for the neighbour mask.
#[allow(clippy::too_many_arguments)]
pub fn attention_forward(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    cfg: &AttentionConfig,
    grid: (usize, usize),
    training: bool,
    rng: &mut RandomState,
) -> Result<AttentionOutput> {
    let shape = g.shape(q).to_vec();
    if shape.len() != 4 || g.shape(k) != shape.as_slice() || g.shape(v) != shape.as_slice() {
        return Err(Error::Dimension(format!(
            "attention expects q, k, v of equal shape [B, H, N, d_k]; got {:?}, {:?}, {:?}",
            shape,
            g.shape(k),
            g.shape(v)
        )));
    }
    let (b, h, n, dk) = (shape[0], shape[1], shape[2], shape[3]);
    if cfg.self_mask && n < 2 {
        return Err(Error::Contract(
            "self-masking needs at least two tokens".into(),
        ));
    }
    let keep = build_keep(cfg, b, h, n, grid, training, rng)?;

    let kt = g.transpose_last2(k)?;
    let raw = g.matmul(q, kt)?;
    let scores = g.scale(raw, 1.0 / (dk as f64).sqrt())?;
    let map = match cfg.variant {
        AttentionVariant::Softmax => match &keep {
            Some(m) => g.masked_softmax(scores, m)?,
            None => g.softmax(scores)?,
        },
        AttentionVariant::Sigmoid => {
            let mut s = g.sigmoid(scores)?;
            if let Some(m) = keep {
                let m = g.constant(m);
                s = g.mul(s, m)?;
            }
            if cfg.output_scale_mode == OutputScale::DivideByN {
                s = g.scale(s, 1.0 / n as f64)?;
            }
            s
        }
    };
    let output = g.matmul(map, v)?;
    Ok(AttentionOutput { output, map })
}

/// The combined keep-mask as a 0/1 tensor, `[N, N]` when it is the same for
/// every sample and head, `[B, H, N, N]` when random entries are drawn.
fn build_keep(
    cfg: &AttentionConfig,
    b: usize,
    h: usize,
    n: usize,
    grid: (usize, usize),
    training: bool,
    rng: &mut RandomState,
) -> Result<Option<Tensor>> {
    let mut fixed: Option<AttentionMask> = None;
    if cfg.self_mask {
        fixed = Some(build_gsm_mask(n, true, 0.0, false, rng)?);
    }
    if let Some(radius) = cfg.neighbor_mask_radius {
        if grid.0 * grid.1 != n {
            return Err(Error::Dimension(format!(
                "neighbour mask grid {}x{} does not cover {n} tokens",
                grid.0, grid.1
            )));
        }
        let nm = build_neighbor_mask(grid.0, grid.1, radius)?;
        fixed = Some(match fixed {
            Some(f) => f.and(&nm),
            None => nm,
        });
    }
    let random = training && cfg.attn_dropout_rate > 0.0;
    if !random {
        return Ok(fixed.map(|m| m.to_tensor()));
    }
    let base = fixed.unwrap_or_else(|| AttentionMask::all(n));
    let mut data = Vec::with_capacity(b * h * n * n);
    for _ in 0..b * h {
        let drop = build_gsm_mask(n, false, cfg.attn_dropout_rate, true, rng)?;
        let m = base.and(&drop);
        data.extend(m.keep.iter().map(|k| if *k { 1.0 } else { 0.0 }));
    }
    Ok(Some(Tensor::new([b, h, n, n], data)?))
}

/// Concentration statistics of an attention map.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EntropyStats {
    /// Mean Shannon entropy (nats) of the row-normalised rows.
    pub mean_row_entropy: f64,
    /// Mean over rows of the largest row-normalised entry.
    pub max_row_mass: f64,
    /// Rows skipped because they summed to zero.
    pub excluded_rows: usize,
}

/// Entropy and peak mass of a nonnegative map; rows are taken along the last axis.
pub fn attention_entropy_stats(map: &Tensor) -> Result<EntropyStats> {
    if map.data().iter().any(|v| *v < 0.0) {
        return Err(Error::Contract("attention map has negative entries".into()));
    }
    let w = map.last_dim();
    let (mut ent, mut peak, mut rows, mut excluded) = (0.0, 0.0, 0usize, 0usize);
    for row in map.data().chunks(w.max(1)) {
        let z: f64 = row.iter().sum();
        if z <= 0.0 {
            excluded += 1;
            continue;
        }
        let mut h = 0.0;
        let mut m: f64 = 0.0;
        for &v in row {
            let p = v / z;
            if p > 0.0 {
                h -= p * p.ln();
            }
            m = m.max(p);
        }
        ent += h;
        peak += m;
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Contract("attention map has no nonzero rows".into()));
    }
    Ok(EntropyStats {
        mean_row_entropy: ent / rows as f64,
        max_row_mass: peak / rows as f64,
        excluded_rows: excluded,
    })
}
