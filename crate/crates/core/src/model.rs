//! The reconstruction model: fused encoder features go through a bottleneck
//! and a stack of pre-norm transformer decoder layers, and the output is
//! compared against the fused features themselves.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{attention_forward, AttentionConfig, AttentionVariant, OutputScale};
use crate::autodiff::{Graph, Var};
use crate::bottleneck::{bottleneck_forward, fuse_multiscale, init_bottleneck_params, BottleneckConfig, BottleneckKind};
use crate::container::{self, CHECKPOINT_MAGIC};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::rng::RandomState;
use crate::synthetic::TokenBatch;
use crate::tensor::Tensor;

pub const MODEL_CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub version: u32,
    pub d_model: usize,
    pub n_heads: usize,
    pub decoder_depth: usize,
    /// Hidden width of each decoder MLP as a multiple of `d_model`.
    pub mlp_ratio: usize,
    pub attention: AttentionConfig,
    pub bottleneck: BottleneckConfig,
    /// Encoder layers fused into the reconstruction target; `None` means all.
    pub target_layers: Option<Vec<usize>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::shortcut_breaker(64, 4, 4)
    }
}

impl ModelConfig {
    /// LRNB plus sigmoid attention with self and global masking.
    pub fn shortcut_breaker(d_model: usize, n_heads: usize, decoder_depth: usize) -> Self {
        Self {
            version: MODEL_CONFIG_VERSION,
            d_model,
            n_heads,
            decoder_depth,
            mlp_ratio: 4,
            attention: AttentionConfig::global_perturbation(d_model, n_heads),
            bottleneck: BottleneckConfig::default(),
            target_layers: None,
        }
    }

    /// Softmax decoder without a bottleneck.
    pub fn baseline(d_model: usize, n_heads: usize, decoder_depth: usize) -> Self {
        Self {
            attention: AttentionConfig::vanilla(d_model, n_heads),
            bottleneck: BottleneckConfig::with_kind(BottleneckKind::None),
            ..Self::shortcut_breaker(d_model, n_heads, decoder_depth)
        }
    }

    /// Toggles the three components on a baseline config. GRD switches
    /// softmax to sigmoid with `1/N` output scaling; GSM adds the diagonal
    /// mask and 0.1 attention dropout.
    pub fn with_components(mut self, lrnb: bool, grd: bool, gsm: bool) -> Self {
        let (d, h) = (self.d_model, self.n_heads);
        let full = AttentionConfig::global_perturbation(d, h);
        let mut att = AttentionConfig::vanilla(d, h);
        if grd {
            att.variant = AttentionVariant::Sigmoid;
            att.output_scale_mode = OutputScale::DivideByN;
        }
        if gsm {
            att.self_mask = full.self_mask;
            att.attn_dropout_rate = full.attn_dropout_rate;
        }
        self.attention = att;
        self.bottleneck.kind = if lrnb { BottleneckKind::Lrnb } else { BottleneckKind::None };
        self
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.version != MODEL_CONFIG_VERSION {
            p.push(format!("version: expected {MODEL_CONFIG_VERSION}, got {}", self.version));
        }
        if self.d_model == 0 {
            p.push("d_model: must be at least 1".into());
        }
        if self.decoder_depth == 0 {
            p.push("decoder_depth: must be at least 1".into());
        }
        if self.mlp_ratio == 0 {
            p.push("mlp_ratio: must be at least 1".into());
        }
        if self.attention.d_model != self.d_model || self.attention.n_heads != self.n_heads {
            p.push(format!(
                "attention: d_model/n_heads ({}, {}) differ from the model's ({}, {})",
                self.attention.d_model, self.attention.n_heads, self.d_model, self.n_heads
            ));
        }
        p.extend(self.attention.problems());
        p.extend(self.bottleneck.problems());
        if let Some(t) = &self.target_layers {
            if t.is_empty() {
                p.push("target_layers: empty list (use null for all layers)".into());
            }
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

    /// Checks that a batch's grid, width and layer count suit this model.
    pub fn check_batch(&self, batch: &TokenBatch) -> Result<()> {
        let n = batch.n_tokens();
        let m = self.bottleneck.token_multiple();
        if n % m != 0 {
            return Err(Error::Dimension(format!(
                "{}x{} grid has {n} tokens, not divisible by {m} as the bottleneck requires",
                batch.grid.0, batch.grid.1
            )));
        }
        if batch.d_model() != self.d_model {
            return Err(Error::Dimension(format!(
                "batch width {} differs from model d_model {}",
                batch.d_model(),
                self.d_model
            )));
        }
        for &l in self.target_layer_indices(batch.layers.len()).iter() {
            if l >= batch.layers.len() {
                return Err(Error::Dimension(format!(
                    "target layer {l} requested but the batch has {} encoder layers",
                    batch.layers.len()
                )));
            }
        }
        Ok(())
    }

    fn target_layer_indices(&self, available: usize) -> Vec<usize> {
        self.target_layers
            .clone()
            .unwrap_or_else(|| (0..available).collect())
    }
}

/// Fresh parameters for `cfg`, deterministic in `seed`.
pub fn parameter_init(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.d_model;
    let mut store = ParamStore::new();
    let mut rng = RandomState::new(seed).derive("bottleneck", 0);
    init_bottleneck_params(&mut store, &cfg.bottleneck, d, &mut rng);
    for l in 0..cfg.decoder_depth {
        let mut rng = RandomState::new(seed).derive("decoder", l as u64);
        let p = format!("dec{l}");
        store.init_layer_norm(&format!("{p}.ln1"), d);
        for proj in ["q", "k", "v", "o"] {
            store.init_linear(&format!("{p}.attn.{proj}"), d, d, &mut rng);
        }
        store.init_layer_norm(&format!("{p}.ln2"), d);
        store.init_linear(&format!("{p}.mlp.fc1"), d, cfg.mlp_ratio * d, &mut rng);
        store.init_linear(&format!("{p}.mlp.fc2"), cfg.mlp_ratio * d, d, &mut rng);
    }
    Ok(store)
}

/// Fixed sinusoidal position codes, `[N, d]`.
pub fn sinusoidal_positions(n: usize, d: usize) -> Tensor {
    Tensor::from_fn([n, d], |i| {
        let (pos, j) = ((i / d) as f64, i % d);
        let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
        if j % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}

/// `[B, N, d] -> [B, H, N, d/H]`.
fn split_heads(g: &mut Graph, x: Var, h: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = g.reshape(x, &[s[0], s[1], h, s[2] / h])?;
    g.swap_axes(r, 1, 2)
}

fn merge_heads(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = g.swap_axes(x, 1, 2)?;
    g.reshape(r, &[s[0], s[2], s[1] * s[3]])
}

/// One pre-norm decoder layer. Returns the output and the attention map.
#[allow(clippy::too_many_arguments)]
pub fn decoder_layer(
    g: &mut Graph,
    p: &Bound,
    name: &str,
    x: Var,
    pos: Var,
    cfg: &ModelConfig,
    grid: (usize, usize),
    training: bool,
    rng: &mut RandomState,
) -> Result<(Var, Var)> {
    let y = p.layer_norm(g, &format!("{name}.ln1"), x)?;
    let qk_in = g.add(y, pos)?;
    let q = p.linear(g, &format!("{name}.attn.q"), qk_in)?;
    let k = p.linear(g, &format!("{name}.attn.k"), qk_in)?;
    let v = p.linear(g, &format!("{name}.attn.v"), y)?;
    let (q, k, v) = (
        split_heads(g, q, cfg.n_heads)?,
        split_heads(g, k, cfg.n_heads)?,
        split_heads(g, v, cfg.n_heads)?,
    );
    let att = attention_forward(g, q, k, v, &cfg.attention, grid, training, rng)?;
    let merged = merge_heads(g, att.output)?;
    let o = p.linear(g, &format!("{name}.attn.o"), merged)?;
    let x = g.add(x, o)?;
    let y = p.layer_norm(g, &format!("{name}.ln2"), x)?;
    let h = p.linear(g, &format!("{name}.mlp.fc1"), y)?;
    let h = g.gelu(h)?;
    let h = p.linear(g, &format!("{name}.mlp.fc2"), h)?;
    Ok((g.add(x, h)?, att.map))
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub reconstructed: Var,
    /// Fused features, a constant on the graph.
    pub target: Var,
    pub attention_maps: Vec<Var>,
}

/// Builds the forward pass for `batch` on `g`. The target is computed from
/// the encoder features as constants, so no gradient can reach it.
pub fn model_forward(
    g: &mut Graph,
    p: &Bound,
    batch: &TokenBatch,
    cfg: &ModelConfig,
    training: bool,
    rng: &mut RandomState,
) -> Result<ModelOutput> {
    cfg.check_batch(batch)?;
    let layers: Vec<Var> = cfg
        .target_layer_indices(batch.layers.len())
        .iter()
        .map(|&l| g.constant(batch.layers[l].clone()))
        .collect();
    let fused = fuse_multiscale(g, &layers)?;
    let target = g.detach(fused);
    let mut x = bottleneck_forward(g, p, target, &cfg.bottleneck, training, rng)?;
    let pos = g.constant(sinusoidal_positions(batch.n_tokens(), cfg.d_model));
    let mut maps = Vec::with_capacity(cfg.decoder_depth);
    for l in 0..cfg.decoder_depth {
        let (y, m) = decoder_layer(g, p, &format!("dec{l}"), x, pos, cfg, batch.grid, training, rng)?;
        x = y;
        maps.push(m);
    }
    Ok(ModelOutput {
        reconstructed: x,
        target,
        attention_maps: maps,
    })
}

/// Inference-mode `(reconstructed, target)` tensors for a batch.
pub fn reconstruct(params: &ParamStore, cfg: &ModelConfig, batch: &TokenBatch) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    // Inference draws no random numbers; the generator is only a formality.
    let mut rng = RandomState::new(0);
    let out = model_forward(&mut g, &p, batch, cfg, false, &mut rng)?;
    Ok((g.value(out.reconstructed).clone(), g.value(out.target).clone()))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

/// A trained (or freshly initialised) model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(ck.params.total_elements() * 8);
    let mut entries = Vec::new();
    for (name, t) in ck.params.iter() {
        entries.push(ParamEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
            len: t.len() as u64,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        config: ck.config.clone(),
        params: entries,
    };
    Ok(container::encode(CHECKPOINT_MAGIC, &serde_json::to_vec(&header)?, &payload))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, payload) = container::decode(CHECKPOINT_MAGIC, bytes)?;
    let header: CheckpointHeader =
        serde_json::from_slice(header).map_err(|e| Error::Header(e.to_string()))?;
    header.config.validate()?;
    let mut params = ParamStore::new();
    for e in header.params {
        let end = e.offset.checked_add(e.len * 8).unwrap_or(u64::MAX);
        if end > payload.len() as u64 {
            return Err(Error::Truncated(format!(
                "parameter '{}' runs past the payload end",
                e.name
            )));
        }
        let data = payload[e.offset as usize..end as usize]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(e.name, Tensor::new(e.shape, data)?);
    }
    let expected = parameter_init(&header.config, 0)?;
    for (name, t) in expected.iter() {
        match params.get(name) {
            Some(have) if have.shape() == t.shape() => {}
            Some(have) => {
                return Err(Error::Header(format!(
                    "parameter '{name}' has shape {:?}, config implies {:?}",
                    have.shape(),
                    t.shape()
                )))
            }
            None => return Err(Error::Header(format!("parameter '{name}' missing"))),
        }
    }
    if params.len() != expected.len() {
        return Err(Error::Header("checkpoint has parameters its config does not use".into()));
    }
    Ok(Checkpoint {
        config: header.config,
        params,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    container::write_file(path, &encode_checkpoint(ck)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&container::read_file(path)?)
}
