//! Bottlenecks between the fused encoder features and the decoder.
//!
//! The low-rank noisy bottleneck (LRNB) is a stack of `depth_i` down blocks,
//! each merging adjacent token pairs into one token, followed by `depth_i`
//! up blocks that split every token back into two. For `N` tokens of width
//! `d` the latent holds `N·d / 2^depth_i` numbers, so the Jacobian of the
//! whole map has rank at most that, and it cannot be the identity on
//! `R^{N·d}`. Noise (dropout, then optional Gaussian) is injected on the
//! input during training only.
//!
//! Feature jittering and a dropout-then-MLP bottleneck are kept as the
//! comparison baselines.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore, LN_EPS};
use crate::rng::RandomState;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BottleneckKind {
    None,
    FeatureJitter,
    DropoutOnly,
    Lrnb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrnbConfig {
    /// Number of down blocks (and of up blocks).
    pub depth_i: usize,
    /// Dropout probability, also the Gaussian noise scale factor.
    pub noise_rate: f64,
    pub gaussian_noise: bool,
}

impl Default for LrnbConfig {
    fn default() -> Self {
        Self {
            depth_i: 2,
            noise_rate: 0.1,
            gaussian_noise: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BottleneckConfig {
    pub kind: BottleneckKind,
    pub lrnb: LrnbConfig,
    /// Feature-jitter scale; per-token noise std is `scale·‖x‖/d`.
    pub jitter_scale: f64,
}

impl Default for BottleneckConfig {
    fn default() -> Self {
        Self {
            kind: BottleneckKind::Lrnb,
            lrnb: LrnbConfig::default(),
            jitter_scale: 10.0,
        }
    }
}

impl BottleneckConfig {
    pub fn with_kind(kind: BottleneckKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.kind == BottleneckKind::Lrnb && self.lrnb.depth_i == 0 {
            p.push("bottleneck.lrnb.depth_i: must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.lrnb.noise_rate) {
            p.push(format!(
                "bottleneck.lrnb.noise_rate: {} not in [0, 1)",
                self.lrnb.noise_rate
            ));
        }
        if !(self.jitter_scale >= 0.0) {
            p.push(format!(
                "bottleneck.jitter_scale: {} must be >= 0",
                self.jitter_scale
            ));
        }
        p
    }

    /// Token counts must be divisible by this.
    pub fn token_multiple(&self) -> usize {
        match self.kind {
            BottleneckKind::Lrnb => 1 << self.lrnb.depth_i,
            _ => 1,
        }
    }
}

/// Adds the parameters a bottleneck needs to `store`.
pub fn init_bottleneck_params(
    store: &mut ParamStore,
    cfg: &BottleneckConfig,
    d: usize,
    rng: &mut RandomState,
) {
    match cfg.kind {
        BottleneckKind::Lrnb => {
            for i in 0..cfg.lrnb.depth_i {
                store.init_layer_norm(&format!("lrnb.down{i}.ln"), 2 * d);
                store.init_linear(&format!("lrnb.down{i}.fc"), 2 * d, d, rng);
            }
            for i in 0..cfg.lrnb.depth_i {
                store.init_layer_norm(&format!("lrnb.up{i}.ln"), d);
                store.init_linear(&format!("lrnb.up{i}.fc"), d, 2 * d, rng);
            }
        }
        BottleneckKind::DropoutOnly => {
            store.init_linear("ndb.fc1", d, 2 * d, rng);
            store.init_linear("ndb.fc2", 2 * d, d, rng);
        }
        BottleneckKind::None | BottleneckKind::FeatureJitter => {}
    }
}

/// Mean of the per-layer layer-normalised features.
pub fn fuse_multiscale(g: &mut Graph, layers: &[Var]) -> Result<Var> {
    let first = *layers
        .first()
        .ok_or_else(|| Error::Contract("fuse_multiscale needs at least one layer".into()))?;
    let shape = g.shape(first).to_vec();
    let mut acc: Option<Var> = None;
    for &l in layers {
        if g.shape(l) != shape.as_slice() {
            return Err(Error::Dimension(format!(
                "fuse_multiscale: layer shapes differ, {shape:?} vs {:?}",
                g.shape(l)
            )));
        }
        let n = g.layer_norm_plain(l, LN_EPS)?;
        acc = Some(match acc {
            Some(a) => g.add(a, n)?,
            None => n,
        });
    }
    let acc = acc.expect("nonempty");
    if layers.len() == 1 {
        Ok(acc)
    } else {
        g.scale(acc, 1.0 / layers.len() as f64)
    }
}

fn dims3(g: &Graph, x: Var, what: &str) -> Result<(usize, usize, usize)> {
    match g.shape(x) {
        [b, n, d] => Ok((*b, *n, *d)),
        s => Err(Error::Dimension(format!("{what} expects [B, N, d], got {s:?}"))),
    }
}

/// `[B, N, d] -> [B, N/2, d]`: token pairs `(2t, 2t+1)` are concatenated,
/// layer-normalised, mapped affinely to `d` and passed through GELU.
pub fn down_block(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let (b, n, d) = dims3(g, x, "down_block")?;
    if n % 2 != 0 {
        return Err(Error::Dimension(format!(
            "down_block needs an even token count, got {n}"
        )));
    }
    let pairs = g.reshape(x, &[b, n / 2, 2 * d])?;
    let h = p.layer_norm(g, &format!("{name}.ln"), pairs)?;
    let h = p.linear(g, &format!("{name}.fc"), h)?;
    g.gelu(h)
}

/// `[B, M, d] -> [B, 2M, d]`: each token is layer-normalised, mapped to `2d`
/// by an affine map plus GELU, and split into two consecutive tokens.
pub fn up_block(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let (b, m, d) = dims3(g, x, "up_block")?;
    let h = p.layer_norm(g, &format!("{name}.ln"), x)?;
    let h = p.linear(g, &format!("{name}.fc"), h)?;
    let h = g.gelu(h)?;
    g.reshape(h, &[b, 2 * m, d])
}

/// Additive Gaussian noise whose per-feature std is `rate` times that
/// feature's standard deviation over the batch's tokens.
fn batch_scaled_noise(g: &mut Graph, x: Var, rate: f64, rng: &mut RandomState) -> Result<Var> {
    let t = g.value(x);
    let d = t.last_dim();
    let rows = t.len() / d;
    let mut mean = vec![0.0; d];
    for row in t.data().chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / rows as f64;
        }
    }
    let mut var = vec![0.0; d];
    for row in t.data().chunks(d) {
        for j in 0..d {
            var[j] += (row[j] - mean[j]).powi(2) / rows as f64;
        }
    }
    let std: Vec<f64> = var.iter().map(|v| rate * v.sqrt()).collect();
    let noise = Tensor::from_fn(t.shape().to_vec(), |i| std[i % d] * rng.normal());
    let nv = g.constant(noise);
    g.add(x, nv)
}

/// The full low-rank noisy bottleneck.
pub fn lrnb_forward(
    g: &mut Graph,
    p: &Bound,
    x: Var,
    cfg: &LrnbConfig,
    training: bool,
    rng: &mut RandomState,
) -> Result<Var> {
    let (_, n, _) = dims3(g, x, "lrnb")?;
    let m = 1usize << cfg.depth_i;
    if cfg.depth_i == 0 || n % m != 0 {
        return Err(Error::Dimension(format!(
            "lrnb: {n} tokens are not divisible by 2^{} = {m}",
            cfg.depth_i
        )));
    }
    let mut h = x;
    if training && cfg.noise_rate > 0.0 {
        h = g.dropout(h, cfg.noise_rate, true, rng)?;
        if cfg.gaussian_noise {
            h = batch_scaled_noise(g, h, cfg.noise_rate, rng)?;
        }
    }
    for i in 0..cfg.depth_i {
        h = down_block(g, p, &format!("lrnb.down{i}"), h)?;
    }
    for i in 0..cfg.depth_i {
        h = up_block(g, p, &format!("lrnb.up{i}"), h)?;
    }
    Ok(h)
}

/// Training-time additive noise with per-token std `scale·‖x_token‖/d`.
pub fn feature_jitter(
    g: &mut Graph,
    x: Var,
    scale: f64,
    training: bool,
    rng: &mut RandomState,
) -> Result<Var> {
    if scale < 0.0 {
        return Err(Error::Parameter(format!("jitter scale {scale} must be >= 0")));
    }
    if !training || scale == 0.0 {
        return Ok(x);
    }
    let t = g.value(x);
    let d = t.last_dim();
    let mut noise = Vec::with_capacity(t.len());
    for row in t.data().chunks(d) {
        let std = scale * row.iter().map(|v| v * v).sum::<f64>().sqrt() / d as f64;
        noise.extend((0..d).map(|_| std * rng.normal()));
    }
    let nv = g.constant(Tensor::new(t.shape().to_vec(), noise)?);
    g.add(x, nv)
}

/// Dropout on the input, then a token-wise two-layer MLP of width `2d`.
fn dropout_bottleneck(
    g: &mut Graph,
    p: &Bound,
    x: Var,
    rate: f64,
    training: bool,
    rng: &mut RandomState,
) -> Result<Var> {
    let h = g.dropout(x, rate, training, rng)?;
    let h = p.linear(g, "ndb.fc1", h)?;
    let h = g.gelu(h)?;
    p.linear(g, "ndb.fc2", h)
}

pub fn bottleneck_forward(
    g: &mut Graph,
    p: &Bound,
    x: Var,
    cfg: &BottleneckConfig,
    training: bool,
    rng: &mut RandomState,
) -> Result<Var> {
    match cfg.kind {
        BottleneckKind::None => Ok(x),
        BottleneckKind::FeatureJitter => feature_jitter(g, x, cfg.jitter_scale, training, rng),
        BottleneckKind::DropoutOnly => {
            dropout_bottleneck(g, p, x, cfg.lrnb.noise_rate, training, rng)
        }
        BottleneckKind::Lrnb => lrnb_forward(g, p, x, &cfg.lrnb, training, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lrnb_params(depth: usize, d: usize, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        let cfg = BottleneckConfig {
            lrnb: LrnbConfig {
                depth_i: depth,
                ..LrnbConfig::default()
            },
            ..BottleneckConfig::default()
        };
        init_bottleneck_params(&mut s, &cfg, d, &mut RandomState::new(seed));
        s
    }

    #[test]
    fn fuse_single_and_duplicate_layers() {
        let mut rng = RandomState::new(1);
        let mut g = Graph::new();
        let a = g.constant(Tensor::randn([2, 4, 6], 1.0, &mut rng));
        let one = fuse_multiscale(&mut g, &[a]).unwrap();
        let ln = g.layer_norm_plain(a, LN_EPS).unwrap();
        assert_eq!(g.value(one), g.value(ln));
        let two = fuse_multiscale(&mut g, &[a, a]).unwrap();
        for (x, y) in g.value(two).data().iter().zip(g.value(one).data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn fuse_averages_normalised_layers() {
        let mut rng = RandomState::new(2);
        let mut g = Graph::new();
        let a = g.constant(Tensor::randn([2, 4, 6], 1.0, &mut rng));
        let b = g.constant(Tensor::randn([2, 4, 6], 3.0, &mut rng));
        let f = fuse_multiscale(&mut g, &[a, b]).unwrap();
        let la = g.layer_norm_plain(a, LN_EPS).unwrap();
        let lb = g.layer_norm_plain(b, LN_EPS).unwrap();
        for i in 0..48 {
            let want = 0.5 * (g.value(la).data()[i] + g.value(lb).data()[i]);
            assert!((g.value(f).data()[i] - want).abs() < 1e-14);
        }
        let c = g.constant(Tensor::zeros([2, 5, 6]));
        assert!(matches!(fuse_multiscale(&mut g, &[a, c]), Err(Error::Dimension(_))));
    }

    #[test]
    fn down_block_odd_tokens_rejected() {
        let s = lrnb_params(1, 4, 0);
        let mut g = Graph::new();
        let p = s.bind(&mut g, false);
        let x = g.constant(Tensor::zeros([1, 3, 4]));
        assert!(matches!(down_block(&mut g, &p, "lrnb.down0", x), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut s = lrnb_params(1, 4, 0);
        for (_, t) in s.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let mut rng = RandomState::new(3);
        let mut g = Graph::new();
        let p = s.bind(&mut g, false);
        let x = g.constant(Tensor::randn([1, 4, 4], 1.0, &mut rng));
        let y = down_block(&mut g, &p, "lrnb.down0", x).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 4]);
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
        let z = up_block(&mut g, &p, "lrnb.up0", y).unwrap();
        assert_eq!(g.shape(z), &[1, 4, 4]);
        assert!(g.value(z).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn down_and_up_blocks_are_local() {
        let s = lrnb_params(1, 3, 5);
        let mut rng = RandomState::new(6);
        let base = Tensor::randn([1, 8, 3], 1.0, &mut rng);
        let run = |x: &Tensor, up: bool| {
            let mut g = Graph::new();
            let p = s.bind(&mut g, false);
            let v = g.constant(x.clone());
            let y = if up {
                up_block(&mut g, &p, "lrnb.up0", v).unwrap()
            } else {
                down_block(&mut g, &p, "lrnb.down0", v).unwrap()
            };
            g.value(y).clone()
        };
        // Down: perturb token 0, only output token 0 moves.
        let mut pert = base.clone();
        pert.data_mut()[0] += 1e-3;
        let (y0, y1) = (run(&base, false), run(&pert, false));
        let changed: Vec<usize> = (0..4)
            .filter(|t| (0..3).any(|j| y0.data()[t * 3 + j] != y1.data()[t * 3 + j]))
            .collect();
        assert_eq!(changed, vec![0]);
        // Up: perturb input token 2, only outputs 4 and 5 move.
        let mut pert = base.clone();
        pert.data_mut()[2 * 3 + 1] += 1e-3;
        let (y0, y1) = (run(&base, true), run(&pert, true));
        let changed: Vec<usize> = (0..16)
            .filter(|t| (0..3).any(|j| y0.data()[t * 3 + j] != y1.data()[t * 3 + j]))
            .collect();
        assert_eq!(changed, vec![4, 5]);
    }

    #[test]
    fn lrnb_latent_count_and_divisibility() {
        let s = lrnb_params(1, 32, 0);
        let mut g = Graph::new();
        let p = s.bind(&mut g, false);
        let x = g.constant(Tensor::zeros([1, 16, 32]));
        let latent = down_block(&mut g, &p, "lrnb.down0", x).unwrap();
        assert_eq!(g.value(latent).len(), 256);
        assert!(256 < 16 * 32);
        let cfg = LrnbConfig {
            depth_i: 3,
            ..LrnbConfig::default()
        };
        let y = g.constant(Tensor::zeros([1, 12, 32]));
        assert!(matches!(
            lrnb_forward(&mut g, &p, y, &cfg, false, &mut RandomState::new(0)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn noise_free_training_equals_inference() {
        let s = lrnb_params(2, 4, 8);
        let mut rng = RandomState::new(9);
        let x = Tensor::randn([2, 8, 4], 1.0, &mut rng);
        let run = |training: bool, rate: f64, seed: u64| {
            let cfg = LrnbConfig {
                depth_i: 2,
                noise_rate: rate,
                gaussian_noise: true,
            };
            let mut g = Graph::new();
            let p = s.bind(&mut g, false);
            let v = g.constant(x.clone());
            let y = lrnb_forward(&mut g, &p, v, &cfg, training, &mut RandomState::new(seed)).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(true, 0.0, 1), run(false, 0.0, 2));
        assert_eq!(run(false, 0.1, 1), run(false, 0.1, 99));
        assert_ne!(run(true, 0.1, 1), run(false, 0.1, 1));
    }

    #[test]
    fn jitter_identity_cases_and_statistics() {
        let mut g = Graph::new();
        let mut rng = RandomState::new(10);
        let x = g.constant(Tensor::randn([4, 8], 1.0, &mut rng));
        assert_eq!(feature_jitter(&mut g, x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(feature_jitter(&mut g, x, 0.5, false, &mut rng).unwrap(), x);

        let (rows, d) = (100_000 / 32, 32);
        let unit = Tensor::from_fn([rows, d], |i| if i % d == 0 { 1.0 } else { 0.0 });
        let u = g.constant(unit.clone());
        let j = feature_jitter(&mut g, u, 0.1, true, &mut rng).unwrap();
        let diffs: Vec<f64> = g
            .value(j)
            .data()
            .iter()
            .zip(unit.data())
            .map(|(a, b)| a - b)
            .collect();
        let std = (diffs.iter().map(|v| v * v).sum::<f64>() / diffs.len() as f64).sqrt();
        let want = 0.1 / 32.0;
        assert!((std - want).abs() / want < 0.1, "{std} vs {want}");
    }
}
