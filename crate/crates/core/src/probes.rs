//! Experiments that check the method's claims: the bottleneck's Jacobian
//! rank bound, the spreading of sigmoid attention, the identity-shortcut
//! signature of an unconstrained model, and the component ablation grid.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::attention::{attention_entropy_stats, AttentionConfig, EntropyStats};
use crate::autodiff::{Graph, Var};
use crate::bottleneck::{init_bottleneck_params, lrnb_forward, BottleneckConfig, BottleneckKind, LrnbConfig};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalOptions, Evaluation};
use crate::model::{parameter_init, ModelConfig};
use crate::params::ParamStore;
use crate::rng::RandomState;
use crate::synthetic::{Dataset, SyntheticSpec, SyntheticWorld};
use crate::tensor::Tensor;
use crate::training::{train, TrainConfig, TrainRecord};

/// Largest input dimension the rank probe will build a dense Jacobian for.
pub const MAX_PROBE_DIM: usize = 4096;
/// Singular values below this fraction of the largest count as zero.
pub const RANK_TOLERANCE: f64 = 1e-6;

/// A map `[B, N, d] -> [B, N, d]` acting independently on each sample.
pub trait ProbeMap: Sync {
    fn token_shape(&self) -> (usize, usize);
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var>;

    fn dim(&self) -> usize {
        let (n, d) = self.token_shape();
        n * d
    }
}

pub struct IdentityMap {
    pub n: usize,
    pub d: usize,
}

impl ProbeMap for IdentityMap {
    fn token_shape(&self) -> (usize, usize) {
        (self.n, self.d)
    }

    fn forward(&self, _g: &mut Graph, x: Var) -> Result<Var> {
        Ok(x)
    }
}

/// `x ↦ x·A·B` on the flattened sample, with `A: D×k` and `B: k×D`.
pub struct LowRankMap {
    pub n: usize,
    pub d: usize,
    pub a: Tensor,
    pub b: Tensor,
}

impl LowRankMap {
    pub fn random(n: usize, d: usize, k: usize, rng: &mut RandomState) -> Self {
        let dim = n * d;
        Self {
            n,
            d,
            a: Tensor::randn([dim, k], 1.0, rng),
            b: Tensor::randn([k, dim], 1.0, rng),
        }
    }
}

impl ProbeMap for LowRankMap {
    fn token_shape(&self) -> (usize, usize) {
        (self.n, self.d)
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let bsz = g.shape(x)[0];
        let flat = g.reshape(x, &[bsz, self.n * self.d])?;
        let a = g.constant(self.a.clone());
        let b = g.constant(self.b.clone());
        let h = g.matmul(flat, a)?;
        let y = g.matmul(h, b)?;
        g.reshape(y, &[bsz, self.n, self.d])
    }
}

/// The low-rank noisy bottleneck in inference mode.
pub struct LrnbMap {
    pub n: usize,
    pub d: usize,
    pub cfg: LrnbConfig,
    pub params: ParamStore,
}

impl LrnbMap {
    pub fn random(n: usize, d: usize, cfg: LrnbConfig, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let bc = BottleneckConfig {
            kind: BottleneckKind::Lrnb,
            lrnb: cfg.clone(),
            ..BottleneckConfig::default()
        };
        init_bottleneck_params(&mut params, &bc, d, &mut RandomState::new(seed));
        Self { n, d, cfg, params }
    }
}

impl ProbeMap for LrnbMap {
    fn token_shape(&self) -> (usize, usize) {
        (self.n, self.d)
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let p = self.params.bind(g, false);
        // Inference mode draws nothing from the generator.
        lrnb_forward(g, &p, x, &self.cfg, false, &mut RandomState::new(0))
    }
}

fn check_dim(map: &dyn ProbeMap) -> Result<usize> {
    let dim = map.dim();
    if dim > MAX_PROBE_DIM {
        return Err(Error::Contract(format!(
            "rank probe refuses D = {dim} > {MAX_PROBE_DIM}; a dense Jacobian is desk-scale only"
        )));
    }
    Ok(dim)
}

fn eval_batch(map: &dyn ProbeMap, inputs: Vec<f64>, count: usize) -> Result<Vec<f64>> {
    let (n, d) = map.token_shape();
    let mut g = Graph::new();
    let x = g.constant(Tensor::new([count, n, d], inputs)?);
    let y = map.forward(&mut g, x)?;
    Ok(g.value(y).data().to_vec())
}

/// `J[i][j] = ∂f_i/∂x_j` by finite differences, one column per perturbed
/// input, all evaluated in a single batch.
pub fn jacobian_fd(map: &dyn ProbeMap, x: &[f64], h: f64, central: bool) -> Result<DMatrix<f64>> {
    let dim = check_dim(map)?;
    let mut inputs = Vec::new();
    let shifts: &[f64] = if central { &[1.0, -1.0] } else { &[1.0] };
    for &s in shifts {
        for j in 0..dim {
            let mut xi = x.to_vec();
            xi[j] += s * h;
            inputs.extend(xi);
        }
    }
    if !central {
        inputs.extend_from_slice(x);
    }
    let count = inputs.len() / dim;
    let out = eval_batch(map, inputs, count)?;
    let mut jac = DMatrix::zeros(dim, dim);
    for j in 0..dim {
        let plus = &out[j * dim..(j + 1) * dim];
        let minus = if central {
            &out[(dim + j) * dim..(dim + j + 1) * dim]
        } else {
            &out[dim * dim..(dim + 1) * dim]
        };
        let denom = if central { 2.0 * h } else { h };
        for i in 0..dim {
            jac[(i, j)] = (plus[i] - minus[i]) / denom;
        }
    }
    Ok(jac)
}

/// The same Jacobian from reverse mode: `D` copies of `x` go through the map
/// as one batch, and the loss `Σ_b y_b[b]` puts row `b` into copy `b`'s gradient.
pub fn jacobian_reverse(map: &dyn ProbeMap, x: &[f64]) -> Result<DMatrix<f64>> {
    let dim = check_dim(map)?;
    let (n, d) = map.token_shape();
    let mut g = Graph::new();
    let xs: Vec<f64> = (0..dim).flat_map(|_| x.iter().copied()).collect();
    let xv = g.param(Tensor::new([dim, n, d], xs)?);
    let y = map.forward(&mut g, xv)?;
    let flat = g.reshape(y, &[dim, dim])?;
    let eye = g.constant(Tensor::from_fn([dim, dim], |i| if i / dim == i % dim { 1.0 } else { 0.0 }));
    let picked = g.mul(flat, eye)?;
    let loss = g.sum(picked)?;
    let grads = g.backward(loss)?;
    let gx = grads
        .get(xv)
        .ok_or_else(|| Error::Contract("probe map output does not depend on its input".into()))?;
    Ok(DMatrix::from_row_slice(dim, dim, gx.data()))
}

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

pub fn numerical_rank(sv: &[f64]) -> usize {
    match sv.first() {
        Some(&s1) if s1 > 0.0 => sv.iter().filter(|s| **s / s1 > RANK_TOLERANCE).count(),
        _ => 0,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RankProbeConfig {
    pub n_tokens: usize,
    pub d_model: usize,
    pub depth_i: usize,
    pub n_inputs: usize,
    pub n_param_draws: usize,
    pub fd_step: f64,
    pub central: bool,
    pub seed: u64,
}

impl Default for RankProbeConfig {
    fn default() -> Self {
        Self {
            n_tokens: 16,
            d_model: 32,
            depth_i: 2,
            n_inputs: 5,
            n_param_draws: 3,
            fd_step: 1e-6,
            central: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RankTrial {
    pub param_draw: usize,
    pub input: usize,
    pub numerical_rank: usize,
    /// `σ_{bound+1} / σ_1`, or 0 when the bound is the full dimension.
    pub ratio_after_bound: f64,
    /// Max |FD − reverse| over max |reverse|.
    pub fd_reverse_rel_diff: f64,
    pub singular_values: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RankReport {
    pub dim: usize,
    pub bound: usize,
    pub trials: Vec<RankTrial>,
    pub identity_rank: usize,
    pub pass: bool,
}

impl RankReport {
    pub fn worst_ratio(&self) -> f64 {
        self.trials.iter().map(|t| t.ratio_after_bound).fold(0.0, f64::max)
    }
}

/// One Jacobian analysis of `map` at `x` against `bound`.
pub fn rank_trial(map: &dyn ProbeMap, x: &[f64], bound: usize, h: f64, central: bool) -> Result<RankTrial> {
    let fd = jacobian_fd(map, x, h, central)?;
    let rev = jacobian_reverse(map, x)?;
    let scale = rev.amax();
    let diff = (&fd - &rev).amax();
    let sv = singular_values(&fd);
    let ratio = match (sv.first(), sv.get(bound)) {
        (Some(&s1), Some(&sb)) if s1 > 0.0 => sb / s1,
        _ => 0.0,
    };
    Ok(RankTrial {
        param_draw: 0,
        input: 0,
        numerical_rank: numerical_rank(&sv),
        ratio_after_bound: ratio,
        fd_reverse_rel_diff: if scale > 0.0 { diff / scale } else { diff },
        singular_values: sv,
    })
}

/// LRNB Jacobian rank across random parameter draws and inputs, with the
/// identity map as a full-rank control.
pub fn rank_probe(cfg: &RankProbeConfig) -> Result<RankReport> {
    let (n, d) = (cfg.n_tokens, cfg.d_model);
    let dim = n * d;
    if dim > MAX_PROBE_DIM {
        return Err(Error::Contract(format!(
            "rank probe refuses D = {dim} > {MAX_PROBE_DIM}"
        )));
    }
    let m = 1usize << cfg.depth_i;
    if n % m != 0 {
        return Err(Error::Dimension(format!("{n} tokens not divisible by 2^{}", cfg.depth_i)));
    }
    let bound = dim / m;
    let root = RandomState::new(cfg.seed);
    let lcfg = LrnbConfig {
        depth_i: cfg.depth_i,
        ..LrnbConfig::default()
    };
    let mut trials = Vec::new();
    for p in 0..cfg.n_param_draws {
        let map = LrnbMap::random(n, d, lcfg.clone(), root.derive("params", p as u64).next_u64());
        for i in 0..cfg.n_inputs {
            let mut rng = root.derive("input", (p * cfg.n_inputs + i) as u64);
            let x: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let mut t = rank_trial(&map, &x, bound, cfg.fd_step, cfg.central)?;
            t.param_draw = p;
            t.input = i;
            trials.push(t);
        }
    }
    let mut rng = root.derive("identity", 0);
    let x: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let id = jacobian_fd(&IdentityMap { n, d }, &x, cfg.fd_step, cfg.central)?;
    let identity_rank = numerical_rank(&singular_values(&id));
    let pass = trials.iter().all(|t| t.numerical_rank <= bound);
    Ok(RankReport {
        dim,
        bound,
        trials,
        identity_rank,
        pass,
    })
}

pub fn rank_results_csv(r: &RankReport) -> String {
    let mut s = String::from("param_draw,input,numerical_rank,bound,ratio_after_bound,fd_reverse_rel_diff,pass\n");
    for t in &r.trials {
        let _ = writeln!(
            s,
            "{},{},{},{},{:e},{:e},{}",
            t.param_draw,
            t.input,
            t.numerical_rank,
            r.bound,
            t.ratio_after_bound,
            t.fd_reverse_rel_diff,
            t.numerical_rank <= r.bound
        );
    }
    let _ = writeln!(s, "identity,-,{},{},-,-,{}", r.identity_rank, r.bound, r.identity_rank <= r.bound);
    s
}

pub fn singular_value_csv(r: &RankReport) -> String {
    let mut s = String::from("index");
    for t in &r.trials {
        let _ = write!(s, ",p{}_x{}", t.param_draw, t.input);
    }
    s.push('\n');
    for j in 0..r.dim {
        let _ = write!(s, "{}", j + 1);
        for t in &r.trials {
            let _ = write!(s, ",{:e}", t.singular_values[j]);
        }
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, Serialize)]
pub struct SpreadProbeConfig {
    pub grid: (usize, usize),
    pub peak_height: f64,
    pub sigma: f64,
    pub n_trials: usize,
    pub seed: u64,
}

impl Default for SpreadProbeConfig {
    fn default() -> Self {
        Self {
            grid: (16, 16),
            peak_height: 5.0,
            sigma: 2.0,
            n_trials: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SpreadTrial {
    pub peak: (usize, usize),
    pub softmax: EntropyStats,
    pub sigmoid: EntropyStats,
}

#[derive(Clone, Debug, Serialize)]
pub struct SpreadReport {
    pub trials: Vec<SpreadTrial>,
    /// First trial's raw scores, softmax map and sigmoid map, as grids.
    pub panels: [Vec<f64>; 3],
}

/// Gaussian bump of height `peak_height` over the grid.
pub fn gaussian_scores(grid: (usize, usize), peak: (usize, usize), height: f64, sigma: f64) -> Vec<f64> {
    let (h, w) = grid;
    (0..h * w)
        .map(|i| {
            let (r, c) = ((i / w) as f64 - peak.0 as f64, (i % w) as f64 - peak.1 as f64);
            height * (-(r * r + c * c) / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}

/// Applies softmax and sigmoid to Gaussian-peaked score rows and compares
/// how concentrated the resulting attention is.
pub fn attention_spread_probe(cfg: &SpreadProbeConfig) -> Result<SpreadReport> {
    let (h, w) = cfg.grid;
    let n = h * w;
    if n == 0 {
        return Err(Error::Contract("attention spread probe over an empty grid".into()));
    }
    let mut rng = RandomState::new(cfg.seed);
    let mut trials = Vec::with_capacity(cfg.n_trials);
    let mut panels: [Vec<f64>; 3] = Default::default();
    for t in 0..cfg.n_trials {
        let peak = (rng.below(h), rng.below(w));
        let raw = gaussian_scores(cfg.grid, peak, cfg.peak_height, cfg.sigma);
        let mut g = Graph::new();
        let s = g.constant(Tensor::new([1, n], raw.clone())?);
        let sm = g.softmax(s)?;
        let sg = g.sigmoid(s)?;
        let (smt, sgt) = (g.value(sm).clone(), g.value(sg).clone());
        trials.push(SpreadTrial {
            peak,
            softmax: attention_entropy_stats(&smt)?,
            sigmoid: attention_entropy_stats(&sgt)?,
        });
        if t == 0 {
            let total: f64 = sgt.data().iter().sum();
            panels = [
                raw,
                smt.data().to_vec(),
                sgt.data().iter().map(|v| v / total).collect(),
            ];
        }
    }
    Ok(SpreadReport { trials, panels })
}

pub fn spread_results_csv(r: &SpreadReport) -> String {
    let mut s = String::from(
        "trial,peak_row,peak_col,softmax_entropy,sigmoid_entropy,softmax_max_row_mass,sigmoid_max_row_mass\n",
    );
    for (i, t) in r.trials.iter().enumerate() {
        let _ = writeln!(
            s,
            "{i},{},{},{:e},{:e},{:e},{:e}",
            t.peak.0,
            t.peak.1,
            t.softmax.mean_row_entropy,
            t.sigmoid.mean_row_entropy,
            t.softmax.max_row_mass,
            t.sigmoid.max_row_mass
        );
    }
    s
}

/// A row-major grid as CSV, one grid row per line.
pub fn grid_csv(values: &[f64], w: usize) -> String {
    let mut s = String::new();
    for row in values.chunks(w) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

/// Trains one model per bottleneck variant on the same data and seed and
/// compares anomaly scores of normal and anomalous test samples.
#[derive(Clone, Debug, Serialize)]
pub struct IdentityProbeConfig {
    pub variants: Vec<BottleneckKind>,
    pub spec: SyntheticSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Serialize)]
pub struct IdentityVariantReport {
    pub variant: BottleneckKind,
    pub loss_curve: Vec<TrainRecord>,
    pub final_loss: f64,
    pub mean_normal_score: f64,
    pub mean_abnormal_score: f64,
    pub gap_ratio: f64,
    pub mean_normal_token_score: f64,
    pub mean_abnormal_token_score: f64,
    pub token_gap_ratio: f64,
    pub i_auroc: f64,
}

impl IdentityVariantReport {
    fn from_run(variant: BottleneckKind, log: Vec<TrainRecord>, ev: &Evaluation) -> Self {
        let (mn, ma) = ev.scores.mean_scores();
        let (tn, ta) = ev.scores.mean_token_scores();
        Self {
            variant,
            final_loss: log.last().map_or(f64::NAN, |r| r.loss),
            loss_curve: log,
            mean_normal_score: mn,
            mean_abnormal_score: ma,
            gap_ratio: ma / mn,
            mean_normal_token_score: tn,
            mean_abnormal_token_score: ta,
            token_gap_ratio: ta / tn,
            i_auroc: ev.report.i_auroc,
        }
    }
}

/// The train and test splits a spec describes.
pub fn generate_splits(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    let world = SyntheticWorld::new(spec)?;
    Ok((
        Dataset {
            spec: spec.clone(),
            batches: world.generate_train()?,
        },
        Dataset {
            spec: spec.clone(),
            batches: world.generate_test()?,
        },
    ))
}

/// Trains `model` from `seed`'s initialisation and evaluates it.
pub fn train_and_evaluate(
    model: &ModelConfig,
    tcfg: &TrainConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
) -> Result<(Vec<TrainRecord>, Evaluation)> {
    let init = parameter_init(model, tcfg.seed)?;
    let out = train(init, model, train_ds, tcfg, |_, _| Ok(()))?;
    let ev = evaluate(&out.params, model, test_ds, &EvalOptions::default())?;
    Ok((out.log, ev))
}

pub fn identity_probe(cfg: &IdentityProbeConfig) -> Result<Vec<IdentityVariantReport>> {
    let (train_ds, test_ds) = generate_splits(&cfg.spec)?;
    cfg.variants
        .iter()
        .map(|&v| {
            let mut model = cfg.model.clone();
            model.bottleneck.kind = v;
            let (log, ev) = train_and_evaluate(&model, &cfg.train, &train_ds, &test_ds)?;
            Ok(IdentityVariantReport::from_run(v, log, &ev))
        })
        .collect()
}

pub fn identity_results_csv(reports: &[IdentityVariantReport]) -> String {
    let mut s = String::from(
        "variant,final_loss,mean_normal_score,mean_abnormal_score,gap_ratio,mean_normal_token_score,mean_abnormal_token_score,token_gap_ratio,i_auroc\n",
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{:?},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            r.variant,
            r.final_loss,
            r.mean_normal_score,
            r.mean_abnormal_score,
            r.gap_ratio,
            r.mean_normal_token_score,
            r.mean_abnormal_token_score,
            r.token_gap_ratio,
            r.i_auroc
        );
    }
    s
}

pub fn loss_curve_csv(log: &[TrainRecord]) -> String {
    crate::training::train_log_csv(log)
}

/// A labelled model configuration within an ablation table.
#[derive(Clone, Debug, Serialize)]
pub struct AblationCell {
    pub name: String,
    pub model: ModelConfig,
}

/// The eight rows of the component grid: baseline, singles, pairs, full.
pub fn table2_rows(base: &ModelConfig) -> Vec<AblationCell> {
    let rows = [
        ("baseline", false, false, false),
        ("LRNB", true, false, false),
        ("GRD", false, true, false),
        ("GSM", false, false, true),
        ("LRNB+GRD", true, true, false),
        ("LRNB+GSM", true, false, true),
        ("GRD+GSM", false, true, true),
        ("LRNB+GRD+GSM", true, true, true),
    ];
    rows.iter()
        .map(|&(name, l, r, s)| AblationCell {
            name: name.into(),
            model: base.clone().with_components(l, r, s),
        })
        .collect()
}

/// Bottleneck comparison under global perturbation attention.
pub fn table3_rows(base: &ModelConfig) -> Vec<AblationCell> {
    let full = base.clone().with_components(true, true, true);
    [
        ("None", BottleneckKind::None),
        ("FeatureJitter", BottleneckKind::FeatureJitter),
        ("NDB", BottleneckKind::DropoutOnly),
        ("LRNB", BottleneckKind::Lrnb),
    ]
    .iter()
    .map(|&(name, k)| {
        let mut m = full.clone();
        m.bottleneck.kind = k;
        AblationCell { name: name.into(), model: m }
    })
    .collect()
}

/// Decoder attention comparison with the low-rank bottleneck in place.
pub fn table4_rows(base: &ModelConfig, nma_radius: usize) -> Vec<AblationCell> {
    let full = base.clone().with_components(true, true, true);
    let (d, h) = (base.d_model, base.n_heads);
    let mut nma = AttentionConfig::vanilla(d, h);
    nma.neighbor_mask_radius = Some(nma_radius);
    [
        ("ViT", AttentionConfig::vanilla(d, h)),
        ("NMA", nma),
        ("GPA", AttentionConfig::global_perturbation(d, h)),
    ]
    .into_iter()
    .map(|(name, a)| {
        let mut m = full.clone();
        m.attention = a;
        AblationCell { name: name.into(), model: m }
    })
    .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationConfig {
    pub spec: SyntheticSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub nma_radius: usize,
    pub include_tables_3_4: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub name: String,
    /// Seven metrics per seed, in table column order.
    pub per_seed: Vec<[f64; 7]>,
}

impl AblationRow {
    pub fn mean_std(&self) -> [(f64, f64); 7] {
        let k = self.per_seed.len() as f64;
        std::array::from_fn(|j| {
            let m = self.per_seed.iter().map(|r| r[j]).sum::<f64>() / k;
            let v = self.per_seed.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / k;
            (m, v.sqrt())
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub table2: Vec<AblationRow>,
    pub table3: Vec<AblationRow>,
    pub table4: Vec<AblationRow>,
}

/// The spec and training config used for one seed of the grid.
pub fn seeded(cfg: &AblationConfig, seed: u64) -> (SyntheticSpec, TrainConfig) {
    let mut spec = cfg.spec.clone();
    spec.seed = seed;
    let mut t = cfg.train.clone();
    t.seed = seed;
    (spec, t)
}

/// Trains every table cell for every seed. Cells with identical model
/// configs are trained once and shared. `jobs` worker threads run
/// independent (config, seed) cells; results do not depend on `jobs`.
pub fn ablation_grid(cfg: &AblationConfig, jobs: usize) -> Result<AblationReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::Contract("ablation needs at least one seed".into()));
    }
    let t2 = table2_rows(&cfg.model);
    let (t3, t4) = if cfg.include_tables_3_4 {
        (table3_rows(&cfg.model), table4_rows(&cfg.model, cfg.nma_radius))
    } else {
        (Vec::new(), Vec::new())
    };
    let mut unique: BTreeMap<String, ModelConfig> = BTreeMap::new();
    for c in t2.iter().chain(&t3).chain(&t4) {
        c.model.validate()?;
        unique.insert(serde_json::to_string(&c.model)?, c.model.clone());
    }
    let configs: Vec<(String, ModelConfig)> = unique.into_iter().collect();
    let datasets = cfg
        .seeds
        .iter()
        .map(|&s| generate_splits(&seeded(cfg, s).0))
        .collect::<Result<Vec<_>>>()?;
    let jobs_list: Vec<(usize, usize)> = (0..cfg.seeds.len())
        .flat_map(|s| (0..configs.len()).map(move |c| (s, c)))
        .collect();
    let run = |&(s, c): &(usize, usize)| -> Result<[f64; 7]> {
        let (_, tcfg) = seeded(cfg, cfg.seeds[s]);
        let (tr, te) = &datasets[s];
        let (_, ev) = train_and_evaluate(&configs[c].1, &tcfg, tr, te)?;
        Ok(ev.report.values())
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
    let results: Vec<Result<[f64; 7]>> = pool.install(|| {
        use rayon::prelude::*;
        jobs_list.par_iter().map(run).collect()
    });
    let mut table: BTreeMap<(usize, usize), [f64; 7]> = BTreeMap::new();
    for (key, r) in jobs_list.iter().zip(results) {
        table.insert(*key, r?);
    }
    let rows = |cells: &[AblationCell]| -> Result<Vec<AblationRow>> {
        cells
            .iter()
            .map(|cell| {
                let key = serde_json::to_string(&cell.model)?;
                let c = configs.iter().position(|(k, _)| *k == key).expect("config registered");
                Ok(AblationRow {
                    name: cell.name.clone(),
                    per_seed: (0..cfg.seeds.len()).map(|s| table[&(s, c)]).collect(),
                })
            })
            .collect()
    };
    Ok(AblationReport {
        seeds: cfg.seeds.clone(),
        table2: rows(&t2)?,
        table3: rows(&t3)?,
        table4: rows(&t4)?,
    })
}

/// One row per configuration, `mean±std` per metric.
pub fn ablation_table_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("config,{}\n", crate::evaluation::METRICS_CSV_HEADER);
    for r in rows {
        let cells: Vec<String> = r
            .mean_std()
            .iter()
            .map(|(m, sd)| format!("{m:.4}±{sd:.4}"))
            .collect();
        let _ = writeln!(s, "{},{}", r.name, cells.join(","));
    }
    s
}

/// Every (config, seed) value, for re-analysis.
pub fn ablation_per_seed_csv(report: &AblationReport) -> String {
    let mut s = format!("table,config,seed,{}\n", crate::evaluation::METRICS_CSV_HEADER);
    for (t, rows) in [("2", &report.table2), ("3", &report.table3), ("4", &report.table4)] {
        for r in rows {
            for (seed, v) in report.seeds.iter().zip(&r.per_seed) {
                let cells: Vec<String> = v.iter().map(|x| format!("{x:e}")).collect();
                let _ = writeln!(s, "{t},{},{seed},{}", r.name, cells.join(","));
            }
        }
    }
    s
}

/// Writes `config.json`, `results.csv` and `curves/<name>` files under `dir`.
pub fn write_probe_dir(dir: &Path, config: &impl Serialize, results_csv: &str, curves: &[(String, String)]) -> Result<()> {
    let curves_dir = dir.join("curves");
    std::fs::create_dir_all(&curves_dir).map_err(|e| Error::io(&curves_dir, e))?;
    let write = |p: &Path, s: &str| std::fs::write(p, s).map_err(|e| Error::io(p, e));
    let mut cfg = serde_json::to_string_pretty(config)?;
    cfg.push('\n');
    write(&dir.join("config.json"), &cfg)?;
    write(&dir.join("results.csv"), results_csv)?;
    for (name, body) in curves {
        write(&curves_dir.join(name), body)?;
    }
    Ok(())
}
