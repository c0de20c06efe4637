//! Hard-mining cosine loss, AdamW with AMSGrad and update clipping, the
//! warmup-then-cosine schedule, and the training loop.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{model_forward, ModelConfig};
use crate::params::ParamStore;
use crate::rng::RandomState;
use crate::synthetic::{Dataset, TokenBatch};
use crate::tensor::Tensor;

pub const TRAIN_CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub version: u32,
    pub batch_size: usize,
    pub total_steps: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub warmup_steps: usize,
    /// Fraction of tokens (the hardest ones) that receive gradient.
    pub hard_mining_keep: f64,
    pub weight_decay: f64,
    pub amsgrad: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub log_interval: usize,
    /// Steps between intermediate checkpoints; `None` keeps only the final one.
    pub checkpoint_interval: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            version: TRAIN_CONFIG_VERSION,
            batch_size: 32,
            total_steps: 5000,
            lr_start: 2e-3,
            lr_end: 2e-4,
            warmup_steps: 100,
            hard_mining_keep: 0.9,
            weight_decay: 1e-4,
            amsgrad: true,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            log_interval: 50,
            checkpoint_interval: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.version != TRAIN_CONFIG_VERSION {
            p.push(format!("version: expected {TRAIN_CONFIG_VERSION}, got {}", self.version));
        }
        if self.batch_size == 0 {
            p.push("batch_size: must be at least 1".into());
        }
        if !(self.lr_end >= 0.0 && self.lr_end <= self.lr_start) {
            p.push(format!(
                "lr_end: {} must lie in [0, lr_start = {}]",
                self.lr_end, self.lr_start
            ));
        }
        if self.total_steps > 0 && self.warmup_steps > self.total_steps {
            p.push(format!(
                "warmup_steps: {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.hard_mining_keep > 0.0 && self.hard_mining_keep <= 1.0) {
            p.push(format!("hard_mining_keep: {} not in (0, 1]", self.hard_mining_keep));
        }
        if !(self.weight_decay >= 0.0) {
            p.push(format!("weight_decay: {} must be >= 0", self.weight_decay));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            p.push(format!("beta1/beta2: ({}, {}) must lie in [0, 1)", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) {
            p.push(format!("eps: {} must be > 0", self.eps));
        }
        if self.log_interval == 0 {
            p.push("log_interval: must be at least 1".into());
        }
        if self.checkpoint_interval == Some(0) {
            p.push("checkpoint_interval: must be at least 1 when set".into());
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

/// Linear warmup to `lr_start`, then cosine decay to `lr_end` at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let (w, t) = (cfg.warmup_steps, cfg.total_steps);
    if step < w {
        return cfg.lr_start * step as f64 / w as f64;
    }
    if step >= t {
        return cfg.lr_end;
    }
    let progress = (step - w) as f64 / (t - w) as f64;
    cfg.lr_start - 0.5 * (cfg.lr_start - cfg.lr_end) * (1.0 - (PI * progress).cos())
}

/// Which tokens of a `[B, N]` distance array receive gradient: the
/// `ceil(keep·B·N)` largest, ties broken by position.
pub fn hard_mining_selection(distances: &[f64], keep: f64) -> Result<Vec<bool>> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(Error::Parameter(format!("hard-mining keep {keep} not in (0, 1]")));
    }
    let n = distances.len();
    let k = ((keep * n as f64).ceil() as usize).clamp(1.min(n), n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| distances[b].total_cmp(&distances[a]).then(a.cmp(&b)));
    let mut sel = vec![false; n];
    for &i in &order[..k] {
        sel[i] = true;
    }
    Ok(sel)
}

/// Mean cosine distance over the hardest `keep` fraction of all tokens in
/// the batch. Easier tokens contribute neither value nor gradient.
pub fn hard_mining_cosine_loss(g: &mut Graph, recon: Var, target: Var, keep: f64) -> Result<Var> {
    if g.shape(recon) != g.shape(target) {
        return Err(Error::Dimension(format!(
            "loss: reconstruction {:?} vs target {:?}",
            g.shape(recon),
            g.shape(target)
        )));
    }
    let cs = g.cosine_similarity(recon, target)?;
    let shape = g.shape(cs).to_vec();
    let ones = g.constant(Tensor::ones(shape.clone()));
    let dist = g.sub(ones, cs)?;
    let sel = hard_mining_selection(g.value(dist).data(), keep)?;
    let k = sel.iter().filter(|s| **s).count().max(1) as f64;
    let w = Tensor::new(shape, sel.iter().map(|s| if *s { 1.0 / k } else { 0.0 }).collect())?;
    let w = g.constant(w);
    let weighted = g.mul(dist, w)?;
    g.sum(weighted)
}

/// Moment estimates for every parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub v_max: BTreeMap<String, Tensor>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = |p: &ParamStore| {
            p.iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect::<BTreeMap<_, _>>()
        };
        Self {
            m: zeros(params),
            v: zeros(params),
            v_max: zeros(params),
            t: 0,
        }
    }
}

/// One AdamW update at learning rate `lr_at(step)`.
///
/// Weight decay is decoupled. With `amsgrad` the denominator uses the running
/// maximum of the bias-corrected second moment. Each element's Adam update is
/// clipped to `±lr`. Non-finite gradients abort the step before anything
/// changes.
pub fn optimizer_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    step: usize,
) -> Result<()> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for parameter '{name}'")));
        }
        match params.get(name) {
            Some(p) if p.shape() == g.shape() => {}
            _ => {
                return Err(Error::Contract(format!(
                    "gradient '{name}' does not match any parameter"
                )))
            }
        }
    }
    let lr = lr_at(step, cfg);
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        let vm = state
            .v_max
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        let (pd, gd) = (p.data_mut(), g.data());
        let (md, vd, vmd) = (m.data_mut(), v.data_mut(), vm.data_mut());
        for i in 0..pd.len() {
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gd[i];
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
            let m_hat = md[i] / bc1;
            let mut v_hat = vd[i] / bc2;
            if cfg.amsgrad {
                vmd[i] = vmd[i].max(v_hat);
                v_hat = vmd[i];
            }
            let update = (lr * m_hat / (v_hat.sqrt() + cfg.eps)).clamp(-lr, lr);
            pd[i] -= lr * cfg.weight_decay * pd[i] + update;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Mean `1 − CS` over every token of the step's batch.
    pub mean_normal_distance: f64,
}

pub const TRAIN_LOG_HEADER: &str = "step,lr,loss,mean_normal_distance";

pub fn train_log_csv(records: &[TrainRecord]) -> String {
    let mut s = String::from(TRAIN_LOG_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&format!("{},{:e},{:e},{:e}\n", r.step, r.lr, r.loss, r.mean_normal_distance));
    }
    s
}

pub fn write_train_log(path: &Path, records: &[TrainRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(train_log_csv(records).as_bytes())
        .map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub log: Vec<TrainRecord>,
}

/// One forward/backward pass on `batch`; returns the loss, the mean token
/// distance and the per-parameter gradients.
pub fn loss_and_gradients(
    params: &ParamStore,
    model: &ModelConfig,
    batch: &TokenBatch,
    keep: f64,
    rng: &mut RandomState,
) -> Result<(f64, f64, BTreeMap<String, Tensor>)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let out = model_forward(&mut g, &bound, batch, model, true, rng)?;
    let loss = hard_mining_cosine_loss(&mut g, out.reconstructed, out.target, keep)?;
    let cs = g.cosine_similarity(out.reconstructed, out.target)?;
    let csv = g.value(cs);
    let mean_dist = 1.0 - csv.sum() / csv.len() as f64;
    let loss_value = g.value(loss).item()?;
    let mut grads = g.backward(loss)?;
    Ok((loss_value, mean_dist, bound.gradients(&mut grads, params)))
}

/// Trains from `init` on an all-normal dataset. `on_checkpoint` is called
/// every `checkpoint_interval` steps with the step count and parameters.
pub fn train(
    init: ParamStore,
    model: &ModelConfig,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_checkpoint: impl FnMut(usize, &ParamStore) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    if !data.is_all_normal() {
        return Err(Error::Contract(
            "training data contains anomalous samples; only normal samples may be used".into(),
        ));
    }
    let mut params = init;
    let mut log = Vec::new();
    if cfg.total_steps == 0 {
        return Ok(TrainOutcome { params, log });
    }
    let all = data.flatten()?;
    model.check_batch(&all)?;
    let n = all.len();
    let bs = cfg.batch_size.min(n);
    let root = RandomState::new(cfg.seed);
    let mut state = OptimizerState::new(&params);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    for step in 0..cfg.total_steps {
        let mut idx = Vec::with_capacity(bs);
        while idx.len() < bs {
            if cursor == order.len() {
                order = (0..n).collect();
                root.derive("epoch", epoch).shuffle(&mut order);
                epoch += 1;
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let batch = all.select(&idx);
        let mut rng = root.derive("step", step as u64);
        let (loss, mean_dist, grads) =
            loss_and_gradients(&params, model, &batch, cfg.hard_mining_keep, &mut rng)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss became {loss} at step {step}")));
        }
        let lr = lr_at(step, cfg);
        optimizer_step(&mut params, &grads, &mut state, cfg, step)?;
        let done = step + 1;
        if done % cfg.log_interval == 0 {
            log.push(TrainRecord {
                step: done,
                lr,
                loss,
                mean_normal_distance: mean_dist,
            });
        }
        if let Some(every) = cfg.checkpoint_interval {
            if done % every == 0 {
                on_checkpoint(done, &params)?;
            }
        }
    }
    Ok(TrainOutcome { params, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let cfg = TrainConfig {
            warmup_steps: 100,
            total_steps: 1100,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(100, &cfg), 2e-3);
        assert_eq!(lr_at(1100, &cfg), 2e-4);
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert!((lr_at(600, &cfg) - 1.1e-3).abs() < 1e-15);
    }

    #[test]
    fn hard_mining_example() {
        let mut g = Graph::new();
        // Unit 2-D vectors at angles whose cosine distances are 0.1..0.4.
        let target = Tensor::new([1, 4, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let recon: Vec<f64> = [0.1f64, 0.2, 0.3, 0.4]
            .iter()
            .flat_map(|d| {
                let c = 1.0 - d;
                [c, (1.0 - c * c).sqrt()]
            })
            .collect();
        let r = g.param(Tensor::new([1, 4, 2], recon).unwrap());
        let t = g.constant(target);
        let loss = hard_mining_cosine_loss(&mut g, r, t, 0.5).unwrap();
        assert!((g.value(loss).item().unwrap() - 0.35).abs() < 1e-12);
        let grads = g.backward(loss).unwrap();
        let gr = grads.get(r).unwrap().data();
        assert!(gr[..4].iter().all(|v| *v == 0.0));
        assert!(gr[4..].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap());
        let before = p.clone();
        let cfg = TrainConfig {
            weight_decay: 0.0,
            warmup_steps: 0,
            ..TrainConfig::default()
        };
        let mut st = OptimizerState::new(&p);
        let grads = BTreeMap::from([("w".to_string(), Tensor::zeros([3]))]);
        optimizer_step(&mut p, &grads, &mut st, &cfg, 0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = ParamStore::new();
        p.insert("dec0.attn.q.w", Tensor::zeros([2]));
        let mut st = OptimizerState::new(&p);
        let grads = BTreeMap::from([(
            "dec0.attn.q.w".to_string(),
            Tensor::new([2], vec![1.0, f64::NAN]).unwrap(),
        )]);
        match optimizer_step(&mut p, &grads, &mut st, &TrainConfig::default(), 0) {
            Err(Error::Numeric(m)) => assert!(m.contains("dec0.attn.q.w")),
            other => panic!("{other:?}"),
        }
        assert_eq!(st.t, 0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::scalar(0.0));
        let cfg = TrainConfig {
            lr_start: 1e-3,
            lr_end: 1e-3,
            warmup_steps: 0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut st = OptimizerState::new(&p);
        let grads = BTreeMap::from([("x".to_string(), Tensor::scalar(1.0))]);
        optimizer_step(&mut p, &grads, &mut st, &cfg, 0).unwrap();
        let moved = -p.get("x").unwrap().item().unwrap();
        assert!((moved - 1e-3 / (1.0 + 1e-8)).abs() < 1e-18);
    }
}
