#![allow(dead_code)]

use std::collections::BTreeMap;

use sbk_core::attention::{attention_forward, AttentionConfig, AttentionVariant, OutputScale};
use sbk_core::model::ModelConfig;
use sbk_core::params::ParamStore;
use sbk_core::synthetic::{SyntheticSpec, SyntheticWorld, TokenBatch};
use sbk_core::training::{hard_mining_cosine_loss, loss_and_gradients};
use sbk_core::{Graph, RandomState, Result, Tensor, Var};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const TOL_LINEAR: f64 = 1e-6;
pub const CASES: u64 = 20;

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-8)`. The floor keeps gradients that vanish
/// identically (a key bias under softmax) from comparing roundoff to roundoff.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / na.max(nb).max(1e-8)
}

type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

/// Loss is `Σ w ⊙ f(inputs)` for a fixed random `w`.
fn projected(inputs: &[Tensor], f: &Build, w: &Option<Tensor>, grad: bool) -> (f64, Vec<Tensor>, Tensor) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| if grad { g.param(t.clone()) } else { g.constant(t.clone()) })
        .collect();
    let out = f(&mut g, &vars).expect("forward");
    let w = match w {
        Some(w) => w.clone(),
        None => {
            let mut rng = RandomState::new(0xfeed);
            Tensor::randn(g.shape(out).to_vec(), 1.0, &mut rng)
        }
    };
    let wv = g.constant(w.clone());
    let prod = g.mul(out, wv).expect("mul");
    let loss = g.sum(prod).expect("sum");
    let value = g.value(loss).item().unwrap();
    if !grad {
        return (value, Vec::new(), w);
    }
    let mut grads = g.backward(loss).expect("backward");
    let gs = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    (value, gs, w)
}

/// Worst relative error between reverse-mode and central-difference
/// gradients over every input of `f`.
pub fn gradcheck(inputs: &[Tensor], f: &Build) -> f64 {
    let (_, analytic, w) = projected(inputs, f, &None, true);
    let w = Some(w);
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; t.len()];
        for j in 0..t.len() {
            let eval = |delta: f64| {
                let mut xs = inputs.to_vec();
                xs[i].data_mut()[j] += delta;
                projected(&xs, f, &w, false).0
            };
            numeric[j] = (eval(H) - eval(-H)) / (2.0 * H);
        }
        worst = worst.max(rel_err(analytic[i].data(), &numeric));
    }
    worst
}

pub fn rand_shape(rng: &mut RandomState, rank: usize, max: usize) -> Vec<usize> {
    (0..rank).map(|_| 1 + rng.below(max)).collect()
}

pub fn randn(shape: &[usize], rng: &mut RandomState) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

pub struct OpCheck {
    pub name: &'static str,
    pub worst: f64,
    pub tol: f64,
    pub cases: u64,
}

impl OpCheck {
    pub fn pass(&self) -> bool {
        self.worst < self.tol
    }
}

fn sweep(name: &'static str, tol: f64, case: impl Fn(&mut RandomState) -> f64) -> OpCheck {
    let mut worst: f64 = 0.0;
    for c in 0..CASES {
        let mut rng = RandomState::new(1000 + c).derive(name, c);
        worst = worst.max(case(&mut rng));
    }
    OpCheck { name, worst, tol, cases: CASES }
}

fn attn_cfg(variant: AttentionVariant, self_mask: bool, dropout: f64, radius: Option<usize>) -> AttentionConfig {
    let mut c = AttentionConfig::vanilla(4, 1);
    c.variant = variant;
    c.self_mask = self_mask;
    c.attn_dropout_rate = dropout;
    c.neighbor_mask_radius = radius;
    c.output_scale_mode = if variant == AttentionVariant::Sigmoid {
        OutputScale::DivideByN
    } else {
        OutputScale::None
    };
    c
}

/// Every differentiable op, `CASES` random shapes and values each.
pub fn op_sweep() -> Vec<OpCheck> {
    let mut out = Vec::new();
    out.push(sweep("matmul", TOL_LINEAR, |r| {
        let (b, m, k, n) = (1 + r.below(2), 1 + r.below(4), 1 + r.below(4), 1 + r.below(4));
        let a = randn(&[b, m, k], r);
        let bt = randn(&[b, k, n], r);
        gradcheck(&[a, bt], &|g, v| g.matmul(v[0], v[1]))
    }));
    out.push(sweep("matmul_broadcast", TOL_LINEAR, |r| {
        let (b, m, k, n) = (1 + r.below(3), 1 + r.below(4), 1 + r.below(4), 1 + r.below(4));
        let a = randn(&[b, m, k], r);
        let w = randn(&[k, n], r);
        gradcheck(&[a, w], &|g, v| g.matmul(v[0], v[1]))
    }));
    for (name, which) in [("add", 0), ("sub", 1), ("mul", 2)] {
        out.push(sweep(name, TOL_LINEAR, move |r| {
            let rank = 1 + r.below(3);
            let s = rand_shape(r, rank, 4);
            let suffix = s[r.below(s.len())..].to_vec();
            let a = randn(&s, r);
            let b = randn(&suffix, r);
            gradcheck(&[a, b], &move |g, v| match which {
                0 => g.add(v[0], v[1]),
                1 => g.sub(v[0], v[1]),
                _ => g.mul(v[0], v[1]),
            })
        }));
    }
    out.push(sweep("scale", TOL_LINEAR, |r| {
        let s = rand_shape(r, 2, 5);
        let c = r.normal() * 3.0;
        gradcheck(&[randn(&s, r)], &move |g, v| g.scale(v[0], c))
    }));
    out.push(sweep("transpose_last2", TOL_LINEAR, |r| {
        let rank = 2 + r.below(2);
        let s = rand_shape(r, rank, 4);
        gradcheck(&[randn(&s, r)], &|g, v| g.transpose_last2(v[0]))
    }));
    out.push(sweep("swap_axes", TOL_LINEAR, |r| {
        let s = rand_shape(r, 4, 3);
        let (i, j) = (r.below(4), r.below(4));
        gradcheck(&[randn(&s, r)], &move |g, v| g.swap_axes(v[0], i, j))
    }));
    out.push(sweep("reshape", TOL_LINEAR, |r| {
        let (a, b, c) = (1 + r.below(3), 1 + r.below(3), 1 + r.below(3));
        gradcheck(&[randn(&[a, b, c], r)], &move |g, v| g.reshape(v[0], &[a * b, c]))
    }));
    out.push(sweep("sum", TOL_LINEAR, |r| {
        let s = rand_shape(r, 2, 5);
        gradcheck(&[randn(&s, r)], &|g, v| g.sum(v[0]))
    }));
    out.push(sweep("mean", TOL_LINEAR, |r| {
        let s = rand_shape(r, 2, 5);
        gradcheck(&[randn(&s, r)], &|g, v| g.mean(v[0]))
    }));
    out.push(sweep("concat", TOL_LINEAR, |r| {
        let s = rand_shape(r, 3, 3);
        let axis = r.below(3);
        let mut s2 = s.clone();
        s2[axis] = 1 + r.below(3);
        gradcheck(&[randn(&s, r), randn(&s2, r)], &move |g, v| g.concat(v, axis))
    }));
    out.push(sweep("gelu", TOL, |r| {
        let s = rand_shape(r, 2, 5);
        gradcheck(&[randn(&s, r)], &|g, v| g.gelu(v[0]))
    }));
    out.push(sweep("sigmoid", TOL, |r| {
        let s = rand_shape(r, 2, 5);
        gradcheck(&[randn(&s, r)], &|g, v| g.sigmoid(v[0]))
    }));
    out.push(sweep("softmax", TOL, |r| {
        let s = rand_shape(r, 2, 5);
        gradcheck(&[randn(&s, r)], &|g, v| g.softmax(v[0]))
    }));
    out.push(sweep("masked_softmax", TOL, |r| {
        let n = 2 + r.below(4);
        let keep = Tensor::from_fn([n, n], |i| if i % n == i / n { 0.0 } else if r.uniform() < 0.3 { 0.0 } else { 1.0 });
        // every row keeps at least one entry
        let mut keep = keep;
        for i in 0..n {
            keep.data_mut()[i * n + (i + 1) % n] = 1.0;
        }
        let x = randn(&[1 + r.below(2), n, n], r);
        gradcheck(&[x], &move |g, v| g.masked_softmax(v[0], &keep))
    }));
    out.push(sweep("layer_norm", TOL, |r| {
        let d = 2 + r.below(5);
        let rows = 1 + r.below(4);
        let x = randn(&[rows, d], r);
        let gamma = randn(&[d], r);
        let beta = randn(&[d], r);
        gradcheck(&[x, gamma, beta], &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))
    }));
    out.push(sweep("cosine_similarity", TOL, |r| {
        let s = [1 + r.below(3), 1 + r.below(3), 2 + r.below(4)];
        gradcheck(&[randn(&s, r), randn(&s, r)], &|g, v| g.cosine_similarity(v[0], v[1]))
    }));
    out.push(sweep("dropout", TOL_LINEAR, |r| {
        let s = rand_shape(r, 2, 6);
        let seed = r.next_u64();
        gradcheck(&[randn(&s, r)], &move |g, v| {
            let mut rng = RandomState::new(seed);
            g.dropout(v[0], 0.3, true, &mut rng)
        })
    }));
    out.push(sweep("hard_mining_loss", TOL, |r| {
        let s = [1 + r.below(2), 2 + r.below(6), 3 + r.below(3)];
        gradcheck(&[randn(&s, r), randn(&s, r)], &|g, v| hard_mining_cosine_loss(g, v[0], v[1], 0.75))
    }));
    for (name, variant, self_mask, dropout, radius) in [
        ("attention_softmax", AttentionVariant::Softmax, false, 0.0, None),
        ("attention_softmax_masked", AttentionVariant::Softmax, true, 0.1, Some(0)),
        ("attention_sigmoid", AttentionVariant::Sigmoid, false, 0.0, None),
        ("attention_sigmoid_masked", AttentionVariant::Sigmoid, true, 0.1, Some(0)),
        ("attention_neighbour", AttentionVariant::Softmax, false, 0.0, Some(1)),
    ] {
        out.push(sweep(name, TOL, move |r| {
            let cfg = attn_cfg(variant, self_mask, dropout, radius);
            let grid = (4, 4);
            let s = [1 + r.below(2), 1 + r.below(2), 16, 2 + r.below(3)];
            let seed = r.next_u64();
            let cfg2 = cfg.clone();
            gradcheck(&[randn(&s, r), randn(&s, r), randn(&s, r)], &move |g, v| {
                let mut rng = RandomState::new(seed);
                Ok(attention_forward(g, v[0], v[1], v[2], &cfg2, grid, true, &mut rng)?.output)
            })
        }));
    }
    out
}

pub fn tiny_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_classes: 2,
        grid_h: 4,
        grid_w: 4,
        d_model: 8,
        manifold_rank: 3,
        n_encoder_layers: 2,
        train_per_class: 2,
        test_normal_per_class: 1,
        test_anomalous_per_class: 1,
        seed,
        ..SyntheticSpec::default()
    }
}

pub fn tiny_batch(seed: u64) -> TokenBatch {
    let spec = tiny_spec(seed);
    let world = SyntheticWorld::new(&spec).unwrap();
    let mut rng = RandomState::new(seed);
    world.generate_normal((seed % 2) as usize, 2, &mut rng).unwrap()
}

pub fn tiny_models() -> Vec<(&'static str, ModelConfig)> {
    let mut base = ModelConfig::baseline(8, 2, 1);
    base.mlp_ratio = 2;
    let mut v = vec![
        ("baseline", base.clone()),
        ("lrnb", base.clone().with_components(true, false, false)),
        ("grd", base.clone().with_components(false, true, false)),
        ("gsm", base.clone().with_components(false, false, true)),
        ("full", base.clone().with_components(true, true, true)),
    ];
    let mut fj = base.clone();
    fj.bottleneck.kind = sbk_core::bottleneck::BottleneckKind::FeatureJitter;
    v.push(("jitter", fj));
    let mut ndb = base.clone();
    ndb.bottleneck.kind = sbk_core::bottleneck::BottleneckKind::DropoutOnly;
    v.push(("ndb", ndb));
    v
}

/// Every parameter gradient of the training loss against central differences.
/// The same rng seed is replayed for each evaluation so the noise is fixed.
pub fn model_gradcheck(cfg: &ModelConfig, seed: u64) -> f64 {
    // At initialisation the attention is nearly uniform and the q/k
    // gradients sit near 1e-8, below what differences at h = 1e-5 resolve.
    // Checking at a perturbed point exercises every path at a useful scale.
    let mut params = sbk_core::model::parameter_init(cfg, seed).unwrap();
    let mut rng = RandomState::new(seed).derive("perturb", 0);
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += 0.3 * rng.normal();
        }
    }
    let batch = tiny_batch(seed);
    let loss_at = |p: &ParamStore| {
        let mut rng = RandomState::new(seed ^ 0xabc);
        loss_and_gradients(p, cfg, &batch, 0.9, &mut rng).unwrap()
    };
    let (_, _, grads) = loss_at(&params);
    let mut per_tensor = Vec::new();
    for (name, t) in params.iter() {
        let mut numeric = vec![0.0; t.len()];
        for (j, n) in numeric.iter_mut().enumerate() {
            let mut p = params.clone();
            p.get_mut(name).unwrap().data_mut()[j] += H;
            let up = loss_at(&p).0;
            p.get_mut(name).unwrap().data_mut()[j] -= 2.0 * H;
            let down = loss_at(&p).0;
            *n = (up - down) / (2.0 * H);
        }
        per_tensor.push((grads[name].data().to_vec(), numeric));
    }
    let all_a: Vec<f64> = per_tensor.iter().flat_map(|(a, _)| a.iter().copied()).collect();
    let all_n: Vec<f64> = per_tensor.iter().flat_map(|(_, n)| n.iter().copied()).collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    // A tensor whose gradient is negligible next to the whole (a key bias
    // under softmax is exactly zero) is judged against 1e-6 of the total.
    let floor = 1e-6 * norm(&all_a).max(norm(&all_n));
    let mut worst = rel_err(&all_a, &all_n);
    for (a, n) in &per_tensor {
        let d: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
        worst = worst.max(norm(&d) / norm(a).max(norm(n)).max(floor));
    }
    worst
}

// ---- brute-force metric oracles ----

pub fn auroc_oracle(s: &[f64], l: &[bool]) -> f64 {
    let (mut acc, mut pairs) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if l[i] && !l[j] {
                pairs += 1.0;
                if s[i] > s[j] {
                    acc += 1.0;
                } else if s[i] == s[j] {
                    acc += 0.5;
                }
            }
        }
    }
    acc / pairs
}

fn distinct_desc(s: &[f64]) -> Vec<f64> {
    let mut t = s.to_vec();
    t.sort_by(|a, b| b.partial_cmp(a).unwrap());
    t.dedup();
    t
}

fn counts_at(s: &[f64], l: &[bool], t: f64) -> (f64, f64) {
    let tp = s.iter().zip(l).filter(|(x, y)| **x >= t && **y).count() as f64;
    let fp = s.iter().zip(l).filter(|(x, y)| **x >= t && !**y).count() as f64;
    (tp, fp)
}

pub fn ap_oracle(s: &[f64], l: &[bool]) -> f64 {
    let p = l.iter().filter(|x| **x).count() as f64;
    let mut prev_r = 0.0;
    let mut ap = 0.0;
    for t in distinct_desc(s) {
        let (tp, fp) = counts_at(s, l, t);
        let r = tp / p;
        if tp > 0.0 {
            ap += (r - prev_r) * tp / (tp + fp);
        }
        prev_r = r;
    }
    ap
}

pub fn f1_oracle(s: &[f64], l: &[bool]) -> f64 {
    let p = l.iter().filter(|x| **x).count() as f64;
    let mut best: f64 = 0.0;
    for t in distinct_desc(s) {
        let (tp, fp) = counts_at(s, l, t);
        if tp == 0.0 {
            continue;
        }
        let (prec, rec) = (tp / (tp + fp), tp / p);
        best = best.max(2.0 * prec * rec / (prec + rec));
    }
    best
}

/// Union-find labelling of 8-connected components.
pub fn regions_oracle(mask: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..mask.len()).collect();
    fn find(p: &mut Vec<usize>, x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        p[x] = r;
        r
    }
    for i in 0..h {
        for j in 0..w {
            if !mask[i * w + j] {
                continue;
            }
            for (di, dj) in [(0i64, 1i64), (1, -1), (1, 0), (1, 1)] {
                let (ni, nj) = (i as i64 + di, j as i64 + dj);
                if ni < h as i64 && nj >= 0 && nj < w as i64 && mask[ni as usize * w + nj as usize] {
                    let a = find(&mut parent, i * w + j);
                    let b = find(&mut parent, ni as usize * w + nj as usize);
                    parent[a] = b;
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..mask.len() {
        if mask[i] {
            let r = find(&mut parent, i);
            groups.entry(r).or_default().push(i);
        }
    }
    groups.into_values().collect()
}

/// Threshold sweep over every distinct score; trapezoid area of the
/// `(fpr, pro)` polyline from the origin, clipped at `limit`.
pub fn aupro_oracle(maps: &[Vec<f64>], masks: &[Vec<bool>], grid: (usize, usize), limit: f64) -> f64 {
    let mut regions: Vec<(usize, Vec<usize>)> = Vec::new();
    for (k, m) in masks.iter().enumerate() {
        for r in regions_oracle(m, grid.0, grid.1) {
            regions.push((k, r));
        }
    }
    let normals: Vec<(usize, usize)> = masks
        .iter()
        .enumerate()
        .flat_map(|(k, m)| m.iter().enumerate().filter(|(_, v)| !**v).map(move |(i, _)| (k, i)))
        .collect();
    let all: Vec<f64> = maps.iter().flatten().copied().collect();
    let mut xs = vec![0.0];
    let mut ys = vec![0.0];
    for t in distinct_desc(&all) {
        let fpr = normals.iter().filter(|(k, i)| maps[*k][*i] >= t).count() as f64 / normals.len() as f64;
        let pro = regions
            .iter()
            .map(|(k, r)| r.iter().filter(|&&i| maps[*k][i] >= t).count() as f64 / r.len() as f64)
            .sum::<f64>()
            / regions.len() as f64;
        xs.push(fpr);
        ys.push(pro);
    }
    let mut area = 0.0;
    for i in 1..xs.len() {
        let (x0, x1) = (xs[i - 1].min(limit), xs[i].min(limit));
        if x1 <= x0 {
            continue;
        }
        // value of the segment at the clipped right end
        let y1 = if xs[i] > limit {
            ys[i - 1] + (ys[i] - ys[i - 1]) * (limit - xs[i - 1]) / (xs[i] - xs[i - 1])
        } else {
            ys[i]
        };
        area += 0.5 * (x1 - x0) * (ys[i - 1] + y1);
    }
    area / limit
}

/// Scores drawn from a small set of values so ties are common.
pub fn tied_scores(n: usize, rng: &mut RandomState) -> Vec<f64> {
    let levels = 1 + rng.below(6);
    (0..n).map(|_| rng.below(levels) as f64 * 0.25 + if rng.bernoulli(0.3) { rng.uniform() } else { 0.0 }).collect()
}

pub struct MetricInstance {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub maps: Vec<Vec<f64>>,
    pub masks: Vec<Vec<bool>>,
    pub grid: (usize, usize),
}

pub fn metric_instance(seed: u64) -> MetricInstance {
    let mut rng = RandomState::new(seed);
    let n = 2 + rng.below(31);
    let mut labels: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.5)).collect();
    labels[0] = true;
    labels[1] = false;
    let scores = tied_scores(n, &mut rng);
    let grid = (1 + rng.below(8), 1 + rng.below(8));
    let cells = grid.0 * grid.1;
    let count = 1 + rng.below(4);
    let mut masks: Vec<Vec<bool>> = (0..count).map(|_| (0..cells).map(|_| rng.bernoulli(0.25)).collect()).collect();
    // at least one region and one normal token overall
    masks[0][rng.below(cells)] = true;
    if cells == 1 {
        masks.push(vec![false]);
    } else {
        let c = rng.below(cells);
        masks[0][c] = false;
        masks[0][(c + 1) % cells] = true;
    }
    let maps = masks.iter().map(|_| tied_scores(cells, &mut rng)).collect();
    MetricInstance { scores, labels, maps, masks, grid }
}

/// The hand-built 8x8 case: one region scored above every normal token, one
/// scored below all of them.
pub fn two_region_case() -> (Vec<Vec<f64>>, Vec<Vec<bool>>) {
    let mut mask = vec![false; 64];
    let mut map: Vec<f64> = (0..64).map(|i| 0.2 + 0.5 * i as f64 / 64.0).collect();
    for (r, c) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
        mask[r * 8 + c] = true;
        map[r * 8 + c] = 0.9;
    }
    for (r, c) in [(6, 5), (6, 6), (5, 6)] {
        mask[r * 8 + c] = true;
        map[r * 8 + c] = 0.1;
    }
    (vec![map], vec![mask])
}
