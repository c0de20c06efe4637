//! `sbk`: generate synthetic feature datasets, train and evaluate
//! reconstruction models, and run the probes.
//!
//! Exit codes: 0 success, 1 usage or I/O, 2 invalid input, 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use sbk_core::bottleneck::BottleneckKind;
use sbk_core::evaluation::{evaluate, evaluate_oracle, per_class_csv, EvalOptions, METRICS_CSV_HEADER};
use sbk_core::model::{load_checkpoint, parameter_init, save_checkpoint, Checkpoint, ModelConfig};
use sbk_core::probes::{self, AblationConfig, IdentityProbeConfig, RankProbeConfig, SpreadProbeConfig};
use sbk_core::synthetic::{read_dataset, write_dataset, Dataset, SyntheticSpec, SyntheticWorld};
use sbk_core::training::{train, write_train_log, TrainConfig};
use sbk_core::{Error, Result};

const TRAIN_FILE: &str = "train.sbk";
const TEST_FILE: &str = "test.sbk";

#[derive(Parser)]
#[command(name = "sbk", version, about = "Shortcut-breaking reconstruction models on synthetic features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and test datasets from a spec.
    Gen(GenArgs),
    /// Train a model on a (normal-only) training set.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test set.
    Eval(EvalArgs),
    /// Run one of the probes.
    #[command(subcommand)]
    Probe(ProbeCommand),
    /// Train the component ablation grid over several seeds.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SeedArg {
    /// Random seed; overrides the seed in any config file.
    #[arg(long, env = "SBK_SEED")]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenArgs {
    /// SyntheticSpec JSON; the default benchmark when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory for train.sbk, test.sbk and spec.json.
    #[arg(long)]
    out: PathBuf,
    /// Bottleneck depth the data is meant for; only used to warn about
    /// grids it cannot halve.
    #[arg(long, default_value_t = 2)]
    depth_i: usize,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (uses train.sbk) or a dataset file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory (uses test.sbk) or a dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Model checkpoint; not needed with --oracle.
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Score with the ground-truth masks instead of a model.
    #[arg(long)]
    oracle: bool,
    /// Gaussian smoothing of anomaly maps (off by default).
    #[arg(long)]
    smooth_sigma: Option<f64>,
    #[arg(long, default_value_t = 0.3)]
    fpr_limit: f64,
}

#[derive(Subcommand)]
enum ProbeCommand {
    /// Jacobian rank of the low-rank bottleneck against its bound.
    Rank(RankArgs),
    /// Softmax versus sigmoid spreading on Gaussian-peaked scores.
    Attention(SpreadArgs),
    /// Loss and score gap per bottleneck variant.
    Identity(IdentityArgs),
}

#[derive(Args)]
struct RankArgs {
    #[arg(long, default_value_t = 2)]
    depth_i: usize,
    /// Tokens per sample.
    #[arg(long, default_value_t = 16)]
    n: usize,
    /// Token width.
    #[arg(long, default_value_t = 32)]
    d: usize,
    #[arg(long, default_value_t = 5)]
    inputs: usize,
    #[arg(long, default_value_t = 3)]
    draws: usize,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-6)]
    h: f64,
    /// Central instead of forward differences.
    #[arg(long)]
    central: bool,
    #[arg(long, default_value = "probe-rank")]
    out: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct SpreadArgs {
    #[arg(long, default_value_t = 16)]
    height: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 5.0)]
    peak: f64,
    #[arg(long, default_value_t = 2.0)]
    sigma: f64,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value = "probe-attention")]
    out: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    train_config: Option<PathBuf>,
}

#[derive(Args)]
struct IdentityArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    /// Comma-separated subset of none, jitter, ndb, lrnb.
    #[arg(long, default_value = "none,jitter,ndb,lrnb", value_delimiter = ',')]
    variants: Vec<String>,
    #[arg(long, default_value = "probe-identity")]
    out: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    /// Number of seeds, counting up from the base seed.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Parallel (config, seed) cells.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Chebyshev radius of the neighbour-masked attention baseline.
    #[arg(long, default_value_t = 1)]
    nma_radius: usize,
    /// Only the eight-row component grid.
    #[arg(long)]
    grid_only: bool,
    #[arg(long, default_value = "ablation")]
    out: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let r = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Probe(ProbeCommand::Rank(a)) => probe_rank(a),
        Command::Probe(ProbeCommand::Attention(a)) => probe_attention(a),
        Command::Probe(ProbeCommand::Identity(a)) => probe_identity(a),
        Command::Ablate(a) => ablate(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Validation(vec![format!("{}: {e}", path.display())]))
}

fn config_or_default<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        Some(p) => read_config(p),
        None => Ok(T::default()),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn dataset_path(p: &Path, file: &str) -> PathBuf {
    if p.is_dir() {
        p.join(file)
    } else {
        p.to_path_buf()
    }
}

fn describe(name: &str, ds: &Dataset) -> String {
    let anomalous: usize = ds
        .batches
        .iter()
        .map(|b| b.image_labels.iter().filter(|l| **l).count())
        .sum();
    format!(
        "{name}: {} records, {} samples ({anomalous} anomalous)",
        ds.batches.len(),
        ds.sample_count()
    )
}

fn gen(a: GenArgs) -> Result<()> {
    let mut spec: SyntheticSpec = config_or_default(&a.spec)?;
    if let Some(s) = a.seed.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let m = 1usize << a.depth_i;
    if spec.n_tokens() % m != 0 {
        eprintln!(
            "warning: {}x{} grid has {} tokens, not divisible by 2^{} = {m}; a bottleneck of that depth cannot be trained on it",
            spec.grid_h,
            spec.grid_w,
            spec.n_tokens(),
            a.depth_i
        );
    }
    let world = SyntheticWorld::new(&spec)?;
    let train_ds = Dataset {
        spec: spec.clone(),
        batches: world.generate_train()?,
    };
    let test_ds = Dataset {
        spec: spec.clone(),
        batches: world.generate_test()?,
    };
    create_dir(&a.out)?;
    write_dataset(&train_ds, &a.out.join(TRAIN_FILE))?;
    write_dataset(&test_ds, &a.out.join(TEST_FILE))?;
    write_json(&a.out.join("spec.json"), &spec)?;
    println!("{}", describe("train", &train_ds));
    println!("{}", describe("test", &test_ds));
    Ok(())
}

#[derive(Serialize)]
struct ResolvedTrain<'a> {
    data: &'a Path,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let model: ModelConfig = config_or_default(&a.model_config)?;
    let mut tcfg: TrainConfig = config_or_default(&a.train_config)?;
    if let Some(s) = a.seed.seed {
        tcfg.seed = s;
    }
    let mut problems = model.problems();
    problems.extend(tcfg.problems());
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    let path = dataset_path(&a.data, TRAIN_FILE);
    let data = read_dataset(&path)?;
    create_dir(&a.out)?;
    write_json(
        &a.out.join("resolved_config.json"),
        &ResolvedTrain {
            data: &path,
            model: &model,
            train: &tcfg,
        },
    )?;
    let init = parameter_init(&model, tcfg.seed)?;
    let out_dir = a.out.clone();
    let outcome = train(init, &model, &data, &tcfg, |step, params| {
        save_checkpoint(
            &Checkpoint {
                config: model.clone(),
                params: params.clone(),
            },
            &out_dir.join(format!("checkpoint_step{step}.sbm")),
        )
    })?;
    save_checkpoint(
        &Checkpoint {
            config: model.clone(),
            params: outcome.params,
        },
        &a.out.join("checkpoint.sbm"),
    )?;
    write_train_log(&a.out.join("train_log.csv"), &outcome.log)?;
    match outcome.log.last() {
        Some(r) => println!("trained {} steps, final loss {:.6}", r.step, r.loss),
        None => println!("trained 0 steps"),
    }
    Ok(())
}

#[derive(Serialize)]
struct ResolvedEval<'a> {
    data: &'a Path,
    checkpoint: Option<&'a Path>,
    oracle: bool,
    smooth_sigma: Option<f64>,
    fpr_limit: f64,
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let path = dataset_path(&a.data, TEST_FILE);
    let data = read_dataset(&path)?;
    let opts = EvalOptions {
        fpr_limit: a.fpr_limit,
        smoothing_sigma: a.smooth_sigma,
        ..EvalOptions::default()
    };
    let ev = if a.oracle {
        evaluate_oracle(&data, &opts)?
    } else {
        let ckpt = a.checkpoint.as_deref().expect("clap requires it");
        let ck = load_checkpoint(ckpt)?;
        evaluate(&ck.params, &ck.config, &data, &opts)?
    };
    create_dir(&a.out)?;
    write_json(
        &a.out.join("eval_config.json"),
        &ResolvedEval {
            data: &path,
            checkpoint: a.checkpoint.as_deref(),
            oracle: a.oracle,
            smooth_sigma: a.smooth_sigma,
            fpr_limit: a.fpr_limit,
        },
    )?;
    write_json(&a.out.join("metrics.json"), &ev.report)?;
    let row = format!("{METRICS_CSV_HEADER}\n{}\n", ev.report.csv_row());
    let p = a.out.join("metrics.csv");
    std::fs::write(&p, &row).map_err(|e| Error::io(&p, e))?;
    let p = a.out.join("per_class.csv");
    std::fs::write(&p, per_class_csv(&ev.per_class)).map_err(|e| Error::io(&p, e))?;
    print!("{row}");
    Ok(())
}

fn probe_rank(a: RankArgs) -> Result<()> {
    let cfg = RankProbeConfig {
        n_tokens: a.n,
        d_model: a.d,
        depth_i: a.depth_i,
        n_inputs: a.inputs,
        n_param_draws: a.draws,
        fd_step: a.h,
        central: a.central,
        seed: a.seed.seed.unwrap_or(0),
    };
    let r = probes::rank_probe(&cfg)?;
    probes::write_probe_dir(
        &a.out,
        &cfg,
        &probes::rank_results_csv(&r),
        &[("singular_values.csv".into(), probes::singular_value_csv(&r))],
    )?;
    println!(
        "{} D={} bound={} max sigma_{}/sigma_1={:.3e} identity rank={}",
        if r.pass { "PASS" } else { "FAIL" },
        r.dim,
        r.bound,
        r.bound + 1,
        r.worst_ratio(),
        r.identity_rank
    );
    Ok(())
}

fn probe_attention(a: SpreadArgs) -> Result<()> {
    let cfg = SpreadProbeConfig {
        grid: (a.height, a.width),
        peak_height: a.peak,
        sigma: a.sigma,
        n_trials: a.trials,
        seed: a.seed.seed.unwrap_or(0),
    };
    let r = probes::attention_spread_probe(&cfg)?;
    let w = a.width;
    probes::write_probe_dir(
        &a.out,
        &cfg,
        &probes::spread_results_csv(&r),
        &[
            ("raw_scores.csv".into(), probes::grid_csv(&r.panels[0], w)),
            ("softmax.csv".into(), probes::grid_csv(&r.panels[1], w)),
            ("sigmoid.csv".into(), probes::grid_csv(&r.panels[2], w)),
        ],
    )?;
    let wins = r
        .trials
        .iter()
        .filter(|t| t.sigmoid.mean_row_entropy > t.softmax.mean_row_entropy)
        .count();
    println!("sigmoid entropy above softmax in {wins}/{} trials", r.trials.len());
    Ok(())
}

fn parse_variant(s: &str) -> Result<BottleneckKind> {
    match s.trim().to_ascii_lowercase().as_str() {
        "none" => Ok(BottleneckKind::None),
        "jitter" | "featurejitter" | "fj" => Ok(BottleneckKind::FeatureJitter),
        "ndb" | "dropoutonly" => Ok(BottleneckKind::DropoutOnly),
        "lrnb" => Ok(BottleneckKind::Lrnb),
        other => Err(Error::Validation(vec![format!(
            "variants: unknown bottleneck '{other}' (expected none, jitter, ndb, lrnb)"
        )])),
    }
}

fn experiment_configs(e: &ExperimentArgs, seed: Option<u64>) -> Result<(SyntheticSpec, ModelConfig, TrainConfig)> {
    let mut spec: SyntheticSpec = config_or_default(&e.spec)?;
    let model: ModelConfig = config_or_default(&e.model_config)?;
    let mut tcfg: TrainConfig = config_or_default(&e.train_config)?;
    if let Some(s) = seed {
        spec.seed = s;
        tcfg.seed = s;
    }
    let mut problems = spec.problems();
    problems.extend(model.problems());
    problems.extend(tcfg.problems());
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    Ok((spec, model, tcfg))
}

fn probe_identity(a: IdentityArgs) -> Result<()> {
    let (spec, model, tcfg) = experiment_configs(&a.exp, a.seed.seed)?;
    let variants = a.variants.iter().map(|v| parse_variant(v)).collect::<Result<Vec<_>>>()?;
    let cfg = IdentityProbeConfig {
        variants,
        spec,
        model,
        train: tcfg,
    };
    let reports = probes::identity_probe(&cfg)?;
    let curves: Vec<(String, String)> = reports
        .iter()
        .map(|r| (format!("loss_{:?}.csv", r.variant), probes::loss_curve_csv(&r.loss_curve)))
        .collect();
    let results = probes::identity_results_csv(&reports);
    probes::write_probe_dir(&a.out, &cfg, &results, &curves)?;
    print!("{results}");
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let base = a.seed.seed.unwrap_or(0);
    let (spec, model, tcfg) = experiment_configs(&a.exp, None)?;
    // The component grid starts from the plain softmax decoder without a
    // bottleneck, keeping the widths and LRNB settings of the given config.
    let mut baseline = ModelConfig::baseline(model.d_model, model.n_heads, model.decoder_depth);
    baseline.mlp_ratio = model.mlp_ratio;
    baseline.target_layers = model.target_layers.clone();
    baseline.bottleneck.lrnb = model.bottleneck.lrnb.clone();
    baseline.bottleneck.jitter_scale = model.bottleneck.jitter_scale;
    let cfg = AblationConfig {
        spec,
        model: baseline,
        train: tcfg,
        seeds: (base..base + a.seeds).collect(),
        nma_radius: a.nma_radius,
        include_tables_3_4: !a.grid_only,
    };
    let r = probes::ablation_grid(&cfg, a.jobs)?;
    let table2 = probes::ablation_table_csv(&r.table2);
    let mut curves = vec![("per_seed.csv".to_string(), probes::ablation_per_seed_csv(&r))];
    if !a.grid_only {
        curves.push(("table3.csv".into(), probes::ablation_table_csv(&r.table3)));
        curves.push(("table4.csv".into(), probes::ablation_table_csv(&r.table4)));
    }
    probes::write_probe_dir(&a.out, &cfg, &table2, &curves)?;
    print!("{table2}");
    Ok(())
}
