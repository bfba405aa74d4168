//! Command-line entry point.
//!
//! Every subcommand writes machine-readable output under `--out` and a short
//! human summary to stdout. Exit codes: 0 success, 1 usage, 2 data or
//! validation problems, 3 numerical failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::aggregation::{align_labelings, majority_vote, select_reliable, LabeledRun};
use crate::embeddings::{load_space, read_labels, write_labels, EmbeddingSpace};
use crate::error::{Error, Result};
use crate::evaluation::{adjusted_rand_index, class_counts, clustering_accuracy, kmeans};
use crate::meta_opt::{digest, prepare_phi1, train_prepared, Preset, RunRecord, TrainConfig};
use crate::synthetic::{generate, write_fixture, SynthSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

const LOG_ENV: &str = "LABELSEARCH_LOG";

#[derive(Parser, Debug)]
#[command(
    name = "labelsearch",
    version,
    about = "Search for labelings that two representation spaces agree on",
    args_override_self = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic pair of embedding spaces with planted labels.
    Synth(SynthArgs),
    /// Train one task encoder.
    Train(TrainArgs),
    /// Train one encoder per seed.
    Sweep(SweepArgs),
    /// Majority-vote the labelings of a sweep.
    Aggregate(AggregateArgs),
    /// Score a labeling against ground truth.
    Evaluate(EvaluateArgs),
    /// Tabulate cv accuracy against ground-truth accuracy per run.
    Correlate(CorrelateArgs),
    /// Pick reliable samples per class from a sweep.
    Reliable(ReliableArgs),
    /// k-means baseline.
    Kmeans(KmeansArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON file with synthetic fixture settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    d1: Option<usize>,
    #[arg(long)]
    d2: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    shared_offset: Option<f64>,
    #[arg(long)]
    spurious: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    verify_threshold: Option<f64>,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Manifest of the space the task encoder reads.
    #[arg(long)]
    phi1: PathBuf,
    /// Manifest of the space the linear probe reads.
    #[arg(long)]
    phi2: PathBuf,
    /// JSON training config; flags override it, and it overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    inner_steps: Option<usize>,
    #[arg(long)]
    inner_lr: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    subset_size: Option<usize>,
    #[arg(long)]
    train_frac: Option<f64>,
    #[arg(long)]
    n_subsets: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Comma-separated iteration indices; pass an empty string for none.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    anneal_at: Option<Vec<usize>>,
    #[arg(long)]
    anneal_factor: Option<f64>,
    #[arg(long)]
    cv_folds: Option<usize>,
    #[arg(long)]
    ridge: Option<f64>,
    /// Scale second-space rows to unit length.
    #[arg(long)]
    normalize_phi2: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Run JSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Number of seeds; runs use seeds first..first+seeds.
    #[arg(long, default_value_t = 100)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory for run_NNNN.json files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AggregateArgs {
    /// Sweep directory or individual run files.
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    /// Vote with only the n runs of highest cv accuracy.
    #[arg(long)]
    top_n: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Labels as a text file, a run JSON or an aggregate JSON.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CorrelateArgs {
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    truth: PathBuf,
    /// CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReliableArgs {
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    phi1: PathBuf,
    #[arg(long, default_value_t = 4)]
    nk: usize,
    #[arg(long, default_value_t = 50)]
    n_neigh: usize,
    #[arg(long)]
    top_n: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct KmeansArgs {
    #[arg(long)]
    phi1: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 100)]
    n_runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_DATA
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Sweep(a) => sweep(a),
        Command::Aggregate(a) => aggregate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Correlate(a) => correlate(a),
        Command::Reliable(a) => reliable(a),
        Command::Kmeans(a) => kmeans_cmd(a),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec: SynthSpec = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthSpec::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {$(if let Some(v) = a.$flag { spec.$field = v; })*};
    }
    set!(n => n, k => k, latent_dim => latent_dim, d1 => d1, d2 => d2, separation => cluster_separation,
        noise => noise_sigma, shared_offset => shared_offset, seed => seed, verify_threshold => verify_threshold);
    spec.spurious |= a.spurious;

    let data = generate(&spec)?;
    create_dir(&a.out)?;
    let (p1, p2) = write_fixture(&data, &a.out)?;
    let config_hash = digest(&spec);
    write_json(&a.out.join("synth.json"), &json!({ "config_hash": config_hash, "spec": spec, "report": data.report }))?;
    println!(
        "wrote {} and {} ({} samples, K={}, probe acc {:.4}/{:.4}, config {config_hash})",
        p1.display(),
        p2.display(),
        spec.n,
        spec.k,
        data.report.phi1_train_acc,
        data.report.phi2_train_acc
    );
    Ok(())
}

fn build_config(m: &ModelArgs) -> Result<TrainConfig> {
    let mut c = match &m.preset {
        Some(name) => Preset::parse(name)?.config(),
        None => TrainConfig::default(),
    };
    if let Some(path) = &m.config {
        // file keys override the preset, missing keys keep it
        let file: Value = read_json(path)?;
        let mut base = serde_json::to_value(&c).expect("config serializes");
        match (base.as_object_mut(), file) {
            (Some(base), Value::Object(over)) => {
                for (key, v) in over {
                    if !base.contains_key(&key) {
                        return Err(Error::Config(format!("unknown config key {key:?} in {}", path.display())));
                    }
                    base.insert(key, v);
                }
            }
            _ => return Err(Error::Config(format!("{} is not a JSON object", path.display()))),
        }
        c = serde_json::from_value(base).map_err(|e| Error::json(path, e))?;
    }
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {$(if let Some(v) = m.$flag.clone() { c.$field = v; })*};
    }
    set!(k => k, eta => eta, gamma => gamma, iters => iters, inner_steps => inner_steps, inner_lr => inner_lr,
        alpha => alpha, subset_size => subset_size, train_frac => train_fraction, n_subsets => n_subsets,
        clip_norm => clip_norm, anneal_at => anneal_iters, anneal_factor => anneal_factor, cv_folds => cv_folds,
        ridge => ridge);
    c.normalize_phi2 |= m.normalize_phi2;
    c.validate()?;
    Ok(c)
}

struct Spaces {
    phi1_hat: ndarray::Array2<f64>,
    phi2: EmbeddingSpace,
}

fn load_spaces(m: &ModelArgs) -> Result<Spaces> {
    let phi1 = load_space(&m.phi1)?;
    let phi2 = load_space(&m.phi2)?;
    if phi1.n_samples() != phi2.n_samples() {
        return Err(Error::Data(format!(
            "sample counts differ: {} in {}, {} in {}",
            phi1.n_samples(),
            m.phi1.display(),
            phi2.n_samples(),
            m.phi2.display()
        )));
    }
    Ok(Spaces { phi1_hat: prepare_phi1(&phi1)?, phi2 })
}

fn train_seed(spaces: &Spaces, config: &TrainConfig, seed: u64) -> Result<RunRecord> {
    let config = TrainConfig { seed, ..config.clone() };
    let run = train_prepared(spaces.phi1_hat.view(), spaces.phi2.view(), &config, &mut ())?;
    Ok(RunRecord::new(&config, &run))
}

fn train(a: TrainArgs) -> Result<()> {
    let config = build_config(&a.model)?;
    let seed = a.seed.unwrap_or(config.seed);
    let spaces = load_spaces(&a.model)?;
    let record = train_seed(&spaces, &config, seed)?;
    write_json(&a.out, &record)?;
    println!(
        "seed {seed}: cv accuracy {:.4}, final objective {:.6}, config {}",
        record.cv_accuracy,
        record.objective_trace.last().copied().unwrap_or(f64::NAN),
        record.config_hash
    );
    Ok(())
}

pub fn run_file_name(seed: u64) -> String {
    format!("run_{seed:04}.json")
}

#[cfg(feature = "parallel")]
fn map_seeds<F>(seeds: &[u64], jobs: usize, f: F) -> Result<Vec<RunRecord>>
where
    F: Fn(u64) -> Result<RunRecord> + Sync + Send,
{
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))?;
    pool.install(|| seeds.par_iter().map(|&s| f(s)).collect())
}

#[cfg(not(feature = "parallel"))]
fn map_seeds<F>(seeds: &[u64], jobs: usize, f: F) -> Result<Vec<RunRecord>>
where
    F: Fn(u64) -> Result<RunRecord>,
{
    if jobs > 1 {
        log::warn!("built without parallel support, running {jobs} jobs sequentially");
    }
    seeds.iter().map(|&s| f(s)).collect()
}

fn sweep(a: SweepArgs) -> Result<()> {
    if a.jobs == 0 {
        return Err(Error::Config("--jobs must be positive".into()));
    }
    if a.seeds == 0 {
        return Err(Error::Config("--seeds must be positive".into()));
    }
    let config = build_config(&a.model)?;
    let spaces = load_spaces(&a.model)?;
    create_dir(&a.out)?;
    let seeds: Vec<u64> = (a.first_seed..a.first_seed + a.seeds).collect();
    let out = &a.out;
    let records = map_seeds(&seeds, a.jobs, |seed| {
        let record = train_seed(&spaces, &config, seed)?;
        write_json(&out.join(run_file_name(seed)), &record)?;
        log::info!("seed {seed} done");
        Ok(record)
    })?;
    let summary = json!({
        "config_hash": config.hash(),
        "config": config,
        "runs": records.iter().map(|r| json!({
            "seed": r.seed,
            "file": run_file_name(r.seed),
            "cv_accuracy": r.cv_accuracy,
        })).collect::<Vec<_>>(),
    });
    write_json(&out.join("sweep.json"), &summary)?;
    let best = records.iter().max_by(|a, b| a.cv_accuracy.total_cmp(&b.cv_accuracy)).expect("non-empty");
    println!(
        "{} runs in {}, best seed {} with cv accuracy {:.4}, config {}",
        records.len(),
        out.display(),
        best.seed,
        best.cv_accuracy,
        config.hash()
    );
    Ok(())
}

/// Run JSONs named on the command line, with directories expanded to their
/// `run_*.json` files in name order.
fn collect_run_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|f| {
                    f.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("run_") && n.ends_with(".json"))
                })
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(Error::Input("no run files found".into()));
    }
    Ok(files)
}

fn load_runs(paths: &[PathBuf]) -> Result<Vec<RunRecord>> {
    let runs: Vec<RunRecord> = collect_run_files(paths)?.iter().map(|f| read_json(f)).collect::<Result<_>>()?;
    let hash = &runs[0].config_hash;
    if runs.iter().any(|r| &r.config_hash != hash) {
        log::warn!("runs come from more than one config");
    }
    Ok(runs)
}

fn runs_k(runs: &[RunRecord]) -> usize {
    runs.iter().map(|r| r.config.k).max().unwrap_or(0)
}

fn aggregate(a: AggregateArgs) -> Result<()> {
    let runs = load_runs(&a.runs)?;
    let labeled: Vec<LabeledRun> = runs.iter().map(LabeledRun::from).collect();
    let aligned = align_labelings(&labeled, runs_k(&runs))?;
    let result = majority_vote(&aligned, a.top_n)?;
    create_dir(&a.out)?;
    write_labels(a.out.join("consensus.txt"), &result.consensus)?;
    let votes: Vec<Vec<u32>> = result.per_sample_votes.rows().into_iter().map(|r| r.to_vec()).collect();
    write_json(
        &a.out.join("aggregate.json"),
        &json!({
            "config_hash": runs[0].config_hash,
            "top_n": a.top_n,
            "reference_seed": result.reference_seed,
            "voters": result.voters,
            "consensus": result.consensus,
            "per_sample_votes": votes,
        }),
    )?;
    println!(
        "consensus of {} runs (reference seed {}) written to {}",
        result.voters.len(),
        result.reference_seed,
        a.out.display()
    );
    Ok(())
}

/// Labels from a text file, or the `labels`/`consensus` array of a JSON
/// file.
fn load_label_source(path: &Path) -> Result<(Vec<usize>, Option<String>)> {
    if path.extension().is_some_and(|e| e == "json") {
        let v: Value = read_json(path)?;
        let hash = v.get("config_hash").and_then(Value::as_str).map(str::to_owned);
        let arr = v.get("labels").or_else(|| v.get("consensus")).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            message: "expected a \"labels\" or \"consensus\" array".into(),
        })?;
        let labels: Vec<usize> = serde_json::from_value(arr.clone()).map_err(|e| Error::json(path, e))?;
        Ok((labels, hash))
    } else {
        Ok((read_labels(path)?.labels, None))
    }
}

#[derive(Serialize)]
struct Evaluation {
    config_hash: Option<String>,
    acc: f64,
    ari: f64,
    per_class_counts: Vec<usize>,
}

fn score(pred: &[usize], truth: &[usize]) -> Result<(f64, f64, usize)> {
    if pred.len() != truth.len() {
        return Err(Error::Input(format!("{} predicted labels for {} ground-truth labels", pred.len(), truth.len())));
    }
    let k = pred.iter().chain(truth).max().map_or(1, |m| m + 1);
    Ok((clustering_accuracy(pred, truth, k)?, adjusted_rand_index(pred, truth)?, k))
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let (pred, hash) = load_label_source(&a.labels)?;
    let truth = read_labels(&a.truth)?;
    let (acc, ari, k) = score(&pred, &truth.labels)?;
    let report = Evaluation { config_hash: hash, acc, ari, per_class_counts: class_counts(&pred, k) };
    match &a.out {
        Some(out) => write_json(out, &report)?,
        None => println!("{}", serde_json::to_string(&report).expect("report serializes")),
    }
    println!("acc {acc:.4}, ari {ari:.4}");
    Ok(())
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

fn correlate(a: CorrelateArgs) -> Result<()> {
    let runs = load_runs(&a.runs)?;
    let truth = read_labels(&a.truth)?;
    let mut csv = format!("# config_hash={}\nseed,cv_accuracy,acc\n", runs[0].config_hash);
    let mut cv = Vec::with_capacity(runs.len());
    let mut acc = Vec::with_capacity(runs.len());
    for r in &runs {
        let (ac, _, _) = score(&r.labels, &truth.labels)?;
        csv.push_str(&format!("{},{},{}\n", r.seed, r.cv_accuracy, ac));
        cv.push(r.cv_accuracy);
        acc.push(ac);
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(&a.out, csv).map_err(|e| Error::io(&a.out, e))?;
    println!("{} runs, pearson r = {:.4}", runs.len(), pearson(&cv, &acc));
    Ok(())
}

fn reliable(a: ReliableArgs) -> Result<()> {
    let runs = load_runs(&a.runs)?;
    let mut labeled: Vec<LabeledRun> = runs.iter().map(LabeledRun::from).collect();
    if let Some(top) = a.top_n {
        if top == 0 {
            return Err(Error::Config("--top-n must be positive".into()));
        }
        labeled.sort_by(|x, y| y.cv_accuracy.total_cmp(&x.cv_accuracy).then(x.seed.cmp(&y.seed)));
        labeled.truncate(top);
    }
    let phi1 = load_space(&a.phi1)?;
    let aligned = align_labelings(&labeled, runs_k(&runs))?;
    let set = select_reliable(&aligned, phi1.view(), a.nk, a.n_neigh)?;
    for w in &set.warnings {
        log::warn!("{w}");
    }
    let mut value = serde_json::to_value(&set).expect("reliable set serializes");
    value["config_hash"] = json!(runs[0].config_hash);
    write_json(&a.out, &value)?;
    println!(
        "{} reliable samples over {} classes written to {}",
        set.all_indices().count(),
        set.classes.len(),
        a.out.display()
    );
    Ok(())
}

fn kmeans_cmd(a: KmeansArgs) -> Result<()> {
    let phi1 = load_space(&a.phi1)?;
    let data = prepare_phi1(&phi1)?;
    let truth = a.truth.as_ref().map(read_labels).transpose()?;
    let report = kmeans(data.view(), a.k, a.n_runs, a.seed, truth.as_ref().map(|t| t.labels.as_slice()))?;
    let settings = json!({ "k": a.k, "n_runs": a.n_runs, "seed": a.seed });
    let mut value = serde_json::to_value(&report).expect("report serializes");
    value["config_hash"] = json!(digest(&settings));
    write_json(&a.out, &value)?;
    match (report.mean_acc, report.mean_ari) {
        (Some(acc), Some(ari)) => println!("{} k-means runs: mean acc {acc:.4}, mean ari {ari:.4}", a.n_runs),
        _ => println!("{} k-means runs written to {}", a.n_runs, a.out.display()),
    }
    Ok(())
}
