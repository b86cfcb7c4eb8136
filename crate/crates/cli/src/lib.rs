//! Command implementations behind the `cut` binary.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use cut_core::checkpoint::{load_adapter, load_bank, save_adapter, save_bank};
use cut_core::data::{
    load_kshot, load_split, make_toy_dataset, read_generated, sample_kshot, write_generated, DatasetSpec, KShot,
    KShotSample, Layout, Split, TOY_CATEGORY,
};
use cut_core::diffusion::{ToyBackbone, ToyBackboneConfig};
use cut_core::metrics::{aggregate_runs, report_csv, EvalReport, RunReport, DEFAULT_PRO_FPR_LIMIT, METRIC_NAMES};
use cut_core::pipeline::{batch_generate, GenerationConfig};
use cut_core::trainer::{build_bank, evaluate_category, log_jsonl, train_with, Continue, TrainConfig, TrainSample, TrainState, VladScorer};
use cut_core::vlad::{ToyExtractor, ToyExtractorConfig};

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or inputs: exit code 2.
    Validation(String),
    /// Anything that went wrong while running: exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid configuration: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<cut_core::Error> for CliError {
    fn from(e: cut_core::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

fn runtime(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "cut", version, about = "Guided anomaly generation and few-shot anomaly detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Select k normals and generate an annotated anomaly dataset from them.
    Generate(CommonArgs),
    /// Train the detector adapter on a generated dataset and build the memory bank.
    Train(TrainArgs),
    /// Evaluate trained checkpoints, or run the full pipeline once per seed.
    Eval(EvalArgs),
    /// Aggregate saved per-run reports.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset_root: Option<PathBuf>,
    /// mvtec-style, visa-style or toy.
    #[arg(long)]
    pub layout: Option<String>,
    #[arg(long)]
    pub category: Option<String>,
    /// 1, 2, 4 or all.
    #[arg(long)]
    pub k: Option<String>,
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Comma list (`0,3,7`) or inclusive range (`0..4`).
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub omega: Option<f64>,
    /// Use (and create) the procedural toy dataset.
    #[arg(long)]
    pub toy: bool,
    #[arg(long)]
    pub backbone: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub per_image: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Continue from the saved training state if there is one.
    #[arg(long)]
    pub resume: bool,
    /// Stop (with the training state saved) once this many epochs are done.
    #[arg(long)]
    pub stop_after_epoch: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Number of independent runs; more than one reruns the whole pipeline per seed.
    #[arg(long)]
    pub runs: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-run report files; defaults to `<out>/runs/*.json`.
    #[arg(long, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub root: Option<PathBuf>,
    pub layout: Layout,
    pub toy: bool,
    pub toy_normals: usize,
    pub toy_anomalous: usize,
    pub toy_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { root: None, layout: Layout::MvtecStyle, toy: false, toy_normals: 50, toy_anomalous: 50, toy_seed: 0 }
    }
}

/// Everything a command needs. After [`resolve`] every default is filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: PathBuf,
    pub backbone: String,
    pub category: Option<String>,
    pub k: KShot,
    pub per_image: Option<usize>,
    pub seeds: Vec<u64>,
    pub runs: usize,
    pub fpr_limit: f64,
    pub cache_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub generation: GenerationConfig,
    pub toy_backbone: ToyBackboneConfig,
    pub train: TrainConfig,
    pub extractor: ToyExtractorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs"),
            backbone: "toy".into(),
            category: None,
            k: KShot::Count(1),
            per_image: None,
            seeds: vec![0],
            runs: 1,
            fpr_limit: DEFAULT_PRO_FPR_LIMIT,
            cache_dir: None,
            dataset: DatasetConfig::default(),
            generation: GenerationConfig::default(),
            toy_backbone: ToyBackboneConfig::default(),
            train: TrainConfig::default(),
            extractor: ToyExtractorConfig::default(),
        }
    }
}

pub const TOY_INPUT_SIDE: usize = 128;

pub fn parse_seeds(s: &str) -> CliResult<Vec<u64>> {
    let bad = || CliError::Validation(format!("cannot parse seeds `{s}`"));
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if b < a {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    let v = s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect::<CliResult<Vec<u64>>>()?;
    if v.is_empty() {
        return Err(bad());
    }
    Ok(v)
}

/// Reads the config file (if any), applies flags and fills every default.
pub fn resolve(args: &CommonArgs, runs: Option<usize>) -> CliResult<RunConfig> {
    let (mut cfg, explicit_side) = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
            let value: toml::Table = toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
            let explicit = value.get("train").and_then(|t| t.get("input_side")).is_some();
            let cfg: RunConfig = value.try_into().map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
            (cfg, explicit)
        }
        None => (RunConfig::default(), false),
    };

    if let Some(v) = &args.out {
        cfg.out = v.clone();
    }
    if let Some(v) = &args.backbone {
        cfg.backbone = v.clone();
    }
    if let Some(v) = &args.category {
        cfg.category = Some(v.clone());
    }
    if let Some(v) = &args.k {
        cfg.k = v.parse()?;
    }
    if let Some(v) = args.per_image {
        cfg.per_image = Some(v);
    }
    if let Some(v) = &args.dataset_root {
        cfg.dataset.root = Some(v.clone());
    }
    if let Some(v) = &args.layout {
        cfg.dataset.layout = v.parse()?;
    }
    if args.toy {
        cfg.dataset.toy = true;
    }
    if let Some(v) = args.gamma {
        cfg.generation.gamma = v;
    }
    if let Some(v) = args.steps {
        cfg.generation.steps = v;
        cfg.generation.scheduler.delta_t = None;
    }
    if let Some(v) = args.lambda {
        cfg.generation.scheduler.lambda = v;
    }
    if let Some(v) = args.beta {
        cfg.train.loss.beta = v;
    }
    if let Some(v) = args.omega {
        cfg.train.loss.omega = v;
    }
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    if let Some(s) = &args.seeds {
        cfg.seeds = parse_seeds(s)?;
    }
    if let Some(r) = runs {
        cfg.runs = r;
        if args.seeds.is_none() && args.seed.is_none() && cfg.seeds.len() < r {
            cfg.seeds = (0..r as u64).collect();
        }
    }
    if cfg.cache_dir.is_none() {
        cfg.cache_dir = std::env::var_os("CUT_CACHE_DIR").map(PathBuf::from);
    }

    if cfg.backbone != "toy" {
        return Err(CliError::Validation(format!(
            "backbone `{}` is not available in this build; the only built-in backbone is `toy`",
            cfg.backbone
        )));
    }
    if cfg.runs == 0 {
        return Err(CliError::Validation("runs must be >= 1".into()));
    }
    if cfg.seeds.len() < cfg.runs {
        return Err(CliError::Validation(format!("{} runs need at least as many seeds, got {}", cfg.runs, cfg.seeds.len())));
    }
    cfg.seeds.truncate(cfg.runs);

    if cfg.dataset.toy {
        cfg.dataset.layout = Layout::Toy;
        cfg.dataset.root.get_or_insert_with(|| cfg.out.join("toy_data"));
        cfg.category.get_or_insert_with(|| TOY_CATEGORY.to_string());
        if !explicit_side && args.config.is_none() {
            cfg.train.input_side = TOY_INPUT_SIDE;
        }
    } else {
        let root = cfg.dataset.root.as_ref().ok_or_else(|| CliError::Validation("--dataset-root is required without --toy".into()))?;
        if !root.is_dir() {
            return Err(CliError::Validation(format!("dataset root {} does not exist", root.display())));
        }
        if cfg.category.is_none() {
            return Err(CliError::Validation("--category is required".into()));
        }
    }
    cfg.per_image.get_or_insert(match cfg.k {
        KShot::All => 5,
        KShot::Count(_) => 100,
    });
    cfg.generation.seed = cfg.seeds[0];
    cfg.train.seed = cfg.seeds[0];
    let steps = cfg.generation.steps;
    cfg.generation.scheduler.delta_t.get_or_insert(1.0 / steps as f64);
    cfg.toy_backbone.schedule.steps = steps;
    cfg.extractor.input_side = cfg.train.input_side;

    cfg.generation.validate()?;
    cfg.train.validate()?;
    if cfg.per_image == Some(0) {
        return Err(CliError::Validation("per_image must be >= 1".into()));
    }
    Ok(cfg)
}

impl RunConfig {
    pub fn category(&self) -> &str {
        self.category.as_deref().expect("resolved config has a category")
    }

    pub fn dataset_spec(&self, split: Split) -> DatasetSpec {
        DatasetSpec {
            root: self.dataset.root.clone().expect("resolved config has a dataset root"),
            layout: self.dataset.layout,
            categories: vec![self.category().to_string()],
            split,
        }
    }

    pub fn setup_name(&self) -> String {
        match self.k {
            KShot::All => "full-shot".into(),
            KShot::Count(k) => format!("{k}-shot"),
        }
    }

    pub fn generated_dir(&self) -> PathBuf {
        self.out.join("generated").join(self.category())
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out.join("checkpoints")
    }

    /// Copy of this config for one seed of a multi-run evaluation.
    fn for_seed(&self, seed: u64) -> RunConfig {
        let mut c = self.clone();
        c.out = self.out.join("runs").join(format!("seed-{seed}"));
        c.seeds = vec![seed];
        c.runs = 1;
        c.generation.seed = seed;
        c.train.seed = seed;
        c
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| runtime(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| runtime(path, e))
}

/// Writes `<out>/<command>.resolved.toml`.
pub fn write_sidecar(cfg: &RunConfig, command: &str) -> CliResult<PathBuf> {
    let text = toml::to_string(cfg).map_err(|e| CliError::Runtime(format!("serialising config: {e}")))?;
    let path = cfg.out.join(format!("{command}.resolved.toml"));
    write_file(&path, text)?;
    Ok(path)
}

fn ensure_toy_data(cfg: &RunConfig) -> CliResult<()> {
    if cfg.dataset.toy {
        let root = cfg.dataset.root.as_ref().expect("resolved");
        make_toy_dataset(root, cfg.dataset.toy_normals, cfg.dataset.toy_anomalous, cfg.dataset.toy_seed)?;
    }
    Ok(())
}

fn kshot_path(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("kshot.json")
}

fn run_generate(cfg: &RunConfig) -> CliResult<()> {
    ensure_toy_data(cfg)?;
    let category = cfg.category();
    let sel = sample_kshot(&cfg.dataset_spec(Split::Train), category, cfg.k, cfg.seeds[0])?;
    write_file(&kshot_path(cfg), serde_json::to_string_pretty(&sel).expect("k-shot selection serialises"))?;
    let normals = load_kshot(&sel, category)?;
    let per_image = cfg.per_image.expect("resolved");
    eprintln!("generating {} samples from {} normal image(s)", per_image * normals.len(), normals.len());
    let backbone_cfg = cfg.toy_backbone.clone();
    let ds = batch_generate(&normals, per_image, &cfg.generation, || ToyBackbone::new(backbone_cfg.clone()))?;
    for (n, seed, e) in &ds.failures {
        eprintln!("skipped generation from normal {n} with seed {seed}: {e}");
    }
    let dir = cfg.generated_dir();
    let manifest = write_generated(&ds.records, &dir)?;
    eprintln!("wrote {} records to {}", manifest.len(), dir.display());
    Ok(())
}

fn train_state_path(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint_dir().join("train_state.ckpt")
}

fn run_train(cfg: &RunConfig, resume: bool, stop_after: Option<usize>) -> CliResult<()> {
    let dir = cfg.generated_dir();
    if !dir.join(cut_core::data::MANIFEST_FILE).is_file() {
        return Err(CliError::Runtime(format!("no generated dataset at {}; run `cut generate` first", dir.display())));
    }
    let samples: Vec<TrainSample> = read_generated(&dir)?.into_iter().map(TrainSample::from).collect();
    let extractor = ToyExtractor::new(cfg.extractor.clone())?;
    let state_path = train_state_path(cfg);
    let state = if resume && state_path.is_file() {
        let s = TrainState::load(&state_path)?;
        eprintln!("resuming at epoch {}", s.next_epoch);
        Some(s)
    } else {
        None
    };
    let log_path = cfg.checkpoint_dir().join("train_log.jsonl");
    let state = train_with(&samples, &extractor, &cfg.train, state, |s| {
        s.save(&state_path)?;
        let e = s.log.last().expect("one entry per finished epoch");
        eprintln!("epoch {} lr {:.3e} total {:.5}", e.epoch, e.lr, e.total);
        Ok(if stop_after.is_some_and(|n| s.next_epoch >= n) { Continue::Stop } else { Continue::Yes })
    })?;
    write_file(&log_path, log_jsonl(&state.log)?)?;
    if state.next_epoch < cfg.train.epochs {
        eprintln!("stopped after epoch {}; training state saved to {}", state.next_epoch, state_path.display());
        return Ok(());
    }
    save_adapter(&state.adapter, &cfg.checkpoint_dir().join("adapter.ckpt"))?;
    let sel: KShotSample = serde_json::from_str(&std::fs::read_to_string(kshot_path(cfg)).map_err(|e| runtime(&kshot_path(cfg), e))?)
        .map_err(|e| runtime(&kshot_path(cfg), e))?;
    let normals = load_kshot(&sel, cfg.category())?;
    let bank = build_bank(&normals, &extractor, &state.adapter)?;
    save_bank(&bank, &cfg.checkpoint_dir().join("bank.ckpt"))?;
    eprintln!("wrote checkpoints to {}", cfg.checkpoint_dir().display());
    Ok(())
}

fn evaluate_checkpoints(cfg: &RunConfig) -> CliResult<RunReport> {
    let ck = cfg.checkpoint_dir();
    for name in ["adapter.ckpt", "bank.ckpt"] {
        if !ck.join(name).is_file() {
            return Err(CliError::Runtime(format!("missing checkpoint {}; run `cut train` first", ck.join(name).display())));
        }
    }
    let adapter = load_adapter(&ck.join("adapter.ckpt"))?;
    let bank = load_bank(&ck.join("bank.ckpt"))?;
    ensure_toy_data(cfg)?;
    let extractor = ToyExtractor::new(cfg.extractor.clone())?;
    let category = cfg.category();
    let test = load_split(&cfg.dataset_spec(Split::Test), category)?;
    let scorer = VladScorer::new(&extractor, &adapter, Some(&bank), category, cfg.train.detector)?;
    let metrics = evaluate_category(&scorer, &test, cfg.fpr_limit)?;
    let mut categories = std::collections::BTreeMap::new();
    categories.insert(category.to_string(), metrics);
    Ok(RunReport { setup: cfg.setup_name(), seed: cfg.seeds[0], categories })
}

fn write_report(out: &Path, report: &EvalReport) -> CliResult<()> {
    write_file(&out.join("report.json"), serde_json::to_string_pretty(report).expect("report serialises"))?;
    write_file(&out.join("report.csv"), report_csv(report))?;
    for (cat, metrics) in &report.categories {
        let means: Vec<f64> = METRIC_NAMES.iter().map(|m| metrics[*m].mean).collect();
        cut_core::data::write_image(&out.join(format!("report_{cat}.png")), &bar_chart(&means))?;
    }
    Ok(())
}

/// One bar per metric, height proportional to a value in `[0, 1]`.
pub fn bar_chart(values: &[f64]) -> ndarray::Array3<f64> {
    let (bar, gap, h) = (24usize, 8usize, 120usize);
    let w = values.len() * (bar + gap) + gap;
    ndarray::Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let slot = x / (bar + gap);
        let inside = x % (bar + gap) >= gap && slot < values.len();
        let top = h as f64 * (1.0 - values.get(slot).copied().unwrap_or(0.0).clamp(0.0, 1.0));
        if inside && (y as f64) >= top {
            [0.2, 0.4, 0.7][c]
        } else {
            1.0
        }
    })
}

fn run_report_file(cfg_out: &Path, run: &RunReport) -> CliResult<()> {
    write_file(&cfg_out.join("runs").join(format!("{}.json", run.seed)), serde_json::to_string_pretty(run).expect("report serialises"))
}

fn run_eval(cfg: &RunConfig) -> CliResult<()> {
    let runs = if cfg.runs == 1 {
        vec![evaluate_checkpoints(cfg)?]
    } else {
        let mut runs = Vec::with_capacity(cfg.runs);
        for &seed in &cfg.seeds {
            let sub = cfg.for_seed(seed);
            eprintln!("run with seed {seed} in {}", sub.out.display());
            write_sidecar(&sub, "run")?;
            run_generate(&sub)?;
            run_train(&sub, false, None)?;
            runs.push(evaluate_checkpoints(&sub)?);
        }
        runs
    };
    for r in &runs {
        run_report_file(&cfg.out, r)?;
    }
    let report = aggregate_runs(&runs)?;
    write_report(&cfg.out, &report)?;
    print!("{}", report_csv(&report));
    Ok(())
}

fn run_report(args: &ReportArgs) -> CliResult<()> {
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
    let inputs = if args.inputs.is_empty() {
        let dir = out.join("runs");
        let rd = std::fs::read_dir(&dir).map_err(|e| CliError::Validation(format!("{}: {e}", dir.display())))?;
        let mut v: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "json")).collect();
        v.sort();
        v
    } else {
        args.inputs.clone()
    };
    if inputs.is_empty() {
        return Err(CliError::Validation(format!("no run reports found under {}", out.join("runs").display())));
    }
    let runs = inputs
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<RunReport>(&text).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let report = aggregate_runs(&runs)?;
    write_report(&out, &report)?;
    print!("{}", report_csv(&report));
    Ok(())
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate(a) => {
            let cfg = resolve(&a, None)?;
            write_sidecar(&cfg, "generate")?;
            run_generate(&cfg)
        }
        Command::Train(a) => {
            let cfg = resolve(&a.common, None)?;
            write_sidecar(&cfg, "train")?;
            run_train(&cfg, a.resume, a.stop_after_epoch)
        }
        Command::Eval(a) => {
            let cfg = resolve(&a.common, a.runs)?;
            write_sidecar(&cfg, "eval")?;
            run_eval(&cfg)
        }
        Command::Report(a) => run_report(&a),
    }
}
