//! `viewbench`: evaluate novel-view-synthesis predictions under pinned
//! protocols, drive methods over `nbproto/1`, and analyse rank tables.
//!
//! Exit codes: 0 success, 1 golden mismatch, 2 invalid input, 3 failure while
//! computing, 4 protocol or capability failure.

mod pattern;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use viewbench::canonical::to_canonical_json;
use viewbench::conformance::run_suite;
use viewbench::dataset::{SceneDataset, Split};
use viewbench::evaluator::{evaluate, render_test_views, EvalError, PredictionSet};
use viewbench::lpips::{load_weights, selftest, synthetic_container, GoldenPair, LpipsNetwork};
use viewbench::method::{ErrorKind, MethodApi, MethodError, SetupRequest};
use viewbench::protocol::{protocol_lookup, EvalProtocol, ImageSource, LpipsBackbone};
use viewbench::rankings::{compare_golden, protocol_comparison, Direction, GoldenRanks, ScoreTable};
use viewbench::results::{leaderboard, ResultsDocument};
use viewbench::rpc::{spawn_session, SessionConfig};
use viewbench::scene::{
    dataset_manifest, load_blender_scene, load_colmap_scene, load_scene_for_protocol, SplitRule,
};

/// Environment variable naming the default LPIPS weight container.
const WEIGHTS_ENV: &str = "NB_LPIPS_WEIGHTS";

#[derive(Debug)]
enum Failure {
    Mismatch(String),
    Input(String),
    Compute(String),
    Capability(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Mismatch(_) => 1,
            Failure::Input(_) => 2,
            Failure::Compute(_) => 3,
            Failure::Capability(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Mismatch(m) | Failure::Input(m) | Failure::Compute(m) | Failure::Capability(m) => m,
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match &e {
            EvalError::Capability(_) => Failure::Capability(e.to_string()),
            EvalError::Method(m) => method_failure(m.clone()),
            _ if e.is_input_error() => Failure::Input(e.to_string()),
            _ => Failure::Compute(e.to_string()),
        }
    }
}

fn method_failure(e: MethodError) -> Failure {
    let text = match &e.traceback {
        Some(tb) => format!("{e}\n{tb}"),
        None => e.to_string(),
    };
    match e.kind {
        ErrorKind::Capability | ErrorKind::Protocol => Failure::Capability(text),
        ErrorKind::InvalidArgument | ErrorKind::Precondition | ErrorKind::Spawn | ErrorKind::Io => {
            Failure::Input(text)
        }
        ErrorKind::MethodException | ErrorKind::Timeout | ErrorKind::SessionDead => Failure::Compute(text),
    }
}

fn input<E: std::fmt::Display>(context: impl std::fmt::Display) -> impl FnOnce(E) -> Failure {
    move |e| Failure::Input(format!("{context}: {e}"))
}

type Result<T> = std::result::Result<T, Failure>;

#[derive(Parser)]
#[command(name = "viewbench", version, about = "Reproducible evaluation for novel-view synthesis")]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score a prediction directory against a dataset's test split.
    Evaluate(EvaluateArgs),
    /// Train a method over nbproto/1 and render the test split.
    Run(RunArgs),
    /// Compare method ranks under two protocols.
    Ranks(RanksArgs),
    /// Dataset utilities.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Check an LPIPS weight container, optionally against a golden pair.
    LpipsSelftest(SelftestArgs),
    /// Write a seeded synthetic LPIPS container (for testing only).
    LpipsSynth(SynthArgs),
    /// Merge results documents into one leaderboard.
    ExportLeaderboard(LeaderboardArgs),
    /// Run the nbproto/1 conformance suite against a method executable.
    Conformance(ConformanceArgs),
    /// Serve the built-in reference method over nbproto/1 on stdio.
    RefSplat {
        /// Arguments for the method process (see `ref-splat --help`).
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        args: Vec<String>,
    },
}

#[derive(Args)]
struct ProtocolArgs {
    /// Built-in protocol id.
    #[arg(long, conflicts_with = "protocol_file")]
    protocol: Option<String>,
    /// JSON protocol definition, for protocols outside the built-in table.
    #[arg(long)]
    protocol_file: Option<PathBuf>,
}

impl ProtocolArgs {
    fn resolve(&self) -> Result<Option<EvalProtocol>> {
        match (&self.protocol, &self.protocol_file) {
            (Some(id), _) => protocol_lookup(id)
                .cloned()
                .map(Some)
                .map_err(|e| Failure::Input(e.to_string())),
            (None, Some(path)) => {
                let text = std::fs::read_to_string(path).map_err(input(path.display()))?;
                serde_json::from_str(&text).map(Some).map_err(input(path.display()))
            }
            (None, None) => Ok(None),
        }
    }

    fn require(&self) -> Result<EvalProtocol> {
        self.resolve()?
            .ok_or_else(|| Failure::Input("one of --protocol or --protocol-file is required".into()))
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    protocol: ProtocolArgs,
    /// LPIPS weight container; defaults to $NB_LPIPS_WEIGHTS.
    #[arg(long)]
    lpips_weights: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    /// Worker threads for per-image metrics; results do not depend on it.
    #[arg(long)]
    jobs: Option<usize>,
    /// Dataset id recorded in the results (default: the protocol id).
    #[arg(long)]
    dataset_id: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    /// Method command line, split with POSIX shell rules.
    #[arg(long)]
    method_cmd: String,
    #[arg(long)]
    data: PathBuf,
    /// Protocol selecting image source and appearance handling (default:
    /// full-resolution `images/`, no appearance fitting).
    #[command(flatten)]
    protocol: ProtocolArgs,
    #[arg(long)]
    iters: u64,
    /// Checkpoint directory written after training.
    #[arg(long)]
    save: Option<PathBuf>,
    #[arg(long)]
    predictions: PathBuf,
    /// Seed forwarded to the method as the `seed` override.
    #[arg(long)]
    seed: Option<u64>,
    /// Under an appearance protocol, render held-out views without fitting
    /// their embeddings (the baseline the fitted renders are compared to).
    #[arg(long)]
    no_embedding_fit: bool,
    /// Seconds allowed per method call.
    #[arg(long, default_value_t = 300)]
    call_timeout: u64,
}

#[derive(Args)]
struct RanksArgs {
    /// Score table (.json or .csv).
    #[arg(long)]
    table: PathBuf,
    #[arg(long)]
    pa: String,
    #[arg(long)]
    pb: String,
    /// higher|lower; defaults to the table's own direction.
    #[arg(long)]
    direction: Option<Direction>,
    /// Expected ranks; any difference exits with status 1.
    #[arg(long)]
    golden: Option<PathBuf>,
    /// Print canonical JSON instead of the text table.
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Print the dataset manifest with file checksums.
    Inspect {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    golden: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    backbone: String,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct LeaderboardArgs {
    /// Results files or `*`/`?` patterns within one directory.
    #[arg(long, num_args = 1.., required = true)]
    results: Vec<String>,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct ConformanceArgs {
    #[arg(long)]
    method_cmd: String,
    #[arg(long)]
    json: bool,
}

fn write_output(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(input(parent.display()))?;
    }
    std::fs::write(path, text).map_err(input(path.display()))
}

fn weights_path(flag: &Option<PathBuf>) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| std::env::var_os(WEIGHTS_ENV).map(PathBuf::from))
        .ok_or_else(|| Failure::Input(format!("no LPIPS weights: pass --lpips-weights or set {WEIGHTS_ENV}")))
}

fn load_network(path: &Path) -> Result<LpipsNetwork> {
    let bytes = std::fs::read(path).map_err(input(path.display()))?;
    load_weights(&bytes).map_err(input(path.display()))
}

fn thread_pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        if n == 0 {
            return Err(Failure::Input("--jobs must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Failure::Compute(e.to_string()))
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let protocol = args.protocol.require()?;
    let net = load_network(&weights_path(&args.lpips_weights)?)?;
    let preds = PredictionSet::load(&args.predictions)?;
    let dataset_id = args.dataset_id.unwrap_or_else(|| protocol.id.clone());
    let pool = thread_pool(args.jobs)?;
    let doc = pool.install(|| -> Result<ResultsDocument> {
        let ds = load_scene_for_protocol(&args.data, &protocol, Split::Test, SplitRule::LLFF_HOLD)
            .map_err(input(args.data.display()))?;
        Ok(evaluate(&preds, &ds, &protocol, &net, &dataset_id)?)
    })?;
    write_output(&args.output, &doc.to_canonical_json())?;
    let a = doc.aggregates;
    println!(
        "{} images: psnr {:.4} ssim {:.4} lpips {:.4}",
        doc.per_image.len(),
        a.psnr,
        a.ssim,
        a.lpips
    );
    Ok(())
}

/// Protocol used by `run` when none is given.
fn native_protocol() -> EvalProtocol {
    EvalProtocol {
        id: "native".into(),
        lpips_backbone: LpipsBackbone::Alex,
        background: None,
        image_source: ImageSource::PreDownscaled { factor: 1 },
        appearance_protocol: Default::default(),
        quantize_before_metrics: true,
    }
}

fn load_split(root: &Path, protocol: &EvalProtocol, split: Split) -> Result<SceneDataset> {
    load_scene_for_protocol(root, protocol, split, SplitRule::LLFF_HOLD).map_err(input(root.display()))
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let protocol = args.protocol.resolve()?.unwrap_or_else(native_protocol);
    let argv = shlex::split(&args.method_cmd)
        .filter(|v| !v.is_empty())
        .ok_or_else(|| Failure::Input(format!("cannot parse --method-cmd {:?}", args.method_cmd)))?;
    let train = load_split(&args.data, &protocol, Split::Train)?;
    let test = load_split(&args.data, &protocol, Split::Test)?;
    info!("{} training and {} test views", train.images.len(), test.images.len());

    let config = SessionConfig {
        call_timeout: std::time::Duration::from_secs(args.call_timeout),
        ..SessionConfig::default()
    };
    let mut session = spawn_session(&argv, config).map_err(method_failure)?;
    let mut overrides = std::collections::BTreeMap::new();
    if let Some(seed) = args.seed {
        overrides.insert("seed".to_string(), serde_json::json!(seed));
    }
    let info = session
        .setup(SetupRequest {
            train_dataset: Some(train),
            checkpoint: None,
            config_overrides: overrides,
        })
        .map_err(method_failure)?;
    info!("method {} ready", info.method_id);
    for step in 0..args.iters {
        let metrics = session.train_iteration(step).map_err(method_failure)?;
        if step + 1 == args.iters || (step + 1) % 100 == 0 {
            info!("step {}: {:?}", step + 1, metrics);
        }
    }
    if let Some(path) = &args.save {
        session.save(path).map_err(method_failure)?;
        info!("checkpoint saved to {}", path.display());
    }
    let renders = render_test_views(&mut session, &test, &protocol, !args.no_embedding_fit)?;
    PredictionSet::write(
        &args.predictions,
        &info.method_id,
        &renders,
        args.save.as_ref().map(|p| p.display().to_string()),
    )?;
    session.shutdown().map_err(method_failure)?;
    println!("{} predictions written to {}", renders.len(), args.predictions.display());
    Ok(())
}

fn cmd_ranks(args: RanksArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.table).map_err(input(args.table.display()))?;
    let is_csv = args.table.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let table = if is_csv {
        ScoreTable::from_csv(&text)
    } else {
        ScoreTable::from_json(&text)
    }
    .map_err(input(args.table.display()))?;
    let direction = args.direction.or(table.direction).ok_or_else(|| {
        Failure::Input(format!("{}: no direction in the table; pass --direction", args.table.display()))
    })?;
    let report =
        protocol_comparison(&table, &args.pa, &args.pb, direction).map_err(|e| Failure::Input(e.to_string()))?;
    if args.json {
        print!("{}", report.to_canonical_json());
    } else {
        print!("{}", report.to_text());
    }
    if let Some(path) = &args.golden {
        let text = std::fs::read_to_string(path).map_err(input(path.display()))?;
        let golden: GoldenRanks = serde_json::from_str(&text).map_err(input(path.display()))?;
        let mismatches = compare_golden(&report, &golden);
        if !mismatches.is_empty() {
            let lines: Vec<String> = mismatches.iter().map(|m| m.to_string()).collect();
            return Err(Failure::Mismatch(format!(
                "{} rank cell(s) differ from {}:\n{}",
                mismatches.len(),
                path.display(),
                lines.join("\n")
            )));
        }
        eprintln!("all ranks match {}", path.display());
    }
    Ok(())
}

fn inspect_dataset(root: &Path) -> Result<SceneDataset> {
    if root.join("transforms_train.json").is_file() || root.join("transforms_test.json").is_file() {
        let mut ds = SceneDataset::default();
        for split in [Split::Train, Split::Test] {
            if root.join(format!("transforms_{}.json", if split == Split::Train { "train" } else { "test" })).is_file() {
                let part = load_blender_scene(root, split).map_err(input(root.display()))?;
                ds.name = part.name;
                ds.metadata = part.metadata;
                ds.images.extend(part.images);
            }
        }
        Ok(ds)
    } else {
        load_colmap_scene(root, None, SplitRule::LLFF_HOLD).map_err(input(root.display()))
    }
}

fn cmd_dataset(cmd: DatasetCommand) -> Result<()> {
    match cmd {
        DatasetCommand::Inspect { data, output } => {
            let manifest = dataset_manifest(&inspect_dataset(&data)?);
            let text = to_canonical_json(&manifest).map_err(|e| Failure::Compute(e.to_string()))?;
            match output {
                Some(path) => write_output(&path, &text),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
    }
}

fn cmd_selftest(args: SelftestArgs) -> Result<()> {
    let path = weights_path(&args.weights)?;
    let bytes = std::fs::read(&path).map_err(input(path.display()))?;
    let golden = match &args.golden {
        Some(g) => {
            let text = std::fs::read_to_string(g).map_err(input(g.display()))?;
            Some(serde_json::from_str::<GoldenPair>(&text).map_err(input(g.display()))?)
        }
        None => None,
    };
    let report = selftest(&bytes, golden.as_ref()).map_err(input(path.display()))?;
    println!(
        "{} backbone {} checkpoint {} payload sha256 {}",
        path.display(),
        report.backbone,
        report.checkpoint_tag,
        report.payload_sha256
    );
    for c in &report.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Mismatch("LPIPS self-test failed".into()))
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let backbone = match args.backbone.as_str() {
        "alex" => LpipsBackbone::Alex,
        "vgg" => LpipsBackbone::Vgg,
        other => return Err(Failure::Input(format!("unknown backbone {other:?} (alex|vgg)"))),
    };
    let bytes = synthetic_container(backbone, args.seed);
    if let Some(parent) = args.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(input(parent.display()))?;
    }
    std::fs::write(&args.output, bytes).map_err(input(args.output.display()))?;
    eprintln!("synthetic weights are for testing only; scores made with them are not LPIPS");
    Ok(())
}

fn cmd_leaderboard(args: LeaderboardArgs) -> Result<()> {
    let mut paths = Vec::new();
    for spec in &args.results {
        let found = pattern::expand(spec).map_err(input(spec))?;
        if found.is_empty() {
            return Err(Failure::Input(format!("{spec}: no results files match")));
        }
        paths.extend(found);
    }
    paths.sort();
    paths.dedup();
    let docs = paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(input(p.display()))?;
            ResultsDocument::from_json(&text).map_err(input(p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    write_output(&args.output, &leaderboard(&docs).to_canonical_json())?;
    println!("{} results merged into {}", docs.len(), args.output.display());
    Ok(())
}

fn cmd_conformance(args: ConformanceArgs) -> Result<()> {
    let argv = shlex::split(&args.method_cmd)
        .filter(|v| !v.is_empty())
        .ok_or_else(|| Failure::Input(format!("cannot parse --method-cmd {:?}", args.method_cmd)))?;
    let results = run_suite(&argv, SessionConfig::default());
    if args.json {
        print!("{}", to_canonical_json(&results).map_err(|e| Failure::Compute(e.to_string()))?);
    } else {
        for r in &results {
            println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        }
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure::Capability(format!("{failed} conformance check(s) failed")))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let outcome = match cli.command {
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Run(a) => cmd_run(a),
        Command::Ranks(a) => cmd_ranks(a),
        Command::Dataset(c) => cmd_dataset(c),
        Command::LpipsSelftest(a) => cmd_selftest(a),
        Command::LpipsSynth(a) => cmd_synth(a),
        Command::ExportLeaderboard(a) => cmd_leaderboard(a),
        Command::Conformance(a) => cmd_conformance(a),
        Command::RefSplat { args } => {
            return ExitCode::from(viewbench::refsplat_server::serve_stdio(args));
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("viewbench: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
