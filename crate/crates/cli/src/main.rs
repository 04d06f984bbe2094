use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use strategem_core::exec::Execution;
use strategem_core::itc::{EntropyReading, DEFAULT_PERMUTATIONS};
use strategem_core::model::{Dataset, OptionPosition, Protocol, TrialSpec};
use strategem_core::pipeline::{
    analyze, build_plan, compute_fields, load_dataset, read_log, read_plan, run_plan, validate_artifact,
    write_bundle, write_plan, AnalyzeOptions, Bundle, DesignSnapshot, FieldOptions, RunManifest, RunOptions,
};
use strategem_core::pmm::{OmPolicy, DEFAULT_MIN_CELL_COUNT};
use strategem_core::randomization::{default_theta_grid, BalancedDesignConfig, SweepConfig};
use strategem_core::respondents::{HttpRespondent, HttpRespondentConfig, Respondent, ResponseCache, SyntheticCohort};
use strategem_core::synthbench::{run_profile, Profile};

const EXIT_VALIDATION: u8 = 2;
const EXIT_TRANSPORT: u8 = 3;
const EXIT_ACCEPTANCE: u8 = 4;

/// Positional-randomization experiments on multiple-choice respondents.
#[derive(Parser)]
#[command(name = "strategem", version)]
struct Cli {
    /// Master seed for plans (and the correlation permutations in analyze).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Expected option count; the dataset must agree.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Directory for plan, manifest, log and report files.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Manifest path (default: <out-dir>/manifest.json).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Run everything on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Expand a dataset and design into a trial plan and manifest.
    Plan(PlanArgs),
    /// Execute (or resume) a plan against a respondent.
    Run(RunArgs),
    /// Build the report bundle from a complete log.
    Analyze(AnalyzeArgs),
    /// Write only trajectory and field files.
    Fields(AnalyzeArgs),
    /// Run packaged synthetic acceptance scenarios.
    Synthbench(SynthArgs),
    /// Schema-check artifacts.
    Validate { paths: Vec<PathBuf> },
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Trials per answer position in the balanced design; 0 disables it.
    #[arg(long, default_value_t = 25)]
    balanced: u32,
    /// Trials per (question, protocol, anchor, theta) cell; 0 disables the sweep.
    #[arg(long, default_value_t = 20)]
    sweep_trials: u32,
    /// Comma-separated theta grid.
    #[arg(long, value_delimiter = ',')]
    theta_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', default_value = "inclusive,exclusive")]
    protocols: Vec<String>,
    /// Comma-separated anchor letters (default: all positions).
    #[arg(long, value_delimiter = ',')]
    anchors: Option<Vec<String>>,
    /// How the memorized slot is chosen: original or argmax.
    #[arg(long, default_value = "original")]
    om_policy: String,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
    /// `synthetic:<cohort.json>` or `http`.
    #[arg(long)]
    respondent: String,
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    max_in_flight: Option<usize>,
    #[arg(long)]
    max_attempts: Option<u32>,
    #[arg(long)]
    timeout_ms: Option<u64>,
    /// Response cache for the http respondent (default: <out-dir>/cache.jsonl).
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Stop after this many new trials; rerun to resume.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    plan: Option<PathBuf>,
    /// One or more log files (default: <out-dir>/log.jsonl).
    #[arg(long)]
    log: Vec<PathBuf>,
    /// Report directory (default: <out-dir>/report).
    #[arg(long)]
    report_dir: Option<PathBuf>,
    #[arg(long)]
    allow_partial: bool,
    #[arg(long)]
    om_policy: Option<String>,
    #[arg(long, default_value_t = DEFAULT_PERMUTATIONS)]
    permutations: usize,
    /// content or per_position.
    #[arg(long, default_value = "content")]
    entropy_reading: String,
    #[arg(long, default_value_t = DEFAULT_MIN_CELL_COUNT)]
    min_cell_count: u64,
    /// Field grid spacing.
    #[arg(long, default_value_t = 0.05)]
    h: f64,
    /// Average flow vectors over questions before interpolating.
    #[arg(long)]
    ensemble_prepass: bool,
    /// Multicolour parallel relaxation in the Poisson solve.
    #[arg(long)]
    parallel_solve: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Profile name, or `all`.
    #[arg(default_value = "all")]
    profile: String,
    /// Print the machine-readable report instead of one line per check.
    #[arg(long)]
    json: bool,
}

enum Outcome {
    Done,
    Exit(u8),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Exit(code)) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_VALIDATION)
        }
    }
}

fn dispatch(cli: &Cli) -> anyhow::Result<Outcome> {
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    match &cli.command {
        Command::Plan(a) => plan(cli, a, exec),
        Command::Run(a) => run(cli, a, exec),
        Command::Analyze(a) => report(cli, a, exec, false),
        Command::Fields(a) => report(cli, a, exec, true),
        Command::Synthbench(a) => synthbench(a, exec),
        Command::Validate { paths } => validate(paths),
    }
}

fn manifest_path(cli: &Cli) -> PathBuf {
    cli.manifest.clone().unwrap_or_else(|| cli.out_dir.join("manifest.json"))
}

fn dataset(cli: &Cli, path: &Path) -> anyhow::Result<Dataset> {
    let ds = load_dataset(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(k) = cli.k {
        if ds.k() != k {
            bail!("dataset has k={} but --k {k} was given", ds.k());
        }
    }
    Ok(ds)
}

fn plan(cli: &Cli, a: &PlanArgs, exec: Execution) -> anyhow::Result<Outcome> {
    let ds = dataset(cli, &a.dataset)?;
    let seed = cli.seed.unwrap_or(0);
    let sweep = (a.sweep_trials > 0)
        .then(|| -> anyhow::Result<SweepConfig> {
            Ok(SweepConfig {
                theta_grid: a.theta_grid.clone().unwrap_or_else(default_theta_grid),
                protocols: a.protocols.iter().map(|p| p.parse::<Protocol>()).collect::<Result<_, _>>()?,
                anchor_positions: match &a.anchors {
                    Some(v) => v.iter().map(|l| l.parse::<OptionPosition>()).collect::<Result<_, _>>()?,
                    None => Vec::new(),
                },
                trials_per_cell: a.sweep_trials,
                master_seed: seed,
            })
        })
        .transpose()?;
    let design = DesignSnapshot {
        balanced: (a.balanced > 0).then_some(BalancedDesignConfig {
            trials_per_position: a.balanced,
            master_seed: seed,
        }),
        sweep,
    };
    let policy: OmPolicy = a.om_policy.parse()?;
    let trials = build_plan(&ds, &design, exec)?;
    std::fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    let plan_path = cli.out_dir.join("plan.jsonl");
    write_plan(&plan_path, &trials)?;
    let mut manifest = RunManifest::new(&ds, design, seed, policy, &trials)?;
    manifest.created_at = Some(unix_timestamp());
    manifest.write(&manifest_path(cli))?;
    println!("plan: {} trials -> {}", trials.len(), plan_path.display());
    println!("manifest: {}", manifest.hash());
    Ok(Outcome::Done)
}

fn unix_timestamp() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    format!("unix:{secs}")
}

fn load_inputs(cli: &Cli, dataset_path: &Path, plan: Option<&PathBuf>) -> anyhow::Result<(Dataset, Vec<TrialSpec>, RunManifest)> {
    let ds = dataset(cli, dataset_path)?;
    let mpath = manifest_path(cli);
    let manifest = RunManifest::read(&mpath).with_context(|| format!("reading {}", mpath.display()))?;
    let ppath = plan.cloned().unwrap_or_else(|| cli.out_dir.join("plan.jsonl"));
    let trials = read_plan(&ppath).with_context(|| format!("reading {}", ppath.display()))?;
    manifest.check_dataset(&ds)?;
    manifest.check_plan(&trials)?;
    Ok((ds, trials, manifest))
}

fn respondent(cli: &Cli, a: &RunArgs, k: usize) -> anyhow::Result<Box<dyn Respondent>> {
    if let Some(path) = a.respondent.strip_prefix("synthetic:") {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
        let cohort: SyntheticCohort = serde_json::from_str(&text).with_context(|| format!("parsing {path}"))?;
        cohort.validate(k)?;
        return Ok(Box::new(cohort));
    }
    if a.respondent != "http" {
        bail!("--respondent must be `synthetic:<file>` or `http`, got `{}`", a.respondent);
    }
    let mut config = HttpRespondentConfig::default();
    if let Some(u) = &a.base_url {
        config.base_url = u.clone();
    }
    if let Some(m) = &a.model {
        config.model_name = m.clone();
    }
    if let Some(n) = a.max_in_flight {
        config.max_in_flight = n;
    }
    if let Some(n) = a.max_attempts {
        config.retry.max_attempts = n;
    }
    if let Some(t) = a.timeout_ms {
        config.timeout_ms = t;
    }
    let cache_path = a.cache.clone().unwrap_or_else(|| cli.out_dir.join("cache.jsonl"));
    let cache = ResponseCache::open(&cache_path).with_context(|| format!("opening {}", cache_path.display()))?;
    Ok(Box::new(HttpRespondent::from_env(config)?.with_cache(Arc::new(cache))))
}

fn run(cli: &Cli, a: &RunArgs, exec: Execution) -> anyhow::Result<Outcome> {
    let (ds, trials, manifest) = load_inputs(cli, &a.dataset, a.plan.as_ref())?;
    let resp = respondent(cli, a, ds.k())?;
    let log = a.log.clone().unwrap_or_else(|| cli.out_dir.join("log.jsonl"));
    let opts = RunOptions {
        exec,
        stop_after: a.stop_after,
    };
    let rep = run_plan(&trials, &ds, resp.as_ref(), &log, &manifest.hash(), &opts)?;
    let run_json = cli.out_dir.join("run.json");
    let mut text = serde_json::to_string_pretty(&rep)?;
    text.push('\n');
    std::fs::write(&run_json, text).with_context(|| format!("writing {}", run_json.display()))?;
    println!(
        "run: {} executed, {} remaining; scored {}, parse failures {}, transport failures {}",
        rep.executed, rep.remaining, rep.scored, rep.parse_failures, rep.transport_failures
    );
    if rep.transport_failures > 0 {
        eprintln!("{} trials exhausted their retries", rep.transport_failures);
        return Ok(Outcome::Exit(EXIT_TRANSPORT));
    }
    Ok(Outcome::Done)
}

fn report(cli: &Cli, a: &AnalyzeArgs, exec: Execution, fields_only: bool) -> anyhow::Result<Outcome> {
    let (ds, trials, manifest) = load_inputs(cli, &a.dataset, a.plan.as_ref())?;
    let logs = if a.log.is_empty() { vec![cli.out_dir.join("log.jsonl")] } else { a.log.clone() };
    let mut records = Vec::new();
    for p in &logs {
        records.extend(read_log(p).with_context(|| format!("reading {}", p.display()))?);
    }
    let mut fields = FieldOptions {
        h: a.h,
        ensemble_prepass: a.ensemble_prepass,
        ..Default::default()
    };
    fields.projection.parallel = a.parallel_solve;
    let opts = AnalyzeOptions {
        allow_partial: a.allow_partial,
        om_policy: a.om_policy.as_deref().map(str::parse).transpose()?,
        permutations: a.permutations,
        correlation_seed: cli.seed,
        entropy_reading: a.entropy_reading.parse::<EntropyReading>()?,
        min_cell_count: a.min_cell_count,
        fields,
        exec,
    };
    let bundle: Bundle = if fields_only {
        compute_fields(&manifest, &ds, &trials, &records, &opts)?
    } else {
        analyze(&manifest, &ds, &trials, &records, &opts)?
    };
    let dir = a.report_dir.clone().unwrap_or_else(|| cli.out_dir.join("report"));
    write_bundle(&bundle, &dir)?;
    println!("{} files -> {}", bundle.files.len(), dir.display());
    Ok(Outcome::Done)
}

fn synthbench(a: &SynthArgs, exec: Execution) -> anyhow::Result<Outcome> {
    let profiles: Vec<Profile> = if a.profile == "all" {
        Profile::ALL.to_vec()
    } else {
        vec![a.profile.parse()?]
    };
    let mut reports = Vec::new();
    for p in profiles {
        let rep = run_profile(p, exec)?;
        if !a.json {
            for c in &rep.checks {
                println!("[{p}] {c}");
            }
            println!("[{p}] {} in {} ms", if rep.passed { "passed" } else { "FAILED" }, rep.elapsed_ms);
        }
        reports.push(rep);
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&reports)?);
    }
    let failed: Vec<String> = reports
        .iter()
        .flat_map(|r| r.failures().map(move |c| format!("{}: {}", r.profile, c.name)))
        .collect();
    if failed.is_empty() {
        Ok(Outcome::Done)
    } else {
        for f in &failed {
            eprintln!("failed: {f}");
        }
        Ok(Outcome::Exit(EXIT_ACCEPTANCE))
    }
}

fn validate(paths: &[PathBuf]) -> anyhow::Result<Outcome> {
    if paths.is_empty() {
        return Err(anyhow!("no artifacts given"));
    }
    let mut bad = 0;
    for p in paths {
        match validate_artifact(p) {
            Ok(kind) => println!("ok {}: {}", p.display(), serde_json::to_string(&kind)?),
            Err(e) => {
                bad += 1;
                println!("invalid {}: {e}", p.display());
            }
        }
    }
    Ok(if bad == 0 { Outcome::Done } else { Outcome::Exit(EXIT_VALIDATION) })
}
