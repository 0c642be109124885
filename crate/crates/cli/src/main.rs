//! `fedpa`: partitioning, simulation, accounting, evaluation and reporting
//! for federated partial aggregation.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors.
//! `UFPA_LOG` sets the log filter (e.g. `UFPA_LOG=debug`).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use fedpa::accounting::{comm_report, render_savings_table};
use fedpa::evaluation::{map50, read_detections, GroundTruth};
use fedpa::orchestrator::config::{LmoEntry, PartitionConfig};
use fedpa::orchestrator::report::{read_summary_rows, write_round_series_csv, write_table_csv};
use fedpa::orchestrator::{
    build_partition, load_schema, run_experiment, run_remote_client, serve_seed, summarize_runs, write_artifacts,
    Carrier, Experiment, ExperimentConfig, ExperimentOutput, PartitionMode, RunOptions, QUICKSTART_CONFIG,
};
use fedpa::partition::{materialize, DatasetManifest};
use fedpa::schema::ModelSchema;
use fedpa::strategy::Strategy;
use fedpa::transport::SocketServer;

#[derive(Parser)]
#[command(name = "fedpa", version, about = "Federated partial aggregation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a dataset manifest into per-client video sets.
    Partition(PartitionArgs),
    /// Run an experiment in-process and write CSV artifacts.
    Simulate(SimulateArgs),
    /// Print per-client communication for a strategy (or all of them).
    Account(AccountArgs),
    /// Compute mAP50 of a detections file against a manifest.
    Eval(EvalArgs),
    /// Render summary CSVs as a results table.
    Report(ReportArgs),
    /// Coordinate clients that connect over TCP.
    Serve(ServeArgs),
    /// Join a `serve` coordinator as one client.
    Client(ClientArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Iid,
    Group,
    Length,
}

#[derive(Args)]
struct PartitionArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "iid")]
    mode: ModeArg,
    #[arg(long)]
    clients: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Source-tag prefix of client 0's videos (group mode).
    #[arg(long)]
    group_prefix: Option<String>,
    /// Validation videos held out per client.
    #[arg(long, default_value_t = 0)]
    valid_per_client: usize,
    /// Test videos held out per client.
    #[arg(long, default_value_t = 0)]
    test_per_client: usize,
    /// Label restriction `CLIENT:CLASS,CLASS,...`; repeatable.
    #[arg(long, value_parser = parse_lmo)]
    lmo: Vec<LmoEntry>,
    /// Writes `partition.toml` and one manifest per client split here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Config file, or `quickstart` for the bundled example.
    #[arg(long)]
    config: String,
    #[arg(long, default_value = "artifacts")]
    out: PathBuf,
    /// Overrides the configured strategy (`Name[:rule]`).
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    /// Runs this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "loopback")]
    carrier: CarrierArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum CarrierArg {
    Loopback,
    Socket,
}

#[derive(Args)]
struct AccountArgs {
    /// Schema file, or `yolov11n` (default) for the bundled one.
    #[arg(value_name = "SCHEMA")]
    schema_pos: Option<String>,
    #[arg(value_name = "STRATEGY")]
    strategy_pos: Option<String>,
    #[arg(long, conflicts_with = "schema_pos")]
    schema: Option<String>,
    #[arg(long, conflicts_with = "strategy_pos")]
    strategy: Option<String>,
    /// Print every named mask.
    #[arg(long)]
    all: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    detections: PathBuf,
    /// Manifest holding the ground truth of the evaluated frames.
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Artifact directories written by `simulate` or `serve`.
    #[arg(required = true)]
    artifacts: Vec<PathBuf>,
    /// Writes the table as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also writes `round_series.csv` (per-round validation values) into each artifact directory.
    #[arg(long)]
    series: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    config: String,
    #[arg(long, default_value = "127.0.0.1:7878")]
    bind: String,
    #[arg(long, default_value = "artifacts")]
    out: PathBuf,
    /// Overrides the configured round timeout.
    #[arg(long)]
    timeout_secs: Option<u64>,
}

#[derive(Args)]
struct ClientArgs {
    #[arg(long)]
    config: String,
    #[arg(long)]
    connect: String,
    /// This client's index in `0..n_clients`.
    #[arg(long)]
    index: usize,
    /// Connect budget and maximum wait for any server message.
    #[arg(long, default_value_t = 600)]
    timeout_secs: u64,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse::<Strategy>().map_err(|e| e.to_string())
}

fn parse_lmo(s: &str) -> Result<LmoEntry, String> {
    let (client, classes) = s
        .split_once(':')
        .ok_or_else(|| format!("`{s}` is not CLIENT:CLASS,CLASS,..."))?;
    let client = client.trim().parse().map_err(|e| format!("client in `{s}`: {e}"))?;
    let classes = classes
        .split(',')
        .filter(|c| !c.trim().is_empty())
        .map(|c| c.trim().parse::<u32>().map_err(|e| format!("class in `{s}`: {e}")))
        .collect::<Result<BTreeSet<_>, _>>()?;
    Ok(LmoEntry { client, classes })
}

/// Errors that should exit with code 1.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn load_config(spec: &str) -> anyhow::Result<ExperimentConfig> {
    Ok(if spec == "quickstart" {
        ExperimentConfig::parse(QUICKSTART_CONFIG)?
    } else {
        ExperimentConfig::load(spec)?
    })
}

fn print_summary(output: &ExperimentOutput) {
    let s = &output.summary;
    let fmt = |m: Option<f64>, sd: Option<f64>| match (m, sd) {
        (Some(m), Some(sd)) => format!("{m:.4} ± {sd:.4}"),
        _ => "n/a".to_string(),
    };
    println!("strategy,mAP50_ID,mAP50_CD");
    println!(
        "{},{},{}",
        s.strategy,
        fmt(Some(s.stats.id_mean), Some(s.stats.id_std)),
        fmt(s.stats.cd_mean, s.stats.cd_std)
    );
    println!(
        "upload per client: {} scalars over {} rounds ({} aggregations)",
        s.upload_per_client,
        output.runs.first().map_or(0, |r| r.reports.len()),
        s.aggregations
    );
}

fn partition(args: PartitionArgs) -> anyhow::Result<()> {
    let cfg = PartitionConfig {
        manifest: args.manifest.clone(),
        spec: None,
        mode: match args.mode {
            ModeArg::Iid => PartitionMode::Iid,
            ModeArg::Group => PartitionMode::Group,
            ModeArg::Length => PartitionMode::Length,
        },
        seed: args.seed,
        group_prefix: args.group_prefix,
        valid_per_client: args.valid_per_client,
        test_per_client: args.test_per_client,
        lmo: args.lmo,
    };
    let (manifest, spec) = build_partition(&cfg, args.clients)?;
    let counts = manifest.frame_counts();
    for c in &spec.clients {
        let frames: usize = c.train.iter().map(|v| counts[v]).sum();
        println!(
            "client {}: {} train videos ({} frames) [{}]{}{}",
            c.client_id,
            c.train.len(),
            frames,
            c.train.join(" "),
            if c.valid.is_empty() { String::new() } else { format!(" valid [{}]", c.valid.join(" ")) },
            if c.test.is_empty() { String::new() } else { format!(" test [{}]", c.test.join(" ")) },
        );
    }
    if let Some(out) = args.out {
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        spec.save(out.join("partition.toml"))?;
        let written = materialize(&spec, &manifest, &out)?;
        println!("wrote partition.toml and {} split manifests to {}", written.len(), out.display());
    }
    Ok(())
}

fn simulate(args: SimulateArgs) -> anyhow::Result<()> {
    let mut config = load_config(&args.config)?;
    if let Some(s) = args.strategy {
        config.strategy = s;
    }
    if let Some(seed) = args.seed {
        config.seeds = vec![seed];
    }
    let exp = Experiment::from_config(config)?;
    let (carrier, name) = match args.carrier {
        CarrierArg::Loopback => (Carrier::Loopback, "loopback"),
        CarrierArg::Socket => (Carrier::Socket, "socket"),
    };
    let output = run_experiment(&exp, RunOptions { carrier, record: false })?;
    write_artifacts(&args.out, &exp, &output, name)?;
    print_summary(&output);
    println!("artifacts in {}", args.out.display());
    Ok(())
}

fn resolve_schema(spec: Option<String>) -> anyhow::Result<ModelSchema> {
    let spec = spec.unwrap_or_else(|| "yolov11n".into());
    // a bundled name or a file path; the file name of the bundled fixture also resolves to it
    let name = Path::new(&spec).file_name().and_then(|f| f.to_str()).unwrap_or_default();
    if spec == "yolov11n" || (name == "yolov11n.schema" && !Path::new(&spec).exists()) {
        return Ok(ModelSchema::yolov11n());
    }
    Ok(load_schema(&spec, [1, 1, 1])?)
}

fn account(args: AccountArgs) -> anyhow::Result<()> {
    let strategy = args.strategy.or(args.strategy_pos);
    if args.all && strategy.is_some() {
        return Err(usage("give either --all or a strategy, not both"));
    }
    // parse the strategy before touching the schema so a bad name is a usage error
    let strategy = match strategy {
        Some(s) => Some(s.parse::<Strategy>().map_err(|e| usage(e.to_string()))?),
        None if args.all => None,
        None => return Err(usage("a strategy name or --all is required")),
    };
    let schema = resolve_schema(args.schema.or(args.schema_pos))?;
    match strategy {
        None => print!("{}", render_savings_table(&schema)),
        Some(s) => println!("{}: {}", s.mask_name(), comm_report(&schema, s.components)),
    }
    Ok(())
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let dets = read_detections(&args.detections)?;
    let manifest = DatasetManifest::load(&args.manifest)?;
    let gts: Vec<GroundTruth> = manifest.frames().iter().flat_map(|f| f.ground_truths()).collect();
    let result = map50(&dets, &gts);
    for (class, ap) in &result.per_class {
        let name = manifest.class_names().get(*class as usize).map_or("?", String::as_str);
        println!("class {class} ({name}): AP50 {ap:.6}");
    }
    println!("mAP50 {:.6}", result.map);
    Ok(())
}

fn report(args: ReportArgs) -> anyhow::Result<()> {
    let mut rows = Vec::new();
    for dir in &args.artifacts {
        rows.extend(read_summary_rows(&dir.join("summary.csv"))?);
        if args.series {
            let n = write_round_series_csv(dir, &dir.join("round_series.csv"))?;
            log::info!("{}: {n} series rows", dir.display());
        }
    }
    println!("strategy,mAP50_ID,mAP50_CD");
    for r in &rows {
        println!("{},{},{}", r.strategy, r.map50_id, r.map50_cd);
    }
    if let Some(out) = args.out {
        write_table_csv(&out, &rows)?;
    }
    Ok(())
}

fn serve(args: ServeArgs) -> anyhow::Result<()> {
    let mut config = load_config(&args.config)?;
    if let Some(t) = args.timeout_secs {
        config.round_timeout_secs = t;
    }
    let exp = Experiment::from_config(config)?;
    let listener = SocketServer::bind(&args.bind).with_context(|| format!("binding {}", args.bind))?;
    log::info!("listening on {}", listener.local_addr()?);
    let mut runs = Vec::new();
    for &seed in &exp.config.seeds {
        log::info!("seed {seed}: waiting for {} clients", exp.config.n_clients);
        runs.push(serve_seed(&exp, seed, &listener)?);
    }
    let output = summarize_runs(&exp, runs)?;
    write_artifacts(&args.out, &exp, &output, "socket")?;
    print_summary(&output);
    println!("artifacts in {}", args.out.display());
    Ok(())
}

fn client(args: ClientArgs) -> anyhow::Result<()> {
    let exp = Experiment::from_config(load_config(&args.config)?)?;
    if args.index >= exp.config.n_clients {
        return Err(usage(format!(
            "--index {} out of range for {} clients",
            args.index, exp.config.n_clients
        )));
    }
    let models = run_remote_client(&exp, &args.connect, args.index, Duration::from_secs(args.timeout_secs))?;
    println!("client {} finished {} sessions", args.index, models.len());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Partition(a) => partition(a),
        Command::Simulate(a) => simulate(a),
        Command::Account(a) => account(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
        Command::Serve(a) => serve(a),
        Command::Client(a) => client(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("UFPA_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
