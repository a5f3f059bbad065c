use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use surge::data::{build_instances, generate_synthetic, k_core_filter, parse_log, Behavior, DatasetSplit, LogFormat, SplitConfig, SynthConfig};
use surge::evolution::EvolutionKind;
use surge::metrics::{auc, gauc, paired_bootstrap, MetricReport, ScoredInstance};
use surge::model::SurgeModel;
use surge::trainer::{ablate, ablation_table, grid_search, load_checkpoint, save_checkpoint, train, Grids, RunConfig, RunReport};
use surge::{Error, Result, Scalar};

#[derive(Parser)]
#[command(name = "surge", version, about = "Graph-based sequential recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest an interaction log and write train/validation/test instances.
    Prepare(PrepareArgs),
    /// Generate a cluster-structured synthetic dataset.
    Synth(SynthArgs),
    /// Train one configuration; writes report, timings and checkpoint.
    Train(TrainArgs),
    /// Score a dataset part with a checkpoint.
    Evaluate(EvaluateArgs),
    /// Exhaustive grid search over regulariser and pooling values.
    Grid(GridArgs),
    /// Train the ablation variants and print a comparison table.
    Ablate(AblateArgs),
    /// Print saved run reports as key/value text.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Part {
    Train,
    Validation,
    Test,
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long, env = "SURGE_LOG")]
    log: PathBuf,
    #[arg(long, env = "SURGE_DATA")]
    out: PathBuf,
    /// Field delimiter, a single byte; `\t` for tabs.
    #[arg(long, default_value = ",")]
    delimiter: String,
    #[arg(long)]
    header: bool,
    #[arg(long, default_value_t = 0)]
    user_col: usize,
    #[arg(long, default_value_t = 1)]
    item_col: usize,
    #[arg(long, default_value_t = 2)]
    time_col: usize,
    #[arg(long)]
    behavior_col: Option<usize>,
    /// Minimum interactions per user and per item.
    #[arg(long, default_value_t = 10)]
    k_core: usize,
    #[arg(long, default_value_t = 50)]
    max_len: usize,
    #[arg(long)]
    train_end: u64,
    #[arg(long)]
    val_end: u64,
    #[arg(long, default_value_t = 1)]
    neg_ratio: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Behaviors that produce instances.
    #[arg(long, value_delimiter = ',', default_value = "click")]
    behaviors: Vec<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, env = "SURGE_DATA")]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    users: usize,
    #[arg(long, default_value_t = 500)]
    items: usize,
    #[arg(long, default_value_t = 10)]
    clusters: usize,
    #[arg(long, default_value_t = 80)]
    seq_len: usize,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 80)]
    max_len: usize,
    #[arg(long, default_value_t = 1)]
    neg_ratio: usize,
    #[arg(long, default_value_t = 4)]
    train_cuts: usize,
}

/// Config file plus per-field overrides.
#[derive(Args)]
struct ConfigArgs {
    /// TOML file with `[model]` and `[train]` tables.
    #[arg(long, env = "SURGE_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, default_value = "f32")]
    precision: Precision,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    pooled_len: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    hops: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    attention_hidden: Option<usize>,
    #[arg(long)]
    evolution: Option<EvolutionKind>,
    #[arg(long)]
    no_fusion: bool,
    #[arg(long)]
    no_cluster_aware: bool,
    #[arg(long)]
    no_query_aware: bool,
    #[arg(long)]
    no_extraction: bool,
    #[arg(long)]
    no_readout: bool,
    #[arg(long)]
    no_regularization: bool,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long)]
    lambda_m: Option<f64>,
    #[arg(long)]
    lambda_a: Option<f64>,
    #[arg(long)]
    lambda_p: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let m = &mut c.model;
        set(&mut m.dim, self.dim);
        set(&mut m.heads, self.heads);
        set(&mut m.pooled_len, self.pooled_len);
        set(&mut m.epsilon, self.epsilon);
        set(&mut m.hops, self.hops);
        set(&mut m.hidden, self.hidden);
        set(&mut m.attention_hidden, self.attention_hidden);
        set(&mut m.evolution, self.evolution);
        m.fusion &= !self.no_fusion;
        m.cluster_aware &= !self.no_cluster_aware;
        m.query_aware &= !self.no_query_aware;
        m.extraction &= !self.no_extraction;
        m.readout &= !self.no_readout;
        m.regularization &= !self.no_regularization;
        let t = &mut c.train;
        set(&mut t.learning_rate, self.lr);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.max_epochs, self.epochs);
        set(&mut t.patience, self.patience);
        set(&mut t.l2, self.l2);
        set(&mut t.reg.same_mapping, self.lambda_m);
        set(&mut t.reg.single_affiliation, self.lambda_a);
        set(&mut t.reg.relative_position, self.lambda_p);
        set(&mut t.seed, self.seed);
        Ok(c)
    }
}

fn set<V>(slot: &mut V, value: Option<V>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, env = "SURGE_DATA")]
    data: PathBuf,
    #[arg(long, env = "SURGE_OUT")]
    out_dir: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Write the interest graph of the first N test instances as edge lists.
    #[arg(long, default_value_t = 0)]
    dump_graphs: usize,
    /// Write the assignment matrix of the first N test instances.
    #[arg(long, default_value_t = 0)]
    dump_assignments: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, env = "SURGE_CHECKPOINT")]
    checkpoint: PathBuf,
    #[arg(long, env = "SURGE_DATA")]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    part: Part,
    /// Second checkpoint; prints a paired bootstrap of AUC and GAUC differences.
    #[arg(long)]
    against: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    resamples: usize,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long, env = "SURGE_DATA")]
    data: PathBuf,
    #[arg(long, env = "SURGE_OUT")]
    out_dir: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_delimiter = ',')]
    grid_l2: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    grid_lambda_m: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    grid_lambda_a: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    grid_lambda_p: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    grid_pooled_len: Option<Vec<usize>>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, env = "SURGE_DATA")]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Also write the rows as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(required = true)]
    reports: Vec<PathBuf>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn prepare(a: &PrepareArgs) -> Result<()> {
    let delimiter = match a.delimiter.as_str() {
        "\\t" | "tab" => b'\t',
        d if d.len() == 1 => d.as_bytes()[0],
        d => return Err(Error::Config(format!("delimiter must be one byte, got '{d}'"))),
    };
    let format = LogFormat {
        delimiter,
        has_header: a.header,
        user_col: a.user_col,
        item_col: a.item_col,
        time_col: a.time_col,
        behavior_col: a.behavior_col,
    };
    let behaviors = a.behaviors.iter().map(|b| b.parse::<Behavior>().map_err(Error::Config)).collect::<Result<Vec<_>>>()?;
    let parsed = parse_log(&a.log, &format)?;
    info!("{} events, {} malformed rows skipped", parsed.events.len(), parsed.malformed);
    let events = k_core_filter(parsed.events, a.k_core)?;
    let split_cfg = SplitConfig { max_len: a.max_len, train_end: a.train_end, val_end: a.val_end, neg_ratio: a.neg_ratio, seed: a.seed, behaviors };
    let split = build_instances(&events, &split_cfg)?;
    split.save(&a.out)?;
    print_split(&split);
    Ok(())
}

fn print_split(split: &DatasetSplit) {
    println!("users = {}", split.users.len());
    println!("items = {}", split.item_vocab_size);
    for (name, part) in split.parts() {
        println!("{name} = {}", part.len());
    }
    println!("dataset_hash = {}", split.hash());
}

fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        num_users: a.users,
        num_items: a.items,
        num_clusters: a.clusters,
        seq_len: a.seq_len,
        noise_rate: a.noise,
        seed: a.seed,
        max_len: a.max_len,
        neg_ratio: a.neg_ratio,
        train_cuts: a.train_cuts,
    };
    let (split, _) = generate_synthetic(&cfg)?;
    split.save(&a.out)?;
    print_split(&split);
    Ok(())
}

fn run_train<T: Scalar>(a: &TrainArgs, config: &RunConfig, split: &DatasetSplit) -> Result<()> {
    let out = train::<T>(config, split)?;
    create_dir(&a.out_dir)?;
    write(&a.out_dir.join("report.json"), &out.report.to_json())?;
    write(&a.out_dir.join("timings.json"), &serde_json::to_string_pretty(&out.timings).expect("timings serialise"))?;
    write(&a.out_dir.join("config.toml"), &config.to_toml())?;
    save_checkpoint(&out.model, config, &a.out_dir.join("checkpoint.txt"))?;
    for (k, inst) in split.test.iter().enumerate().take(a.dump_graphs.max(a.dump_assignments)) {
        let view = out.model.inspect(inst)?;
        if k < a.dump_graphs {
            let path = a.out_dir.join(format!("graph_{k}.txt"));
            let mut buf = Vec::new();
            view.graph.write_edge_list(&mut buf).map_err(|e| Error::io(&path, e))?;
            fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
        }
        if let (true, Some(s)) = (k < a.dump_assignments, view.assignment) {
            let text: String = s.rows().into_iter().map(|r| r.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(" ") + "\n").collect();
            write(&a.out_dir.join(format!("assignment_{k}.txt")), &text)?;
        }
    }
    print!("{}", out.report.to_text());
    println!("mean_epoch_seconds = {:.3}", out.timings.mean_epoch_seconds());
    Ok(())
}

fn checkpoint_scalar(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .nth(1)
        .and_then(|l| l.strip_prefix("scalar "))
        .map(str::to_string)
        .ok_or_else(|| Error::Checkpoint(format!("{}: missing scalar line", path.display())))
}

fn score_with(path: &Path, instances: &[surge::data::TrainingInstance]) -> Result<Vec<ScoredInstance>> {
    fn go<T: Scalar>(path: &Path, instances: &[surge::data::TrainingInstance]) -> Result<Vec<ScoredInstance>> {
        let (model, _): (SurgeModel<T>, _) = load_checkpoint(path)?;
        model.score(instances)
    }
    match checkpoint_scalar(path)?.as_str() {
        "f32" => go::<f32>(path, instances),
        "f64" => go::<f64>(path, instances),
        other => Err(Error::Checkpoint(format!("unsupported scalar '{other}'"))),
    }
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let split = DatasetSplit::load(&a.data)?;
    let instances = match a.part {
        Part::Train => &split.train,
        Part::Validation => &split.validation,
        Part::Test => &split.test,
    };
    let scored = score_with(&a.checkpoint, instances)?;
    print!("{}", MetricReport::compute(&scored).to_text(""));
    if let Some(other) = &a.against {
        let base = score_with(other, instances)?;
        for (name, metric) in [("auc", auc as fn(&[ScoredInstance]) -> Result<f64>), ("gauc", gauc)] {
            let b = paired_bootstrap(&scored, &base, metric, a.resamples, 0)?;
            println!(
                "delta.{name} = {:.6} ci95 [{:.6}, {:.6}] p_not_better {:.4}",
                b.observed, b.lower, b.upper, b.p_not_better
            );
        }
    }
    Ok(())
}

fn grid(a: &GridArgs) -> Result<()> {
    let base = a.config.resolve()?;
    let split = DatasetSplit::load(&a.data)?;
    let mut grids = Grids::default();
    set(&mut grids.l2, a.grid_l2.clone());
    set(&mut grids.same_mapping, a.grid_lambda_m.clone());
    set(&mut grids.single_affiliation, a.grid_lambda_a.clone());
    set(&mut grids.relative_position, a.grid_lambda_p.clone());
    set(&mut grids.pooled_len, a.grid_pooled_len.clone());
    let outcome = match a.config.precision {
        Precision::F32 => grid_search::<f32>(&base, &grids, &split)?,
        Precision::F64 => grid_search::<f64>(&base, &grids, &split)?,
    };
    create_dir(&a.out_dir)?;
    for (k, (cfg, report)) in outcome.runs.iter().enumerate() {
        write(&a.out_dir.join(format!("run_{k}.json")), &report.to_json())?;
        write(&a.out_dir.join(format!("run_{k}.toml")), &cfg.to_toml())?;
        let g = report.validation.gauc.map_or_else(|| "undefined".into(), |v| format!("{v:.6}"));
        println!("run {k}: validation.gauc = {g}");
    }
    write(&a.out_dir.join("best.toml"), &outcome.best.to_toml())?;
    println!("best = run {}", outcome.best_index);
    Ok(())
}

fn ablation(a: &AblateArgs) -> Result<()> {
    let base = a.config.resolve()?;
    let split = DatasetSplit::load(&a.data)?;
    let rows = match a.config.precision {
        Precision::F32 => ablate::<f32>(&base, &split)?,
        Precision::F64 => ablate::<f64>(&base, &split)?,
    };
    print!("{}", ablation_table(&rows));
    if let Some(p) = &a.json {
        write(p, &serde_json::to_string_pretty(&rows).expect("rows serialise"))?;
    }
    Ok(())
}

fn report(a: &ReportArgs) -> Result<()> {
    for (k, path) in a.reports.iter().enumerate() {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r = RunReport::from_json(&text)?;
        if a.reports.len() > 1 {
            if k > 0 {
                println!();
            }
            println!("# {}", path.display());
        }
        print!("{}", r.to_text());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(a) => prepare(&a),
        Command::Synth(a) => synth(&a),
        Command::Train(a) => {
            let config = a.config.resolve()?;
            let split = DatasetSplit::load(&a.data)?;
            match a.config.precision {
                Precision::F32 => run_train::<f32>(&a, &config, &split),
                Precision::F64 => run_train::<f64>(&a, &config, &split),
            }
        }
        Command::Evaluate(a) => evaluate(&a),
        Command::Grid(a) => grid(&a),
        Command::Ablate(a) => ablation(&a),
        Command::Report(a) => report(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // usage problems are configuration errors
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
