//! `ulcag`: dataset generation, training, evaluation, ablations, noise
//! sweeps and artifact inspection.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ulcag_core::datagen::{self, corrupt_labels, generate, Dataset, GenParams};
use ulcag_core::experiment::{self, ExperimentKind, ExperimentSpec};
use ulcag_core::relabel::audit_csv;
use ulcag_core::trainer::{evaluate, AuxWarmup, Checkpoint, EdgeMode, TrainConfig, Trainer};

const EXIT_USAGE: u8 = 2;
const EXIT_FILE: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Debug)]
enum CliError {
    Usage(String),
    File(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::File(_) => EXIT_FILE,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::File(m) => write!(f, "file error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<ulcag_core::Error> for CliError {
    fn from(e: ulcag_core::Error) -> Self {
        use ulcag_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) | E::Validation(_) => CliError::Usage(msg),
            E::Io { .. } | E::Parse { .. } | E::Checkpoint(_) | E::Integrity(_) => CliError::File(msg),
            E::NonFiniteLoss { .. } | E::DegenerateVector | E::Shape { .. } | E::Index { .. } => {
                CliError::Numeric(msg)
            }
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "ulcag", version, about = "Uncertain-label correction with AU co-occurrence graphs")]
struct Cli {
    /// Log per-epoch progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with optional label corruption.
    Gen(GenArgs),
    /// Train on a dataset file and write checkpoint, metrics and audit files.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset against its true labels.
    Eval(EvalArgs),
    /// Run a branch or edge ablation from an experiment spec.
    Ablate(SpecArgs),
    /// Run a corruption-rate sweep from an experiment spec.
    Sweep(SpecArgs),
    /// Print a human-readable view of an artifact.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    classes: usize,
    #[arg(long, default_value_t = 12)]
    aus: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 4.0)]
    spread: f64,
    /// Within-class feature noise.
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    /// Per-bit AU flip probability.
    #[arg(long, default_value_t = 0.05)]
    au_noise: f64,
    /// Fraction of training labels replaced by a different class.
    #[arg(long, default_value_t = 0.0)]
    corruption: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write this many clean held-out samples from the same prototypes.
    #[arg(long, default_value_t = 0, requires = "test_out")]
    n_test: usize,
    #[arg(long)]
    test_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Held-out dataset evaluated after each epoch.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// TOML training config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint. The run keeps the checkpointed config.
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
    /// Stop after this epoch and write artifacts, leaving the run resumable.
    #[arg(long)]
    stop_after: Option<usize>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args, Default)]
struct ConfigOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Default 0.01.
    #[arg(long)]
    lr_target: Option<f64>,
    /// Default 0.005.
    #[arg(long)]
    lr_aux: Option<f64>,
    /// Comma-separated epochs after which lr_target drops by 10x. Default 10,20.
    #[arg(long, value_delimiter = ',')]
    lr_milestones: Option<Vec<usize>>,
    #[arg(long)]
    momentum: Option<f64>,
    /// High-confidence fraction. Default 0.8.
    #[arg(long)]
    phi: Option<f64>,
    /// Rank margin. Default 0.15.
    #[arg(long)]
    theta: Option<f64>,
    /// Ramp pivot in epochs. Default 10.
    #[arg(long)]
    beta: Option<f64>,
    /// Epochs before relabeling starts. Default 10.
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long, value_enum)]
    aux_warmup: Option<AuxWarmupArg>,
    #[arg(long, value_enum)]
    edges: Option<EdgesArg>,
    #[arg(long)]
    seed: Option<u64>,
    /// Disable the confidence branch.
    #[arg(long)]
    no_target: bool,
    /// Disable the AU graph branch and relabeling.
    #[arg(long)]
    no_aux: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum AuxWarmupArg {
    RelabelOnly,
    ZeroAuxLoss,
}

#[derive(Clone, Copy, ValueEnum)]
enum EdgesArg {
    DataDriven,
    Random,
}

impl ConfigOverrides {
    fn is_empty(&self) -> bool {
        let o = self;
        o.epochs.is_none()
            && o.batch_size.is_none()
            && o.lr_target.is_none()
            && o.lr_aux.is_none()
            && o.lr_milestones.is_none()
            && o.momentum.is_none()
            && o.phi.is_none()
            && o.theta.is_none()
            && o.beta.is_none()
            && o.warmup.is_none()
            && o.aux_warmup.is_none()
            && o.edges.is_none()
            && o.seed.is_none()
            && !o.no_target
            && !o.no_aux
    }

    fn apply(&self, c: &mut TrainConfig) {
        macro_rules! set {
            ($($field:ident => $target:ident),*) => {
                $(if let Some(v) = self.$field.clone() { c.$target = v; })*
            };
        }
        set!(epochs => epochs, batch_size => batch_size, lr_target => lr_target, lr_aux => lr_aux,
             lr_milestones => lr_milestones, momentum => momentum, phi => phi, theta => theta,
             beta => beta, warmup => warmup_epochs, seed => seed);
        if let Some(w) = self.aux_warmup {
            c.aux_warmup = match w {
                AuxWarmupArg::RelabelOnly => AuxWarmup::RelabelOnly,
                AuxWarmupArg::ZeroAuxLoss => AuxWarmup::ZeroAuxLoss,
            };
        }
        if let Some(e) = self.edges {
            c.edges = match e {
                EdgesArg::DataDriven => EdgeMode::DataDriven,
                EdgesArg::Random => EdgeMode::Random,
            };
        }
        if self.no_target {
            c.use_target = false;
        }
        if self.no_aux {
            c.use_aux = false;
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Also write the confusion matrix as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SpecArgs {
    /// TOML experiment spec.
    #[arg(long)]
    spec: PathBuf,
    /// Overrides the spec's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds overriding the spec's list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(value_enum)]
    kind: InspectKind,
    path: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum InspectKind {
    /// Adjacency CSV: matrix and row sums.
    Graph,
    /// Audit CSV: corrections per epoch.
    Audit,
    /// Checkpoint: epoch, config hash and parameter shapes.
    Checkpoint,
    /// Checkpoint: semantic class templates.
    Templates,
    /// Checkpoint: confusion matrix of the last evaluation.
    Confusion,
}

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::File(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::File(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::File(format!("{}: {e}", path.display())))
}

fn print_summary(label: &str, ds: &Dataset) {
    println!("{label}: n={} C={} M={} D={}", ds.len(), ds.classes, ds.aus, ds.dim);
    let observed = ds.class_histogram(true);
    let truth = ds.class_histogram(false);
    println!("  class  observed  true");
    for c in 0..ds.classes {
        println!("  {c:>5}  {:>8}  {:>4}", observed[c], truth[c]);
    }
    println!(
        "  corrupted: {} of {} ({:.2}%)",
        ds.noisy_count(),
        ds.len(),
        100.0 * ds.noise_rate()
    );
}

fn cmd_gen(a: GenArgs) -> CliResult {
    if a.classes > a.n {
        return Err(CliError::Usage(format!("--classes {} exceeds --n {}", a.classes, a.n)));
    }
    let params = GenParams {
        classes: a.classes,
        aus: a.aus,
        dim: a.dim,
        n: a.n + a.n_test,
        class_spread: a.spread,
        within_noise: a.noise,
        au_noise: a.au_noise,
        seed: a.seed,
    };
    let (train, test) = generate(&params)?.split_at(a.n);
    let train = corrupt_labels(&train, a.corruption, a.seed)?;
    datagen::save(&train, &a.out)?;
    print_summary(&a.out.display().to_string(), &train);
    if let Some(path) = &a.test_out {
        if a.n_test == 0 {
            return Err(CliError::Usage("--test-out needs --n-test > 0".into()));
        }
        datagen::save(&test, path)?;
        print_summary(&path.display().to_string(), &test);
    }
    Ok(())
}

fn write_run_artifacts(out: &Path, trainer: &Trainer) -> CliResult {
    trainer.checkpoint().save(out.join("checkpoint.json"))?;
    write(&out.join("metrics.csv"), &trainer.report().to_csv())?;
    write(&out.join("audit.csv"), &audit_csv(trainer.audit()))?;
    write(&out.join("templates.csv"), &trainer.templates().to_csv())?;
    write(&out.join("config.toml"), &trainer.config().to_toml())?;
    if let Some(g) = trainer.graph() {
        write(&out.join("graph.csv"), &g.to_csv(false))?;
        write(&out.join("graph_normalized.csv"), &g.to_csv(true))?;
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let train = datagen::load(&a.data)?;
    let test = a.test.as_deref().map(datagen::load).transpose()?;
    let mut trainer = match &a.resume {
        Some(path) => {
            if !a.overrides.is_empty() {
                return Err(CliError::Usage("config flags cannot be combined with --resume".into()));
            }
            Trainer::resume(Checkpoint::load(path)?, train, test)?
        }
        None => {
            let mut cfg = match &a.config {
                Some(path) => TrainConfig::from_toml(&read(path)?)?,
                None => TrainConfig::default(),
            };
            a.overrides.apply(&mut cfg);
            cfg.validate()?;
            Trainer::new(train, test, cfg)?
        }
    };
    let stop = a.stop_after.unwrap_or(usize::MAX);
    fs::create_dir_all(&a.out).map_err(|e| CliError::File(format!("{}: {e}", a.out.display())))?;
    while !trainer.is_done() && trainer.epoch() < stop {
        let m = trainer.run_epoch()?;
        log::info!(
            "epoch {:>3}  acc {:.4}  loss {:.4}  relabeled {}  noise {:.4}",
            m.epoch,
            m.eval.accuracy,
            m.total,
            m.relabel_count,
            m.noise_rate
        );
    }
    write_run_artifacts(&a.out, &trainer)?;
    match trainer.report().last() {
        Some(m) => println!(
            "epoch {}/{}: accuracy {:.4}, stored-label noise {:.4}, {} corrections",
            m.epoch,
            trainer.config().epochs,
            m.eval.accuracy,
            m.noise_rate,
            trainer.audit().iter().filter(|r| r.changed()).count()
        ),
        None => println!("no epochs run"),
    }
    println!("artifacts written to {}", a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let ds = datagen::load(&a.data)?;
    let report = evaluate(&ckpt.model, &ds, &ckpt.config)?;
    println!("accuracy {:.4} on {} samples", report.accuracy, ds.len());
    print!("{}", report.confusion_text());
    if let Some(out) = &a.out {
        let mut csv = String::new();
        for row in &report.confusion {
            let cells: Vec<String> = row.iter().map(usize::to_string).collect();
            csv.push_str(&cells.join(","));
            csv.push('\n');
        }
        write(out, &csv)?;
    }
    Ok(())
}

fn load_spec(a: &SpecArgs) -> CliResult<ExperimentSpec> {
    let mut spec = ExperimentSpec::from_toml(&read(&a.spec)?)?;
    if let Some(out) = &a.out {
        spec.output_dir = out.clone();
    }
    if let Some(seeds) = &a.seeds {
        spec.seeds = seeds.clone();
    }
    spec.validate()?;
    Ok(spec)
}

fn run_spec(spec: &ExperimentSpec) -> CliResult {
    let table = experiment::run(spec)?;
    let dir = &spec.output_dir;
    write(&dir.join("table.csv"), &table.to_csv())?;
    write(&dir.join("table.txt"), &table.to_text())?;
    write(&dir.join("spec.toml"), &spec.to_toml())?;
    print!("{}", table.to_text());
    println!("tables written to {}", dir.display());
    Ok(())
}

fn cmd_ablate(a: SpecArgs) -> CliResult {
    let spec = load_spec(&a)?;
    if !matches!(spec.kind, ExperimentKind::Ablation | ExperimentKind::Edges) {
        return Err(CliError::Usage(format!("ablate needs kind ablation or edges, got {:?}", spec.kind)));
    }
    run_spec(&spec)
}

fn cmd_sweep(a: SpecArgs) -> CliResult {
    let mut spec = load_spec(&a)?;
    match spec.kind {
        ExperimentKind::NoiseSweep => {}
        ExperimentKind::SingleRun => spec.kind = ExperimentKind::NoiseSweep,
        other => return Err(CliError::Usage(format!("sweep needs kind noise_sweep, got {other:?}"))),
    }
    run_spec(&spec)
}

fn parse_matrix(text: &str, path: &Path) -> CliResult<Vec<Vec<f64>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            line.split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<Vec<f64>, _>>()
                .map_err(|e| CliError::File(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn cmd_inspect(a: InspectArgs) -> CliResult {
    match a.kind {
        InspectKind::Graph => {
            let m = parse_matrix(&read(&a.path)?, &a.path)?;
            println!("{}x{} adjacency", m.len(), m.first().map_or(0, Vec::len));
            for (p, row) in m.iter().enumerate() {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:7.4}")).collect();
                println!("{p:>3} | {} | sum {:.4}", cells.join(" "), row.iter().sum::<f64>());
            }
        }
        InspectKind::Audit => {
            let text = read(&a.path)?;
            let mut per_epoch: BTreeMap<usize, usize> = BTreeMap::new();
            for (i, line) in text.lines().enumerate().skip(1).filter(|(_, l)| !l.is_empty()) {
                let epoch = line
                    .split(',')
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| CliError::File(format!("{}:{}: bad audit row", a.path.display(), i + 1)))?;
                *per_epoch.entry(epoch).or_default() += 1;
            }
            println!("epoch  corrections");
            for (epoch, n) in &per_epoch {
                println!("{epoch:>5}  {n:>11}");
            }
            println!("total  {:>11}", per_epoch.values().sum::<usize>());
        }
        InspectKind::Checkpoint => {
            let c = Checkpoint::load(&a.path)?;
            println!("version      {}", c.version);
            println!("epoch        {}/{}", c.epoch, c.config.epochs);
            println!("config hash  {}", c.config_hash);
            println!("dataset      {}", c.dataset_digest);
            println!("seed         {}", c.rng_seed);
            println!("parameters");
            let mut total = 0;
            for (name, r, k) in c.parameter_shapes() {
                println!("  {name:<18} {r:>4} x {k:<4}");
                total += r * k;
            }
            println!("  total {total}");
        }
        InspectKind::Templates => {
            let c = Checkpoint::load(&a.path)?;
            let t = &c.templates;
            for j in 0..t.classes() {
                let epoch = t.last_update_epoch[j].map_or("-".to_string(), |e| e.to_string());
                if t.valid[j] {
                    let v: Vec<String> = t.templates[j].iter().map(|x| format!("{x:7.3}")).collect();
                    println!("class {j} (epoch {epoch}): {}", v.join(" "));
                } else {
                    println!("class {j}: no template");
                }
            }
        }
        InspectKind::Confusion => {
            let c = Checkpoint::load(&a.path)?;
            let m = c
                .report
                .last()
                .ok_or_else(|| CliError::Usage("checkpoint has no completed epochs".into()))?;
            println!("epoch {} accuracy {:.4}", m.epoch, m.eval.accuracy);
            print!("{}", m.eval.confusion_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ulcag: {e}");
            ExitCode::from(e.code())
        }
    }
}
