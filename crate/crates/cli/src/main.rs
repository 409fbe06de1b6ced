//! `textrefiner` command-line driver.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use textrefiner::dataio::{generate, load_bundle, save_bundle, EmbeddingBundle, SynthSpec};
use textrefiner::evalkit::{
    b2n_eval, bench, component_ablation, frozen_baseline_report, sweep, B2NReport, BenchReport, SweepAxis,
    SweepTable,
};
use textrefiner::numkit::{ops, Activation};
use textrefiner::training::{
    load_checkpoint, load_checkpoint_for, save_checkpoint, train_until, EpochMetrics, OptimizerKind,
    TrainConfig, TrainState, WriteOrder,
};
use textrefiner::Error;

const THREADS_ENV: &str = "TEXTREFINER_THREADS";
const CHECKPOINT_FILE: &str = "checkpoint.txrf";

#[derive(Debug, Parser)]
#[command(name = "textrefiner", version, about = "Cache-based refinement of class text embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic embedding bundle into `--out`.
    Gen(GenArgs),
    /// Train on a bundle; writes a checkpoint and the per-epoch metrics log.
    Train(TrainCmd),
    /// Base-to-novel evaluation of a checkpoint (or of the raw embeddings).
    Eval(EvalCmd),
    /// Time per-query prediction with and without refinement.
    Bench(BenchCmd),
    /// Retrain along one hyperparameter axis, or run the component study.
    Sweep(SweepCmd),
    /// Print the cache entries of a checkpoint.
    InspectCache(InspectCmd),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
enum Format {
    #[default]
    Json,
    Csv,
    Text,
}

impl Format {
    fn ext(self) -> &'static str {
        match self {
            Format::Json => "json",
            Format::Csv => "csv",
            Format::Text => "txt",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum OptArg {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ActArg {
    Gelu,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum OrderArg {
    BeforeRetrieve,
    AfterRetrieve,
}

#[derive(Debug, Args)]
struct OutArgs {
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[command(flatten)]
    synth: SynthArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Attribute pool size.
    #[arg(long, default_value_t = SynthSpec::default().pool)]
    pool: usize,
    #[arg(long, default_value_t = SynthSpec::default().attrs_per_class)]
    attrs_per_class: usize,
    /// Norm of the Gaussian noise on tokens and global features.
    #[arg(long, default_value_t = SynthSpec::default().noise)]
    noise: f64,
    /// Pure-noise tokens per sample.
    #[arg(long, default_value_t = SynthSpec::default().distractors)]
    distractors: usize,
    /// Attribute weight inside class text embeddings.
    #[arg(long, default_value_t = SynthSpec::default().text_attr_weight)]
    text_attr_weight: f64,
    /// Core weight inside image global features.
    #[arg(long, default_value_t = SynthSpec::default().image_core_weight)]
    image_core_weight: f64,
    #[arg(long, default_value_t = SynthSpec::default().seed)]
    seed: u64,
    /// Embedding dimension.
    #[arg(long, default_value_t = SynthSpec::default().dim)]
    dim: usize,
    /// Local tokens per sample.
    #[arg(long, default_value_t = SynthSpec::default().tokens)]
    tokens: usize,
    #[arg(long, default_value_t = SynthSpec::default().base_classes)]
    base_classes: usize,
    #[arg(long, default_value_t = SynthSpec::default().novel_classes)]
    novel_classes: usize,
    #[arg(long, default_value_t = SynthSpec::default().samples_per_class)]
    samples_per_class: usize,
}

impl SynthArgs {
    fn spec(&self) -> SynthSpec {
        SynthSpec {
            pool: self.pool,
            attrs_per_class: self.attrs_per_class,
            noise: self.noise,
            distractors: self.distractors,
            text_attr_weight: self.text_attr_weight,
            image_core_weight: self.image_core_weight,
            seed: self.seed,
            dim: self.dim,
            tokens: self.tokens,
            base_classes: self.base_classes,
            novel_classes: self.novel_classes,
            samples_per_class: self.samples_per_class,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    /// Peak learning rate (cosine decay to zero).
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    lr: f64,
    #[arg(long, value_enum, default_value_t = OptArg::Adam)]
    optimizer: OptArg,
    #[arg(long, default_value_t = TrainConfig::default().seed)]
    seed: u64,
    /// Cache momentum.
    #[arg(long, default_value_t = TrainConfig::default().gamma)]
    gamma: f64,
    /// Fusion coefficient of the refinement residual.
    #[arg(long, default_value_t = TrainConfig::default().alpha)]
    alpha: f64,
    /// Weight of the semantic loss.
    #[arg(long, default_value_t = TrainConfig::default().lambda_sem)]
    lambda_sem: f64,
    /// Weight of the regularization loss.
    #[arg(long, default_value_t = TrainConfig::default().lambda_reg)]
    lambda_reg: f64,
    /// Softmax temperature.
    #[arg(long, default_value_t = TrainConfig::default().tau)]
    tau: f64,
    /// Number of cache entries.
    #[arg(long, default_value_t = TrainConfig::default().cache_size)]
    cache_size: usize,
    /// Tokens per sample used by the semantic loss.
    #[arg(long, default_value_t = TrainConfig::default().top_k)]
    top_k: usize,
    /// MLP hidden width; 0 uses the embedding dimension.
    #[arg(long, default_value_t = 0)]
    hidden: usize,
    #[arg(long, value_enum, default_value_t = ActArg::Gelu)]
    activation: ActArg,
    /// Global gradient-norm clip; 0 disables clipping.
    #[arg(long, default_value_t = TrainConfig::default().clip_norm.unwrap_or(0.0))]
    clip_norm: f64,
    #[arg(long, value_enum, default_value_t = OrderArg::BeforeRetrieve)]
    write_order: OrderArg,
    /// Learn the per-class embedding offset.
    #[arg(long, action = ArgAction::Set, default_value_t = TrainConfig::default().train_class_delta)]
    train_class_delta: bool,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            optimizer: match self.optimizer {
                OptArg::Sgd => OptimizerKind::Sgd,
                OptArg::Adam => OptimizerKind::Adam,
            },
            seed: self.seed,
            gamma: self.gamma,
            alpha: self.alpha,
            lambda_sem: self.lambda_sem,
            lambda_reg: self.lambda_reg,
            tau: self.tau,
            cache_size: self.cache_size,
            top_k: self.top_k,
            hidden: (self.hidden > 0).then_some(self.hidden),
            activation: match self.activation {
                ActArg::Gelu => Activation::Gelu,
                ActArg::Relu => Activation::Relu,
            },
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            write_order: match self.write_order {
                OrderArg::BeforeRetrieve => WriteOrder::BeforeRetrieve,
                OrderArg::AfterRetrieve => WriteOrder::AfterRetrieve,
            },
            train_class_delta: self.train_class_delta,
        }
    }
}

#[derive(Debug, Args)]
struct TrainCmd {
    /// Bundle directory.
    #[arg(long)]
    bundle: PathBuf,
    /// Continue from this checkpoint; its config replaces the training flags.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop once this many epochs are complete; 0 runs the full schedule.
    #[arg(long, default_value_t = 0)]
    stop_after: u64,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct EvalCmd {
    #[arg(long)]
    bundle: PathBuf,
    /// Checkpoint to evaluate; required unless `--baseline`.
    #[arg(long, required_unless_present = "baseline")]
    checkpoint: Option<PathBuf>,
    /// Evaluate the unrefined class embeddings instead.
    #[arg(long, default_value_t = false)]
    baseline: bool,
    /// Temperature for `--baseline`.
    #[arg(long, default_value_t = TrainConfig::default().tau)]
    tau: f64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct BenchCmd {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct SweepCmd {
    #[arg(long)]
    bundle: PathBuf,
    /// Axis: m, alpha, lambda1, lambda2, k or gamma.
    #[arg(long, required_unless_present = "components")]
    axis: Option<SweepAxis>,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',', required_unless_present = "components")]
    values: Vec<f64>,
    /// Run the five-row component study instead of an axis sweep.
    #[arg(long, default_value_t = false, conflicts_with_all = ["axis", "values"])]
    components: bool,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct InspectCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Bundle whose classes name the nearest class of each entry.
    #[arg(long)]
    bundle: Option<PathBuf>,
    /// Also write the table here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Dimension(_) => 2,
        Error::Io { .. } | Error::Bundle(_) | Error::Checkpoint(_) => 3,
        Error::NumericAbort { .. } => 4,
        _ => 1,
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{THREADS_ENV}={raw:?} is not a thread count")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, Error> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(io_err(&path))?;
    Ok(path)
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn report_text(r: &B2NReport, format: Format) -> String {
    match format {
        Format::Json => json(r),
        Format::Csv => {
            let mut s = String::from("class,name,novel,samples,accuracy\n");
            for c in &r.per_class {
                let _ = writeln!(s, "{},{},{},{},{:.4}", c.class, c.name, c.novel, c.samples, c.accuracy);
            }
            s
        }
        Format::Text => {
            let mut s = format!(
                "base {:.2}  novel {:.2}  hm {:.2}\n",
                r.base_accuracy, r.novel_accuracy, r.harmonic_mean
            );
            for c in &r.per_class {
                let side = if c.novel { "novel" } else { "base" };
                let _ = writeln!(s, "{:>4} {:<5} {:>7.2}  {}", c.class, side, c.accuracy, c.name);
            }
            s
        }
    }
}

fn metrics_text(log: &[EpochMetrics], format: Format) -> String {
    match format {
        Format::Json => json(&log),
        Format::Csv | Format::Text => {
            let mut s = String::from("epoch,steps,cls,sem,reg,total,train_accuracy,last_lr\n");
            for m in log {
                let _ = writeln!(
                    s,
                    "{},{},{:e},{:e},{:e},{:e},{:.4},{:e}",
                    m.epoch, m.steps, m.loss.cls, m.loss.sem, m.loss.reg, m.loss.total, m.train_accuracy, m.last_lr
                );
            }
            s
        }
    }
}

fn bench_text(r: &BenchReport, format: Format) -> String {
    match format {
        Format::Json => json(r),
        Format::Csv => format!(
            "classes,queries,repetitions,precompute_seconds,refined_query_seconds,baseline_query_seconds,overhead_ratio\n{},{},{},{:e},{:e},{:e},{:.4}\n",
            r.classes, r.queries, r.repetitions, r.precompute_seconds, r.refined_query_seconds, r.baseline_query_seconds, r.overhead_ratio
        ),
        Format::Text => format!(
            "classes {}  queries {}  reps {}\nprecompute {:.3e} s\nrefined {:.0} q/s  baseline {:.0} q/s  ratio {:.4}\n",
            r.classes, r.queries, r.repetitions, r.precompute_seconds, r.refined_qps, r.baseline_qps, r.overhead_ratio
        ),
    }
}

fn sweep_text(t: &SweepTable, format: Format) -> String {
    match format {
        Format::Json => json(t),
        Format::Csv => t.to_csv(),
        Format::Text => {
            let mut s = String::new();
            for r in &t.rows {
                let _ = writeln!(
                    s,
                    "{:<20} base {:>6.2}  novel {:>6.2}  hm {:>6.2}",
                    r.label, r.report.base_accuracy, r.report.novel_accuracy, r.report.harmonic_mean
                );
            }
            if let Some((_, best)) = t.best() {
                let _ = writeln!(s, "best: {}", best.label);
            }
            s
        }
    }
}

fn cmd_gen(a: &GenArgs) -> Result<(), Error> {
    let out = generate(&a.synth.spec())?;
    save_bundle(&out.bundle, &a.out.out)?;
    let m = &out.bundle.manifest;
    println!(
        "wrote {}: d={} tokens={} base={} novel={} samples/class={} seed={}",
        a.out.out.display(),
        m.d,
        m.n_tokens,
        m.n_classes_base,
        m.n_classes_novel,
        m.samples_per_class,
        m.seed
    );
    Ok(())
}

fn cmd_train(a: &TrainCmd) -> Result<(), Error> {
    let bundle = load_bundle(&a.bundle)?;
    let mut state = match &a.resume {
        Some(path) => load_checkpoint_for(path, &bundle)?,
        None => {
            let cfg = a.train.config();
            cfg.validate(Some(bundle.n_tokens()))?;
            TrainState::init(&cfg, &bundle)?
        }
    };
    let until = match a.stop_after {
        0 => state.config.epochs as u64,
        n => n,
    };
    let log = train_until(&mut state, &bundle, until)?;
    fs::create_dir_all(&a.out.out).map_err(io_err(&a.out.out))?;
    let ckpt = a.out.out.join(CHECKPOINT_FILE);
    save_checkpoint(&state, &ckpt)?;
    let metrics = write_file(
        &a.out.out,
        &format!("metrics.{}", a.out.format.ext()),
        &metrics_text(&log, a.out.format),
    )?;
    let last = log.last().map(|m| format!(", train accuracy {:.2}", m.train_accuracy));
    println!(
        "epoch {} step {}{}; wrote {} and {}",
        state.epoch,
        state.step,
        last.unwrap_or_default(),
        ckpt.display(),
        metrics.display()
    );
    Ok(())
}

fn load_state(path: &Path, bundle: &EmbeddingBundle) -> Result<TrainState, Error> {
    load_checkpoint_for(path, bundle)
}

fn cmd_eval(a: &EvalCmd) -> Result<(), Error> {
    let bundle = load_bundle(&a.bundle)?;
    let report = match (&a.checkpoint, a.baseline) {
        (_, true) => frozen_baseline_report(&bundle, a.tau)?,
        (Some(path), false) => b2n_eval(&load_state(path, &bundle)?, &bundle)?,
        (None, false) => return Err(Error::Config("eval needs --checkpoint or --baseline".into())),
    };
    let path = write_file(
        &a.out.out,
        &format!("b2n_report.{}", a.out.format.ext()),
        &report_text(&report, a.out.format),
    )?;
    println!(
        "base {:.2} novel {:.2} hm {:.2}; wrote {}",
        report.base_accuracy,
        report.novel_accuracy,
        report.harmonic_mean,
        path.display()
    );
    Ok(())
}

fn cmd_bench(a: &BenchCmd) -> Result<(), Error> {
    let bundle = load_bundle(&a.bundle)?;
    let state = load_state(&a.checkpoint, &bundle)?;
    let report = bench(&state, &bundle, a.repetitions)?;
    let path = write_file(
        &a.out.out,
        &format!("bench.{}", a.out.format.ext()),
        &bench_text(&report, a.out.format),
    )?;
    print!("{}", bench_text(&report, Format::Text));
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_sweep(a: &SweepCmd) -> Result<(), Error> {
    let bundle = load_bundle(&a.bundle)?;
    let base = a.train.config();
    let table = match a.axis {
        _ if a.components => component_ablation(&base, &bundle)?,
        Some(axis) => sweep(axis, &a.values, &base, &bundle)?,
        None => return Err(Error::Config("sweep needs --axis or --components".into())),
    };
    let path = write_file(
        &a.out.out,
        &format!("sweep.{}", a.out.format.ext()),
        &sweep_text(&table, a.out.format),
    )?;
    print!("{}", sweep_text(&table, Format::Text));
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct EntryRow {
    entry: usize,
    norm: f64,
    write_count: u64,
    nearest_class: Option<String>,
    cosine: Option<f64>,
}

#[derive(Debug, Serialize)]
struct CacheReport {
    entries: usize,
    gamma: f64,
    rows: Vec<EntryRow>,
}

fn cache_report(state: &TrainState, bundle: Option<&EmbeddingBundle>) -> Result<CacheReport, Error> {
    let a = state.cache.entries();
    let nearest = match bundle {
        Some(b) => {
            let cos = ops::cosine_sim(a, &b.class_embeddings)?.matrix;
            cos.row_iter()
                .enumerate()
                .map(|(j, row)| {
                    if ops::dot(a.row(j), a.row(j)) == 0.0 {
                        return (None, None);
                    }
                    let (c, v) = row
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best });
                    (Some(b.manifest.class_names[c].clone()), Some(v))
                })
                .collect()
        }
        None => vec![(None, None); a.rows()],
    };
    let rows = nearest
        .into_iter()
        .enumerate()
        .map(|(j, (nearest_class, cosine))| EntryRow {
            entry: j,
            norm: ops::dot(a.row(j), a.row(j)).sqrt(),
            write_count: state.cache.write_count()[j],
            nearest_class,
            cosine,
        })
        .collect();
    Ok(CacheReport {
        entries: state.cache.num_entries(),
        gamma: state.cache.gamma(),
        rows,
    })
}

fn cache_text(r: &CacheReport, format: Format) -> String {
    match format {
        Format::Json => json(r),
        Format::Csv => {
            let mut s = String::from("entry,norm,write_count,nearest_class,cosine\n");
            for e in &r.rows {
                let cos = e.cosine.map(|c| format!("{c:.6}")).unwrap_or_default();
                let _ = writeln!(
                    s,
                    "{},{:.6},{},{},{}",
                    e.entry,
                    e.norm,
                    e.write_count,
                    e.nearest_class.as_deref().unwrap_or(""),
                    cos
                );
            }
            s
        }
        Format::Text => {
            let mut s = format!("M = {}  gamma = {}\nentry     norm   writes  nearest class\n", r.entries, r.gamma);
            for e in &r.rows {
                let near = match (&e.nearest_class, e.cosine) {
                    (Some(n), Some(c)) => format!("{n} (cos {c:.3})"),
                    _ => "-".into(),
                };
                let _ = writeln!(s, "{:>5} {:>8.4} {:>8}  {}", e.entry, e.norm, e.write_count, near);
            }
            s
        }
    }
}

fn cmd_inspect(a: &InspectCmd) -> Result<(), Error> {
    let (state, bundle) = match &a.bundle {
        Some(dir) => {
            let bundle = load_bundle(dir)?;
            (load_state(&a.checkpoint, &bundle)?, Some(bundle))
        }
        None => (load_checkpoint(&a.checkpoint)?, None),
    };
    let report = cache_report(&state, bundle.as_ref())?;
    print!("{}", cache_text(&report, Format::Text));
    if let Some(out) = &a.out {
        let path = write_file(out, &format!("cache.{}", a.format.ext()), &cache_text(&report, a.format))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Error> {
    configure_threads()?;
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::InspectCache(a) => cmd_inspect(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_is_well_formed() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flag_defaults_match_library_defaults() {
        let cli = Cli::try_parse_from(["textrefiner", "sweep", "--bundle", "b", "--components", "--out", "o"]).unwrap();
        let Command::Sweep(a) = cli.command else { panic!("parsed wrong subcommand") };
        let cfg = a.train.config();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!((cfg.gamma, cfg.alpha, cfg.lambda_sem, cfg.lambda_reg), (0.8, 0.2, 0.02, 20.0));
        let cli = Cli::try_parse_from(["textrefiner", "gen", "--out", "o"]).unwrap();
        let Command::Gen(g) = cli.command else { panic!("parsed wrong subcommand") };
        assert_eq!(g.synth.spec(), SynthSpec::default());
    }

    #[test]
    fn unknown_flags_are_rejected() {
        assert!(Cli::try_parse_from(["textrefiner", "gen", "--out", "o", "--bogus", "1"]).is_err());
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(
            exit_code(&Error::Io {
                path: "p".into(),
                source: std::io::Error::other("x")
            }),
            3
        );
        assert_eq!(
            exit_code(&Error::NumericAbort {
                step: 0,
                term: "cls",
                max_grad: 0.0
            }),
            4
        );
    }
}
