//! Command-line front end: argument parsing, commands, checkpoints and the
//! metrics log.

pub mod checkpoint;
pub mod metrics_log;

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::TrainConfig;
use crate::data::DataSpec;
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::rng;
use crate::trainer::{run_training, EvalContext, Model};
use crate::verify;

pub use checkpoint::Checkpoint;
pub use metrics_log::MetricsLog;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

pub const SEED_ENV: &str = "MPCC_SEED";
pub const FINAL_CHECKPOINT: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";

const SAMPLE_STREAM: u64 = 0x5341_4D50;

#[derive(Debug, Parser)]
#[command(name = "mpcc", version, about = "Clustering GAN with a learnable Gaussian-mixture prior")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Draw samples from a checkpoint's EMA generator.
    Sample(SampleArgs),
    /// Run the exact KL-identity suite and the Monte Carlo check.
    Verify(VerifyArgs),
    /// Export a dataset as CSV.
    Data(DataArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed; falls back to $MPCC_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset spec; defaults to the one the checkpoint was trained on.
    #[arg(long)]
    pub data: Option<String>,
    /// Writes `index,cluster,label` rows for every data point.
    #[arg(long)]
    pub assignments: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, conflicts_with = "all", required_unless_present = "all")]
    pub cluster: Option<usize>,
    #[arg(long)]
    pub all: bool,
    /// Samples per cluster.
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to the checkpoint seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = verify::DEFAULT_TOL)]
    pub tol: f64,
    #[arg(long, default_value_t = 10)]
    pub mc_configs: usize,
    #[arg(long, default_value_t = verify::mc::MC_DRAWS)]
    pub mc_draws: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset spec, e.g. `ring:modes=8,n=4000,noise=0.05,seed=0`.
    #[arg(long)]
    pub spec: String,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(out, "{rendered}")
            } else {
                write!(err, "{rendered}")
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a, out).map(|()| EXIT_OK),
        Command::Eval(a) => cmd_eval(&a, out).map(|_| EXIT_OK),
        Command::Sample(a) => cmd_sample(&a, out).map(|()| EXIT_OK),
        Command::Verify(a) => cmd_verify(&a, out).map(|ok| if ok { EXIT_OK } else { EXIT_VERIFY }),
        Command::Data(a) => cmd_data(&a, out).map(|()| EXIT_OK),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::InvalidArgument(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

pub fn periodic_checkpoint_name(iteration: u64) -> String {
    format!("checkpoint_{iteration:08}.bin")
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut config = TrainConfig::load(&args.config)?;
    if let Some(seed) = resolve_seed(args.seed)? {
        config.seed = seed;
    }
    let spec = DataSpec::parse(&config.dataset)?;
    let data = spec.load()?;
    fs::create_dir_all(&args.out)?;
    let mut model = Model::new(config.clone(), data.dim())?;
    let ctx = EvalContext::new(&config, &data, Some(&spec))?;
    let mut log = MetricsLog::create(&args.out.join(METRICS_FILE))?;
    let every = config.checkpoint_interval;
    run_training(&mut model, &data, &ctx, |m, rec| {
        if let Some(r) = rec {
            log.append(r)?;
            writeln!(out, "{}", summary_line(r))?;
        }
        if every > 0 && m.iteration() % every == 0 {
            Checkpoint::from_model(m)?.save(&args.out.join(periodic_checkpoint_name(m.iteration())))?;
        }
        Ok(())
    })?;
    Checkpoint::from_model(&model)?.save(&args.out.join(FINAL_CHECKPOINT))?;
    Ok(())
}

fn summary_line(r: &MetricsRecord) -> String {
    let cov = r.mode_coverage.map(|c| format!(" coverage={c:.3}")).unwrap_or_default();
    format!(
        "iter {:>7}  d={:.4} g={:.4} enc={:.4} ce={:.4} reg={:.4}  acc={:.4} latent_mse={:.4} mmd2={:.5}{cov}",
        r.iteration,
        r.losses.d_loss,
        r.losses.g_adv_loss,
        r.losses.enc_nll,
        r.losses.cluster_ce,
        r.losses.prior_reg,
        r.acc,
        r.latent_mse,
        r.mmd
    )
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<MetricsRecord> {
    let model = Checkpoint::load(&args.checkpoint)?.to_model()?;
    let spec = DataSpec::parse(args.data.as_deref().unwrap_or(&model.config().dataset))?;
    let data = spec.load()?;
    let ctx = EvalContext::new(model.config(), &data, Some(&spec))?;
    let rec = model.evaluate(&data, &ctx)?;
    if let Some(path) = &args.assignments {
        let pred = model.assign(&data.x)?;
        let labels = data.labels.as_deref().unwrap_or_default();
        let mut w = BufWriter::new(fs::File::create(path)?);
        writeln!(w, "index,cluster,label")?;
        for (i, c) in pred.iter().enumerate() {
            writeln!(w, "{i},{c},{}", labels[i])?;
        }
        w.flush()?;
    }
    writeln!(out, "iteration     {}", rec.iteration)?;
    writeln!(out, "acc           {}", rec.acc)?;
    writeln!(out, "latent_mse    {}", rec.latent_mse)?;
    writeln!(out, "mmd2          {}", rec.mmd)?;
    if let Some(c) = rec.mode_coverage {
        writeln!(out, "mode_coverage {c}")?;
    }
    writeln!(out, "{}", metrics_log::HEADER)?;
    writeln!(out, "{}", metrics_log::format_row(&rec))?;
    Ok(rec)
}

pub fn cmd_sample(args: &SampleArgs, out: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let model = ck.to_model()?;
    let k = model.config().k;
    let clusters: Vec<usize> = match (args.cluster, args.all) {
        (Some(c), _) if c >= k => {
            return Err(Error::IndexOutOfRange {
                what: "cluster",
                index: c,
                bound: k,
            })
        }
        (Some(c), _) => vec![c; args.n],
        (None, true) => (0..k).flat_map(|c| std::iter::repeat_n(c, args.n)).collect(),
        (None, false) => return Err(Error::InvalidArgument("give --cluster or --all".into())),
    };
    let mut w = BufWriter::new(fs::File::create(&args.out)?);
    write!(w, "cluster")?;
    for d in 0..model.data_dim() {
        write!(w, ",x{d}")?;
    }
    writeln!(w)?;
    if !clusters.is_empty() {
        let mut r = rng::derived(args.seed.unwrap_or(ck.seed), SAMPLE_STREAM);
        let (x, _) = model.sample(&clusters, &mut r)?;
        for (i, c) in clusters.iter().enumerate() {
            write!(w, "{c}")?;
            for v in x.row(i) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
    }
    w.flush()?;
    writeln!(out, "wrote {} samples to {}", clusters.len(), args.out.display())?;
    Ok(())
}

/// Returns whether every identity and Monte Carlo check passed.
pub fn cmd_verify(args: &VerifyArgs, out: &mut dyn Write) -> Result<bool> {
    let report = verify::run_suite(args.trials, args.tol, args.mc_configs, args.mc_draws, args.seed)?;
    let mut worst = 0.0f64;
    for s in &report.identities {
        worst = worst.max(s.worst);
        writeln!(
            out,
            "{:<20} {}  trials={} failures={} worst |lhs-rhs|={:.3e}",
            s.name,
            if s.passed() { "PASS" } else { "FAIL" },
            s.trials,
            s.failures,
            s.worst
        )?;
    }
    for (i, m) in report.mc.iter().enumerate() {
        writeln!(
            out,
            "mc_cross_entropy[{i}] {}  estimate={:.6} analytic={:.6} z={:.2}",
            if m.passed() { "PASS" } else { "FAIL" },
            m.estimate,
            m.analytic,
            m.z_score()
        )?;
    }
    writeln!(out, "worst |lhs-rhs| = {worst:.3e} (tol {:e})", args.tol)?;
    Ok(report.passed())
}

pub fn cmd_data(args: &DataArgs, out: &mut dyn Write) -> Result<()> {
    let data = DataSpec::parse(&args.spec)?.load()?;
    data.write_csv(&args.out)?;
    writeln!(out, "wrote {} rows to {}", data.len(), args.out.display())?;
    Ok(())
}

