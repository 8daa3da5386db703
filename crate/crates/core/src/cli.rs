//! Command-line front end. Every command writes its files atomically and
//! reports failure as one `error` line on stderr.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{self, generate_dataset, normalize_intensity, PhantomOptions, Semantics, SiteParams, Volume};
use crate::error::{Result, TabsError};
use crate::fsio;
use crate::metrics::evaluate_pair;
use crate::model::{shape_chain, Checkpoint, Model};
use crate::tensor::Tensor;
use crate::train::{self, ExperimentKind, ExperimentPlan, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "tabs", version, about = "Volumetric tissue segmentation on synthetic phantoms")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom dataset directory with a manifest.
    Phantom(PhantomArgs),
    /// Train one model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Segment a scan volume with a checkpoint.
    Segment {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a predicted probability volume with a reference.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and test every variant on each source site.
    Performance(PlanArgs),
    /// Apply trained checkpoints to other sites.
    Generality(PlanArgs),
    /// Test-retest agreement of trained checkpoints.
    Reliability(PlanArgs),
    /// Print the layer-by-layer shape chain of a model config.
    Shapes {
        #[arg(long)]
        config: PathBuf,
        /// Also run a forward pass and check it against the symbolic chain.
        #[arg(long)]
        execute: bool,
    },
    /// Print the header of a volume or checkpoint file.
    Inspect {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value = "siteA")]
    pub site: String,
    /// `LO,HI` inside [0, 1]; defaults to the site preset.
    #[arg(long)]
    pub atrophy_range: Option<String>,
    /// Emit a second scan of every subject.
    #[arg(long)]
    pub retest: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub plan: PathBuf,
    /// Evaluation threads; overrides the plan.
    #[arg(long)]
    pub jobs: Option<usize>,
}

fn parse_range(s: &str) -> Result<(f64, f64)> {
    let bad = || TabsError::config(format!("atrophy range `{s}` is not LO,HI"));
    let (lo, hi) = s.split_once(',').ok_or_else(bad)?;
    Ok((lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?))
}

fn run_plan(args: &PlanArgs, kind: ExperimentKind, out: &mut dyn Write) -> Result<()> {
    let mut plan = ExperimentPlan::read(&args.plan)?;
    if plan.kind != kind {
        return Err(TabsError::config(format!(
            "{} declares kind {:?}, expected {kind:?}",
            args.plan.display(),
            plan.kind
        )));
    }
    if let Some(j) = args.jobs {
        plan.jobs = j;
    }
    let report = train::run_experiment(&plan, |label, r| {
        eprintln!("{label} epoch {} train {:.6} val {:.6}", r.epoch, r.train_loss, r.val_loss)
    })?;
    let (csv, txt) = crate::train::Report::paths(&plan.report);
    write!(out, "{}", report.render_text()).map_err(|e| TabsError::io("stdout", e))?;
    writeln!(out, "wrote {} and {}", csv.display(), txt.display()).map_err(|e| TabsError::io("stdout", e))
}

fn segment(model: &Path, input: &Path, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(model)?;
    let model = ckpt.model()?;
    let scan = Volume::load(input)?;
    if scan.channels() != 1 {
        return Err(TabsError::data(format!(
            "{} has {} channels; segment expects a single-channel scan",
            input.display(),
            scan.channels()
        )));
    }
    let probs = model.predict(&normalize_intensity(&scan)?.to_tensor())?;
    let mut vol = Volume::from_tensor(&probs, Semantics::TissueProbs, scan.meta().clone())?;
    vol.header.meta.set("provenance", "segment");
    vol.header.meta.set("model", ckpt.config.variant.key());
    vol.save(out)
}

fn shapes(config: &Path, execute: bool, out: &mut dyn Write) -> Result<()> {
    let cfg = TrainConfig::read(config)?.model;
    let chain = shape_chain(&cfg)?;
    let io = |e| TabsError::io("stdout", e);
    for step in &chain {
        writeln!(out, "{step}").map_err(io)?;
    }
    if execute {
        let model = Model::<f32>::new(&cfg)?;
        let n = cfg.input_size;
        let traced = model.trace_shapes(&Tensor::zeros(&[cfg.in_channels, n, n, n]))?;
        if traced != chain {
            return Err(TabsError::Numeric("executed shapes differ from the symbolic chain".into()));
        }
        writeln!(out, "executed forward pass matches {} steps", chain.len()).map_err(io)?;
    }
    Ok(())
}

fn inspect(path: &Path, out: &mut dyn Write) -> Result<()> {
    let io = |e| TabsError::io("stdout", e);
    let bytes = fsio::read_file(path)?;
    if bytes.starts_with(crate::model::checkpoint::MAGIC) {
        let c = Checkpoint::from_bytes(&bytes)?;
        writeln!(out, "checkpoint\nepoch={}\nbest_validation_loss={}", c.epoch, c.best_validation_loss).map_err(io)?;
        writeln!(out, "parameters={}", c.params.numel()).map_err(io)?;
        write!(out, "{}", c.config.to_kv_string()).map_err(io)?;
        return Ok(());
    }
    let h = data::inspect(path)?;
    writeln!(out, "volume\nsemantics={}\nchannels={}", h.semantics.name(), h.channels).map_err(io)?;
    writeln!(out, "dims={}×{}×{}", h.dims[0], h.dims[1], h.dims[2]).map_err(io)?;
    for (k, v) in h.meta.entries() {
        writeln!(out, "meta.{k}={v}").map_err(io)?;
    }
    Ok(())
}

/// Runs one parsed command, writing human output to `out`.
pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let io = |e| TabsError::io("stdout", e);
    match cli.command {
        Command::Phantom(a) => {
            let opts = PhantomOptions {
                count: a.count,
                size: a.size,
                site: a.site.parse::<SiteParams>()?,
                atrophy_range: a.atrophy_range.as_deref().map(parse_range).transpose()?,
                retest: a.retest,
                seed: a.seed,
            };
            let m = generate_dataset(&opts, &a.out)?;
            writeln!(out, "wrote {} scans of {} subjects to {}", m.rows.len(), m.subjects().len(), a.out.display())
                .map_err(io)
        }
        Command::Train { config } => {
            let cfg = TrainConfig::read(&config)?;
            if cfg.checkpoint.is_none() {
                return Err(TabsError::config(format!("{} needs `checkpoint`", config.display())));
            }
            let outcome = train::train(&cfg, |r| {
                eprintln!("epoch {} train {:.6} val {:.6}", r.epoch, r.train_loss, r.val_loss)
            })?;
            writeln!(
                out,
                "selected epoch {} (validation loss {}) -> {}",
                outcome.checkpoint.epoch,
                outcome.checkpoint.best_validation_loss,
                cfg.checkpoint.as_ref().expect("checked").display()
            )
            .map_err(io)
        }
        Command::Segment { model, input, out: dest } => {
            segment(&model, &input, &dest)?;
            writeln!(out, "wrote {}", dest.display()).map_err(io)
        }
        Command::Eval { pred, reference, out: dest } => {
            let rec = evaluate_pair(&Volume::load(&pred)?, &Volume::load(&reference)?)?;
            fsio::write_atomic_str(&dest, &rec.to_csv()?)?;
            writeln!(out, "wrote {}", dest.display()).map_err(io)
        }
        Command::Performance(a) => run_plan(&a, ExperimentKind::Performance, out),
        Command::Generality(a) => run_plan(&a, ExperimentKind::Generality, out),
        Command::Reliability(a) => run_plan(&a, ExperimentKind::Reliability, out),
        Command::Shapes { config, execute } => shapes(&config, execute, out),
        Command::Inspect { input } => inspect(&input, out),
    }
}

/// One-line error report: `error code=<exit> kind=<kind>: <message>`.
pub fn error_line(e: &TabsError) -> String {
    let msg = e.to_string().replace(['\n', '\r'], " ");
    format!("error code={} kind={}: {msg}", e.exit_code(), e.kind())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = write!(out, "{e}");
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let msg: Vec<&str> = text
                .lines()
                .map(str::trim)
                .take_while(|l| !l.starts_with("Usage:"))
                .filter(|l| !l.is_empty() && !l.starts_with("For more information"))
                .collect();
            let line = error_line(&TabsError::Usage(msg.join(" ").trim_start_matches("error: ").to_string()));
            let _ = writeln!(err, "{line}");
            return 1;
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{}", error_line(&e));
            e.exit_code()
        }
    }
}
