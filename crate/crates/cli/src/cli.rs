//! Command-line surface. Exit codes: 0 success, 1 usage error, 2 validation
//! error, 3 runtime failure; errors are reported as JSON on stderr.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use orbit_core::analysis::NormBounds;
use orbit_core::distance::{DistanceMetric, MetricKind, OriginProbe};
use orbit_core::model::NgramLM;
use orbit_core::params::Checkpoint;
use orbit_core::tasks::RetrievalEvalOptions;
use orbit_core::train::{evaluate, RegularizerSpec};
use orbit_core::Error;
use serde::Serialize;

use crate::config::RunConfig;
use crate::runner::{self, Existing, RunRecord};

#[derive(Debug, Parser)]
#[command(
    name = "orbit-lab",
    version,
    about = "Fine-tuning lab for distance-triggered back-merging"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the capability and retrieval datasets as JSONL.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Take dataset sizes from this run configuration (default: built-in).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Pretrain the origin model on the capability task.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Recompute even if the pretraining directory already exists.
        #[arg(long)]
        force: bool,
    },
    /// Fine-tune the origin on the retrieval task.
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint and print its report as JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        /// Origin checkpoint for the distance fields (omitted: null).
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        opts: EvalArgs,
    },
    /// Print sign dissimilarity and L2 distance between two checkpoints.
    Distance {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Post-hoc interpolation between an origin and a fine-tuned checkpoint.
    Interpolate {
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        ft: PathBuf,
        /// Comma-separated weights in [0, 1]; 0 is the origin.
        #[arg(long, value_delimiter = ',', required = true)]
        lambdas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Evaluate each point on a `gen-data` directory.
        #[arg(long, conflicts_with = "config")]
        data: Option<PathBuf>,
        /// Evaluate each point on the data of a run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        opts: EvalArgs,
    },
    /// Pareto front and DTIP checkpoint selection over finished runs.
    Pareto {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Output directory (default: `pareto` next to the first run).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Explicit bounds `t_min,t_max,r_min,r_max` instead of a no-intervention run.
        #[arg(long, value_delimiter = ',', num_args = 4)]
        bounds: Option<Vec<f64>>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Calibrate the ORBIT threshold over a grid.
    SweepEps {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
        #[arg(long, value_enum, default_value_t = MetricArg::Sd)]
        metric: MetricArg,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Print the built-in run configuration.
    DefaultConfig,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Regulariser; overrides the configuration.
    #[arg(long, value_enum)]
    pub reg: Option<RegArg>,
    /// ORBIT threshold.
    #[arg(long)]
    pub eps: Option<String>,
    #[arg(long, value_enum)]
    pub metric: Option<MetricArg>,
    /// ORBIT: check the distance every N steps.
    #[arg(long)]
    pub check_every: Option<u64>,
    /// Soup-to-Go merge cadence.
    #[arg(long)]
    pub cadence: Option<u64>,
    /// L2-SP penalty weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub beam_width: Option<usize>,
    /// Evaluate at most this many users; 0 means all.
    #[arg(long)]
    pub max_users: Option<usize>,
}

impl EvalArgs {
    fn apply(&self, mut opts: RetrievalEvalOptions) -> RetrievalEvalOptions {
        if let Some(k) = self.k {
            opts.k = k;
        }
        if let Some(b) = self.beam_width {
            opts.beam_width = b;
            opts.tokens_per_beam = b;
        }
        if let Some(m) = self.max_users {
            opts.max_users = (m > 0).then_some(m);
        }
        opts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RegArg {
    None,
    L2sp,
    Soup,
    Orbit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Sd,
    L2,
}

impl From<MetricArg> for MetricKind {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Sd => MetricKind::Sd,
            MetricArg::L2 => MetricKind::L2,
        }
    }
}

/// Failure of one invocation.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lab(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lab(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lab(Error::Io(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Lab(e) if e.is_validation() => 2,
            CliError::Lab(_) => 3,
        }
    }

    fn kind(&self) -> &'static str {
        match self.exit_code() {
            1 => "usage",
            2 => "validation",
            _ => "runtime",
        }
    }

    pub fn to_json(&self) -> String {
        let message = match self {
            CliError::Usage(m) => m.clone(),
            CliError::Lab(e) => e.to_string(),
        };
        serde_json::json!({ "error": { "kind": self.kind(), "code": self.exit_code(), "message": message } }).to_string()
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn print_json<T: Serialize>(value: &T) -> CliResult<()> {
    println!(
        "{}",
        serde_json::to_string_pretty(value).map_err(Error::from)?
    );
    Ok(())
}

fn load_config(path: &Path) -> CliResult<RunConfig> {
    Ok(RunConfig::load(path)?)
}

fn parse_eps(s: &str) -> CliResult<f64> {
    match s.to_ascii_lowercase().as_str() {
        "inf" | "infinity" => Ok(f64::INFINITY),
        _ => s.parse().map_err(|_| usage(format!("invalid --eps `{s}`"))),
    }
}

/// Applies the regulariser flags of `finetune` to `config`.
pub fn apply_regularizer(config: &mut RunConfig, args: &FinetuneArgs) -> CliResult<()> {
    let reg = match args.reg {
        None => {
            if args.eps.is_some()
                || args.metric.is_some()
                || args.cadence.is_some()
                || args.lambda.is_some()
            {
                return Err(usage("regulariser parameters need --reg"));
            }
            return Ok(());
        }
        Some(r) => r,
    };
    let unexpected =
        |flag: &str| usage(format!("{flag} does not apply to --reg {reg:?}").to_lowercase());
    if reg != RegArg::Orbit
        && (args.eps.is_some() || args.metric.is_some() || args.check_every.is_some())
    {
        return Err(unexpected("--eps/--metric/--check-every"));
    }
    if reg != RegArg::Soup && args.cadence.is_some() {
        return Err(unexpected("--cadence"));
    }
    if reg != RegArg::L2sp && args.lambda.is_some() {
        return Err(unexpected("--lambda"));
    }
    let spec = match reg {
        RegArg::None => RegularizerSpec::None,
        RegArg::L2sp => RegularizerSpec::L2sp {
            lambda: args
                .lambda
                .ok_or_else(|| usage("--reg l2sp needs --lambda"))?,
        },
        RegArg::Soup => RegularizerSpec::SoupToGo {
            cadence: args
                .cadence
                .ok_or_else(|| usage("--reg soup needs --cadence"))?,
        },
        RegArg::Orbit => {
            let eps = parse_eps(
                args.eps
                    .as_deref()
                    .ok_or_else(|| usage("--reg orbit needs --eps"))?,
            )?;
            let kind = args.metric.map_or(MetricKind::Sd, MetricKind::from);
            RegularizerSpec::Orbit {
                metric: DistanceMetric {
                    kind,
                    threshold: eps,
                },
                check_every: args.check_every.unwrap_or(1),
            }
        }
    };
    config.run_id = format!("{}-{}", config.run_id, runner::regularizer_label(&spec));
    config.finetune.regularizer = spec;
    Ok(())
}

pub fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { seed, out, config } => {
            let mut config = match config {
                Some(p) => load_config(&p)?,
                None => RunConfig::lab_default(),
            };
            config.capability.seed = seed;
            config.retrieval.seed = seed;
            let data = config.data()?;
            runner::write_data(&config, &data, &out)?;
            print_json(&serde_json::json!({
                "out": out,
                "capability_train": data.capability.train.len(),
                "capability_test": data.capability.test.len(),
                "items": data.world.codes.len(),
                "users": data.world.users.len(),
            }))
        }
        Command::Pretrain { config, force } => {
            let config = load_config(&config)?;
            let data = config.data()?;
            let policy = if force {
                Existing::Overwrite
            } else {
                Existing::Reuse
            };
            let run = runner::pretrain(&config, &data, policy)?;
            print_json(&serde_json::json!({
                "dir": run.dir,
                "checkpoint": run.dir.join(runner::INIT),
                "reused": run.reused,
                "step": run.checkpoint.step,
                "final": run.reports.last(),
            }))
        }
        Command::Finetune(args) => {
            let mut config = load_config(&args.config)?;
            apply_regularizer(&mut config, &args)?;
            config.validate()?;
            let data = config.data()?;
            let policy = if args.force {
                Existing::Overwrite
            } else {
                Existing::Refuse
            };
            let record = runner::finetune(&config, &data, policy)?;
            print_json(&serde_json::json!({ "dir": record.dir, "summary": record.summary }))
        }
        Command::Eval {
            ckpt,
            data,
            init,
            opts,
        } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            let model = runner::model_config_of(&checkpoint)?;
            let data = runner::read_data(&data)?;
            let ctx = runner::eval_context(&data, opts.apply(RetrievalEvalOptions::default()));
            let origin = match &init {
                Some(p) => Checkpoint::load(p)?.store,
                None => checkpoint.store.clone(),
            };
            // Validates the checkpoint against its own configuration first.
            NgramLM::from_params(model, checkpoint.store.clone())?;
            let probe = OriginProbe::new(origin);
            let mut report = evaluate(
                model,
                &checkpoint.store,
                &probe,
                &ctx,
                checkpoint.step,
                checkpoint.cumulative_merges,
            )?;
            if init.is_none() {
                report.sd = f64::NAN;
                report.l2 = f64::NAN;
            }
            print_json(&report)
        }
        Command::Distance { a, b } => {
            let report = runner::distance(&Checkpoint::load(&a)?, &Checkpoint::load(&b)?)?;
            print_json(&report)
        }
        Command::Interpolate {
            init,
            ft,
            lambdas,
            out,
            data,
            config,
            opts,
        } => {
            let (data, eval_opts) = match (data, config) {
                (Some(d), _) => (
                    Some(runner::read_data(&d)?),
                    RetrievalEvalOptions::default(),
                ),
                (None, Some(c)) => {
                    let c = load_config(&c)?;
                    (Some(c.data()?), c.eval)
                }
                (None, None) => (None, RetrievalEvalOptions::default()),
            };
            let eval = data.as_ref().map(|d| (d, opts.apply(eval_opts)));
            let manifest = runner::interpolate(&init, &ft, &lambdas, &out, eval)?;
            print_json(&manifest)
        }
        Command::Pareto {
            runs,
            out,
            bounds,
            jobs,
        } => {
            let pool = runner::thread_pool(jobs)?;
            let records = pool.install(|| {
                runs.iter()
                    .map(|d| RunRecord::load(d))
                    .collect::<orbit_core::Result<Vec<_>>>()
            })?;
            let bounds = match bounds {
                Some(b) => Some(NormBounds::new(b[0], b[1], b[2], b[3])?),
                None => None,
            };
            let out =
                out.unwrap_or_else(|| runs[0].parent().unwrap_or(Path::new(".")).join("pareto"));
            let summary = pool.install(|| runner::pareto(&records, bounds, &out))?;
            print_json(&summary)
        }
        Command::SweepEps {
            config,
            grid,
            metric,
            jobs,
            force,
        } => {
            let config = load_config(&config)?;
            let data = config.data()?;
            let pool = runner::thread_pool(jobs)?;
            let policy = if force {
                Existing::Overwrite
            } else {
                Existing::Reuse
            };
            let rows =
                pool.install(|| runner::sweep_eps(&config, &data, metric.into(), &grid, policy))?;
            std::fs::create_dir_all(&config.out_dir)?;
            let path = config.out_dir.join(format!(
                "sweep-eps-{}-{}.csv",
                config.run_id,
                &config.run_digest()[..12]
            ));
            let table: Vec<_> = rows
                .iter()
                .map(|r| EpsCsvRow {
                    eps: r.eps,
                    metric: r.metric.as_str(),
                    merges: r.merges,
                    merge_events: r.merge_events,
                    final_text: r.final_text,
                    final_recall: r.final_recall,
                    selected_step: r.selected_step,
                    selected_dtip: r.selected_dtip,
                })
                .collect();
            orbit_core::analysis::write_csv(std::fs::File::create(&path)?, &table)?;
            print_json(&serde_json::json!({ "table": path, "rows": rows }))
        }
        Command::DefaultConfig => {
            print!("{}", RunConfig::lab_default().to_json());
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct EpsCsvRow {
    eps: f64,
    metric: &'static str,
    merges: u64,
    merge_events: usize,
    final_text: f64,
    final_recall: f64,
    selected_step: u64,
    selected_dtip: f64,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let err = usage(e.to_string().trim().to_owned());
            eprintln!("{}", err.to_json());
            return err.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
