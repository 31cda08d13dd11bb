use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use sketchlab::pretext::PretextTask;

use crate::config::{ExperimentConfig, ModuleKind};
use crate::error::{CliError, Result};
use crate::export::export_metrics;
use crate::runs::{run, Overrides, RunOutput};
use crate::service::{bind, AppState};
use crate::session::ServiceModels;
use crate::{config, data};

#[derive(Parser, Debug)]
#[command(name = "sketchlab", version, about = "Sketch retrieval experiments and interactive service")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML experiment config; defaults apply to every missing key.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Overrides `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `init_dir`.
    #[arg(long)]
    pub init_dir: Option<PathBuf>,
    /// Validate config and inputs, then exit without training.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the module named by the config's `module` key.
    Run(Common),
    /// Generate the synthetic dataset into `out_dir`.
    GenData(Common),
    /// Train the triplet retrieval model.
    TrainEmbed(Common),
    /// Fine-tune the on-the-fly policy; per-epoch diagnostics are printed as JSON lines.
    TrainOtf(Common),
    /// Alternate stroke-selector and retrieval training on noisy sketches.
    TrainSubset(Common),
    /// Joint generator and retrieval training from partly labelled pairs.
    TrainSemisup {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        labelled_frac: Option<f64>,
    },
    /// Label-free pretraining on a vector/raster translation task.
    PretrainSsl {
        #[command(flatten)]
        common: Common,
        /// vectorization or rasterization
        #[arg(long, value_parser = parse_task)]
        task: Option<PretextTask>,
    },
    /// Linear probe or fine-tune a pretrained encoder on class labels.
    LinearEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Fine-tune on this fraction of the labelled data instead of a
        /// frozen linear probe.
        #[arg(long)]
        frac: Option<f64>,
    },
    /// Few-shot class-incremental training and episodic evaluation.
    Fscil {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        ways: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Brute-force best stroke subset per sketch.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        max_k: Option<usize>,
    },
    /// Sample stroke-subset masks from a trained selector.
    Augment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Evaluate checkpoints from `init_dir` on the test split.
    Eval(Common),
    /// Serve interactive retrieval sessions over HTTP.
    Serve {
        #[arg(long, short)]
        config: Option<PathBuf>,
        #[arg(long)]
        port: Option<u16>,
        /// Directory holding `retrieval.ckpt` and optional selector and
        /// policy checkpoints.
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Collect a run's evaluations into metrics.csv and summary.json.
    Export {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_task(s: &str) -> Result<PretextTask, String> {
    match s {
        "vectorization" => Ok(PretextTask::Vectorization),
        "rasterization" => Ok(PretextTask::Rasterization),
        _ => Err(format!("unknown task {s:?}")),
    }
}

fn load_config(path: Option<&PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn prepare(common: &Common, edit: impl FnOnce(&mut ExperimentConfig)) -> Result<ExperimentConfig> {
    let mut cfg = load_config(common.config.as_ref())?;
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    if let Some(d) = &common.init_dir {
        cfg.init_dir = Some(d.clone());
    }
    edit(&mut cfg);
    cfg.resolve()
}

fn module_run(common: &Common, kind: ModuleKind, ov: Overrides, edit: impl FnOnce(&mut ExperimentConfig)) -> Result<RunOutput> {
    let cfg = prepare(common, edit)?;
    run(&cfg, kind, &ov, common.dry_run)
}

fn report(out: &RunOutput, print_log: bool) -> Result<()> {
    if print_log {
        for l in &out.log {
            println!("{}", serde_json::to_string(l)?);
        }
    }
    for e in &out.evaluations {
        println!("{}", serde_json::to_string(e)?);
    }
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    let none = Overrides::default();
    let out = match cli.command {
        Command::Run(c) => {
            let cfg = prepare(&c, |_| {})?;
            let kind = cfg.module.ok_or_else(|| CliError::Config("module: required by `run`".into()))?;
            run(&cfg, kind, &none, c.dry_run)?
        }
        Command::GenData(c) => module_run(&c, ModuleKind::GenData, none, |_| {})?,
        Command::TrainEmbed(c) => module_run(&c, ModuleKind::TrainEmbed, none, |_| {})?,
        Command::TrainOtf(c) => {
            let out = module_run(&c, ModuleKind::TrainOtf, none, |_| {})?;
            report(&out, true)?;
            return Ok(());
        }
        Command::TrainSubset(c) => module_run(&c, ModuleKind::TrainSubset, none, |_| {})?,
        Command::TrainSemisup { common, labelled_frac } => module_run(&common, ModuleKind::TrainSemisup, none, |cfg| {
            if let Some(f) = labelled_frac {
                cfg.semisup.labelled_frac = f;
            }
        })?,
        Command::PretrainSsl { common, task } => module_run(&common, ModuleKind::PretrainSsl, none, |cfg| {
            if let Some(t) = task {
                cfg.pretext.train.task = t;
            }
        })?,
        Command::LinearEval { common, checkpoint, frac } => {
            module_run(&common, ModuleKind::LinearEval, Overrides { checkpoint, frac }, |_| {})?
        }
        Command::Fscil { common, shots, ways, episodes } => module_run(&common, ModuleKind::Fscil, none, |cfg| {
            if let Some(s) = shots {
                cfg.fscil.shots = s;
            }
            if let Some(w) = ways {
                cfg.fscil.ways = w;
            }
            if let Some(e) = episodes {
                cfg.fscil.episodes = e;
            }
        })?,
        Command::Oracle { common, max_k } => module_run(&common, ModuleKind::Oracle, none, |cfg| {
            if let Some(k) = max_k {
                cfg.subset.max_k = k;
            }
        })?,
        Command::Augment { common, n } => module_run(&common, ModuleKind::Augment, none, |cfg| {
            if let Some(n) = n {
                cfg.subset.augment_n = n;
            }
        })?,
        Command::Eval(c) => module_run(&c, ModuleKind::Eval, none, |_| {})?,
        Command::Serve { config, port, model_dir, host } => {
            let mut cfg = load_config(config.as_ref())?.resolve()?;
            if let Some(p) = port {
                cfg.serve.port = p;
            }
            return serve(&cfg, &model_dir, &host);
        }
        Command::Export { run_dir, out } => {
            let ex = export_metrics(&run_dir, out.as_deref())?;
            println!("{}", ex.csv.display());
            println!("{}", ex.json.display());
            return Ok(());
        }
    };
    report(&out, false)
}

pub fn serve(cfg: &ExperimentConfig, model_dir: &std::path::Path, host: &str) -> Result<()> {
    if !model_dir.is_dir() {
        return Err(CliError::MissingPath {
            key: "--model-dir".into(),
            path: model_dir.display().to_string(),
        });
    }
    let gallery = data::load(&cfg.data)?;
    let models = ServiceModels::load(model_dir, &gallery, cfg.serve.k)?;
    let addr: SocketAddr = format!("{host}:{}", cfg.serve.port)
        .parse()
        .map_err(|e| CliError::Config(format!("serve address: {e}")))?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let (local, server) = bind(AppState::new(models), addr).await?;
        log::info!("listening on http://{local}");
        eprintln!("listening on http://{local}");
        server.await
    })?;
    Ok(())
}

/// `SKETCHLAB_SEED` name, re-exported for callers that set it.
pub const SEED_ENV: &str = config::SEED_ENV;
