//! The `mlcs` command line. Exit codes: 0 on success, 1 on validation
//! errors (bad arguments, configs or archive contents), 2 on I/O errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::pipeline::{
    attack_archive, dataset_archive, evaluate, fit, net_archive, score, synth, train_refnet, tune, tuning_csv, unroll,
    FittedModel, Observations, PipelineConfig, RefNet, Subject,
};
use crate::refnet::synth::Dataset;
use crate::scoring::{ScoreReport, ScoreRow};
use crate::tensor::TensorArchive;

#[derive(Debug, Parser)]
#[command(name = "mlcs", version, about = "Confidence scores from intermediate activations")]
struct Cli {
    /// JSON pipeline configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory (depends on the command).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit projectors, GMMs, association matrices and protoclasses (-> model.tarc).
    Fit {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
    },
    /// Score data archives with a fitted model (-> scores.csv).
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(required = true)]
        data: Vec<PathBuf>,
    },
    /// Detection metrics from score files (-> metrics.json, reliability.csv, unified.csv).
    Eval {
        #[arg(required = true)]
        scores: Vec<PathBuf>,
    },
    /// Grid search over (kappa, C) per layer (-> tuning.csv).
    Tune {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
    },
    /// Gradient-sign attack on a reference network (-> adv.tarc).
    Attack {
        #[arg(long)]
        net: PathBuf,
        data: PathBuf,
    },
    /// Unroll a convolution spec archive into W and b (-> affine.tarc).
    Unroll { spec: PathBuf },
    /// Synthetic train/val/test, OOD and corruption archives (-> directory).
    Synth,
    /// Train the reference MLP (-> net.tarc).
    RefnetTrain {
        #[arg(long)]
        train: PathBuf,
        /// Report accuracy on this labelled archive.
        #[arg(long)]
        test: Option<PathBuf>,
    },
}

fn out_path(out: &Option<PathBuf>, default: &str) -> PathBuf {
    out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::read_from(&TensorArchive::load(path)?)
}

fn write_parent(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn save(path: &Path, archive: &TensorArchive) -> Result<()> {
    write_parent(path, archive.to_bytes()?)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    match cli.command {
        Command::Fit { weights, train, val } => {
            let subject = Subject::from_archive(TensorArchive::load(weights)?)?;
            let tr = Observations::collect(&subject, &TensorArchive::load(train)?, &cfg)?;
            let va = Observations::collect(&subject, &TensorArchive::load(val)?, &cfg)?;
            let model = fit(&cfg, &subject, &tr, &va)?;
            save(&out_path(&cli.out, "model.tarc"), &model.to_archive()?)
        }
        Command::Score { model, data } => {
            let model = FittedModel::read_from(&TensorArchive::load(model)?)?;
            let subject = model.subject();
            let mut rows: Vec<ScoreRow> = Vec::new();
            for path in data {
                let obs = Observations::collect(&subject, &TensorArchive::load(&path)?, &model.config)?;
                rows.extend(score(&model, &obs)?);
            }
            write_parent(&out_path(&cli.out, "scores.csv"), ScoreReport { rows }.to_csv())
        }
        Command::Eval { scores } => {
            let mut rows = Vec::new();
            for path in scores {
                rows.extend(ScoreReport::from_csv(&fs::read_to_string(path)?)?.rows);
            }
            let ev = evaluate(&rows, &cfg.eval)?;
            for (k, m) in &ev.metrics {
                log::info!("{k}: AUC {:.4}, FPR* {:.4}", m.auc, m.fpr_star);
            }
            ev.write(&out_path(&cli.out, "."))
        }
        Command::Tune { weights, train, val } => {
            let subject = Subject::from_archive(TensorArchive::load(weights)?)?;
            let tr = Observations::collect(&subject, &TensorArchive::load(train)?, &cfg)?;
            let va = Observations::collect(&subject, &TensorArchive::load(val)?, &cfg)?;
            let results = tune(&cfg, &subject, &tr, &va)?;
            write_parent(&out_path(&cli.out, "tuning.csv"), tuning_csv(&results))
        }
        Command::Attack { net, data } => {
            let net = RefNet::read_from(&TensorArchive::load(net)?)?;
            let outcome = crate::pipeline::attack(&cfg, &net, &load_dataset(&data)?)?;
            log::info!("{}: ASR {:.4}", cfg.attack.kind.name(), outcome.asr);
            save(&out_path(&cli.out, "adv.tarc"), &attack_archive(&cfg, &outcome)?)
        }
        Command::Unroll { spec } => {
            let a = unroll(&cfg, &TensorArchive::load(spec)?)?;
            save(&out_path(&cli.out, "affine.tarc"), &a)
        }
        Command::Synth => {
            let dir = out_path(&cli.out, ".");
            fs::create_dir_all(&dir)?;
            for (name, d) in synth(&cfg)? {
                dataset_archive(&cfg, "synth", &d)?.save(dir.join(format!("{name}.tarc")))?;
            }
            Ok(())
        }
        Command::RefnetTrain { train, test } => {
            let (net, report) = train_refnet(&cfg, &load_dataset(&train)?)?;
            log::info!("train accuracy {:.4}", report.train_accuracy);
            if let Some(t) = test {
                log::info!("test accuracy {:.4}", net.accuracy(&load_dataset(&t)?)?);
            }
            save(&out_path(&cli.out, "net.tarc"), &net_archive(&cfg, &RefNet::Mlp(net))?)
        }
    }
}

/// Exit code for an error: 2 for I/O, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_io() {
        2
    } else {
        1
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.jobs {
        Some(0) => Err(Error::invalid("--jobs must be positive")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::invalid(format!("cannot start {n} workers: {e}")))
            .and_then(|pool| pool.install(|| run(cli))),
        None => run(cli),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
