use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use pspg::classifier::{write_predictions_csv, AggregationMode};
use pspg::experiments::{
    baseline_split, format_table, gzsl_report, predict_split, run_ablations, run_length_sweep, EvalOptions, SWEEP_LENGTHS,
};
use pspg::metrics::EvalReport;
use pspg::model::Model;
use pspg::synth::{self, SplitName, SynthConfig};
use pspg::train::{checkpoint, train_pretrain, train_prompt, CheckpointMeta, Phase, TrainConfig, TrainOutput, LOG_HEADER};

#[derive(Parser)]
#[command(name = "pspg", version, about = "Pseudo-prompt generation for multi-label zero-shot classification")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// JSON generator config; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Contrastive backbone pretraining.
    Pretrain {
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Prompt learning on a frozen backbone.
    PromptLearn {
        #[command(flatten)]
        train: TrainArgs,
        /// Backbone checkpoint from `pretrain`.
        #[arg(long)]
        backbone: PathBuf,
        /// Prompt checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// GZSL evaluation with bootstrap confidence intervals.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitName,
        /// Bootstrap resamples (default 1000); 0 reports point estimates only.
        #[arg(long)]
        bootstrap: Option<usize>,
        /// CI level is 1 − alpha (default 0.05).
        #[arg(long)]
        alpha: Option<f64>,
        /// Overrides the aggregation stored with the checkpoint.
        #[arg(long)]
        agg: Option<AggregationMode>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        /// Bootstrap seed (default 0).
        #[arg(long)]
        seed: Option<u64>,
        /// Score with the fixed-template prompts instead of generated ones.
        #[arg(long)]
        baseline: bool,
        /// JSON eval options (`resamples`, `alpha`, `seed`, `batch_size`); flags take precedence.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write per-sample probabilities here.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every trainable component.
    Gradcheck {
        #[arg(long, default_value_t = pspg::gradcheck::INSTANCES)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Decoder-layout and spatial-feature ablations on one backbone.
    Ablate {
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Prompt-length sweep on one backbone.
    Sweep {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, value_delimiter = ',', default_values_t = SWEEP_LENGTHS)]
        lengths: Vec<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON training config; missing fields take the phase defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Training log destination (default stderr).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    backbone: PathBuf,
    /// JSON prompt-phase config shared by every variant.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = pspg::metrics::DEFAULT_RESAMPLES)]
    bootstrap: usize,
    #[arg(long, default_value_t = pspg::metrics::DEFAULT_ALPHA)]
    alpha: f64,
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn train_config(phase: Phase, file: Option<&Path>, seed: Option<u64>, epochs: Option<usize>, lr: Option<f64>, batch: Option<usize>) -> Result<TrainConfig> {
    let mut over = match file {
        Some(p) => read_json(p)?,
        None => Value::Object(Default::default()),
    };
    let Value::Object(map) = &mut over else {
        bail!("training config must be a JSON object");
    };
    if let Some(s) = seed {
        map.insert("seed".into(), s.into());
    }
    if let Some(e) = epochs {
        map.insert("epochs".into(), e.into());
    }
    if let Some(l) = lr {
        map.insert("base_lr".into(), l.into());
    }
    if let Some(b) = batch {
        map.insert("batch_size".into(), b.into());
    }
    Ok(TrainConfig::from_json(phase, over)?)
}

fn write_log(out: &TrainOutput, dest: Option<&Path>) -> Result<()> {
    let mut text = format!("{LOG_HEADER}\n");
    for l in &out.log {
        text.push_str(&format!("{l}\n"));
    }
    match dest {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => eprint!("{text}"),
    }
    Ok(())
}

fn save(path: &Path, out: &TrainOutput, meta: &CheckpointMeta) -> Result<()> {
    checkpoint::save(path, &out.store).with_context(|| format!("writing {}", path.display()))?;
    checkpoint::save_sidecar(path, meta)?;
    Ok(())
}

fn load_ckpt(path: &Path) -> Result<(pspg::params::ParamStore, CheckpointMeta)> {
    let store = checkpoint::load(path)?;
    let meta: CheckpointMeta = checkpoint::load_sidecar(path)?;
    Ok((store, meta))
}

fn csv_report(r: &EvalReport) -> String {
    let ci = r.resamples > 0;
    let mut s = String::from(if ci { "metric,point,lo,hi\n" } else { "metric,point\n" });
    for (name, m) in &r.metrics {
        match (m.lo, m.hi) {
            (Some(lo), Some(hi)) => s.push_str(&format!("{name},{},{lo},{hi}\n", m.point)),
            _ => s.push_str(&format!("{name},{}\n", m.point)),
        }
    }
    s
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn experiment(exp: &ExperimentArgs) -> Result<(TrainConfig, pspg::params::ParamStore, synth::Dataset, EvalOptions)> {
    let ds = synth::read_dataset(&exp.data)?;
    let (backbone, _) = load_ckpt(&exp.backbone)?;
    let cfg = train_config(Phase::Prompt, exp.config.as_deref(), exp.seed, exp.epochs, None, None)?;
    let opts = EvalOptions {
        resamples: exp.bootstrap,
        alpha: exp.alpha,
        seed: cfg.seed,
        batch_size: cfg.eval_batch_size,
    };
    Ok((cfg, backbone, ds, opts))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::GenData { out, config, seed } => {
            let mut cfg: SynthConfig = match config {
                Some(p) => serde_json::from_value(read_json(&p)?)?,
                None => SynthConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let ds = synth::generate(&cfg)?;
            synth::write_dataset(&ds, &out)?;
            eprintln!(
                "wrote {} train / {} val / {} test samples to {}",
                ds.train.len(),
                ds.val.len(),
                ds.test.len(),
                out.display()
            );
        }
        Cmd::Pretrain { train: a } => {
            let cfg = train_config(Phase::Pretrain, a.config.as_deref(), a.seed, a.epochs, a.lr, a.batch_size)?;
            let ds = synth::read_dataset(&a.data)?;
            let out = train_pretrain(&cfg, &ds)?;
            write_log(&out, a.log.as_deref())?;
            save(&a.out, &out, &out.meta(&cfg, &ds))?;
        }
        Cmd::PromptLearn { train: a, backbone, resume } => {
            let cfg = train_config(Phase::Prompt, a.config.as_deref(), a.seed, a.epochs, a.lr, a.batch_size)?;
            let ds = synth::read_dataset(&a.data)?;
            let (bb, _) = load_ckpt(&backbone)?;
            let prev = resume.as_deref().map(checkpoint::load).transpose()?;
            let out = train_prompt(&cfg, &bb, &ds, prev.as_ref())?;
            write_log(&out, a.log.as_deref())?;
            save(&a.out, &out, &out.meta(&cfg, &ds))?;
            if let (Some(e), Some(v)) = (out.best_epoch, out.best_val) {
                eprintln!("best epoch {e}, validation macro AUC {v:.4}");
            }
        }
        Cmd::Eval {
            ckpt,
            data,
            split,
            bootstrap,
            alpha,
            agg,
            format,
            seed,
            baseline,
            config,
            predictions,
            out,
        } => {
            let mut opts = EvalOptions::default();
            if let Some(p) = config {
                let mut base = serde_json::to_value(&opts)?;
                pspg::train::merge_json(&mut base, read_json(&p)?);
                opts = serde_json::from_value(base)?;
            }
            opts.resamples = bootstrap.unwrap_or(opts.resamples);
            opts.alpha = alpha.unwrap_or(opts.alpha);
            opts.seed = seed.unwrap_or(opts.seed);
            let (store, mut meta) = load_ckpt(&ckpt)?;
            let ds = synth::read_dataset(&data)?;
            if meta.n_classes != ds.n_classes() {
                bail!("checkpoint was trained on {} classes, dataset has {}", meta.n_classes, ds.n_classes());
            }
            if let Some(a) = agg {
                meta.model.aggregation = a;
            }
            let model = Model::new(meta.model.clone())?;
            let scores = if baseline || meta.phase == Phase::Pretrain {
                baseline_split(&model, &store, &ds, split)?
            } else {
                predict_split(&model, &store, &ds, split, opts.batch_size)?
            };
            let report = gzsl_report(&scores.probs, &ds.split(split).labels, ds.seen(), &opts, meta.model.aggregation)?;
            if let Some(p) = predictions {
                let ids: Vec<usize> = (0..ds.split(split).len()).collect();
                let classes: Vec<usize> = (0..ds.n_classes()).collect();
                let f = fs::File::create(&p).with_context(|| format!("writing {}", p.display()))?;
                write_predictions_csv(io::BufWriter::new(f), &scores, &ids, &classes)?;
            }
            let text = match format {
                Format::Json => serde_json::to_string_pretty(&report)? + "\n",
                Format::Csv => csv_report(&report),
            };
            emit(&text, out.as_deref())?;
        }
        Cmd::Gradcheck { instances, seed } => {
            if instances == 0 {
                bail!("--instances must be at least 1");
            }
            let results = pspg::gradcheck::run_all(instances, seed)?;
            let mut ok = true;
            for r in &results {
                ok &= r.passed;
                println!(
                    "{:<18} {:>3} instances  max rel err {:.3e}  {}",
                    r.name,
                    r.instances,
                    r.max_rel_err,
                    if r.passed { "PASS" } else { "FAIL" }
                );
            }
            return Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) });
        }
        Cmd::Ablate { exp } => {
            let (cfg, bb, ds, opts) = experiment(&exp)?;
            let rows = run_ablations(&cfg, &bb, &ds, &opts)?;
            print!("{}", format_table(&rows));
        }
        Cmd::Sweep { exp, lengths } => {
            let (cfg, bb, ds, opts) = experiment(&exp)?;
            let rows = run_length_sweep(&cfg, &lengths, &bb, &ds, &opts)?;
            print!("{}", format_table(&rows));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
