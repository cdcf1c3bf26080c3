//! Command-line interface: argument types, run directories and the command
//! bodies, which log every result as metrics rows.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mtm_core::capabilities::ActMode;
use mtm_core::masking::MaskKind;
use mtm_core::training::{Checkpoint, MetricPoint};

use crate::config::ExperimentConfig;
use crate::error::{io_err, HarnessError, Result};
use crate::experiments::{
    baseline_capabilities, data_point, dataset_for, evaluate_mtm, exploration_dataset, hetero_compare, mtm_capabilities, pretrain_encoder,
    rcbc_sweep, return_levels, target_return, train_mtm, transfer_runs, CapabilityReport, Prepared, TRANSFER_MODES,
};
use crate::metrics::{read_metrics, Run, RunManifest, CONFIG_FILE};
use crate::report::{find_metrics, long_rows, summarize, write_csv};

pub const OUT_DIR_ENV: &str = "MTM_OUT_DIR";
pub const DATASET_FILE: &str = "dataset.mtmd";
pub const CHECKPOINT_FILE: &str = "model.mtmc";

#[derive(Debug, Parser)]
#[command(name = "mtm", version, about = "Masked trajectory models: data, training, evaluation and experiment suites")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment config (JSON); defaults apply to every missing key.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Run directory; defaults to `$MTM_OUT_DIR/<command>-s<seed>` (or `runs/...`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate and save a dataset.
    GenData,
    /// Train a model and checkpoint it.
    Train {
        /// random | random_autoregressive | bc | rcbc | id | fd
        #[arg(long)]
        mask: Option<MaskKind>,
        /// Dataset file instead of generating one.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// BC and RCBC rollouts plus FD and ID held-out losses of a checkpoint.
    EvalCapabilities {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// RCBC scores of random, random-autoregressive and RCBC-specialized training masks.
    AblateMasks {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Heteromodal training with two-stage acting against an actioned-only model.
    Hetero,
    /// MTM, MLP baseline and heteromodal scores across dataset fractions.
    SweepData {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Scores and losses across segment lengths.
    SweepSeglen {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Offline TD3 on raw states and on frozen or finetuned embeddings.
    Td3 {
        /// Pretrained model; pretrains on the exploration data when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Aggregate metrics files into summary and long-format CSVs.
    Report {
        /// Run directories (searched recursively) or metrics files.
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train { .. } => "train",
            Command::EvalCapabilities { .. } => "eval-capabilities",
            Command::AblateMasks { .. } => "ablate-masks",
            Command::Hetero => "hetero",
            Command::SweepData { .. } => "sweep-data",
            Command::SweepSeglen { .. } => "sweep-seglen",
            Command::Td3 { .. } => "td3",
            Command::Report { .. } => "report",
        }
    }

    fn data(&self) -> Option<&PathBuf> {
        match self {
            Command::Train { data, .. } | Command::EvalCapabilities { data, .. } | Command::AblateMasks { data } | Command::SweepData { data } | Command::SweepSeglen { data } => {
                data.as_ref()
            }
            _ => None,
        }
    }
}

pub fn default_out(command: &str, seed: u64) -> PathBuf {
    let root = std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    root.join(format!("{command}-s{seed}"))
}

/// Resolves the config, runs the command in its run directory and writes
/// the manifest.
pub fn execute(cli: Cli) -> Result<RunManifest> {
    let Cli { command, common } = cli;
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default().resolve()?,
    }
    .with_seed(common.seed);
    if let Some(d) = command.data() {
        cfg.dataset.path = Some(d.clone());
    }
    let out = common.out.clone().unwrap_or_else(|| default_out(command.name(), common.seed));
    let mut run = Run::create(&out, command.name(), common.seed, cfg)?;
    match &command {
        Command::GenData => gen_data(&mut run)?,
        Command::Train { mask, .. } => {
            let mask = mask.unwrap_or(run.config.train.mask);
            train_cmd(&mut run, mask)?
        }
        Command::EvalCapabilities { checkpoint, .. } => eval_capabilities(&mut run, checkpoint)?,
        Command::AblateMasks { .. } => ablate_masks(&mut run)?,
        Command::Hetero => hetero(&mut run)?,
        Command::SweepData { .. } => sweep_data(&mut run)?,
        Command::SweepSeglen { .. } => sweep_seglen(&mut run)?,
        Command::Td3 { checkpoint } => td3(&mut run, checkpoint.as_deref())?,
        Command::Report { inputs } => report(&mut run, inputs)?,
    }
    run.finish()
}

type Tags<'a> = [(&'a str, String)];

fn log_curve(run: &mut Run, points: &[MetricPoint], tags: &Tags) -> Result<()> {
    for p in points {
        run.metrics.record(p.step, &p.name, p.value, tags)?;
    }
    Ok(())
}

fn log_report(run: &mut Run, r: &CapabilityReport, tags: &Tags) -> Result<()> {
    let mut t = tags.to_vec();
    t.push(("model", r.model.clone()));
    for (name, v) in [
        ("bc_return", r.bc_return),
        ("bc_normalized", r.bc_normalized),
        ("rcbc_return", r.rcbc_return),
        ("rcbc_normalized", r.rcbc_normalized),
        ("fd_loss", r.fd_loss),
        ("id_loss", r.id_loss),
        ("target_return", r.target_return),
        ("ref_random", r.ref_random),
        ("ref_expert", r.ref_expert),
    ] {
        run.metrics.record(0, name, v, &t)?;
    }
    Ok(())
}

fn gen_data(run: &mut Run) -> Result<()> {
    let ds = dataset_for(&run.config)?;
    ds.save(&run.artifact(DATASET_FILE))?;
    let m = &ds.manifest;
    for (name, v) in [
        ("n_trajectories", m.n_trajectories as f64),
        ("n_train", m.split.train.len() as f64),
        ("behavior_return", ds.behavior_return()),
        ("ref_random", m.refs.random),
        ("ref_expert", m.refs.expert),
    ] {
        run.metrics.record(0, name, v, &[])?;
    }
    Ok(())
}

fn train_cmd(run: &mut Run, mask: MaskKind) -> Result<()> {
    let prep = Prepared::new(dataset_for(&run.config)?)?;
    let ckpt = run.artifact(CHECKPOINT_FILE);
    let (_, curve) = train_mtm(&prep.train, &prep.eval, &prep.norm, &run.config, mask, Some(&ckpt))?;
    log_curve(run, &curve, &[("mask", mask.name().into())])
}

fn eval_capabilities(run: &mut Run, checkpoint: &Path) -> Result<()> {
    if !checkpoint.exists() {
        return Err(HarnessError::Missing {
            what: "checkpoint",
            path: checkpoint.to_path_buf(),
        });
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    // the checkpoint's architecture and context length take precedence
    run.config.model = ckpt.model.config().clone();
    run.config.train.segment_len = run.config.model.segment_len;
    let snapshot = run.dir.join(CONFIG_FILE);
    std::fs::write(&snapshot, run.config.to_json()?).map_err(io_err(&snapshot))?;
    let prep = Prepared::with_norm(dataset_for(&run.config)?, ckpt.norm.clone())?;
    let mut reports = vec![mtm_capabilities(&ckpt.model, &prep, &run.config, run.seed)?];
    if run.config.eval.baseline {
        reports.push(baseline_capabilities(&prep, &run.config, run.seed)?);
    }
    for r in &reports {
        log_report(run, r, &[])?;
    }
    let levels = return_levels(&prep.refs(), run.config.eval.rtg_levels);
    let sweep = rcbc_sweep(&ckpt.model, &prep, &levels, run.config.eval.episodes, run.seed)?;
    for (g, r) in levels.iter().zip(&sweep) {
        let tags = [("model", "mtm".to_string()), ("target", format!("{g:.3}"))];
        run.metrics.record(0, "rcbc_level_return", r.mean_return, &tags)?;
    }
    run.write_json("report.json", &reports)
}

fn ablate_masks(run: &mut Run) -> Result<()> {
    let prep = Prepared::new(dataset_for(&run.config)?)?;
    let refs = prep.refs();
    let target = target_return(&run.config, &refs);
    let mut rows = Vec::new();
    for mask in [MaskKind::Random, MaskKind::RandomAutoregressive, MaskKind::Rcbc] {
        let (model, curve) = train_mtm(&prep.train, &prep.eval, &prep.norm, &run.config, mask, None)?;
        let tags = [("mask", mask.name().to_string())];
        log_curve(run, &curve, &tags)?;
        let r = evaluate_mtm(&model, &prep.norm, &prep.env, &refs, ActMode::Rcbc, Some(target), run.config.eval.episodes, run.seed)?;
        run.metrics.record(run.config.train.steps, "rcbc_return", r.mean_return, &tags)?;
        run.metrics.record(run.config.train.steps, "rcbc_normalized", r.mean_normalized, &tags)?;
        rows.push((mask.name(), r));
    }
    run.write_json("ablation.json", &rows)
}

fn hetero(run: &mut Run) -> Result<()> {
    let r = hetero_compare(&run.config, run.seed)?;
    let step = run.config.train.steps;
    for (name, v, model, mode) in [
        ("normalized", r.two_stage, "heteromodal", "two_stage"),
        ("normalized", r.hetero_rcbc, "heteromodal", "rcbc"),
        ("normalized", r.actioned_only, "actioned_only", "rcbc"),
    ] {
        run.metrics.record(step, name, v, &[("model", model.into()), ("mode", mode.into())])?;
    }
    run.metrics.record(0, "n_actioned", r.n_actioned as f64, &[])?;
    run.metrics.record(0, "n_state_only", r.n_state_only as f64, &[])?;
    run.write_json("hetero.json", &r)
}

fn sweep_data(run: &mut Run) -> Result<()> {
    let ds = dataset_for(&run.config)?;
    let mut points = Vec::new();
    for &f in &run.config.sweep.fractions.clone() {
        let p = data_point(&ds, &run.config, f, true, run.seed)?;
        let tags = |model: &str| [("fraction", f.to_string()), ("model", model.to_string())];
        run.metrics.record(0, "rcbc_normalized", p.mtm_rcbc, &tags("mtm"))?;
        run.metrics.record(0, "rcbc_normalized", p.baseline_rcbc, &tags("baseline_mlp"))?;
        if let Some(h) = p.hetero_two_stage {
            run.metrics.record(0, "two_stage_normalized", h, &tags("heteromodal"))?;
        }
        points.push(p);
    }
    run.write_json("sweep_data.json", &points)
}

fn sweep_seglen(run: &mut Run) -> Result<()> {
    let ds = dataset_for(&run.config)?;
    let prep = Prepared::new(ds)?;
    let mut reports = Vec::new();
    for &len in &run.config.sweep.segment_lengths.clone() {
        let mut cfg = run.config.clone();
        cfg.model.segment_len = len;
        cfg.train.segment_len = len;
        let cfg = cfg.resolve()?;
        let (model, curve) = train_mtm(&prep.train, &prep.eval, &prep.norm, &cfg, cfg.train.mask, None)?;
        let tags = [("segment_len", len.to_string())];
        log_curve(run, &curve, &tags)?;
        let r = mtm_capabilities(&model, &prep, &cfg, run.seed)?;
        log_report(run, &r, &tags)?;
        reports.push((len, r));
    }
    run.write_json("sweep_seglen.json", &reports)
}

fn td3(run: &mut Run, checkpoint: Option<&Path>) -> Result<()> {
    let (env, ds) = exploration_dataset(&run.config, run.seed)?;
    ds.save(&run.artifact(DATASET_FILE))?;
    let (encoder, norm) = match checkpoint {
        Some(p) if !p.exists() => {
            return Err(HarnessError::Missing {
                what: "checkpoint",
                path: p.to_path_buf(),
            })
        }
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            (ck.model, ck.norm)
        }
        None => (pretrain_encoder(&run.config, &ds)?, ds.manifest.norm.clone()),
    };
    let runs = transfer_runs(&run.config, &env, &ds, &encoder, &norm, &TRANSFER_MODES)?;
    for r in &runs {
        let tags = [("representation", r.representation.to_string()), ("finetune", r.finetune.to_string())];
        for p in &r.curve {
            run.metrics.record(p.update, "td3_return", p.mean_return, &tags)?;
            run.metrics.record(p.update, "td3_normalized", p.mean_normalized, &tags)?;
            run.metrics.record(p.update, "td3_critic_loss", p.critic_loss, &tags)?;
        }
    }
    run.write_json("td3.json", &runs)
}

fn report(run: &mut Run, inputs: &[PathBuf]) -> Result<()> {
    let files = find_metrics(inputs, Some(&run.dir))?;
    let mut rows = Vec::new();
    for f in &files {
        rows.extend(read_metrics(f)?);
    }
    write_csv(&run.artifact("summary.csv"), &summarize(&rows))?;
    write_csv(&run.artifact("long.csv"), &long_rows(&rows))?;
    run.metrics.record(0, "files_read", files.len() as f64, &[])?;
    run.metrics.record(0, "rows_read", rows.len() as f64, &[])?;
    Ok(())
}
