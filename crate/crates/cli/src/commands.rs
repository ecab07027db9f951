//! Argument parsing and the file-writing side of each command.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use sotglp_core::model::{Ablations, ModelConfig};
use sotglp_core::suite::SuiteReport;
use sotglp_core::Error;

use crate::config::{Overrides, RunConfig};
use crate::pipeline::{
    curve_csv, dump_plan, evaluate_learned, ood_rows, run_sweep, train_seed, variant_name,
    Checkpoint, DataSet, Features, OodReportRow, Split, SweepAxis, SweepRow, CONFIG_FILE,
};

#[derive(Debug, Parser)]
#[command(
    name = "sotglp",
    version,
    about = "Sparse OT global/local prompt learning on synthetic episodes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an episode, frozen encoders and both OOD pools.
    GenData(GenDataArgs),
    /// Train one model per seed, writing per-epoch checkpoints and loss curves.
    Train(TrainArgs),
    /// Top-1 accuracy (fused, global-only, local-only) and plan statistics.
    Eval(EvalArgs),
    /// MCM and GL-MCM separation for each OOD pool.
    Ood(OodArgs),
    /// Train and evaluate across a lambda or K grid.
    Sweep(SweepArgs),
    /// Transport plan, saliency heatmaps and top-3 patches for one image.
    DumpPlan(DumpPlanArgs),
    /// Run the seeded oracle and gradient checks.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run config; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), &self.overrides)
    }

    /// Ablation flags given on the command line.
    fn ablations(&self) -> Ablations {
        let o = &self.overrides;
        Ablations {
            no_vv: o.no_vv,
            no_proj: o.no_proj,
            shared_local: o.shared_local,
            detach_plan: o.detach_plan,
            no_normalize: o.no_normalize,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output directory [default: <out_dir>/data].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Data directory written by gen-data [default: <out_dir>/data].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory [default: <out_dir>/train].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Report file [default: report.json next to the checkpoint].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OodArgs {
    #[command(flatten)]
    pub common: Common,
    /// One or more checkpoints; each contributes a row per pool.
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Also train a no-projection variant per checkpoint seed and report it.
    #[arg(long)]
    pub with_no_proj: bool,
    /// Output directory [default: <out_dir>/ood].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub axis: SweepAxis,
    /// Comma-separated grid [default: 0.125,0.25,0.5,1 for lambda; 1,5,10,20,100 for k].
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory [default: <out_dir>/sweep-<axis>].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// One thread per grid point.
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Debug, Args)]
pub struct DumpPlanArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub image_id: usize,
    /// Class whose prompts are matched [default: the image's label].
    #[arg(long)]
    pub class_id: Option<usize>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
    /// Output directory [default: <out_dir>/plans].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seeds per gradient-check mode.
    #[arg(long, default_value_t = 10)]
    pub grad_seeds: usize,
    /// Write the JSON report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn data_dir(cfg: &RunConfig, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| cfg.out_dir.join("data"))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write(&dir.join(CONFIG_FILE), &cfg.to_json())
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ood(a) => ood(a),
        Command::Sweep(a) => sweep(a),
        Command::DumpPlan(a) => plan(a),
        Command::Selftest(a) => selftest(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<ExitCode> {
    let cfg = a.common.resolve()?;
    let out = data_dir(&cfg, &a.out);
    let data = DataSet::generate(&cfg)?;
    data.save(&out)?;
    write_config(&out, &cfg)?;
    println!(
        "wrote {} train / {} test images and 2 OOD pools of {} to {}",
        data.episode.train.len(),
        data.episode.test.len(),
        cfg.ood.size,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let cfg = a.common.resolve()?;
    let data = DataSet::load(&data_dir(&cfg, &a.data))?;
    let out = a.out.clone().unwrap_or_else(|| cfg.out_dir.join("train"));
    write_config(&out, &cfg)?;
    let feats = Features::extract(&data, cfg.model.ablations.no_vv)?;
    for &seed in &cfg.seeds {
        let dir = out.join(format!("seed-{seed}"));
        std::fs::create_dir_all(&dir)?;
        let save_epoch = |epoch: usize, learned: &sotglp_core::model::Learned| {
            Checkpoint::new(&data, &cfg.model, seed, epoch, learned)
                .save(&dir.join(format!("epoch-{epoch:03}.json")))
                .map_err(|e| Error::Io(std::io::Error::other(format!("{e:#}"))))
        };
        let outcome = match train_seed(&data, &feats, &cfg.model, &cfg.train, seed, save_epoch) {
            Ok(o) => o,
            Err(e) => {
                if let Some(Error::Diverged { step, last_good }) = e.downcast_ref::<Error>() {
                    let path = dir.join("last_good.json");
                    Checkpoint::new(&data, &cfg.model, seed, 0, last_good).save(&path)?;
                    anyhow::bail!(
                        "seed {seed} diverged at step {step}; last good parameters in {}",
                        path.display()
                    );
                }
                return Err(e);
            }
        };
        let final_ck = Checkpoint::new(&data, &cfg.model, seed, cfg.train.epochs, &outcome.learned);
        final_ck.save(&dir.join("checkpoint.json"))?;
        write(&dir.join("loss.csv"), &curve_csv(&outcome.curve))?;
        let first = outcome.epoch_loss.first().copied().unwrap_or(f64::NAN);
        let last = outcome.epoch_loss.last().copied().unwrap_or(f64::NAN);
        println!(
            "seed {seed}: {} epochs, loss {first:.4} -> {last:.4}, checkpoint {}",
            cfg.train.epochs,
            dir.join("checkpoint.json").display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

/// Loads a checkpoint and the data it was trained on, with the model config
/// stored in the checkpoint plus any ablation flags from the command line.
fn load_scoring(
    common: &Common,
    checkpoint: &Path,
    data: &Option<PathBuf>,
) -> Result<(RunConfig, DataSet, Checkpoint, ModelConfig)> {
    let cfg = common.resolve()?;
    let data = DataSet::load(&data_dir(&cfg, data))?;
    let ck = Checkpoint::load(checkpoint)?;
    ck.check_encoders(&data)?;
    let model = ck.model_with(common.ablations());
    model.validate()?;
    Ok((cfg, data, ck, model))
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let (_, data, ck, model) = load_scoring(&a.common, &a.checkpoint, &a.data)?;
    let feats = Features::extract(&data, model.ablations.no_vv)?;
    let report = evaluate_learned(&data, &feats, &ck.learned_for(&model), &model)?.report;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.checkpoint.with_file_name("report.json"));
    let json = report.to_json();
    write(&out, &json)?;
    println!("{json}");
    Ok(ExitCode::SUCCESS)
}

fn ood(a: OodArgs) -> Result<ExitCode> {
    let cfg = a.common.resolve()?;
    let out = a.out.clone().unwrap_or_else(|| cfg.out_dir.join("ood"));
    let mut rows: Vec<OodReportRow> = Vec::new();
    for path in &a.checkpoint {
        let (cfg, data, ck, model) = load_scoring(&a.common, path, &a.data)?;
        let feats = Features::extract(&data, model.ablations.no_vv)?;
        rows.extend(ood_rows(
            &data,
            &feats,
            &ck.learned_for(&model),
            &model,
            ck.seed,
        )?);
        if a.with_no_proj && !model.ablations.no_proj {
            let mut variant = model;
            variant.ablations.no_proj = true;
            let trained = train_seed(&data, &feats, &variant, &cfg.train, ck.seed, |_, _| Ok(()))?;
            rows.extend(ood_rows(
                &data,
                &feats,
                &trained.learned,
                &variant,
                ck.seed,
            )?);
        }
    }
    write_config(&out, &cfg)?;
    let mut csv = format!("{}\n", OodReportRow::csv_header());
    for r in &rows {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    write(&out.join("ood.csv"), &csv)?;
    write(&out.join("ood.json"), &serde_json::to_string_pretty(&rows)?)?;
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}

fn sweep(a: SweepArgs) -> Result<ExitCode> {
    let cfg = a.common.resolve()?;
    let data = DataSet::load(&data_dir(&cfg, &a.data))?;
    let axis_name = match a.axis {
        SweepAxis::Lambda => "lambda",
        SweepAxis::K => "k",
    };
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join(format!("sweep-{axis_name}")));
    let grid = a.grid.clone().unwrap_or_else(|| a.axis.default_grid());
    write_config(&out, &cfg)?;
    let rows: Vec<SweepRow> = run_sweep(&cfg, &data, a.axis, &grid, a.parallel)?;
    let mut csv = format!("{}\n", SweepRow::csv_header());
    for (i, r) in rows.iter().enumerate() {
        write(
            &out.join(format!("point-{i:02}.json")),
            &serde_json::to_string_pretty(r)?,
        )?;
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    write(&out.join(format!("sweep_{axis_name}.csv")), &csv)?;
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}

fn plan(a: DumpPlanArgs) -> Result<ExitCode> {
    let (cfg, data, ck, model) = load_scoring(&a.common, &a.checkpoint, &a.data)?;
    let out = a.out.clone().unwrap_or_else(|| cfg.out_dir.join("plans"));
    let art = dump_plan(&data, &ck, &model, a.split, a.image_id, a.class_id)?;
    let stem = format!("plan-{}-{}", a.image_id, art.record.dump.class_id);
    write(
        &out.join(format!("{stem}.json")),
        &serde_json::to_string_pretty(&art.record)?,
    )?;
    write(&out.join(format!("{stem}-saliency.pgm")), &art.saliency_pgm)?;
    write(&out.join(format!("{stem}-support.pgm")), &art.support_pgm)?;
    println!(
        "image {} ({:?}, label {}), class {}, {}: K={} planted={:?}",
        a.image_id,
        a.split,
        art.record.label,
        art.record.dump.class_id,
        variant_name(&model.ablations),
        art.record.effective_k,
        art.record.planted
    );
    for (j, top) in art.record.dump.top3.iter().enumerate() {
        println!("  prompt {j}: top-3 patches {top:?}");
    }
    println!("wrote {}/{stem}.json and heatmaps", out.display());
    Ok(ExitCode::SUCCESS)
}

fn selftest(a: SelftestArgs) -> Result<ExitCode> {
    a.common.resolve()?;
    let report = SuiteReport::run(a.seed, a.grad_seeds)?;
    let json = report.to_json();
    if let Some(path) = &a.out {
        write(path, &json)?;
    }
    println!("{json}");
    let failures = report.failures();
    if failures.is_empty() {
        println!("selftest: all checks passed");
        Ok(ExitCode::SUCCESS)
    } else {
        for f in &failures {
            eprintln!("FAIL {f}");
        }
        Ok(ExitCode::FAILURE)
    }
}
