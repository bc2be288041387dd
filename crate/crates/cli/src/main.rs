use std::fmt::Write as _;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use reed::credibility::per_sample_stats;
use reed::data::write_csv;
use reed::harness::{
    ablation_table, build_datasets, emit_histograms, evaluate, load_classifier, load_stage1,
    log_accuracy, log_stage1, log_stage3, mean_std, prepare, run_ablation, run_ce_baseline,
    run_decoupling_experiment, run_pipeline, run_stage1, run_stage2_for, run_stage3_for,
    save_classifier, save_stage1, save_stage2_transfer, save_stage3, stage3_metrics_csv,
    ExperimentConfig, MetricsLog,
};
use reed::io::{self, load_checkpoint};
use reed::{Error, Result};

#[derive(Parser)]
#[command(
    name = "reed",
    version,
    about = "Noisy-label training pipeline on synthetic blobs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train (noisy labels) and test splits as CSV.
    GenData(Common),
    /// Contrastive pre-training; writes encoder.json.
    Stage1(Common),
    /// Frozen-encoder classifier and label transfer; reads encoder.json.
    Stage2(Common),
    /// Semi-supervised retraining; reads encoder.json, classifier.json and
    /// transfer.json.
    Stage3(Common),
    /// All stages end to end.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seeds: Seeds,
        /// Also train the end-to-end cross-entropy baseline.
        #[arg(long)]
        baseline: bool,
    },
    /// The four-regime decoupling study.
    Fig1 {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seeds: Seeds,
    },
    /// Sampler × graph-penalty ablation of Stage 3.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seeds: Seeds,
    },
    /// Stage-2 diagnostic histograms; reads encoder.json, classifier.json
    /// and transfer.json.
    Histograms(Common),
    /// Top-1 and per-class accuracy of a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Evaluate the EMA weights stored in the checkpoint.
        #[arg(long)]
        ema: bool,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Artifact directory; defaults to `output_dir` from the config.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct Seeds {
    /// Repeat with seeds `seed .. seed + k` and report mean ± std.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    seeds: u64,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        let dir = self
            .out_dir
            .clone()
            .or_else(|| cfg.output_dir.clone())
            .ok_or_else(|| {
                Error::InvalidConfig("no output directory: pass --out-dir or set output_dir".into())
            })?;
        std::fs::create_dir_all(&dir)?;
        cfg.output_dir = Some(dir.clone());
        Ok((cfg, dir))
    }
}

type Summary = Vec<(&'static str, f64)>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(c) => gen_data(&c),
        Command::Stage1(c) => stage1(&c),
        Command::Stage2(c) => stage2(&c),
        Command::Stage3(c) => stage3(&c),
        Command::Pipeline {
            common,
            seeds,
            baseline,
        } => repeat(&common, seeds.seeds, |cfg, dir| {
            pipeline(cfg, dir, baseline)
        }),
        Command::Fig1 { common, seeds } => repeat(&common, seeds.seeds, fig1),
        Command::Ablate { common, seeds } => repeat(&common, seeds.seeds, ablate),
        Command::Histograms(c) => histograms(&c),
        Command::Eval { common, model, ema } => eval(&common, &model, ema),
    }
}

fn gen_data(c: &Common) -> Result<()> {
    let (cfg, dir) = c.load()?;
    let data = build_datasets(&cfg)?;
    write_csv(&data.train, File::create(dir.join("train.csv"))?)?;
    write_csv(&data.test, File::create(dir.join("test.csv"))?)?;
    println!(
        "train {} test {} noise_rate {:.4}",
        data.train.len(),
        data.test.len(),
        data.train.noise_rate()
    );
    Ok(())
}

fn stage1(c: &Common) -> Result<()> {
    let (cfg, dir) = c.load()?;
    let data = build_datasets(&cfg)?;
    let (model, losses) = run_stage1(&cfg, &data.train)?;
    save_stage1(&dir.join("encoder.json"), &model)?;
    let mut log = MetricsLog::new();
    log_stage1(&mut log, "stage1", &losses)?;
    io::write_text(&dir.join("metrics_stage1.csv"), &log.to_csv())?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!("nt_xent {:.6} -> {:.6}", first.loss, last.loss);
    }
    Ok(())
}

fn stage2(c: &Common) -> Result<()> {
    let (cfg, dir) = c.load()?;
    let data = build_datasets(&cfg)?;
    let model = load_stage1(&dir.join("encoder.json"))?;
    let out = run_stage2_for(&cfg, &data, &model.encoder)?;
    save_classifier(&dir.join("classifier.json"), &out.classifier)?;
    save_stage2_transfer(&dir.join("transfer.json"), &out)?;
    let mut log = MetricsLog::new();
    log_accuracy(&mut log, "stage2", &out.log)?;
    io::write_text(&dir.join("metrics_stage2.csv"), &log.to_csv())?;
    let t = &out.transfer;
    println!(
        "labeled {} unlabeled {} precision {:.4}",
        t.labeled.len(),
        t.unlabeled.len(),
        t.precision(&data.train.y_clean)
    );
    Ok(())
}

fn stage3(c: &Common) -> Result<()> {
    let (cfg, dir) = c.load()?;
    let data = build_datasets(&cfg)?;
    let model = load_stage1(&dir.join("encoder.json"))?;
    let classifier = load_classifier(&dir.join("classifier.json"))?;
    let transfer = io::load_transfer(&dir.join("transfer.json"))?.transfer;
    let out = run_stage3_for(&cfg, &data, &model, &classifier, &transfer)?;
    save_stage3(&dir.join("model.json"), &out)?;
    io::write_text(
        &dir.join("stage3_metrics.csv"),
        &stage3_metrics_csv(&out.log),
    )?;
    let mut log = MetricsLog::new();
    log_stage3(&mut log, "stage3", &out.log)?;
    io::write_text(&dir.join("metrics_stage3.csv"), &log.to_csv())?;
    if let Some(last) = out.log.last() {
        println!(
            "test_acc {:.4} test_acc_ema {:.4}",
            last.test_acc, last.test_acc_ema
        );
    }
    Ok(())
}

/// Runs `f` once per seed. With several seeds each run gets its own
/// `seed_<s>` subdirectory and `summary.csv` aggregates the scalars.
fn repeat(
    c: &Common,
    seeds: u64,
    f: impl Fn(&ExperimentConfig, &Path) -> Result<Summary>,
) -> Result<()> {
    let (cfg, dir) = c.load()?;
    if seeds == 1 {
        print_summary(&f(&cfg, &dir)?);
        return Ok(());
    }
    let mut all: Vec<Summary> = Vec::new();
    for i in 0..seeds {
        let seed = cfg.seed.wrapping_add(i);
        let sub = dir.join(format!("seed_{seed}"));
        std::fs::create_dir_all(&sub)?;
        let mut run_cfg = cfg.with_seed(seed);
        run_cfg.output_dir = Some(sub.clone());
        let summary = f(&run_cfg, &sub)?;
        println!("seed {seed}");
        print_summary(&summary);
        all.push(summary);
    }
    let mut csv = String::from("metric,mean,std,n\n");
    for (k, (name, _)) in all[0].iter().enumerate() {
        let values: Vec<f64> = all.iter().map(|s| s[k].1).collect();
        let (mean, std) = mean_std(&values)?;
        println!("{name} {mean:.4} ± {std:.4}");
        let _ = writeln!(csv, "{name},{mean},{std},{}", values.len());
    }
    io::write_text(&dir.join("summary.csv"), &csv)
}

fn print_summary(summary: &Summary) {
    for (name, v) in summary {
        println!("{name} {v:.4}");
    }
}

fn pipeline(cfg: &ExperimentConfig, dir: &Path, baseline: bool) -> Result<Summary> {
    let mut result = run_pipeline(cfg)?;
    let mut summary = vec![
        ("no_stage3_last_epoch", result.no_stage3_accuracy),
        ("final_last_epoch", result.final_accuracy),
        ("best", result.summary.best),
        ("last", result.summary.last),
    ];
    if let Some(ema) = result.final_accuracy_ema {
        summary.push(("final_ema_last_epoch", ema));
    }
    summary.push((
        "transfer_precision",
        result
            .prepared
            .stage2
            .transfer
            .precision(&result.prepared.data.train.y_clean),
    ));
    if baseline {
        let ce = run_ce_baseline(cfg, &result.prepared.data)?;
        log_accuracy(&mut result.log, "ce", &ce)?;
        let last = ce
            .last()
            .and_then(|e| e.test)
            .ok_or_else(|| Error::Empty("baseline log".into()))?;
        summary.push(("ce_last_epoch", last));
    }
    io::write_text(&dir.join("metrics.csv"), &result.log.to_csv())?;
    Ok(summary)
}

fn fig1(cfg: &ExperimentConfig, dir: &Path) -> Result<Summary> {
    let result = run_decoupling_experiment(cfg)?;
    io::write_text(&dir.join("metrics.csv"), &result.log.to_csv())?;
    let mut table = String::from("run_id,best,last,final\n");
    let mut summary = Summary::new();
    for r in &result.regimes {
        let _ = writeln!(
            table,
            "{},{},{},{}",
            r.run_id, r.summary.best, r.summary.last, r.final_accuracy
        );
    }
    for (id, key_best, key_last) in [
        ("train_clean", "train_clean_best", "train_clean_last"),
        (
            "retrain_representation",
            "retrain_representation_best",
            "retrain_representation_last",
        ),
        (
            "retrain_classifier",
            "retrain_classifier_best",
            "retrain_classifier_last",
        ),
        ("train_noisy", "train_noisy_best", "train_noisy_last"),
    ] {
        let r = result
            .regime(id)
            .ok_or_else(|| Error::Empty(format!("regime {id}")))?;
        summary.push((key_best, r.summary.best));
        summary.push((key_last, r.summary.last));
    }
    io::write_text(&dir.join("fig1_summary.csv"), &table)?;
    Ok(summary)
}

fn ablate(cfg: &ExperimentConfig, dir: &Path) -> Result<Summary> {
    let prepared = prepare(cfg, None)?;
    save_stage2_transfer(&dir.join("transfer.json"), &prepared.stage2)?;
    let result = run_ablation(cfg, &prepared)?;
    io::write_text(&dir.join("metrics.csv"), &result.log.to_csv())?;
    io::write_text(&dir.join("ablation.csv"), &ablation_table(&result))?;
    let mut summary = Summary::new();
    for (cbs, gsr, best, last) in [
        (true, true, "cbs_gsr_best", "cbs_gsr_last"),
        (true, false, "cbs_best", "cbs_last"),
        (false, true, "gsr_best", "gsr_last"),
        (false, false, "neither_best", "neither_last"),
    ] {
        let cell = result
            .cell(cbs, gsr)
            .ok_or_else(|| Error::Empty("ablation cell".into()))?;
        summary.push((best, cell.run.summary.best));
        summary.push((last, cell.run.summary.last));
    }
    Ok(summary)
}

fn histograms(c: &Common) -> Result<()> {
    let (cfg, dir) = c.load()?;
    let data = build_datasets(&cfg)?;
    let model = load_stage1(&dir.join("encoder.json"))?;
    let classifier = load_classifier(&dir.join("classifier.json"))?;
    let transfer = io::load_transfer(&dir.join("transfer.json"))?.transfer;
    let stats = per_sample_stats(&model.encoder, &classifier, &data.train)?;
    let h = emit_histograms(
        &stats.losses,
        &stats.confidences,
        &stats.y_pred,
        &data.train.y_noisy,
        &data.train.y_clean,
        &transfer,
    )?;
    io::write_text(&dir.join("hist_loss.csv"), &h.loss.to_csv())?;
    io::write_text(&dir.join("hist_confidence.csv"), &h.confidence.to_csv())?;
    io::write_text(&dir.join("class_counts.csv"), &h.class_counts_csv())?;
    Ok(())
}

fn eval(c: &Common, model: &Path, ema: bool) -> Result<()> {
    let cfg = ExperimentConfig::load(&c.config)?;
    let data = build_datasets(&cfg)?;
    let ckpt = load_checkpoint(model)?;
    let params = if ema {
        ckpt.ema.ok_or_else(|| {
            Error::InvalidConfig(format!("{} has no EMA weights", model.display()))
        })?
    } else {
        ckpt.params
    };
    let e = evaluate(&params, &data.test)?;
    println!("top1 {:.4}", e.top1);
    for (class, acc) in e.per_class.iter().enumerate() {
        match acc {
            Some(a) => println!("class {class} {a:.4}"),
            None => println!("class {class} n/a"),
        }
    }
    Ok(())
}
