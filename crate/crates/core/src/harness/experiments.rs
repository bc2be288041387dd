//! Reproduction runs: the decoupling study, the staged pipeline, the
//! end-to-end baseline and the sampler/regularizer ablation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::{best_last, emit_histograms, BestLast, Histograms, MetricsLog};
use super::supervised::{train_supervised, LabelSource, SupervisedConfig};
use crate::credibility::{
    run_stage2, EpochAccuracy, Stage2Config, Stage2Output, TransferredLabels,
};
use crate::data::{train_test_split, BlobSpec, LabeledDataset, NoiseSpec};
use crate::io::{self, Checkpoint, TransferBody};
use crate::numnet::{Dense, Matrix, MlpParams, Trainable};
use crate::semi::{train_stage3, MixMatchConfig, Stage3Epoch, Stage3Output};
use crate::ssrl::{train_encoder, ContrastiveConfig, ContrastiveModel, EpochLoss};
use crate::{seeded_rng, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    #[default]
    Full,
    /// Stop after label transfer and report the frozen-representation
    /// classifier.
    NoStage3,
}

/// One run. `seed` and `noise` have no defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub noise: NoiseSpec,
    #[serde(default)]
    pub data: BlobSpec,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub ssrl: ContrastiveConfig,
    #[serde(default)]
    pub stage2: Stage2Config,
    #[serde(default)]
    pub stage3: MixMatchConfig,
    /// Cross-entropy training for the baseline and the decoupling study.
    #[serde(default)]
    pub baseline: SupervisedConfig,
    #[serde(default)]
    pub mode: PipelineMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn default_test_fraction() -> f64 {
    0.2
}

impl ExperimentConfig {
    pub fn new(seed: u64, noise: NoiseSpec) -> Self {
        Self {
            seed,
            noise,
            data: BlobSpec::default(),
            test_fraction: default_test_fraction(),
            ssrl: ContrastiveConfig::default(),
            stage2: Stage2Config::default(),
            stage3: MixMatchConfig::default(),
            baseline: SupervisedConfig::default(),
            mode: PipelineMode::default(),
            output_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "test_fraction {} outside (0, 1)",
                self.test_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.noise.ratio) {
            return Err(Error::InvalidConfig(format!(
                "noise ratio {} outside [0, 1]",
                self.noise.ratio
            )));
        }
        self.ssrl.validate()?;
        self.stage2.validate()?;
        self.stage3.validate()?;
        self.baseline.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = io::versioned_from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        io::versioned_to_string(self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Same run with a different master seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// Independent random streams derived from the master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data = 0,
    Split = 1,
    Ssrl = 2,
    Stage2 = 3,
    Stage3 = 4,
    BaselineInit = 5,
    BaselineTrain = 6,
}

/// SplitMix64 of `seed` offset by the stream index.
pub fn derive_seed(seed: u64, stream: Stream) -> u64 {
    let mut z = seed.wrapping_add((stream as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Datasets {
    /// Training split with noisy labels applied.
    pub train: LabeledDataset,
    /// Held-out split; its labels are clean.
    pub test: LabeledDataset,
}

pub fn build_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    let full = cfg.data.generate(derive_seed(cfg.seed, Stream::Data))?;
    let (train, test) = train_test_split(
        &full,
        cfg.test_fraction,
        derive_seed(cfg.seed, Stream::Split),
    )?;
    Ok(Datasets {
        train: cfg.noise.apply(&train)?,
        test,
    })
}

/// Fresh encoder/classifier with the configured widths.
pub fn init_params(cfg: &ExperimentConfig, dim: usize, classes: usize) -> Result<MlpParams> {
    let mut enc = vec![dim];
    enc.extend_from_slice(&cfg.ssrl.hidden);
    let rep = *enc.last().expect("non-empty widths");
    MlpParams::init(
        &enc,
        &[rep, classes],
        &mut seeded_rng(derive_seed(cfg.seed, Stream::BaselineInit)),
    )
}

pub fn run_stage1(
    cfg: &ExperimentConfig,
    train: &LabeledDataset,
) -> Result<(ContrastiveModel, Vec<EpochLoss>)> {
    train_encoder(&train.x, &cfg.ssrl, derive_seed(cfg.seed, Stream::Ssrl))
}

/// Output of Stages 1 and 2 on one configuration.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub data: Datasets,
    pub stage1: ContrastiveModel,
    /// Empty when a pre-trained Stage-1 model was supplied.
    pub stage1_log: Vec<EpochLoss>,
    pub stage2: Stage2Output,
}

impl Prepared {
    /// Stage-1 encoder with the Stage-2 classifier on top.
    pub fn stage3_init(&self) -> MlpParams {
        MlpParams {
            encoder: self.stage1.encoder.clone(),
            classifier: self.stage2.classifier.clone(),
        }
    }

    /// Graph node features: the frozen Stage-1 projection of every
    /// training sample.
    pub fn graph_features(&self) -> Result<Matrix> {
        self.stage1.project(&self.data.train.x)
    }

    pub fn histograms(&self) -> Result<Histograms> {
        let s = &self.stage2;
        emit_histograms(
            &s.stats.losses,
            &s.stats.confidences,
            &s.stats.y_pred,
            &self.data.train.y_noisy,
            &self.data.train.y_clean,
            &s.transfer,
        )
    }
}

/// Runs Stages 1 and 2. Stage 1 never reads labels, so a model trained on
/// the same features may be passed in to skip it.
pub fn prepare(cfg: &ExperimentConfig, stage1: Option<ContrastiveModel>) -> Result<Prepared> {
    cfg.validate()?;
    let data = build_datasets(cfg)?;
    let (stage1, stage1_log) = match stage1 {
        Some(m) => (m, Vec::new()),
        None => run_stage1(cfg, &data.train)?,
    };
    let stage2 = run_stage2_for(cfg, &data, &stage1.encoder)?;
    Ok(Prepared {
        data,
        stage1,
        stage1_log,
        stage2,
    })
}

pub fn run_stage2_for(
    cfg: &ExperimentConfig,
    data: &Datasets,
    encoder: &[Dense],
) -> Result<Stage2Output> {
    run_stage2(
        encoder,
        &data.train,
        Some(&data.test),
        &cfg.stage2,
        derive_seed(cfg.seed, Stream::Stage2),
    )
}

/// Stage 3 from Stage-1 and Stage-2 artifacts, as configured.
pub fn run_stage3_for(
    cfg: &ExperimentConfig,
    data: &Datasets,
    stage1: &ContrastiveModel,
    classifier: &[Dense],
    transfer: &TransferredLabels,
) -> Result<Stage3Output> {
    let init = MlpParams {
        encoder: stage1.encoder.clone(),
        classifier: classifier.to_vec(),
    };
    let z = cfg
        .stage3
        .use_gsr
        .then(|| stage1.project(&data.train.x))
        .transpose()?;
    train_stage3(
        &init,
        z.as_ref(),
        transfer,
        &data.train,
        &data.test,
        &cfg.stage3,
        derive_seed(cfg.seed, Stream::Stage3),
    )
}

pub fn save_stage1(path: &Path, model: &ContrastiveModel) -> Result<()> {
    let mut ckpt = Checkpoint::new(MlpParams {
        encoder: model.encoder.clone(),
        classifier: Vec::new(),
    });
    ckpt.head = Some(model.head.clone());
    io::save_checkpoint(path, &ckpt)
}

pub fn load_stage1(path: &Path) -> Result<ContrastiveModel> {
    let ckpt = io::load_checkpoint(path)?;
    if ckpt.params.encoder.is_empty() {
        return Err(Error::format("encoder", "empty in Stage-1 checkpoint"));
    }
    Ok(ContrastiveModel {
        encoder: ckpt.params.encoder,
        head: ckpt
            .head
            .ok_or_else(|| Error::format("head", "missing from Stage-1 checkpoint"))?,
    })
}

pub fn save_classifier(path: &Path, classifier: &[Dense]) -> Result<()> {
    io::save_checkpoint(
        path,
        &Checkpoint::new(MlpParams {
            encoder: Vec::new(),
            classifier: classifier.to_vec(),
        }),
    )
}

pub fn load_classifier(path: &Path) -> Result<Vec<Dense>> {
    let ckpt = io::load_checkpoint(path)?;
    if ckpt.params.classifier.is_empty() {
        return Err(Error::format("classifier", "empty in Stage-2 checkpoint"));
    }
    Ok(ckpt.params.classifier)
}

pub fn save_stage2_transfer(path: &Path, out: &Stage2Output) -> Result<()> {
    io::save_transfer(
        path,
        &TransferBody {
            transfer: out.transfer.clone(),
            loss_gmm: out.fits.loss.as_ref().map(|f| f.gmm),
            confidence_gmm: out.fits.confidence.as_ref().map(|f| f.gmm),
        },
    )
}

pub fn save_stage3(path: &Path, out: &Stage3Output) -> Result<()> {
    let mut ckpt = Checkpoint::new(out.params.clone());
    ckpt.ema = Some(out.ema.clone());
    io::save_checkpoint(path, &ckpt)
}

pub fn log_stage1(log: &mut MetricsLog, run_id: &str, entries: &[EpochLoss]) -> Result<()> {
    for e in entries {
        log.push(run_id, e.epoch, "train", "nt_xent", e.loss)?;
    }
    Ok(())
}

pub fn log_accuracy(log: &mut MetricsLog, run_id: &str, entries: &[EpochAccuracy]) -> Result<()> {
    for e in entries {
        log.push(run_id, e.epoch, "train", "accuracy", e.train)?;
        if let Some(t) = e.test {
            log.push(run_id, e.epoch, "test", "accuracy", t)?;
        }
    }
    Ok(())
}

pub fn log_stage3(log: &mut MetricsLog, run_id: &str, entries: &[Stage3Epoch]) -> Result<()> {
    for e in entries {
        log.push(run_id, e.epoch, "test", "accuracy", e.test_acc)?;
        log.push(run_id, e.epoch, "test", "accuracy_ema", e.test_acc_ema)?;
        log.push(run_id, e.epoch, "train", "l_sup", e.l_sup)?;
        log.push(run_id, e.epoch, "train", "l_unsup", e.l_unsup)?;
        log.push(run_id, e.epoch, "train", "r_graph", e.r_graph)?;
    }
    Ok(())
}

pub const STAGE3_METRICS_HEADER: &str = "epoch,test_acc,test_acc_ema,l_sup,l_unsup,r_graph";

pub fn stage3_metrics_csv(entries: &[Stage3Epoch]) -> String {
    let mut s = String::from(STAGE3_METRICS_HEADER);
    s.push('\n');
    for e in entries {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.epoch, e.test_acc, e.test_acc_ema, e.l_sup, e.l_unsup, e.r_graph
        ));
    }
    s
}

fn test_series(entries: &[EpochAccuracy]) -> Vec<f64> {
    entries.iter().filter_map(|e| e.test).collect()
}

#[derive(Clone, Debug)]
pub struct PipelineResult {
    pub log: MetricsLog,
    pub prepared: Prepared,
    pub stage3: Option<Stage3Output>,
    /// Last-epoch test accuracy of the Stage-2 classifier.
    pub no_stage3_accuracy: f64,
    /// Last-epoch test accuracy of the final model (raw weights).
    pub final_accuracy: f64,
    pub final_accuracy_ema: Option<f64>,
    pub summary: BestLast,
}

pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineResult> {
    run_pipeline_from(cfg, None)
}

/// Stage 1 → Stage 2 → (Stage 3). With `output_dir` set, each stage's
/// artifacts are written and read back before the next stage uses them.
pub fn run_pipeline_from(
    cfg: &ExperimentConfig,
    stage1: Option<ContrastiveModel>,
) -> Result<PipelineResult> {
    let mut prepared = prepare(cfg, stage1)?;
    let mut log = MetricsLog::new();
    log_stage1(&mut log, "stage1", &prepared.stage1_log)?;
    log_accuracy(&mut log, "stage2", &prepared.stage2.log)?;
    let stage2_curve = test_series(&prepared.stage2.log);
    let no_stage3_accuracy = *stage2_curve
        .last()
        .ok_or_else(|| Error::Empty("stage 2 log".into()))?;

    if let Some(dir) = &cfg.output_dir {
        persist_stages_1_2(dir, &mut prepared)?;
    }

    let (stage3, final_accuracy, final_accuracy_ema, summary) = match cfg.mode {
        PipelineMode::NoStage3 => (None, no_stage3_accuracy, None, best_last(&stage2_curve)?),
        PipelineMode::Full => {
            let out = run_stage3_for(
                cfg,
                &prepared.data,
                &prepared.stage1,
                &prepared.stage2.classifier,
                &prepared.stage2.transfer,
            )?;
            log_stage3(&mut log, "stage3", &out.log)?;
            let curve: Vec<f64> = out.log.iter().map(|e| e.test_acc).collect();
            let last = out
                .log
                .last()
                .ok_or_else(|| Error::Empty("stage 3 log".into()))?;
            let (acc, ema) = (last.test_acc, last.test_acc_ema);
            if let Some(dir) = &cfg.output_dir {
                save_stage3(&dir.join("model.json"), &out)?;
                io::write_text(
                    &dir.join("stage3_metrics.csv"),
                    &stage3_metrics_csv(&out.log),
                )?;
            }
            (Some(out), acc, Some(ema), best_last(&curve)?)
        }
    };
    if let Some(dir) = &cfg.output_dir {
        io::write_text(&dir.join("metrics.csv"), &log.to_csv())?;
    }
    Ok(PipelineResult {
        log,
        prepared,
        stage3,
        no_stage3_accuracy,
        final_accuracy,
        final_accuracy_ema,
        summary,
    })
}

fn persist_stages_1_2(dir: &Path, prepared: &mut Prepared) -> Result<()> {
    let (enc, cls, tr) = (
        dir.join("encoder.json"),
        dir.join("classifier.json"),
        dir.join("transfer.json"),
    );
    save_stage1(&enc, &prepared.stage1)?;
    save_classifier(&cls, &prepared.stage2.classifier)?;
    save_stage2_transfer(&tr, &prepared.stage2)?;
    prepared.stage1 = load_stage1(&enc)?;
    prepared.stage2.classifier = load_classifier(&cls)?;
    prepared.stage2.transfer = io::load_transfer(&tr)?.transfer;
    Ok(())
}

/// Cross-entropy on the noisy labels, end to end, from the shared
/// initialization.
pub fn run_ce_baseline(cfg: &ExperimentConfig, data: &Datasets) -> Result<Vec<EpochAccuracy>> {
    let mut params = init_params(cfg, data.train.dim(), data.train.classes)?;
    train_supervised(
        &mut params,
        Trainable::ALL,
        &data.train,
        LabelSource::Noisy,
        &data.test,
        &cfg.baseline,
        derive_seed(cfg.seed, Stream::BaselineTrain),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub run_id: String,
    pub summary: BestLast,
    /// Test accuracy after the final epoch.
    pub final_accuracy: f64,
}

impl RunSummary {
    fn from_curve(run_id: &str, curve: &[f64]) -> Result<Self> {
        Ok(Self {
            run_id: run_id.to_owned(),
            summary: best_last(curve)?,
            final_accuracy: *curve
                .last()
                .ok_or_else(|| Error::Empty(format!("{run_id} curve")))?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct DecouplingResult {
    pub log: MetricsLog,
    pub regimes: Vec<RunSummary>,
}

impl DecouplingResult {
    pub fn regime(&self, run_id: &str) -> Option<&RunSummary> {
        self.regimes.iter().find(|r| r.run_id == run_id)
    }
}

pub const TRAIN_CLEAN: &str = "train_clean";
pub const RETRAIN_REPRESENTATION: &str = "retrain_representation";
pub const RETRAIN_CLASSIFIER: &str = "retrain_classifier";
pub const TRAIN_NOISY: &str = "train_noisy";

/// Four regimes sharing one initialization and schedule: clean labels end
/// to end; encoder retrained on noisy labels under the clean run's frozen
/// classifier; classifier retrained on noisy labels over the clean run's
/// frozen encoder; noisy labels end to end.
pub fn run_decoupling_experiment(cfg: &ExperimentConfig) -> Result<DecouplingResult> {
    cfg.validate()?;
    let data = build_datasets(cfg)?;
    let init = init_params(cfg, data.train.dim(), data.train.classes)?;
    let shuffle = derive_seed(cfg.seed, Stream::BaselineTrain);
    let run = |params: &mut MlpParams, trainable, labels| {
        train_supervised(
            params,
            trainable,
            &data.train,
            labels,
            &data.test,
            &cfg.baseline,
            shuffle,
        )
    };

    let mut clean = init.clone();
    let clean_log = run(&mut clean, Trainable::ALL, LabelSource::Clean)?;
    let mut rep = MlpParams {
        encoder: init.encoder.clone(),
        classifier: clean.classifier.clone(),
    };
    let rep_log = run(&mut rep, Trainable::ENCODER, LabelSource::Noisy)?;
    let mut cls = MlpParams {
        encoder: clean.encoder.clone(),
        classifier: init.classifier.clone(),
    };
    let cls_log = run(&mut cls, Trainable::CLASSIFIER, LabelSource::Noisy)?;
    let mut noisy = init.clone();
    let noisy_log = run(&mut noisy, Trainable::ALL, LabelSource::Noisy)?;

    let mut log = MetricsLog::new();
    let mut regimes = Vec::new();
    for (id, entries) in [
        (TRAIN_CLEAN, &clean_log),
        (RETRAIN_REPRESENTATION, &rep_log),
        (RETRAIN_CLASSIFIER, &cls_log),
        (TRAIN_NOISY, &noisy_log),
    ] {
        log_accuracy(&mut log, id, entries)?;
        regimes.push(RunSummary::from_curve(id, &test_series(entries))?);
    }
    Ok(DecouplingResult { log, regimes })
}

#[derive(Clone, Debug)]
pub struct AblationCell {
    pub use_cbs: bool,
    pub use_gsr: bool,
    pub run: RunSummary,
    pub ema: BestLast,
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub log: MetricsLog,
    pub cells: Vec<AblationCell>,
}

impl AblationResult {
    pub fn cell(&self, use_cbs: bool, use_gsr: bool) -> Option<&AblationCell> {
        self.cells
            .iter()
            .find(|c| c.use_cbs == use_cbs && c.use_gsr == use_gsr)
    }
}

pub fn ablation_run_id(use_cbs: bool, use_gsr: bool) -> &'static str {
    match (use_cbs, use_gsr) {
        (true, true) => "cbs_gsr",
        (true, false) => "cbs",
        (false, true) => "gsr",
        (false, false) => "neither",
    }
}

/// Four Stage-3 runs over the same transfer, initialization and seed,
/// toggling the balanced sampler and the graph penalty.
pub fn run_ablation(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<AblationResult> {
    let init = prepared.stage3_init();
    let z = prepared.graph_features()?;
    let mut log = MetricsLog::new();
    let mut cells = Vec::new();
    for (use_cbs, use_gsr) in [(true, true), (true, false), (false, true), (false, false)] {
        let config = MixMatchConfig {
            use_cbs,
            use_gsr,
            ..cfg.stage3.clone()
        };
        let out = train_stage3(
            &init,
            Some(&z),
            &prepared.stage2.transfer,
            &prepared.data.train,
            &prepared.data.test,
            &config,
            derive_seed(cfg.seed, Stream::Stage3),
        )?;
        let id = ablation_run_id(use_cbs, use_gsr);
        log_stage3(&mut log, id, &out.log)?;
        let raw: Vec<f64> = out.log.iter().map(|e| e.test_acc).collect();
        let ema: Vec<f64> = out.log.iter().map(|e| e.test_acc_ema).collect();
        cells.push(AblationCell {
            use_cbs,
            use_gsr,
            run: RunSummary::from_curve(id, &raw)?,
            ema: best_last(&ema)?,
        });
    }
    Ok(AblationResult { log, cells })
}

/// `Best/Last` table of the ablation grid.
pub fn ablation_table(result: &AblationResult) -> String {
    let mut s = String::from("run_id,use_cbs,use_gsr,best,last,best_ema,last_ema\n");
    for c in &result.cells {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            c.run.run_id,
            c.use_cbs,
            c.use_gsr,
            c.run.summary.best,
            c.run.summary.last,
            c.ema.best,
            c.ema.last
        ));
    }
    s
}
