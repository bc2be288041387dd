//! Semi-supervised retraining on the transferred labels: MixMatch with an
//! optional class-balanced labeled sampler and the neighbor-graph penalty.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::credibility::{accuracy, TransferredLabels};
use crate::data::{augment_rows, AugmentationSpec, LabeledDataset};
use crate::graphreg::{
    build_neighbor_graph_isolating_zeros, sharpen, tape_graph_regularizer, NeighborGraph, NodeRole,
    RegWeights,
};
use crate::numnet::{
    cosine_lr, grad, one_hot, predict, tape_cross_entropy, tape_mean_squared, BoundMlp, EmaState,
    Matrix, MlpParams, OptState, Tape, Trainable, Var,
};
use crate::{seeded_rng, Error, Result, SeededRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixMatchConfig {
    /// Sharpening temperature for guessed labels and for `p̂` inside R.
    pub temperature: f64,
    pub alpha: f64,
    pub lambda_u: f64,
    /// Augmentations averaged per unlabeled sample when guessing.
    pub k: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub eta_min: f64,
    pub reg: RegWeights,
    pub tau_c: f64,
    pub use_cbs: bool,
    pub use_gsr: bool,
    pub ema_decay: f64,
    /// Guess labels with the EMA weights instead of the live ones.
    pub guess_with_ema: bool,
    pub augmentation: AugmentationSpec,
}

impl Default for MixMatchConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            alpha: 0.75,
            lambda_u: 50.0,
            k: 2,
            batch_size: 128,
            epochs: 60,
            learning_rate: 1e-3,
            eta_min: 2e-4,
            reg: RegWeights::default(),
            tau_c: 0.5,
            use_cbs: true,
            use_gsr: true,
            ema_decay: 0.999,
            guess_with_ema: true,
            augmentation: AugmentationSpec::default(),
        }
    }
}

impl MixMatchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.temperature > 0.0) {
            return bad("mixmatch temperature must be > 0");
        }
        if !(self.alpha > 0.0) {
            return bad("mixmatch alpha must be > 0");
        }
        if !(self.lambda_u >= 0.0) {
            return bad("mixmatch lambda_u must be ≥ 0");
        }
        if self.k == 0 || self.batch_size == 0 || self.epochs == 0 {
            return bad("mixmatch k, batch_size and epochs must be ≥ 1");
        }
        if !(self.learning_rate > 0.0 && self.eta_min >= 0.0 && self.eta_min <= self.learning_rate)
        {
            return bad("mixmatch learning rates must satisfy 0 ≤ eta_min ≤ lr, lr > 0");
        }
        if !(self.reg.lambda_lu >= 0.0 && self.reg.lambda_uu >= 0.0) {
            return bad("graph weights must be ≥ 0");
        }
        if !(0.0..1.0).contains(&self.tau_c) {
            return bad("tau_c must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must be in [0, 1)");
        }
        self.augmentation.validate()
    }
}

/// Per-class position lists into `TransferredLabels::labeled`.
#[derive(Clone, Debug, PartialEq)]
pub struct BalancedSampler {
    per_class: Vec<Vec<usize>>,
    represented: Vec<usize>,
}

impl BalancedSampler {
    pub fn new(transfer: &TransferredLabels) -> Result<Self> {
        if transfer.labeled.is_empty() {
            return Err(Error::Empty(
                "class-balanced sampling from an empty L".into(),
            ));
        }
        let mut per_class = vec![Vec::new(); transfer.classes];
        for (pos, e) in transfer.labeled.iter().enumerate() {
            let list = per_class
                .get_mut(e.label)
                .ok_or_else(|| Error::format("label", format!("{} out of range", e.label)))?;
            list.push(pos);
        }
        let represented = (0..transfer.classes)
            .filter(|&c| !per_class[c].is_empty())
            .collect();
        Ok(Self {
            per_class,
            represented,
        })
    }

    pub fn class_lists(&self) -> &[Vec<usize>] {
        &self.per_class
    }

    /// Each draw picks a represented class uniformly, then an entry of that
    /// class uniformly (with replacement).
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<usize> {
        (0..batch)
            .map(|_| {
                let c = self.represented[rng.random_range(0..self.represented.len())];
                let list = &self.per_class[c];
                list[rng.random_range(0..list.len())]
            })
            .collect()
    }
}

/// Unlabeled candidates: indices and feature rows only.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledBatch {
    pub indices: Vec<usize>,
    pub x: Matrix,
}

/// Uniform draws (with replacement) over every sample of `x`.
pub fn sample_u_candidates<R: Rng + ?Sized>(
    x: &Matrix,
    batch: usize,
    rng: &mut R,
) -> Result<UnlabeledBatch> {
    if x.rows() == 0 {
        return Err(Error::Empty("no candidates for unlabeled sampling".into()));
    }
    let indices: Vec<usize> = (0..batch).map(|_| rng.random_range(0..x.rows())).collect();
    Ok(UnlabeledBatch {
        x: x.select_rows(&indices),
        indices,
    })
}

/// `sharpen(mean_k p(augment_k(x_u)), T)` per row.
pub fn guess_labels<R: Rng + ?Sized>(
    params: &MlpParams,
    x_u: &Matrix,
    k: usize,
    temperature: f64,
    augmentation: &AugmentationSpec,
    rng: &mut R,
) -> Result<Matrix> {
    if k == 0 {
        return Err(Error::InvalidConfig("label guessing needs k ≥ 1".into()));
    }
    let views: Vec<Matrix> = (0..k)
        .map(|_| augment_rows(x_u, augmentation, rng))
        .collect();
    guess_from_views(params, &views, temperature)
}

fn guess_from_views(params: &MlpParams, views: &[Matrix], temperature: f64) -> Result<Matrix> {
    let mut mean = Matrix::zeros(views[0].rows(), params.classes().unwrap_or(0));
    for v in views {
        mean.add_scaled_assign(&params.probabilities(v)?, 1.0 / views.len() as f64);
    }
    let mut out = Vec::with_capacity(mean.data().len());
    for row in mean.row_iter() {
        out.extend(sharpen(row, temperature)?);
    }
    Matrix::new(mean.rows(), mean.cols(), out)
}

/// `λ ~ Beta(α, α)` folded to `λ' = max(λ, 1 − λ)`.
pub fn sample_mix_weight<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::InvalidConfig(format!("mixup alpha {alpha}: {e}")))?;
    let lam: f64 = beta.sample(rng);
    Ok(lam.max(1.0 - lam))
}

/// Convex combination with weight `lam` on the first argument.
pub fn mixup_with(
    x1: &[f64],
    y1: &[f64],
    x2: &[f64],
    y2: &[f64],
    lam: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mix = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(p, q)| lam * p + (1.0 - lam) * q)
            .collect()
    };
    (mix(x1, x2), mix(y1, y2))
}

pub fn mixup<R: Rng + ?Sized>(
    x1: &[f64],
    y1: &[f64],
    x2: &[f64],
    y2: &[f64],
    alpha: f64,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if x1.len() != x2.len() || y1.len() != y2.len() {
        return Err(Error::Shape("mixup operands differ in length".into()));
    }
    Ok(mixup_with(x1, y1, x2, y2, sample_mix_weight(alpha, rng)?))
}

/// One step's inputs: the mixed MixMatch batch (labeled rows first) and,
/// when the graph penalty is on, the un-mixed joint batch with its graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage3Batch {
    pub mixed_x: Matrix,
    pub mixed_y: Matrix,
    pub n_labeled: usize,
    pub graph: Option<(Matrix, NeighborGraph)>,
}

/// Loss components recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub sup: Var,
    pub unsup: Option<Var>,
    pub graph: Option<Var>,
}

/// Labeled rows `(x, y)` and unlabeled rows, augmented and mixed.
pub fn mix_batch<R: Rng + ?Sized>(
    guess_model: &MlpParams,
    labeled_x: &Matrix,
    labeled_y: &Matrix,
    unlabeled_x: &Matrix,
    config: &MixMatchConfig,
    rng: &mut R,
) -> Result<(Matrix, Matrix)> {
    if labeled_x.rows() == 0 {
        return Err(Error::Empty("labeled batch".into()));
    }
    let x_l = augment_rows(labeled_x, &config.augmentation, rng);
    let (mut xs, mut ys) = (vec![x_l], vec![labeled_y.clone()]);
    if unlabeled_x.rows() > 0 {
        let views: Vec<Matrix> = (0..config.k)
            .map(|_| augment_rows(unlabeled_x, &config.augmentation, rng))
            .collect();
        let q = guess_from_views(guess_model, &views, config.temperature)?;
        for v in views {
            xs.push(v);
            ys.push(q.clone());
        }
    }
    let x_all = Matrix::vstack(&xs.iter().collect::<Vec<_>>())?;
    let y_all = Matrix::vstack(&ys.iter().collect::<Vec<_>>())?;
    let mut perm: Vec<usize> = (0..x_all.rows()).collect();
    perm.shuffle(rng);
    let lam = sample_mix_weight(config.alpha, rng)?;
    let (mut mx, mut my) = (Vec::new(), Vec::new());
    for (i, &j) in perm.iter().enumerate() {
        let (a, b) = mixup_with(x_all.row(i), y_all.row(i), x_all.row(j), y_all.row(j), lam);
        mx.extend(a);
        my.extend(b);
    }
    Ok((
        Matrix::new(x_all.rows(), x_all.cols(), mx)?,
        Matrix::new(y_all.rows(), y_all.cols(), my)?,
    ))
}

/// `L_sup + λ_u·L_unsup + R` on the tape.
pub fn stage3_loss(
    tape: &mut Tape,
    net: &BoundMlp,
    batch: &Stage3Batch,
    config: &MixMatchConfig,
) -> Result<LossVars> {
    let n_l = batch.n_labeled;
    let n = batch.mixed_x.rows();
    if n_l == 0 || n_l > n {
        return Err(Error::Shape(format!(
            "{n_l} labeled rows in a batch of {n}"
        )));
    }
    let lab: Vec<usize> = (0..n_l).collect();
    let unl: Vec<usize> = (n_l..n).collect();

    let x_l = tape.constant(batch.mixed_x.select_rows(&lab));
    let (_, f_l) = net.forward(tape, x_l)?;
    let sup = tape_cross_entropy(tape, f_l, &batch.mixed_y.select_rows(&lab))?;
    let mut total = sup;

    let unsup = if unl.is_empty() {
        None
    } else {
        let x_u = tape.constant(batch.mixed_x.select_rows(&unl));
        let (_, f_u) = net.forward(tape, x_u)?;
        let p_u = tape.softmax(f_u);
        let l = tape_mean_squared(tape, p_u, &batch.mixed_y.select_rows(&unl))?;
        let weighted = tape.scale(l, config.lambda_u);
        total = tape.add(total, weighted)?;
        Some(l)
    };

    let graph = match &batch.graph {
        Some((x_joint, g)) => {
            let x = tape.constant(x_joint.clone());
            let (_, f) = net.forward(tape, x)?;
            let r = tape_graph_regularizer(tape, f, g, config.temperature, config.reg)?;
            total = tape.add(total, r)?;
            Some(r)
        }
        None => None,
    };
    Ok(LossVars {
        total,
        sup,
        unsup,
        graph,
    })
}

/// Loss values of one freshly drawn MixMatch batch, without the graph term.
pub fn mixmatch_losses<R: Rng + ?Sized>(
    params: &MlpParams,
    labeled_x: &Matrix,
    labeled_y: &Matrix,
    unlabeled_x: &Matrix,
    config: &MixMatchConfig,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let (mixed_x, mixed_y) = mix_batch(params, labeled_x, labeled_y, unlabeled_x, config, rng)?;
    let batch = Stage3Batch {
        mixed_x,
        mixed_y,
        n_labeled: labeled_x.rows(),
        graph: None,
    };
    let mut tape = Tape::new();
    let net = BoundMlp {
        encoder: crate::numnet::BoundStack::bind(&mut tape, &params.encoder, false),
        classifier: crate::numnet::BoundStack::bind(&mut tape, &params.classifier, false),
    };
    let vars = stage3_loss(&mut tape, &net, &batch, config)?;
    Ok((
        tape.scalar(vars.sup),
        vars.unsup.map_or(0.0, |v| tape.scalar(v)),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage3Epoch {
    pub epoch: usize,
    pub test_acc: f64,
    pub test_acc_ema: f64,
    /// Means over the epoch's steps.
    pub l_sup: f64,
    pub l_unsup: f64,
    pub r_graph: f64,
}

#[derive(Clone, Debug)]
pub struct Stage3Output {
    pub params: MlpParams,
    pub ema: MlpParams,
    pub log: Vec<Stage3Epoch>,
}

/// Draws one step's batch.
struct BatchSource<'a> {
    transfer: &'a TransferredLabels,
    train: &'a LabeledDataset,
    sampler: Option<BalancedSampler>,
    graph_z: Option<Matrix>,
}

impl BatchSource<'_> {
    fn draw(
        &self,
        guess_model: &MlpParams,
        config: &MixMatchConfig,
        rng: &mut SeededRng,
    ) -> Result<Stage3Batch> {
        let b = config.batch_size;
        let positions = match &self.sampler {
            Some(s) => s.sample(b, rng),
            None => (0..b)
                .map(|_| rng.random_range(0..self.transfer.labeled.len()))
                .collect(),
        };
        let entries: Vec<_> = positions
            .iter()
            .map(|&p| self.transfer.labeled[p])
            .collect();
        let l_idx: Vec<usize> = entries.iter().map(|e| e.index).collect();
        let l_y = Matrix::new(
            b,
            self.transfer.classes,
            entries
                .iter()
                .flat_map(|e| one_hot(e.label, self.transfer.classes))
                .collect(),
        )?;
        let l_x = self.train.x.select_rows(&l_idx);

        let u_idx: Vec<usize> = if config.use_cbs {
            sample_u_candidates(&self.train.x, b, rng)?.indices
        } else if self.transfer.unlabeled.is_empty() {
            Vec::new()
        } else {
            let u = &self.transfer.unlabeled;
            (0..b).map(|_| u[rng.random_range(0..u.len())]).collect()
        };
        let u_x = self.train.x.select_rows(&u_idx);
        let (mixed_x, mixed_y) = mix_batch(guess_model, &l_x, &l_y, &u_x, config, rng)?;

        let graph = match &self.graph_z {
            Some(z_all) => {
                let joint: Vec<usize> = l_idx.iter().chain(&u_idx).copied().collect();
                let mut roles: Vec<NodeRole> = (0..b)
                    .map(|r| NodeRole::Labeled(l_y.row(r).to_vec()))
                    .collect();
                roles.resize(joint.len(), NodeRole::Unlabeled);
                let g =
                    build_neighbor_graph_isolating_zeros(&z_all.select_rows(&joint), config.tau_c)?
                        .with_roles(roles)?;
                Some((self.train.x.select_rows(&joint), g))
            }
            None => None,
        };
        Ok(Stage3Batch {
            mixed_x,
            mixed_y,
            n_labeled: b,
            graph,
        })
    }
}

/// Retrains encoder and classifier from `init`. `graph_z` holds one row of
/// graph node features per training sample, computed once by a frozen
/// network (normally the Stage-1 projection); it is required when the graph
/// penalty is on.
pub fn train_stage3(
    init: &MlpParams,
    graph_z: Option<&Matrix>,
    transfer: &TransferredLabels,
    train: &LabeledDataset,
    test: &LabeledDataset,
    config: &MixMatchConfig,
    seed: u64,
) -> Result<Stage3Output> {
    config.validate()?;
    init.validate()?;
    transfer.validate(train.len())?;
    if transfer.labeled.is_empty() {
        return Err(Error::Empty("stage 3 needs a non-empty L".into()));
    }
    if test.is_empty() {
        return Err(Error::Empty("stage 3 test set".into()));
    }
    let source = BatchSource {
        transfer,
        train,
        sampler: config
            .use_cbs
            .then(|| BalancedSampler::new(transfer))
            .transpose()?,
        graph_z: if config.use_gsr {
            match graph_z {
                Some(z) if z.rows() == train.len() => Some(z.clone()),
                Some(z) => {
                    return Err(Error::Shape(format!(
                        "{} graph rows for {} training samples",
                        z.rows(),
                        train.len()
                    )))
                }
                None => {
                    return Err(Error::InvalidConfig(
                        "use_gsr needs graph node features".into(),
                    ))
                }
            }
        } else {
            None
        },
    };

    let mut rng = seeded_rng(seed);
    let mut params = init.clone();
    let mut ema = EmaState::new(&params, config.ema_decay)?;
    let mut opt = OptState::adam(config.learning_rate)?;
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * steps_per_epoch;
    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let (mut s_sup, mut s_unsup, mut s_r) = (0.0, 0.0, 0.0);
        for _ in 0..steps_per_epoch {
            let guess_model = if config.guess_with_ema {
                &ema.shadow
            } else {
                &params
            };
            let batch = source.draw(guess_model, config, &mut rng)?;
            let mut parts = (0.0, 0.0, 0.0);
            let (_, g) = grad(&params, Trainable::ALL, |tape, net| {
                let v = stage3_loss(tape, net, &batch, config)?;
                parts = (
                    tape.scalar(v.sup),
                    v.unsup.map_or(0.0, |u| tape.scalar(u)),
                    v.graph.map_or(0.0, |r| tape.scalar(r)),
                );
                Ok(v.total)
            })?;
            opt.set_learning_rate(
                cosine_lr(step, total_steps, config.learning_rate, config.eta_min)?
                    .max(f64::MIN_POSITIVE),
            )?;
            opt.step(&mut params, &g)?;
            ema.update(&params)?;
            s_sup += parts.0;
            s_unsup += parts.1;
            s_r += parts.2;
            step += 1;
        }
        let n = steps_per_epoch as f64;
        log.push(Stage3Epoch {
            epoch,
            test_acc: accuracy(&predict(&params.probabilities(&test.x)?), &test.y_clean),
            test_acc_ema: accuracy(&predict(&ema.shadow.probabilities(&test.x)?), &test.y_clean),
            l_sup: s_sup / n,
            l_unsup: s_unsup / n,
            r_graph: s_r / n,
        });
    }
    Ok(Stage3Output {
        params,
        ema: ema.shadow,
        log,
    })
}
