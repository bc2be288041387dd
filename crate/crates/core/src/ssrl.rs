//! Label-free encoder training with the NT-Xent contrastive loss over pairs
//! of augmented views.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentationSpec, LabeledDataset};
use crate::numnet::{
    cosine_lr, dot, stack_forward, BoundStack, Dense, Matrix, OptState, Tape, Var,
};
use crate::{seeded_rng, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    /// Samples per batch; each contributes two views.
    pub batch_size: usize,
    pub epochs: usize,
    pub augmentation: AugmentationSpec,
    pub learning_rate: f64,
    pub eta_min: f64,
    /// Encoder widths after the input dimension.
    pub hidden: Vec<usize>,
    /// Output width of the linear projection head.
    pub projection_dim: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            batch_size: 256,
            epochs: 200,
            augmentation: AugmentationSpec::default(),
            learning_rate: 1e-3,
            eta_min: 2e-4,
            hidden: vec![64, 64],
            projection_dim: 32,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(
                "contrastive temperature must be > 0".into(),
            ));
        }
        if self.batch_size < 4 {
            return Err(Error::InvalidConfig(
                "contrastive batch_size must be ≥ 4".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig(
                "contrastive epochs must be ≥ 1".into(),
            ));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) || self.projection_dim == 0 {
            return Err(Error::InvalidConfig(
                "encoder widths must be positive".into(),
            ));
        }
        self.augmentation.validate()
    }
}

/// Encoder plus the projection head used only by the contrastive loss.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveModel {
    pub encoder: Vec<Dense>,
    pub head: Vec<Dense>,
}

impl ContrastiveModel {
    /// Representation beneath the head.
    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        embed(&self.encoder, x)
    }

    /// Projection-head output, the space the contrastive loss shapes.
    pub fn project(&self, x: &Matrix) -> Result<Matrix> {
        stack_forward(&self.head, &self.embed(x)?, false)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: f64,
}

/// NT-Xent value and gradient with respect to the (unnormalized) projected
/// rows. Rows `2k` and `2k+1` are the two views of sample `k`.
pub fn nt_xent_with_grad(zproj: &Matrix, temperature: f64) -> Result<(f64, Matrix)> {
    let n = zproj.rows();
    if n < 4 || n % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "NT-Xent needs an even number of rows ≥ 4, got {n}"
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "temperature {temperature} must be > 0"
        )));
    }
    let k = zproj.cols();
    let norms: Vec<f64> = zproj.row_iter().map(|r| dot(r, r).sqrt()).collect();
    if let Some(i) = norms.iter().position(|&v| v == 0.0) {
        return Err(Error::Degenerate(format!(
            "projected row {i} has zero norm"
        )));
    }
    let mut u = zproj.clone();
    for (i, &norm) in norms.iter().enumerate() {
        for v in u.row_mut(i) {
            *v /= norm;
        }
    }
    let sim = u.matmul_nt(&u);

    // g = ∂L/∂S scaled by 1/t, i.e. ∂L/∂(u_a·u_b).
    let scale = 1.0 / (n as f64 * temperature);
    let mut g = Matrix::zeros(n, n);
    let mut total = 0.0;
    let mut logits = vec![0.0; n];
    for a in 0..n {
        let pos = a ^ 1;
        let row = sim.row(a);
        let mut max = f64::NEG_INFINITY;
        for b in 0..n {
            if b != a {
                logits[b] = row[b] / temperature;
                max = max.max(logits[b]);
            }
        }
        let mut sum = 0.0;
        for b in 0..n {
            if b != a {
                logits[b] = (logits[b] - max).exp();
                sum += logits[b];
            }
        }
        total += -(row[pos] / temperature - max) + sum.ln();
        let g_row = g.row_mut(a);
        for b in 0..n {
            if b != a {
                g_row[b] = scale * (logits[b] / sum);
            }
        }
        g_row[pos] -= scale;
    }
    let loss = total / n as f64;

    // ∂L/∂U = (G + Gᵀ) U, then through the row normalization.
    let g_sym = {
        let mut s = g.clone();
        s.add_assign(&g.transpose());
        s
    };
    let du = g_sym.matmul(&u)?;
    let mut dz = Matrix::zeros(n, k);
    for i in 0..n {
        let ui = u.row(i);
        let gi = du.row(i);
        let proj = dot(ui, gi);
        for ((d, &uv), &gv) in dz.row_mut(i).iter_mut().zip(ui).zip(gi) {
            *d = (gv - uv * proj) / norms[i];
        }
    }
    Ok((loss, dz))
}

pub fn nt_xent_loss(zproj: &Matrix, temperature: f64) -> Result<f64> {
    nt_xent_with_grad(zproj, temperature).map(|(l, _)| l)
}

pub fn tape_nt_xent(tape: &mut Tape, zproj: Var, temperature: f64) -> Result<Var> {
    let (value, local) = nt_xent_with_grad(tape.value(zproj), temperature)?;
    tape.custom_scalar(zproj, value, local)
}

/// Representation `h(x; θ)` (below the projection head).
pub fn embed(encoder: &[Dense], x: &Matrix) -> Result<Matrix> {
    if let Some(first) = encoder.first() {
        if first.inputs() != x.cols() {
            return Err(Error::Shape(format!(
                "input has {} columns, encoder expects {}",
                x.cols(),
                first.inputs()
            )));
        }
    }
    stack_forward(encoder, x, true)
}

/// Trains encoder and projection head on view pairs of `x`. Only features
/// are consumed. The log starts with an epoch-0 entry holding the loss of
/// the first batch before any update, followed by per-epoch means.
pub fn train_encoder(
    x: &Matrix,
    config: &ContrastiveConfig,
    seed: u64,
) -> Result<(ContrastiveModel, Vec<EpochLoss>)> {
    config.validate()?;
    let n = x.rows();
    if n < 2 {
        return Err(Error::Empty(
            "contrastive training needs at least 2 samples".into(),
        ));
    }
    let mut rng = seeded_rng(seed);
    let mut widths = vec![x.cols()];
    widths.extend_from_slice(&config.hidden);
    let encoder = crate::numnet::init_stack(&widths, &mut rng)?;
    let rep = *widths.last().expect("non-empty widths");
    let head = crate::numnet::init_stack(&[rep, config.projection_dim], &mut rng)?;
    let mut model = ContrastiveModel { encoder, head };

    let batch = config.batch_size.min(n);
    let batches_per_epoch = n.div_ceil(batch);
    let total_steps = config.epochs * batches_per_epoch;
    let mut opt = OptState::adam(config.learning_rate)?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(config.epochs + 1);
    let mut step = 0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut counted = 0;
        for chunk in order.chunks(batch) {
            // A trailing chunk of one sample has no negatives.
            if chunk.len() < 2 {
                continue;
            }
            let mut views = Vec::with_capacity(2 * chunk.len() * x.cols());
            for &i in chunk {
                views.extend(augment(x.row(i), &config.augmentation, &mut rng));
                views.extend(augment(x.row(i), &config.augmentation, &mut rng));
            }
            let views = Matrix::new(2 * chunk.len(), x.cols(), views)?;

            let mut tape = Tape::new();
            let enc = BoundStack::bind(&mut tape, &model.encoder, true);
            let head = BoundStack::bind(&mut tape, &model.head, true);
            let input = tape.constant(views);
            let z = enc.forward(&mut tape, input, true)?;
            let proj = head.forward(&mut tape, z, false)?;
            let loss = tape_nt_xent(&mut tape, proj, config.temperature)?;
            let value = tape.scalar(loss);
            let mut grads = tape.backward(loss)?;
            let g_enc = enc.gradients(&mut grads, &tape);
            let g_head = head.gradients(&mut grads, &tape);

            opt.set_learning_rate(cosine_lr(
                step,
                total_steps,
                config.learning_rate,
                config.eta_min.min(config.learning_rate),
            )?)?;
            let mut p_slices = Vec::new();
            let mut g_slices = Vec::new();
            crate::numnet::collect_slices(
                &mut model.encoder,
                &g_enc,
                &mut p_slices,
                &mut g_slices,
            )?;
            crate::numnet::collect_slices(&mut model.head, &g_head, &mut p_slices, &mut g_slices)?;
            opt.step_slices(&mut p_slices, &g_slices)?;

            if step == 0 {
                log.push(EpochLoss {
                    epoch: 0,
                    loss: value,
                });
            }
            step += 1;
            epoch_loss += value;
            counted += 1;
        }
        log.push(EpochLoss {
            epoch,
            loss: epoch_loss / counted.max(1) as f64,
        });
    }
    Ok((model, log))
}

/// [`train_encoder`] over a dataset's features; labels are never read.
pub fn train_encoder_on(
    ds: &LabeledDataset,
    config: &ContrastiveConfig,
    seed: u64,
) -> Result<(ContrastiveModel, Vec<EpochLoss>)> {
    train_encoder(&ds.x, config, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn closed_form_four_row_case() {
        let z = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ])
        .unwrap();
        let l = nt_xent_loss(&z, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((l - -(e / (e + 2.0)).ln()).abs() < 1e-12);
        assert!((l - 0.5514).abs() < 1e-4);
    }

    #[test]
    fn identical_rows_give_log_of_candidates() {
        let z = Matrix::filled(6, 3, 0.7);
        let l = nt_xent_loss(&z, 0.5).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
        assert!(nt_xent_loss(&Matrix::filled(2, 3, 1.0), 0.5).is_err());
        assert!(nt_xent_loss(&Matrix::zeros(4, 3), 0.5).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = seeded_rng(2);
        let z = Matrix::new(8, 3, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (_, g) = nt_xent_with_grad(&z, 0.5).unwrap();
        for i in 0..24 {
            let h = 1e-6;
            let mut up = z.clone();
            let mut dn = z.clone();
            up.data_mut()[i] += h;
            dn.data_mut()[i] -= h;
            let fd =
                (nt_xent_loss(&up, 0.5).unwrap() - nt_xent_loss(&dn, 0.5).unwrap()) / (2.0 * h);
            assert!(
                (fd - g.data()[i]).abs() < 1e-7,
                "{i}: {fd} vs {}",
                g.data()[i]
            );
        }
    }

    proptest! {
        #[test]
        fn nonnegative_scale_and_pair_permutation_invariant(
            vals in prop::collection::vec(0.05f64..1.0, 24),
            scale in 0.1f64..10.0,
            t in 0.1f64..2.0,
        ) {
            let z = Matrix::new(8, 3, vals).unwrap();
            let base = nt_xent_loss(&z, t).unwrap();
            prop_assert!(base >= 0.0);
            let scaled = z.map(|v| v * scale);
            prop_assert!((nt_xent_loss(&scaled, t).unwrap() - base).abs() < 1e-10);
            // Swap pairs 0 and 2, and the two views inside pair 1.
            let perm = [4, 5, 3, 2, 0, 1, 6, 7];
            let permuted = z.select_rows(&perm);
            prop_assert!((nt_xent_loss(&permuted, t).unwrap() - base).abs() < 1e-10);
        }
    }

    #[test]
    fn embed_checks_width_and_is_pure() {
        let mut rng = seeded_rng(0);
        let enc = crate::numnet::init_stack(&[3, 5], &mut rng).unwrap();
        let x = Matrix::from_rows(&[vec![0.1, 0.2, 0.3], vec![0.1, 0.2, 0.3]]).unwrap();
        let z = embed(&enc, &x).unwrap();
        assert_eq!(z.row(0), z.row(1));
        assert_eq!(embed(&enc, &x).unwrap(), z);
        assert!(embed(&enc, &Matrix::zeros(1, 4)).is_err());
        let id = vec![Dense {
            weight: Matrix::identity(3),
            bias: vec![0.0; 3],
        }];
        assert_eq!(embed(&id, &x).unwrap(), x);
    }
}
