//! Minimal differentiable numeric core: matrices, a reverse-mode tape, a
//! ReLU multilayer perceptron split into encoder and classifier, optimizers,
//! the cosine learning-rate schedule and parameter EMA.

mod matrix;
mod mlp;
mod optim;
mod tape;

pub use matrix::Matrix;
pub use mlp::{
    grad, mlp_forward, stack_forward, BoundMlp, BoundStack, Dense, Gradients, MlpParams, Trainable,
};
pub use optim::{cosine_lr, EmaState, OptKind, OptState};
pub use tape::{Tape, TapeGrads, Var};

pub(crate) use matrix::{dot, softmax_in_place};
pub(crate) use mlp::init_stack;
pub(crate) use optim::collect as collect_slices;

use crate::{Error, Result};

/// Floor applied to probabilities before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Numerically stable softmax of one logit vector.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Empty("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// `−Σ yₖ log max(pₖ, 1e-12)`.
pub fn cross_entropy(p: &[f64], y: &[f64]) -> Result<f64> {
    if p.len() != y.len() {
        return Err(Error::Shape(format!(
            "cross_entropy over {} probabilities and {} targets",
            p.len(),
            y.len()
        )));
    }
    Ok(p.iter()
        .zip(y)
        .map(|(&pk, &yk)| {
            if yk == 0.0 {
                0.0
            } else {
                -yk * pk.max(LOG_FLOOR).ln()
            }
        })
        .sum())
}

/// Argmax per row, ties going to the lowest class index.
pub fn predict(probs: &Matrix) -> Vec<usize> {
    probs.row_iter().map(argmax).collect()
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

pub fn one_hot(label: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[label] = 1.0;
    v
}

pub fn one_hot_matrix(labels: &[usize], classes: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), classes);
    for (r, &l) in labels.iter().enumerate() {
        m.set(r, l, 1.0);
    }
    m
}

/// Mean soft-target cross-entropy of row-wise `softmax(logits)` against
/// `targets`, recorded on the tape as a function of the logits.
pub fn tape_cross_entropy(tape: &mut Tape, logits: Var, targets: &Matrix) -> Result<Var> {
    let f = tape.value(logits);
    if f.shape() != targets.shape() {
        return Err(Error::Shape(format!(
            "logits {:?} vs targets {:?}",
            f.shape(),
            targets.shape()
        )));
    }
    let n = f.rows().max(1) as f64;
    let p = f.softmax_rows();
    let mut local = Matrix::zeros(f.rows(), f.cols());
    let mut total = 0.0;
    for r in 0..f.rows() {
        let pr = p.row(r);
        let yr = targets.row(r);
        // Clamped entries are constant, so only unclamped classes feed the gradient.
        let mut active_mass = 0.0;
        for (&pk, &yk) in pr.iter().zip(yr) {
            if yk != 0.0 {
                total -= yk * pk.max(LOG_FLOOR).ln();
                if pk >= LOG_FLOOR {
                    active_mass += yk;
                }
            }
        }
        for (k, g) in local.row_mut(r).iter_mut().enumerate() {
            let own = if pr[k] >= LOG_FLOOR { yr[k] } else { 0.0 };
            *g = (pr[k] * active_mass - own) / n;
        }
    }
    tape.custom_scalar(logits, total / n, local)
}

/// Mean over rows of `‖input_r − target_r‖²`.
pub fn tape_mean_squared(tape: &mut Tape, input: Var, targets: &Matrix) -> Result<Var> {
    let x = tape.value(input);
    if x.shape() != targets.shape() {
        return Err(Error::Shape(format!(
            "input {:?} vs targets {:?}",
            x.shape(),
            targets.shape()
        )));
    }
    let n = x.rows().max(1) as f64;
    let mut local = x.clone();
    local.add_scaled_assign(targets, -1.0);
    let total: f64 = local.data().iter().map(|d| d * d).sum();
    let local = local.map(|d| 2.0 * d / n);
    tape.custom_scalar(input, total / n, local)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let big = softmax(&[1000.0, 0.0]).unwrap();
        assert!((big[0] - 1.0).abs() < 1e-12 && big[1] >= 0.0 && big[1] < 1e-300);
        // exp(k) / (e + e² + e³) evaluated by hand.
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        for (a, b) in p.iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((a - b).abs() < 1e-5);
        }
        assert!(softmax(&[f64::NAN, 1.0]).is_err());
        assert!(softmax(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        assert!(cross_entropy(&[1.0, 0.0], &[1.0, 0.0]).unwrap().abs() < 1e-15);
        let ce = cross_entropy(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-12);
        let soft = cross_entropy(&[0.25, 0.75], &[0.5, 0.5]).unwrap();
        assert!((soft - 0.5 * (-(0.25f64).ln() - (0.75f64).ln())).abs() < 1e-12);
        assert!((soft - 0.8370).abs() < 1e-4);
        assert!(cross_entropy(&[0.5, 0.5], &[1.0]).is_err());
        // Clamped zero probability stays finite.
        assert!((cross_entropy(&[0.0, 1.0], &[1.0, 0.0]).unwrap() - 1e12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn predict_ties_and_basic() {
        let m = Matrix::from_rows(&[vec![0.1, 0.9], vec![0.5, 0.5]]).unwrap();
        assert_eq!(predict(&m), vec![1, 0]);
    }

    fn brute_argmax(row: &[f64]) -> usize {
        // Exhaustive: the first index no other entry strictly beats.
        (0..row.len())
            .find(|&i| row.iter().all(|&v| v <= row[i]))
            .unwrap()
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(logits in prop::collection::vec(-1e3f64..1e3, 1..12)) {
            let p = softmax(&logits).unwrap();
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn predict_matches_scan_and_is_shift_invariant(
            logits in prop::collection::vec(-50f64..50.0, 2..8),
            shift in -100f64..100.0,
        ) {
            let p = softmax(&logits).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let q = softmax(&shifted).unwrap();
            prop_assert_eq!(argmax(&p), brute_argmax(&p));
            prop_assert_eq!(argmax(&logits), argmax(&shifted));
            prop_assert_eq!(argmax(&p), argmax(&logits));
            prop_assert_eq!(argmax(&q), argmax(&p));
        }

        #[test]
        fn one_hot_cross_entropy_is_negative_log(p0 in 1e-9f64..1.0, t in 0usize..2) {
            let p = [p0, 1.0 - p0];
            let ce = cross_entropy(&p, &one_hot(t, 2)).unwrap();
            prop_assert_eq!(ce, -p[t].max(LOG_FLOOR).ln());
        }
    }

    #[test]
    fn tape_losses_match_difference_quotients() {
        let logits = Matrix::from_rows(&[vec![0.2, -0.4, 1.1], vec![2.0, 0.1, -1.0]]).unwrap();
        let targets = Matrix::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.3, 0.3, 0.4]]).unwrap();
        let ce = |l: &Matrix| {
            let p = l.softmax_rows();
            (0..2)
                .map(|r| cross_entropy(p.row(r), targets.row(r)).unwrap())
                .sum::<f64>()
                / 2.0
        };
        let mse = |l: &Matrix| {
            let p = l.softmax_rows();
            p.data()
                .iter()
                .zip(targets.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / 2.0
        };
        for which in 0..2 {
            let mut tape = Tape::new();
            let x = tape.leaf(logits.clone());
            let out = if which == 0 {
                tape_cross_entropy(&mut tape, x, &targets).unwrap()
            } else {
                let p = tape.softmax(x);
                tape_mean_squared(&mut tape, p, &targets).unwrap()
            };
            let f: &dyn Fn(&Matrix) -> f64 = if which == 0 { &ce } else { &mse };
            assert!((tape.scalar(out) - f(&logits)).abs() < 1e-14);
            let g = tape.backward(out).unwrap().get(x, &tape);
            for i in 0..logits.data().len() {
                let h = 1e-6;
                let mut up = logits.clone();
                let mut dn = logits.clone();
                up.data_mut()[i] += h;
                dn.data_mut()[i] -= h;
                let fd = (f(&up) - f(&dn)) / (2.0 * h);
                assert!((fd - g.data()[i]).abs() < 1e-8, "{which} {i}");
            }
        }
    }
}
