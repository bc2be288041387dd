//! The encoder/classifier network and its gradient entry point.
//!
//! Every layer is affine, `y = x·W + b` with `W` stored `in × out`. Encoder
//! layers are all followed by ReLU, so the representation is non-negative;
//! the classifier applies ReLU between its layers but not after the last one.

use std::hash::{DefaultHasher, Hasher};

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::matrix::Matrix;
use super::tape::{Tape, TapeGrads, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    /// He-uniform weights, zero bias.
    pub fn he_uniform<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        let limit = (6.0 / inputs as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let data = (0..inputs * outputs).map(|_| dist.sample(rng)).collect();
        Ok(Self {
            weight: Matrix::from_raw(inputs, outputs, data),
            bias: vec![0.0; outputs],
        })
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Matrix::zeros(inputs, outputs),
            bias: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        x.matmul(&self.weight)?.add_row(&self.bias)
    }
}

/// Builds a stack of layers over the given widths, e.g. `[d, 64, 64]`.
pub(crate) fn init_stack<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Vec<Dense>> {
    if widths.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "a layer stack needs at least two widths, got {widths:?}"
        )));
    }
    widths
        .windows(2)
        .map(|w| Dense::he_uniform(w[0], w[1], rng))
        .collect()
}

pub(crate) fn check_chain(layers: &[Dense], what: &str) -> Result<()> {
    for (i, pair) in layers.windows(2).enumerate() {
        if pair[0].outputs() != pair[1].inputs() {
            return Err(Error::Shape(format!(
                "{what} layer {i} emits {} but layer {} expects {}",
                pair[0].outputs(),
                i + 1,
                pair[1].inputs()
            )));
        }
    }
    for (i, l) in layers.iter().enumerate() {
        if l.bias.len() != l.outputs() {
            return Err(Error::Shape(format!("{what} layer {i} bias length")));
        }
    }
    Ok(())
}

/// Plain (tape-free) forward pass through a layer stack.
pub fn stack_forward(layers: &[Dense], x: &Matrix, relu_last: bool) -> Result<Matrix> {
    let mut h = x.clone();
    for (i, layer) in layers.iter().enumerate() {
        h = layer.forward(&h)?;
        if relu_last || i + 1 < layers.len() {
            h = h.map(|v| v.max(0.0));
        }
    }
    Ok(h)
}

/// Encoder `h(·; θ)` and classifier `g(·; W)` parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub encoder: Vec<Dense>,
    pub classifier: Vec<Dense>,
}

impl MlpParams {
    /// `encoder_widths` like `[d, 64, 64]`, `classifier_widths` like `[64, C]`.
    pub fn init<R: Rng + ?Sized>(
        encoder_widths: &[usize],
        classifier_widths: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if encoder_widths.last() != classifier_widths.first() {
            return Err(Error::InvalidConfig(format!(
                "encoder output {:?} does not feed classifier input {:?}",
                encoder_widths.last(),
                classifier_widths.first()
            )));
        }
        let encoder = init_stack(encoder_widths, rng)?;
        let classifier = init_stack(classifier_widths, rng)?;
        Ok(Self {
            encoder,
            classifier,
        })
    }

    pub fn validate(&self) -> Result<()> {
        check_chain(&self.encoder, "encoder")?;
        check_chain(&self.classifier, "classifier")?;
        if let (Some(e), Some(c)) = (self.encoder.last(), self.classifier.first()) {
            if e.outputs() != c.inputs() {
                return Err(Error::Shape(format!(
                    "encoder emits {} but classifier expects {}",
                    e.outputs(),
                    c.inputs()
                )));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.encoder.first().map(Dense::inputs)
    }

    pub fn classes(&self) -> Option<usize> {
        self.classifier.last().map(Dense::outputs)
    }

    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        stack_forward(&self.encoder, x, true)
    }

    pub fn logits_from_embedding(&self, z: &Matrix) -> Result<Matrix> {
        stack_forward(&self.classifier, z, false)
    }

    pub fn probabilities(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.logits_from_embedding(&self.embed(x)?)?.softmax_rows())
    }

    /// Deterministic digest of every parameter bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for layer in self.encoder.iter().chain(&self.classifier) {
            h.write_usize(layer.inputs());
            h.write_usize(layer.outputs());
            for v in layer.weight.data().iter().chain(&layer.bias) {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }
}

/// `(Z, F, P)`: representation, logits and row-wise softmax.
pub fn mlp_forward(params: &MlpParams, x: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
    if let Some(d) = params.input_dim() {
        if x.cols() != d {
            return Err(Error::Shape(format!(
                "input has {} columns, encoder expects {d}",
                x.cols()
            )));
        }
    }
    let z = params.embed(x)?;
    let f = params.logits_from_embedding(&z)?;
    let p = f.softmax_rows();
    Ok((z, f, p))
}

/// Parameter handles of a layer stack bound onto a tape.
pub struct BoundStack {
    layers: Vec<(Var, Var)>,
}

impl BoundStack {
    pub fn bind(tape: &mut Tape, layers: &[Dense], trainable: bool) -> Self {
        let layers = layers
            .iter()
            .map(|l| {
                let bias = Matrix::from_raw(1, l.bias.len(), l.bias.clone());
                if trainable {
                    (tape.leaf(l.weight.clone()), tape.leaf(bias))
                } else {
                    (tape.constant(l.weight.clone()), tape.constant(bias))
                }
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, relu_last: bool) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let xw = tape.matmul(h, w)?;
            h = tape.add_row(xw, b)?;
            if relu_last || i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn gradients(&self, grads: &mut TapeGrads, tape: &Tape) -> Vec<Dense> {
        self.layers
            .iter()
            .map(|&(w, b)| Dense {
                weight: grads.take(w, tape),
                bias: grads.take(b, tape).into_data(),
            })
            .collect()
    }
}

pub struct BoundMlp {
    pub encoder: BoundStack,
    pub classifier: BoundStack,
}

impl BoundMlp {
    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.encoder.forward(tape, x, true)
    }

    pub fn classify(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        self.classifier.forward(tape, z, false)
    }

    /// `(Z, F)` on the tape.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let z = self.encode(tape, x)?;
        let f = self.classify(tape, z)?;
        Ok((z, f))
    }
}

/// Which parameter groups receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub encoder: bool,
    pub classifier: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable {
        encoder: true,
        classifier: true,
    };
    pub const CLASSIFIER: Trainable = Trainable {
        encoder: false,
        classifier: true,
    };
    pub const ENCODER: Trainable = Trainable {
        encoder: true,
        classifier: false,
    };
}

/// Gradients mirroring [`MlpParams`]; frozen groups are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub encoder: Option<Vec<Dense>>,
    pub classifier: Option<Vec<Dense>>,
}

/// Evaluates `loss` on a fresh tape with `params` bound and returns the loss
/// value with its gradients for the trainable groups.
pub fn grad<F>(params: &MlpParams, trainable: Trainable, loss: F) -> Result<(f64, Gradients)>
where
    F: FnOnce(&mut Tape, &BoundMlp) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = BoundMlp {
        encoder: BoundStack::bind(&mut tape, &params.encoder, trainable.encoder),
        classifier: BoundStack::bind(&mut tape, &params.classifier, trainable.classifier),
    };
    let out = loss(&mut tape, &bound)?;
    let value = tape.scalar(out);
    let mut grads = tape.backward(out)?;
    let encoder = trainable
        .encoder
        .then(|| bound.encoder.gradients(&mut grads, &tape));
    let classifier = trainable
        .classifier
        .then(|| bound.classifier.gradients(&mut grads, &tape));
    Ok((
        value,
        Gradients {
            encoder,
            classifier,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numnet::{one_hot_matrix, tape_cross_entropy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn identity_encoder_passes_input_through() {
        let params = MlpParams {
            encoder: vec![Dense {
                weight: Matrix::identity(3),
                bias: vec![0.0; 3],
            }],
            classifier: vec![Dense::zeros(3, 4)],
        };
        let x = Matrix::from_rows(&[vec![0.5, 1.0, 2.0], vec![0.0, 3.0, 0.25]]).unwrap();
        let (z, f, p) = mlp_forward(&params, &x).unwrap();
        assert_eq!(z, x);
        assert_eq!(f, Matrix::zeros(2, 4));
        assert!(p.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let params = MlpParams::init(&[4, 8], &[8, 3], &mut rng(0)).unwrap();
        let x = Matrix::zeros(2, 5);
        assert!(matches!(mlp_forward(&params, &x), Err(Error::Shape(_))));
        assert!(MlpParams::init(&[4, 8], &[7, 3], &mut rng(0)).is_err());
    }

    #[test]
    fn seeded_forward_is_bitwise_reproducible() {
        let a = MlpParams::init(&[5, 16, 16], &[16, 3], &mut rng(7)).unwrap();
        let b = MlpParams::init(&[5, 16, 16], &[16, 3], &mut rng(7)).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let x = Matrix::new(4, 5, (0..20).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let (z1, f1, p1) = mlp_forward(&a, &x).unwrap();
        let (z2, f2, p2) = mlp_forward(&b, &x).unwrap();
        let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&z1), bits(&z2));
        assert_eq!(bits(&f1), bits(&f2));
        assert_eq!(bits(&p1), bits(&p2));
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let params = MlpParams::init(&[3, 4], &[4, 2], &mut rng(1)).unwrap();
        let (v, g) = grad(&params, Trainable::ALL, |tape, _| {
            Ok(tape.constant(Matrix::scalar(3.5)))
        })
        .unwrap();
        assert_eq!(v, 3.5);
        for layer in g.encoder.unwrap().iter().chain(&g.classifier.unwrap()) {
            assert!(layer.weight.data().iter().all(|&x| x == 0.0));
            assert!(layer.bias.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn half_squared_norm_gradient_is_the_weight() {
        let params = MlpParams::init(&[3, 4], &[4, 2], &mut rng(2)).unwrap();
        let (_, g) = grad(&params, Trainable::CLASSIFIER, |tape, bound| {
            let w = bound.classifier.layers[0].0;
            let s = tape.sum_squares(w);
            Ok(tape.scale(s, 0.5))
        })
        .unwrap();
        assert!(g.encoder.is_none());
        assert_eq!(g.classifier.unwrap()[0].weight, params.classifier[0].weight);
    }

    #[test]
    fn frozen_encoder_is_omitted_but_still_used() {
        let params = MlpParams::init(&[3, 4], &[4, 2], &mut rng(3)).unwrap();
        let x = Matrix::new(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let y = one_hot_matrix(&[0, 1], 2);
        let loss = |tape: &mut Tape, b: &BoundMlp| {
            let xv = tape.constant(x.clone());
            let (_, f) = b.forward(tape, xv)?;
            tape_cross_entropy(tape, f, &y)
        };
        let (v_all, g_all) = grad(&params, Trainable::ALL, loss).unwrap();
        let (v_cls, g_cls) = grad(&params, Trainable::CLASSIFIER, loss).unwrap();
        assert_eq!(v_all, v_cls);
        assert!(g_cls.encoder.is_none());
        assert_eq!(g_all.classifier, g_cls.classifier);
    }
}
