use std::f64::consts::PI;

use super::mlp::{Dense, Gradients, MlpParams};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptKind {
    /// `buf ← μ·buf + g; p ← p − lr·buf`.
    Sgd { momentum: f64 },
    /// Bias-corrected Adam.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// Optimizer state. Moment buffers are created on the first step and are
/// aligned with the order of the parameter slices passed to
/// [`OptState::step_slices`], which must stay the same between steps.
#[derive(Clone, Debug)]
pub struct OptState {
    pub kind: OptKind,
    learning_rate: f64,
    steps: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptState {
    pub fn new(kind: OptKind, learning_rate: f64) -> Result<Self> {
        check_lr(learning_rate)?;
        Ok(Self {
            kind,
            learning_rate,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn sgd(learning_rate: f64, momentum: f64) -> Result<Self> {
        Self::new(OptKind::Sgd { momentum }, learning_rate)
    }

    /// Adam with β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn adam(learning_rate: f64) -> Result<Self> {
        Self::new(
            OptKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            learning_rate,
        )
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) -> Result<()> {
        check_lr(lr)?;
        self.learning_rate = lr;
        Ok(())
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step_slices(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::Shape(format!(
                    "tensor {i}: {} vs {}",
                    p.len(),
                    g.len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient tensor {i}")));
            }
        }
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            if matches!(self.kind, OptKind::Adam { .. }) {
                self.second = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            }
        } else if self.first.len() != grads.len()
            || self
                .first
                .iter()
                .zip(grads)
                .any(|(b, g)| b.len() != g.len())
        {
            return Err(Error::Shape(
                "optimizer buffers do not match parameters".into(),
            ));
        }

        self.steps += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptKind::Sgd { momentum } => {
                for ((p, g), buf) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((pv, &gv), bv) in p.iter_mut().zip(*g).zip(buf.iter_mut()) {
                        *bv = momentum * *bv + gv;
                        *pv -= lr * *bv;
                    }
                }
            }
            OptKind::Adam { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((pv, &gv), mv), vv) in
                        p.iter_mut().zip(*g).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        let m_hat = *mv / c1;
                        let v_hat = *vv / c2;
                        *pv -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Steps the groups present in `grads`.
    pub fn step(&mut self, params: &mut MlpParams, grads: &Gradients) -> Result<()> {
        let mut p_slices: Vec<&mut [f64]> = Vec::new();
        let mut g_slices: Vec<&[f64]> = Vec::new();
        if let Some(g) = &grads.encoder {
            collect(&mut params.encoder, g, &mut p_slices, &mut g_slices)?;
        }
        if let Some(g) = &grads.classifier {
            collect(&mut params.classifier, g, &mut p_slices, &mut g_slices)?;
        }
        self.step_slices(&mut p_slices, &g_slices)
    }
}

fn check_lr(lr: f64) -> Result<()> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "learning rate must be > 0, got {lr}"
        )));
    }
    Ok(())
}

pub(crate) fn collect<'a>(
    params: &'a mut [Dense],
    grads: &'a [Dense],
    p_out: &mut Vec<&'a mut [f64]>,
    g_out: &mut Vec<&'a [f64]>,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!(
            "{} layers but {} layer gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        p_out.push(p.weight.data_mut());
        p_out.push(&mut p.bias);
        g_out.push(g.weight.data());
        g_out.push(&g.bias);
    }
    Ok(())
}

/// `eta_min + ½(lr0 − eta_min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, eta_min: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidConfig(
            "cosine schedule with zero total steps".into(),
        ));
    }
    if step > total_steps {
        return Err(Error::InvalidConfig(format!(
            "step {step} beyond schedule length {total_steps}"
        )));
    }
    if lr0 < eta_min {
        return Err(Error::InvalidConfig(format!(
            "lr0 {lr0} below eta_min {eta_min}"
        )));
    }
    let progress = step as f64 / total_steps as f64;
    Ok(eta_min + 0.5 * (lr0 - eta_min) * (1.0 + (PI * progress).cos()))
}

/// Exponential moving average of a parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub shadow: MlpParams,
    decay: f64,
}

impl EmaState {
    /// Shadow starts as a copy of `params`.
    pub fn new(params: &MlpParams, decay: f64) -> Result<Self> {
        Self::with_shadow(params.clone(), decay)
    }

    pub fn with_shadow(shadow: MlpParams, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::InvalidConfig(format!(
                "EMA decay {decay} outside [0, 1)"
            )));
        }
        Ok(Self { shadow, decay })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    /// `shadow ← decay·shadow + (1 − decay)·params`.
    pub fn update(&mut self, params: &MlpParams) -> Result<()> {
        let d = self.decay;
        if self.shadow.encoder.len() != params.encoder.len()
            || self.shadow.classifier.len() != params.classifier.len()
        {
            return Err(Error::Shape("EMA shadow does not mirror parameters".into()));
        }
        let pairs = self
            .shadow
            .encoder
            .iter_mut()
            .zip(&params.encoder)
            .chain(self.shadow.classifier.iter_mut().zip(&params.classifier));
        for (s, p) in pairs {
            if s.weight.shape() != p.weight.shape() || s.bias.len() != p.bias.len() {
                return Err(Error::Shape("EMA shadow does not mirror parameters".into()));
            }
            for (sv, &pv) in s.weight.data_mut().iter_mut().zip(p.weight.data()) {
                *sv = d * *sv + (1.0 - d) * pv;
            }
            for (sv, &pv) in s.bias.iter_mut().zip(&p.bias) {
                *sv = d * *sv + (1.0 - d) * pv;
            }
        }
        Ok(())
    }
}
