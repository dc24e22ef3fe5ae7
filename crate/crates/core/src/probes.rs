//! Token-position linear probes: multinomial logistic regression on patch
//! token representations, trained with Adam on mean cross-entropy.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::activations::ActivationBlock;
use crate::error::{Error, Result};
use crate::factorization::FactorSet;
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeSource {
    Raw,
    Content,
}

impl ProbeSource {
    pub fn name(self) -> &'static str {
        match self {
            ProbeSource::Raw => "raw",
            ProbeSource::Content => "content",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub source: ProbeSource,
    pub layer: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Fraction of examples held out for evaluation. `None` trains and
    /// evaluates on every token.
    pub holdout_fraction: Option<f64>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            source: ProbeSource::Raw,
            layer: 0,
            learning_rate: 1e-2,
            batch_size: 8192,
            epochs: 20,
            seed: 0,
            holdout_fraction: None,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Argument(format!(
                "probe needs positive learning rate, batch size and epochs (got {}, {}, {})",
                self.learning_rate, self.batch_size, self.epochs
            )));
        }
        if let Some(f) = self.holdout_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Argument(format!("holdout fraction {f} outside (0, 1)")));
            }
        }
        Ok(())
    }
}

/// One example per patch token, image-major then grid order.
/// `labels[i]` is the zero-based grid position of row `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

/// Patch rows of the raw activations.
pub fn raw_dataset(block: &ActivationBlock) -> ProbeDataset {
    let patches: Vec<usize> = block.layout.patch_tokens().collect();
    let mut data = Vec::with_capacity(block.num_images * patches.len() * block.dim);
    let mut labels = Vec::with_capacity(block.num_images * patches.len());
    for n in 0..block.num_images {
        for (p, &t) in patches.iter().enumerate() {
            data.extend_from_slice(block.token(n, t));
            labels.push(p);
        }
    }
    ProbeDataset {
        features: Matrix::from_vec(labels.len(), block.dim, data).expect("dataset shape"),
        labels,
        num_classes: patches.len(),
    }
}

/// Patch rows of the content factor. `num_special` tells which of the
/// factor set's tokens are patches.
pub fn content_dataset(factors: &FactorSet, num_special: usize) -> Result<ProbeDataset> {
    let rows: Vec<(usize, usize)> = factors
        .tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| t >= num_special)
        .map(|(j, &t)| (j, t - num_special))
        .collect();
    if rows.is_empty() {
        return Err(Error::Argument("factor set holds no patch tokens".into()));
    }
    let mut data = Vec::with_capacity(factors.num_images * rows.len() * factors.dim);
    let mut labels = Vec::with_capacity(factors.num_images * rows.len());
    for n in 0..factors.num_images {
        for &(j, p) in &rows {
            data.extend_from_slice(factors.content_row(n, j));
            labels.push(p);
        }
    }
    Ok(ProbeDataset {
        features: Matrix::from_vec(labels.len(), factors.dim, data)?,
        labels,
        num_classes: rows.len(),
    })
}

/// Linear softmax classifier: `logits = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    /// `[classes, d]`
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl LinearProbe {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            weights: Matrix::zeros(classes, dim),
            bias: vec![0.0; classes],
        }
    }

    pub fn logits(&self, x: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.bias[c] + crate::linalg::dot(self.weights.row(c), x);
        }
    }

    /// Highest logit, first class on ties.
    pub fn predict(&self, x: &[f64]) -> usize {
        let mut logits = vec![0.0; self.bias.len()];
        self.logits(x, &mut logits);
        let mut best = 0;
        for (c, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = c;
            }
        }
        best
    }

    fn num_params(&self) -> usize {
        self.bias.len() * (self.weights.cols() + 1)
    }
}

/// Flattened gradient: weights row-major, then bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeGradient {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Mean cross-entropy over `rows` and its analytic gradient.
pub fn loss_and_gradient(probe: &LinearProbe, data: &ProbeDataset, rows: &[usize]) -> (f64, ProbeGradient) {
    let classes = probe.bias.len();
    let dim = probe.weights.cols();
    let mut gw = Matrix::zeros(classes, dim);
    let mut gb = vec![0.0; classes];
    let mut loss = 0.0;
    let mut logits = vec![0.0; classes];
    for &i in rows {
        let x = data.features.row(i);
        let y = data.labels[i];
        probe.logits(x, &mut logits);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for l in logits.iter_mut() {
            *l = libm::exp(*l - max);
            z += *l;
        }
        loss += libm::log(z) - libm::log(logits[y]);
        for c in 0..classes {
            let residual = logits[c] / z - if c == y { 1.0 } else { 0.0 };
            gb[c] += residual;
            for (g, xv) in gw.row_mut(c).iter_mut().zip(x) {
                *g += residual * xv;
            }
        }
    }
    let inv = 1.0 / rows.len().max(1) as f64;
    gw.scale(inv);
    gb.iter_mut().for_each(|g| *g *= inv);
    (loss * inv, ProbeGradient { weights: gw, bias: gb })
}

/// Adam state over a flat parameter vector.
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(lr: f64, params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; params],
            v: vec![0.0; params],
        }
    }

    fn update<'a>(&mut self, params: impl Iterator<Item = (&'a mut f64, f64)>) {
        self.step += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        for (i, (p, g)) in params.enumerate() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            *p -= self.lr * m_hat / (libm::sqrt(v_hat) + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub chance_level: f64,
    /// Fraction of correctly decoded evaluation tokens per grid position
    /// (`None` for positions absent from the evaluation set).
    pub per_position_accuracy: Vec<Option<f64>>,
    pub final_loss: f64,
    pub num_train: usize,
    pub num_eval: usize,
    /// Classes without any training example.
    pub missing_classes: Vec<usize>,
    pub probe: LinearProbe,
}

fn shuffle(rows: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..rows.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        rows.swap(i, j);
    }
}

/// Train from zero weights and report accuracy. Deterministic given
/// `config.seed`.
pub fn train_probe(data: &ProbeDataset, config: &ProbeConfig) -> Result<ProbeResult> {
    config.validate()?;
    let m = data.labels.len();
    if m == 0 || data.num_classes == 0 {
        return Err(Error::Argument("probe dataset is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut train, eval): (Vec<usize>, Vec<usize>) = match config.holdout_fraction {
        None => ((0..m).collect(), (0..m).collect()),
        Some(f) => {
            let mut all: Vec<usize> = (0..m).collect();
            shuffle(&mut all, &mut rng);
            let held = libm::round((m as f64) * f).clamp(1.0, (m - 1) as f64) as usize;
            let eval = all.split_off(m - held);
            (all, eval)
        }
    };
    let mut seen = vec![false; data.num_classes];
    train.iter().for_each(|&i| seen[data.labels[i]] = true);
    let missing_classes = (0..data.num_classes).filter(|&c| !seen[c]).collect();

    let mut probe = LinearProbe::zeros(data.num_classes, data.features.cols());
    let mut adam = Adam::new(config.learning_rate, probe.num_params());
    let mut final_loss = f64::NAN;
    for epoch in 0..config.epochs {
        shuffle(&mut train, &mut rng);
        for (step, batch) in train.chunks(config.batch_size).enumerate() {
            let (loss, grad) = loss_and_gradient(&probe, data, batch);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            final_loss = loss;
            let LinearProbe { weights, bias } = &mut probe;
            let params = weights
                .as_mut_slice()
                .iter_mut()
                .zip(grad.weights.as_slice().iter().copied())
                .chain(bias.iter_mut().zip(grad.bias.iter().copied()));
            adam.update(params);
        }
    }

    let mut correct = vec![0usize; data.num_classes];
    let mut total = vec![0usize; data.num_classes];
    for &i in &eval {
        let y = data.labels[i];
        total[y] += 1;
        if probe.predict(data.features.row(i)) == y {
            correct[y] += 1;
        }
    }
    let hits: usize = correct.iter().sum();
    Ok(ProbeResult {
        accuracy: hits as f64 / eval.len() as f64,
        chance_level: 1.0 / data.num_classes as f64,
        per_position_accuracy: correct
            .iter()
            .zip(&total)
            .map(|(&c, &t)| (t > 0).then(|| c as f64 / t as f64))
            .collect(),
        final_loss,
        num_train: train.len(),
        num_eval: eval.len(),
        missing_classes,
        probe,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(classes: usize, repeats: usize) -> ProbeDataset {
        let mut labels = Vec::new();
        let mut data = Vec::new();
        for _ in 0..repeats {
            for c in 0..classes {
                labels.push(c);
                data.extend((0..classes).map(|k| if k == c { 1.0 } else { 0.0 }));
            }
        }
        ProbeDataset {
            features: Matrix::from_vec(labels.len(), classes, data).unwrap(),
            labels,
            num_classes: classes,
        }
    }

    #[test]
    fn one_hot_positions_are_decoded() {
        let r = train_probe(&one_hot(6, 3), &ProbeConfig::default()).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(r.missing_classes.is_empty());
    }

    #[test]
    fn constant_features_sit_at_chance() {
        let mut d = one_hot(5, 4);
        d.features = Matrix::from_fn(d.labels.len(), 3, |_, _| 1.0);
        let r = train_probe(&d, &ProbeConfig::default()).unwrap();
        assert!((r.accuracy - 0.2).abs() < 1e-12);
        assert_eq!(r.chance_level, 0.2);
    }

    #[test]
    fn deterministic_for_seed() {
        let d = one_hot(4, 5);
        let cfg = ProbeConfig {
            batch_size: 3,
            epochs: 2,
            seed: 9,
            ..ProbeConfig::default()
        };
        let a = train_probe(&d, &cfg).unwrap();
        let b = train_probe(&d, &cfg).unwrap();
        assert_eq!(a.probe, b.probe);
    }

    #[test]
    fn holdout_splits_examples() {
        let cfg = ProbeConfig {
            holdout_fraction: Some(0.25),
            ..ProbeConfig::default()
        };
        let r = train_probe(&one_hot(4, 4), &cfg).unwrap();
        assert_eq!((r.num_train, r.num_eval), (12, 4));
    }

    #[test]
    fn invalid_configs_rejected() {
        let d = one_hot(2, 1);
        for cfg in [
            ProbeConfig { learning_rate: 0.0, ..ProbeConfig::default() },
            ProbeConfig { batch_size: 0, ..ProbeConfig::default() },
            ProbeConfig { holdout_fraction: Some(1.5), ..ProbeConfig::default() },
        ] {
            assert!(matches!(train_probe(&d, &cfg), Err(Error::Argument(_))));
        }
    }

    #[test]
    fn divergence_is_reported() {
        let mut d = one_hot(3, 2);
        d.features = Matrix::from_fn(6, 3, |_, _| f64::INFINITY);
        assert!(matches!(train_probe(&d, &ProbeConfig::default()), Err(Error::Diverged { .. })));
    }
}
