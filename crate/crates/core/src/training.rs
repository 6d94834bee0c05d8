//! Minibatch SGD for the two pipelines: an autoencoder trained from pixels
//! and a linear hash head on frozen features.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{balance_regularizer, bce_reconstruction, cosine_preservation, LossValue};
use crate::models::{Architecture, Checkpoint, Gradients, Model, Network, TrainingMeta};
use crate::numerics::{Matrix, RngStream};
use crate::quantizers::{Quantizer, QuantizerConfig, QuantizerVariant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Replaces the `3 / (N K)` rule for the bi-half proxy scale.
    pub gamma_override: Option<f64>,
    /// Weight of the balance regularizer; turns `Sign` into sign+reg.
    pub alpha: f64,
    pub lr_drop_factor: f64,
    pub plateau_patience: usize,
    /// Plateaus tolerated with a learning-rate drop; the next one stops training.
    pub max_lr_drops: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            gamma_override: None,
            alpha: 0.0,
            lr_drop_factor: 10.0,
            plateau_patience: 5,
            max_lr_drops: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, variant: QuantizerVariant) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::invalid(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 || (variant == QuantizerVariant::BiHalf && self.batch_size < 2) {
            return Err(Error::invalid(format!("batch size {} too small for {}", self.batch_size, variant.name())));
        }
        if !(self.lr_drop_factor >= 1.0) || !self.lr_drop_factor.is_finite() {
            return Err(Error::invalid(format!("lr drop factor must be >= 1, got {}", self.lr_drop_factor)));
        }
        if self.plateau_patience == 0 {
            return Err(Error::invalid("plateau patience must be at least one epoch"));
        }
        if let Some(g) = self.gamma_override {
            if !(g >= 0.0) || !g.is_finite() {
                return Err(Error::invalid(format!("gamma override must be finite and >= 0, got {g}")));
            }
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if self.alpha > 0.0 && variant != QuantizerVariant::Sign {
            return Err(Error::invalid(format!(
                "the balance regularizer only applies to the sign quantizer, not {}",
                variant.name()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training objective (primary loss plus weighted regularizer).
    pub loss: f64,
    /// Mean reconstruction or cosine loss alone.
    pub primary_loss: f64,
    /// Mean bit entropy of the training-time codes of the whole epoch.
    pub mean_entropy: f64,
    pub lr: f64,
    pub batches: usize,
    /// Batches in which every bit had exactly `⌈M/2⌉` positives.
    pub balanced_batches: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub gamma: f64,
    pub n_train: usize,
    pub stopped_on_plateau: bool,
    pub checkpoint_path: Option<PathBuf>,
    pub wall_clock_seconds: f64,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    pub fn entropies(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_entropy).collect()
    }

    pub fn all_batches_balanced(&self) -> bool {
        self.epochs.iter().all(|e| e.balanced_batches == e.batches)
    }
}

/// `v ← μ v + g + λ p`, then `p ← p − lr · v`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Shape {
            op: "sgd_step",
            expected: (params.len(), 1),
            got: (grads.len(), velocity.len()),
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("sgd_step gradient"));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum buffers for one network, laid out like its layers.
struct Sgd {
    velocity: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Sgd {
    fn new(net: &Network) -> Self {
        Self {
            velocity: net
                .layers()
                .iter()
                .map(|l| (vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]))
                .collect(),
        }
    }

    fn step(&mut self, net: &mut Network, grads: &Gradients, cfg: &TrainConfig, lr: f64) -> Result<()> {
        for ((layer, g), (vw, vb)) in net.layers_mut().iter_mut().zip(&grads.layers).zip(&mut self.velocity) {
            sgd_step(layer.weight.as_mut_slice(), g.weight.as_slice(), vw, lr, cfg.momentum, cfg.weight_decay)?;
            sgd_step(&mut layer.bias, &g.bias, vb, lr, cfg.momentum, cfg.weight_decay)?;
        }
        Ok(())
    }
}

/// "No new best for `patience` epochs" learning-rate schedule.
struct Plateau {
    best: f64,
    since_best: usize,
    drops: usize,
}

enum PlateauAction {
    Continue,
    Drop,
    Stop,
}

impl Plateau {
    fn new() -> Self {
        Self {
            best: f64::INFINITY,
            since_best: 0,
            drops: 0,
        }
    }

    fn observe(&mut self, loss: f64, cfg: &TrainConfig) -> PlateauAction {
        if loss < self.best {
            self.best = loss;
            self.since_best = 0;
            return PlateauAction::Continue;
        }
        self.since_best += 1;
        if self.since_best < cfg.plateau_patience {
            return PlateauAction::Continue;
        }
        self.since_best = 0;
        if self.drops < cfg.max_lr_drops {
            self.drops += 1;
            PlateauAction::Drop
        } else {
            PlateauAction::Stop
        }
    }
}

/// Per-epoch accumulator of losses and code statistics.
struct EpochStats {
    loss: f64,
    primary: f64,
    batches: usize,
    balanced: usize,
    positives: Vec<usize>,
    items: usize,
}

impl EpochStats {
    fn new(bits: usize) -> Self {
        Self {
            loss: 0.0,
            primary: 0.0,
            batches: 0,
            balanced: 0,
            positives: vec![0; bits],
            items: 0,
        }
    }

    fn record(&mut self, objective: f64, primary: f64, codes: &Matrix) {
        self.loss += objective;
        self.primary += primary;
        self.batches += 1;
        let m = codes.rows();
        let mut batch_pos = vec![0usize; codes.cols()];
        for row in codes.row_iter() {
            for (c, &v) in batch_pos.iter_mut().zip(row) {
                *c += usize::from(v > 0.0);
            }
        }
        let half = m.div_ceil(2);
        self.balanced += usize::from(batch_pos.iter().all(|&c| c == half));
        for (total, c) in self.positives.iter_mut().zip(batch_pos) {
            *total += c;
        }
        self.items += m;
    }

    fn finish(self, epoch: usize, lr: f64) -> EpochLog {
        let entropy = self
            .positives
            .iter()
            .map(|&c| crate::metrics::binary_entropy(c as f64 / self.items as f64))
            .sum::<f64>()
            / self.positives.len() as f64;
        EpochLog {
            epoch,
            loss: self.loss / self.batches as f64,
            primary_loss: self.primary / self.batches as f64,
            mean_entropy: entropy,
            lr,
            batches: self.batches,
            balanced_batches: self.balanced,
        }
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct Trained {
    pub report: TrainReport,
    pub checkpoint: Checkpoint,
}

/// One optimization step's outcome: objective, primary loss, training codes.
struct StepOutput {
    objective: f64,
    primary: f64,
    codes: Matrix,
}

fn finite_loss(loss: &LossValue, epoch: usize, step: usize, what: &str) -> Result<()> {
    if loss.value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            epoch,
            step,
            detail: format!("{what} is {}", loss.value),
        })
    }
}

/// Adds the weighted balance penalty on `U` when `alpha > 0`.
fn regularize(u: &Matrix, grad_u: &mut Matrix, alpha: f64) -> Result<f64> {
    if alpha == 0.0 {
        return Ok(0.0);
    }
    let reg = balance_regularizer(u)?;
    grad_u.add_scaled(&reg.grad, alpha)?;
    Ok(alpha * reg.value)
}

/// Everything a step mutates.
struct Learner {
    model: Model,
    quantizer: Quantizer,
    encoder_opt: Sgd,
    decoder_opt: Option<Sgd>,
}

impl Learner {
    fn new(model: Model, quantizer: Quantizer) -> Self {
        Self {
            encoder_opt: Sgd::new(&model.encoder),
            decoder_opt: model.decoder.as_ref().map(Sgd::new),
            model,
            quantizer,
        }
    }

    fn apply(&mut self, encoder: &Gradients, decoder: Option<&Gradients>, cfg: &TrainConfig, lr: f64) -> Result<()> {
        self.encoder_opt.step(&mut self.model.encoder, encoder, cfg, lr)?;
        if let (Some(opt), Some(net), Some(g)) = (self.decoder_opt.as_mut(), self.model.decoder.as_mut(), decoder) {
            opt.step(net, g, cfg, lr)?;
        }
        Ok(())
    }
}

struct Pipeline<'a> {
    dataset: &'a Dataset,
    cfg: &'a TrainConfig,
    learner: Learner,
    gamma: f64,
}

fn setup(dataset: &Dataset, arch: &Architecture, quantizer: QuantizerConfig, cfg: &TrainConfig) -> Result<(Model, Quantizer, f64, RngStream)> {
    cfg.validate(quantizer.variant)?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if dataset.dim() != arch.input_dim() {
        return Err(Error::Mismatch(format!(
            "dataset has dimension {}, architecture expects {}",
            dataset.dim(),
            arch.input_dim()
        )));
    }
    if cfg.batch_size > dataset.len() {
        return Err(Error::invalid(format!(
            "batch size {} exceeds the {} training items",
            cfg.batch_size,
            dataset.len()
        )));
    }
    let mut qcfg = quantizer;
    let gamma = if qcfg.variant == QuantizerVariant::BiHalf {
        cfg.gamma_override
            .unwrap_or_else(|| QuantizerConfig::default_gamma(dataset.len(), arch.bits()))
    } else {
        0.0
    };
    qcfg.gamma = gamma;
    let root = RngStream::new(cfg.seed);
    let model = Model::init(arch.clone(), &mut root.fork(1))?;
    let quantizer = Quantizer::new(qcfg, arch.bits())?;
    Ok((model, quantizer, gamma, root.fork(2)))
}

impl Pipeline<'_> {
    fn run(
        mut self,
        mut shuffle_rng: RngStream,
        mut step: impl FnMut(&mut Learner, &Matrix, usize, usize, f64) -> Result<StepOutput>,
    ) -> Result<Trained> {
        let started = Instant::now();
        let cfg = self.cfg;
        let n = self.dataset.len();
        let bits = self.learner.model.bits();
        let mut lr = cfg.lr;
        let mut plateau = Plateau::new();
        let mut epochs = Vec::new();
        let mut stopped = false;
        let mut global_step = 0usize;
        for epoch in 0..cfg.epochs {
            let order = shuffle_rng.permutation(n);
            let mut stats = EpochStats::new(bits);
            for batch in order.chunks_exact(cfg.batch_size) {
                let x = self.dataset.items.select_rows(batch);
                let out = step(&mut self.learner, &x, epoch, global_step, lr)?;
                stats.record(out.objective, out.primary, &out.codes);
                global_step += 1;
            }
            let log = stats.finish(epoch, lr);
            let action = plateau.observe(log.loss, cfg);
            epochs.push(log);
            match action {
                PlateauAction::Continue => {}
                PlateauAction::Drop => lr /= cfg.lr_drop_factor,
                PlateauAction::Stop => {
                    stopped = true;
                    break;
                }
            }
        }
        let meta = TrainingMeta {
            epoch: epochs.len(),
            seed: cfg.seed,
            loss_history: epochs.iter().map(|e| e.loss).collect(),
            n_train: n,
            learning_rate: lr,
        };
        let Learner { model, quantizer, .. } = self.learner;
        let checkpoint = Checkpoint {
            model,
            quantizer: quantizer.config().clone(),
            ema: quantizer.ema_state().cloned(),
            meta,
        };
        Ok(Trained {
            report: TrainReport {
                epochs,
                gamma: self.gamma,
                n_train: n,
                stopped_on_plateau: stopped,
                checkpoint_path: None,
                wall_clock_seconds: started.elapsed().as_secs_f64(),
            },
            checkpoint,
        })
    }
}

/// Trains encoder and decoder end to end on binary cross-entropy
/// reconstruction through the quantizer.
pub fn train_autoencoder(
    dataset: &Dataset,
    arch: &Architecture,
    quantizer: QuantizerConfig,
    cfg: &TrainConfig,
) -> Result<Trained> {
    if !matches!(arch, Architecture::Autoencoder { .. }) {
        return Err(Error::invalid("train_autoencoder needs an autoencoder architecture"));
    }
    if dataset.items.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("autoencoder inputs must lie in [0, 1]"));
    }
    let (model, quantizer, gamma, rng) = setup(dataset, arch, quantizer, cfg)?;
    let alpha = cfg.alpha;
    let pipeline = Pipeline {
        dataset,
        cfg,
        learner: Learner::new(model, quantizer),
        gamma,
    };
    pipeline.run(rng, |learner, x, epoch, step, lr| {
        let enc = learner.model.encoder.forward(x)?;
        let u = enc.output();
        let b = learner.quantizer.forward_train(u)?;
        let decoder = learner.model.decoder.as_ref().expect("autoencoder has a decoder");
        let dec = decoder.forward(&b)?;
        let loss = bce_reconstruction(dec.output(), x)?;
        finite_loss(&loss, epoch, step, "reconstruction loss")?;
        let (dec_grads, grad_b) = decoder.backward(&dec, &loss.grad, true)?;
        let mut grad_u = learner.quantizer.backward(&grad_b.expect("requested"), u, &b)?;
        let reg = regularize(u, &mut grad_u, alpha)?;
        let (enc_grads, _) = learner.model.encoder.backward(&enc, &grad_u, false)?;
        if !dec_grads.is_finite() || !enc_grads.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step,
                detail: "non-finite gradient".into(),
            });
        }
        learner.apply(&enc_grads, Some(&dec_grads), cfg, lr)?;
        Ok(StepOutput {
            objective: loss.value + reg,
            primary: loss.value,
            codes: b,
        })
    })
}

/// Trains a linear hash head so that code cosines track feature cosines.
pub fn train_feature_head(
    features: &Dataset,
    arch: &Architecture,
    quantizer: QuantizerConfig,
    cfg: &TrainConfig,
) -> Result<Trained> {
    if !matches!(arch, Architecture::LinearHead { .. }) {
        return Err(Error::invalid("train_feature_head needs a linear-head architecture"));
    }
    let (model, quantizer, gamma, rng) = setup(features, arch, quantizer, cfg)?;
    let alpha = cfg.alpha;
    let pipeline = Pipeline {
        dataset: features,
        cfg,
        learner: Learner::new(model, quantizer),
        gamma,
    };
    pipeline.run(rng, |learner, x, epoch, step, lr| {
        let enc = learner.model.encoder.forward(x)?;
        let u = enc.output();
        let b = learner.quantizer.forward_train(u)?;
        let loss = cosine_preservation(x, &b)?;
        finite_loss(&loss, epoch, step, "cosine loss")?;
        let mut grad_u = learner.quantizer.backward(&loss.grad, u, &b)?;
        let reg = regularize(u, &mut grad_u, alpha)?;
        let (grads, _) = learner.model.encoder.backward(&enc, &grad_u, false)?;
        if !grads.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step,
                detail: "non-finite gradient".into(),
            });
        }
        learner.apply(&grads, None, cfg, lr)?;
        Ok(StepOutput {
            objective: loss.value + reg,
            primary: loss.value,
            codes: b,
        })
    })
}

/// Continuous features `U` of `items`, computed `chunk` rows at a time.
pub fn features(checkpoint: &Checkpoint, items: &Matrix, chunk: usize) -> Result<Matrix> {
    if chunk == 0 {
        return Err(Error::invalid("chunk size must be positive"));
    }
    if items.cols() != checkpoint.model.architecture.input_dim() {
        return Err(Error::Mismatch(format!(
            "items have dimension {}, checkpoint expects {}",
            items.cols(),
            checkpoint.model.architecture.input_dim()
        )));
    }
    let mut data = Vec::with_capacity(items.rows() * checkpoint.model.bits());
    for start in (0..items.rows()).step_by(chunk) {
        let end = (start + chunk).min(items.rows());
        data.extend(checkpoint.model.features(&items.row_range(start, end))?.into_vec());
    }
    Matrix::new(items.rows(), checkpoint.model.bits(), data)
}

/// Deterministic ±1 inference codes of `items`.
pub fn encode(checkpoint: &Checkpoint, items: &Matrix, chunk: usize) -> Result<Matrix> {
    if items.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    let u = features(checkpoint, items, chunk)?;
    let quantizer = Quantizer::with_state(checkpoint.quantizer.clone(), checkpoint.ema.clone())?;
    quantizer.encode(&u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_clusters;

    #[test]
    fn sgd_examples() {
        let mut w = [1.0];
        let mut v = [0.0];
        sgd_step(&mut w, &[0.5], &mut v, 0.1, 0.0, 0.0).unwrap();
        assert!((w[0] - 0.95).abs() < 1e-15);

        let mut w = [0.3, -2.0];
        let mut v = [0.0; 2];
        sgd_step(&mut w, &[0.0; 2], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(w, [0.3, -2.0]);

        let mut w = [0.0];
        let mut v = [0.0];
        sgd_step(&mut w, &[1.0], &mut v, 1.0, 0.9, 0.0).unwrap();
        sgd_step(&mut w, &[1.0], &mut v, 1.0, 0.9, 0.0).unwrap();
        assert!((w[0] + 2.9).abs() < 1e-15);

        assert!(matches!(
            sgd_step(&mut w, &[f64::NAN], &mut v, 1.0, 0.0, 0.0),
            Err(Error::NonFinite(_))
        ));
        assert!(sgd_step(&mut w, &[1.0, 2.0], &mut v, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut w = [2.0];
        let mut v = [0.0];
        sgd_step(&mut w, &[0.0], &mut v, 0.5, 0.0, 0.1).unwrap();
        assert!((w[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn default_gamma_rule() {
        assert!((QuantizerConfig::default_gamma(60_000, 16) - 3.125e-6).abs() < 1e-18);
    }

    fn tiny_pixels(seed: u64) -> Dataset {
        let mut ds = synthetic_clusters(20, 4, 12, 0.2, seed).unwrap();
        ds.items = ds.items.map(crate::models::sigmoid);
        ds
    }

    fn tiny_ae() -> Architecture {
        Architecture::Autoencoder { input_dim: 12, hidden: 10, bits: 6 }
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            lr: 0.05,
            batch_size: 8,
            epochs,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let ds = tiny_pixels(1);
        let cfg = quick(0);
        let out = train_autoencoder(&ds, &tiny_ae(), QuantizerConfig::new(QuantizerVariant::BiHalf), &cfg).unwrap();
        assert!(out.report.epochs.is_empty());
        assert!(out.checkpoint.meta.loss_history.is_empty());
        let init = Model::init(tiny_ae(), &mut RngStream::new(cfg.seed).fork(1)).unwrap();
        assert_eq!(out.checkpoint.model, init);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = tiny_pixels(2);
        let run = |variant| {
            let out = train_autoencoder(&ds, &tiny_ae(), QuantizerConfig::new(variant), &quick(4)).unwrap();
            (out.report.losses(), out.checkpoint.to_bytes().unwrap())
        };
        for variant in [QuantizerVariant::BiHalf, QuantizerVariant::MedianEma, QuantizerVariant::TanhCont] {
            assert_eq!(run(variant), run(variant));
        }
        let feats = synthetic_clusters(10, 3, 8, 0.1, 4).unwrap();
        let head = Architecture::LinearHead { input_dim: 8, bits: 4 };
        let run = || {
            let out = train_feature_head(&feats, &head, QuantizerConfig::new(QuantizerVariant::Sign), &quick(3)).unwrap();
            out.checkpoint.to_bytes().unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn bihalf_batches_are_balanced_and_gamma_follows_rule() {
        let ds = tiny_pixels(3);
        let out = train_autoencoder(&ds, &tiny_ae(), QuantizerConfig::new(QuantizerVariant::BiHalf), &quick(3)).unwrap();
        assert!(out.report.all_batches_balanced());
        assert!(out.report.entropies().iter().all(|&h| h == 1.0));
        assert_eq!(out.report.epochs[0].batches, 80 / 8);
        assert_eq!(out.report.gamma, 3.0 / (80.0 * 6.0));
        assert_eq!(out.checkpoint.quantizer.gamma, out.report.gamma);

        let cfg = TrainConfig {
            gamma_override: Some(0.25),
            ..quick(1)
        };
        let out = train_autoencoder(&ds, &tiny_ae(), QuantizerConfig::new(QuantizerVariant::BiHalf), &cfg).unwrap();
        assert_eq!(out.report.gamma, 0.25);
    }

    #[test]
    fn incomplete_batches_are_dropped() {
        let ds = tiny_pixels(4);
        let cfg = TrainConfig {
            batch_size: 7,
            ..quick(1)
        };
        let out = train_autoencoder(&ds, &tiny_ae(), QuantizerConfig::new(QuantizerVariant::BiHalf), &cfg).unwrap();
        assert_eq!(out.report.epochs[0].batches, 80 / 7);
        assert!(out.report.all_batches_balanced());
    }

    #[test]
    fn feature_head_loss_decreases_on_easy_data() {
        let feats = synthetic_clusters(30, 4, 16, 0.05, 9).unwrap();
        let head = Architecture::LinearHead { input_dim: 16, bits: 8 };
        let cfg = TrainConfig {
            lr: 0.5,
            batch_size: 16,
            epochs: 15,
            seed: 1,
            ..TrainConfig::default()
        };
        let out = train_feature_head(&feats, &head, QuantizerConfig::new(QuantizerVariant::BiHalf), &cfg).unwrap();
        let losses = out.report.losses();
        assert!(losses.iter().all(|&l| l >= 0.0));
        assert!(losses.last().unwrap() < &losses[0], "{losses:?}");
    }

    #[test]
    fn plateau_schedule_only_drops_by_factor() {
        let cfg = TrainConfig {
            plateau_patience: 2,
            max_lr_drops: 2,
            ..TrainConfig::default()
        };
        let mut plateau = Plateau::new();
        let losses = [1.0, 0.5, 0.6, 0.7, 0.8, 0.9, 0.2, 0.3, 0.4];
        let actions: Vec<&str> = losses
            .iter()
            .map(|&l| match plateau.observe(l, &cfg) {
                PlateauAction::Continue => "c",
                PlateauAction::Drop => "d",
                PlateauAction::Stop => "s",
            })
            .collect();
        assert_eq!(actions, ["c", "c", "c", "d", "c", "d", "c", "c", "s"]);

        // a flat loss exhausts the drops and stops the run early
        let ds = tiny_pixels(5);
        let cfg = TrainConfig {
            lr: 1e-12,
            plateau_patience: 1,
            epochs: 20,
            ..quick(20)
        };
        let out = train_autoencoder(&ds, &tiny_ae(), QuantizerConfig::new(QuantizerVariant::Sign), &cfg).unwrap();
        let lrs: Vec<f64> = out.report.epochs.iter().map(|e| e.lr).collect();
        assert!(lrs.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] / cfg.lr_drop_factor));
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn divergence_is_reported() {
        let ds = tiny_pixels(6);
        let cfg = TrainConfig {
            lr: 1e300,
            momentum: 0.0,
            ..quick(3)
        };
        let err = train_autoencoder(&ds, &tiny_ae(), QuantizerConfig::new(QuantizerVariant::Relaxation), &cfg).unwrap_err();
        assert!(err.is_numerical(), "{err}");
    }

    #[test]
    fn invalid_configurations_are_rejected() {
        let ds = tiny_pixels(7);
        let bihalf = QuantizerConfig::new(QuantizerVariant::BiHalf);
        let bad = [
            TrainConfig { lr: 0.0, ..quick(1) },
            TrainConfig { momentum: 1.0, ..quick(1) },
            TrainConfig { batch_size: 1, ..quick(1) },
            TrainConfig { batch_size: 81, ..quick(1) },
            TrainConfig { alpha: 0.1, ..quick(1) },
        ];
        for cfg in &bad {
            assert!(train_autoencoder(&ds, &tiny_ae(), bihalf.clone(), cfg).is_err(), "{cfg:?}");
        }
        let sign_reg = TrainConfig { alpha: 0.1, ..quick(1) };
        assert!(train_autoencoder(&ds, &tiny_ae(), QuantizerConfig::new(QuantizerVariant::Sign), &sign_reg).is_ok());
        let wrong_dim = Architecture::Autoencoder { input_dim: 13, hidden: 4, bits: 2 };
        assert!(matches!(
            train_autoencoder(&ds, &wrong_dim, bihalf.clone(), &quick(1)),
            Err(Error::Mismatch(_))
        ));
        let head = Architecture::LinearHead { input_dim: 12, bits: 4 };
        assert!(train_autoencoder(&ds, &head, bihalf, &quick(1)).is_err());
    }

    #[test]
    fn encoding_is_chunk_independent() {
        let ds = tiny_pixels(8);
        for variant in [QuantizerVariant::BiHalf, QuantizerVariant::MedianEma] {
            let out = train_autoencoder(&ds, &tiny_ae(), QuantizerConfig::new(variant), &quick(2)).unwrap();
            let one = encode(&out.checkpoint, &ds.items, 1).unwrap();
            let all = encode(&out.checkpoint, &ds.items, 256).unwrap();
            assert_eq!(one, all);
            assert!(one.as_slice().iter().all(|&v| v == 1.0 || v == -1.0));
        }
    }
}
