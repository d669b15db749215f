//! Backpropagation training with per-epoch label re-encoding.
//!
//! Each epoch starts by scoring the validation set with the current
//! network, turning its normalized soft-confusion matrix into a cost
//! matrix, moving the generator towards `I − ε·C`, and re-encoding every
//! training label as `L·G`. The epoch then runs ordinary mini-batch SGD on
//! the encoded labels.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::Dataset;
use crate::encoding::{
    cost_matrix, encode_labels, normalize_scm, soft_confusion_matrix, ClassCounts, EncodingMode,
    GeneratorState,
};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::metrics::{self, MetricsBundle};
use crate::network::NetworkParams;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub eta: f64,
    pub mu: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    pub mode: EncodingMode,
    pub seed: u64,
    pub layer_sizes: Vec<usize>,
    /// Batch normalization on the logits, before the softmax.
    pub batch_norm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 0.01,
            mu: 0.5,
            epsilon: 0.5,
            epochs: 30,
            batch_size: 32,
            loss: LossKind::CrossEntropy,
            mode: EncodingMode::Full,
            seed: 0,
            layer_sizes: vec![2, 16, 3],
            batch_norm: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid(format!("eta must be > 0, got {}", self.eta)));
        }
        if !(self.mu > 0.0 && self.mu <= 1.0) {
            return Err(Error::invalid(format!(
                "mu must be in (0, 1], got {}",
                self.mu
            )));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!(
                "epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid(format!(
                "batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if self.layer_sizes.len() < 2 {
            return Err(Error::invalid(
                "layer_sizes needs at least an input and an output size",
            ));
        }
        self.loss.validate(*self.layer_sizes.last().unwrap())
    }

    pub fn num_classes(&self) -> usize {
        self.layer_sizes.last().copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_top1: f64,
    /// Normalized validation SCM that drove this epoch's generator update.
    #[serde(skip)]
    pub val_scm: Matrix,
    /// Generator used to encode this epoch's training labels.
    #[serde(skip)]
    pub generator: Matrix,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// One JSON object per line: `{"epoch":…,"train_loss":…,"val_top1":…}`.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for rec in &self.epochs {
            s.push_str(&serde_json::to_string(rec).expect("finite record"));
            s.push('\n');
        }
        s
    }

    /// The record stream followed by every snapshot in CSV form; equal
    /// histories produce equal bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut s = self.to_jsonl();
        for rec in &self.epochs {
            let _ = writeln!(s, "# epoch {} val_scm", rec.epoch);
            s.push_str(&rec.val_scm.to_csv());
            let _ = writeln!(s, "# epoch {} generator", rec.epoch);
            s.push_str(&rec.generator.to_csv());
        }
        s.into_bytes()
    }
}

fn check_dataset(name: &str, ds: &Dataset, config: &TrainConfig) -> Result<()> {
    let dims = config.layer_sizes[0];
    let n = config.num_classes();
    if ds.dims() != dims {
        return Err(Error::invalid(format!(
            "{name} set has {} features, network expects {dims}",
            ds.dims()
        )));
    }
    if ds.num_classes != n {
        return Err(Error::invalid(format!(
            "{name} set has {} classes, network outputs {n}",
            ds.num_classes
        )));
    }
    Ok(())
}

/// Splits a shuffled order into batches of `batch_size`; a trailing batch
/// of one is merged into the previous batch when batch norm is on.
fn make_batches(order: &[usize], batch_size: usize, batch_norm: bool) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batch_norm && batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

/// Stateful training loop, one [`Trainer::run_epoch`] call per epoch.
pub struct Trainer<'a> {
    config: TrainConfig,
    train: &'a Dataset,
    val: &'a Dataset,
    params: NetworkParams,
    generator: GeneratorState,
    train_onehot: Matrix,
    val_onehot: Matrix,
    val_counts: ClassCounts,
    encoded: Matrix,
    history: TrainHistory,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, train: &'a Dataset, val: &'a Dataset) -> Result<Self> {
        config.validate()?;
        check_dataset("training", train, &config)?;
        check_dataset("validation", val, &config)?;
        if train.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let val_counts = val.counts();
        if let Some(class) = val_counts.first_empty() {
            return Err(Error::EmptyClass { class });
        }
        let params = NetworkParams::init(&config.layer_sizes, config.seed, config.batch_norm)?;
        let generator =
            GeneratorState::new(config.num_classes(), config.mu, config.epsilon, config.mode)?;
        let train_onehot = train.one_hot_labels();
        Ok(Self {
            encoded: train_onehot.clone(),
            train_onehot,
            val_onehot: val.one_hot_labels(),
            val_counts,
            config,
            train,
            val,
            params,
            generator,
            history: TrainHistory::default(),
        })
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn generator(&self) -> &GeneratorState {
        &self.generator
    }

    /// Training labels as encoded for the most recent epoch.
    pub fn encoded_labels(&self) -> &Matrix {
        &self.encoded
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        let epoch = self.history.len() + 1;

        let val_out = self.params.predict(&self.val.features)?;
        let scm = soft_confusion_matrix(&self.val_onehot, &val_out)?;
        let scm_norm = normalize_scm(&scm, &self.val_counts)?;
        let cost = cost_matrix(&scm_norm)?;
        self.generator.update(&cost)?;
        self.encoded = encode_labels(&self.train_onehot, &self.generator)?;

        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for batch in make_batches(&order, self.config.batch_size, self.config.batch_norm) {
            let x = self.train.features.select_rows(&batch);
            let labels = self.encoded.select_rows(&batch);
            let cache = self.params.forward_train(&x)?;
            loss_sum += self.config.loss.value(&labels, cache.outputs())? * batch.len() as f64;
            let grads = self.params.backward(&cache, &labels, &self.config.loss)?;
            self.params.apply_sgd(&grads, self.config.eta)?;
        }

        let val_after = self.params.predict(&self.val.features)?;
        let val_top1 = metrics::top_k_accuracy(&val_after, &self.val.labels, 1)?;
        self.history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / self.train.len() as f64,
            val_top1,
            val_scm: scm_norm,
            generator: self.generator.matrix().clone(),
        });
        Ok(self.history.epochs.last().unwrap())
    }

    pub fn finish(self) -> (NetworkParams, TrainHistory) {
        (self.params, self.history)
    }
}

/// Runs `config.epochs` epochs and returns the trained parameters.
pub fn train(
    config: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
) -> Result<(NetworkParams, TrainHistory)> {
    let mut trainer = Trainer::new(config.clone(), train_set, val_set)?;
    for _ in 0..config.epochs {
        trainer.run_epoch()?;
    }
    Ok(trainer.finish())
}

/// Inference-mode scoring on a test set: top-1, top-5 (clamped to the
/// class count), minority accuracy and the normalized test SCM.
pub fn evaluate(
    params: &NetworkParams,
    test_set: &Dataset,
    minority: &[usize],
) -> Result<MetricsBundle> {
    if test_set.num_classes != params.num_classes() {
        return Err(Error::invalid(format!(
            "test set has {} classes, network outputs {}",
            test_set.num_classes,
            params.num_classes()
        )));
    }
    let outputs = params.predict(&test_set.features)?;
    metrics::score(&outputs, &test_set.labels, minority, &[1, 5])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmResult {
    pub mode: EncodingMode,
    pub seeds: Vec<u64>,
    pub top1: Vec<f64>,
    pub minority_top1: Vec<f64>,
}

impl ArmResult {
    pub fn mean_top1(&self) -> f64 {
        mean(&self.top1)
    }

    pub fn mean_minority(&self) -> f64 {
        mean(&self.minority_top1)
    }
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Trains one arm per mode and seed with otherwise identical settings.
pub fn run_ablation(
    config: &TrainConfig,
    modes: &[EncodingMode],
    seeds: &[u64],
    train_set: &Dataset,
    val_set: &Dataset,
    test_set: &Dataset,
    minority: &[usize],
) -> Result<Vec<ArmResult>> {
    modes
        .iter()
        .map(|&mode| {
            let mut arm = ArmResult {
                mode,
                seeds: seeds.to_vec(),
                top1: Vec::new(),
                minority_top1: Vec::new(),
            };
            for &seed in seeds {
                let cfg = TrainConfig {
                    mode,
                    seed,
                    ..config.clone()
                };
                let (params, _) = train(&cfg, train_set, val_set)?;
                let m = evaluate(&params, test_set, minority)?;
                arm.top1.push(m.top1);
                arm.minority_top1.push(m.minority_top1);
            }
            Ok(arm)
        })
        .collect()
}
