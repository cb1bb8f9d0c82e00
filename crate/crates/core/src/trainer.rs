//! Training loop: mixed labeled/unlabeled batches, blind-spot masking,
//! Adam steps on the joint loss, plateau learning-rate schedule and
//! best-validation model selection.

use ndarray::{Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::blindspot::{apply_mask_in_place, sample_blind_spots, DEFAULT_FRACTION};
use crate::dataio::{AnnotatedPatch, DatasetSplit, Dihedral, RawImage};
use crate::error::{ensure, Error, Result};
use crate::labelgen::ThreeClassMap;
use crate::losses::{joint_loss_with_grad, LossParts, LossTarget, LossWeights};
use crate::network::{Adam, AdamConfig, NetworkConfig, UNet};
use crate::seed::{child_seed, derive_seed, rng};

/// How the rotated and flipped variants enter training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Augmentation {
    /// Every epoch visits all 8 variants of every patch.
    Full8,
    /// Every epoch visits each patch once, in a randomly drawn variant.
    Random,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub initial_lr: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    /// Validation loss must drop by more than this to count as improvement.
    pub plateau_min_delta: f64,
    pub batch_size: usize,
    pub alpha: f64,
    pub seed: u64,
    pub blind_spot_fraction: f64,
    pub augmentation: Augmentation,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            initial_lr: 0.0004,
            plateau_patience: 10,
            plateau_factor: 0.5,
            plateau_min_delta: 0.0,
            batch_size: 32,
            alpha: 0.5,
            seed: 0,
            blind_spot_fraction: DEFAULT_FRACTION,
            augmentation: Augmentation::Full8,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1, Config, "epochs must be >= 1");
        ensure!(self.batch_size >= 1, Config, "batch size must be >= 1");
        ensure!(
            self.plateau_factor > 0.0 && self.plateau_factor < 1.0,
            Config,
            "plateau factor must lie in (0, 1), got {}",
            self.plateau_factor
        );
        ensure!(
            self.initial_lr > 0.0 && self.initial_lr.is_finite(),
            Config,
            "learning rate must be positive"
        );
        ensure!(
            self.blind_spot_fraction > 0.0 && self.blind_spot_fraction < 1.0,
            Config,
            "blind-spot fraction must lie in (0, 1)"
        );
        LossWeights::new(self.alpha)?;
        Ok(())
    }
}

/// Reduces the learning rate by `factor` once the monitored loss has gone
/// `patience` epochs without improving on its best value.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    min_delta: f64,
    best: f64,
    wait: usize,
}

impl PlateauScheduler {
    pub fn new(initial_lr: f64, factor: f64, patience: usize, min_delta: f64) -> Self {
        Self {
            lr: initial_lr,
            factor,
            patience,
            min_delta,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    pub fn from_config(config: &TrainConfig) -> Self {
        Self::new(
            config.initial_lr,
            config.plateau_factor,
            config.plateau_patience,
            config.plateau_min_delta,
        )
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one epoch's validation loss; returns the rate for the next epoch.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.wait = 0;
        } else {
            self.wait += 1;
            if self.wait >= self.patience {
                self.lr *= self.factor;
                self.wait = 0;
            }
        }
        self.lr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub train_denoise: f64,
    pub train_segment: f64,
    pub val_loss: f64,
    pub val_denoise: f64,
    pub val_segment: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// One header row, then one row per epoch.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

/// A patch reduced to what training consumes.
struct Sample {
    pixels: Array2<f32>,
    target: ThreeClassMap,
}

fn to_samples(patches: &[AnnotatedPatch]) -> Vec<Sample> {
    patches
        .iter()
        .map(|p| Sample {
            pixels: p.patch.pixels().clone(),
            target: ThreeClassMap::from_annotation(&p.annotation, p.patch.dim()),
        })
        .collect()
}

fn transformed_target(target: &ThreeClassMap, t: Dihedral) -> ThreeClassMap {
    if target.is_unlabeled {
        ThreeClassMap::unlabeled(target.dim())
    } else {
        ThreeClassMap {
            classes: t.apply(target.classes.view()),
            is_unlabeled: false,
        }
    }
}

/// Masked inputs `[m, 1, rows, cols]` plus loss targets.
fn assemble(
    samples: &[Sample],
    items: &[(usize, Dihedral)],
    spot_seeds: impl Iterator<Item = u64>,
    fraction: f64,
) -> Result<(Array4<f32>, Vec<LossTarget>)> {
    let (rows, cols) = samples[items[0].0].pixels.dim();
    let mut input = Array4::<f32>::zeros((items.len(), 1, rows, cols));
    let mut targets = Vec::with_capacity(items.len());
    for ((j, &(i, t)), seed) in items.iter().enumerate().zip(spot_seeds) {
        let pixels = t.apply(samples[i].pixels.view());
        let spots = sample_blind_spots(pixels.view(), fraction, seed)?;
        let mut slot = input.index_axis_mut(Axis(0), j);
        let mut slot = slot.index_axis_mut(Axis(0), 0);
        slot.assign(&pixels);
        apply_mask_in_place(slot, &spots)?;
        targets.push(LossTarget {
            spots,
            target: transformed_target(&samples[i].target, t),
        });
    }
    Ok((input, targets))
}

fn check_patches(patches: &[AnnotatedPatch], what: &str, square: bool) -> Result<(usize, usize)> {
    let dim = patches[0].patch.dim();
    for p in patches {
        ensure!(
            p.patch.dim() == dim,
            Input,
            "{what} patches differ in shape: {:?} vs {:?}",
            p.patch.dim(),
            dim
        );
    }
    if square {
        ensure!(dim.0 == dim.1, Input, "augmentation needs square patches, got {dim:?}");
    }
    Ok(dim)
}

struct ValidationSet {
    input: Array4<f32>,
    targets: Vec<LossTarget>,
}

/// Blind spots for validation are drawn once so every epoch is scored on
/// the same masked inputs.
fn validation_set(samples: &[Sample], seed: u64, fraction: f64) -> Result<ValidationSet> {
    let items: Vec<(usize, Dihedral)> = (0..samples.len()).map(|i| (i, Dihedral::IDENTITY)).collect();
    let seeds = (0..samples.len()).map(|i| child_seed(seed, "val-spots", i as u64));
    let (input, targets) = assemble(samples, &items, seeds, fraction)?;
    Ok(ValidationSet { input, targets })
}

fn evaluate_loss(model: &UNet<f32>, val: &ValidationSet, weights: LossWeights, batch_size: usize) -> Result<LossParts> {
    let n = val.targets.len();
    let mut acc = LossParts::default();
    for start in (0..n).step_by(batch_size) {
        let end = (start + batch_size).min(n);
        let input = val.input.slice_axis(Axis(0), (start..end).into()).to_owned();
        let out = model.forward_eval(&input)?;
        let (parts, _) = joint_loss_with_grad(out.view(), &val.targets[start..end], weights, false)?;
        let m = (end - start) as f64;
        acc.total += parts.total * m;
        acc.denoise += parts.denoise * m;
        acc.segment += parts.segment * m;
    }
    acc.total /= n as f64;
    acc.denoise /= n as f64;
    acc.segment /= n as f64;
    Ok(acc)
}

/// Trains `model` on `split` and returns the parameters with the lowest
/// validation loss together with the per-epoch history.
///
/// Pixel data is used as given; standardize it beforehand.
pub fn train(mut model: UNet<f32>, split: &DatasetSplit, config: &TrainConfig) -> Result<(UNet<f32>, TrainHistory)> {
    config.validate()?;
    ensure!(!split.train.is_empty(), Config, "training set is empty");
    ensure!(!split.val.is_empty(), Config, "validation set is empty");
    let weights = LossWeights::new(config.alpha)?;
    if config.alpha < 1.0 {
        ensure!(
            split.val.iter().any(|p| p.annotation.is_labeled()),
            Config,
            "alpha < 1 needs at least one labeled validation patch"
        );
    }
    let square = config.augmentation != Augmentation::None;
    let train_dim = check_patches(&split.train, "training", square)?;
    check_patches(&split.val, "validation", false)?;
    let m = model.config().size_multiple();
    ensure!(
        train_dim.0 % m == 0 && train_dim.1 % m == 0,
        Input,
        "patch size {train_dim:?} must be a multiple of {m}"
    );

    let samples = to_samples(&split.train);
    let val = validation_set(&to_samples(&split.val), config.seed, config.blind_spot_fraction)?;
    let mut adam = Adam::new(config.adam);
    let mut scheduler = PlateauScheduler::from_config(config);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, UNet<f32>)> = None;

    for epoch in 0..config.epochs {
        let lr = scheduler.lr();
        let mut order_rng = rng(child_seed(config.seed, "epoch", epoch as u64));
        let mut order: Vec<(usize, Dihedral)> = match config.augmentation {
            Augmentation::Full8 => (0..samples.len())
                .flat_map(|i| Dihedral::all().into_iter().map(move |t| (i, t)))
                .collect(),
            Augmentation::Random => (0..samples.len())
                .map(|i| (i, Dihedral::from_index(order_rng.random_range(0..8))))
                .collect(),
            Augmentation::None => (0..samples.len()).map(|i| (i, Dihedral::IDENTITY)).collect(),
        };
        order.shuffle(&mut order_rng);

        let mut acc = LossParts::default();
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let seeds = (0..chunk.len()).map(|j| {
                derive_seed(&[
                    &config.seed.to_le_bytes(),
                    b"train-spots",
                    &(epoch as u64).to_le_bytes(),
                    &((b * config.batch_size + j) as u64).to_le_bytes(),
                ])
            });
            let (input, targets) = assemble(&samples, chunk, seeds, config.blind_spot_fraction)?;
            let (out, tape) = model.forward_train(&input)?;
            let (parts, grad) = joint_loss_with_grad(out.view(), &targets, weights, true).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}, batch {b}: {msg}")),
                other => other,
            })?;
            model.zero_grad();
            model.backward(&tape, &grad.expect("requested"));
            adam.step(model.params_mut(), lr);
            let mb = chunk.len() as f64;
            acc.total += parts.total * mb;
            acc.denoise += parts.denoise * mb;
            acc.segment += parts.segment * mb;
        }
        let n = order.len() as f64;
        let val_parts = evaluate_loss(&model, &val, weights, config.batch_size)?;
        if !val_parts.total.is_finite() {
            return Err(Error::Numeric(format!(
                "validation loss is not finite at epoch {epoch}"
            )));
        }
        history.records.push(EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss: acc.total / n,
            train_denoise: acc.denoise / n,
            train_segment: acc.segment / n,
            val_loss: val_parts.total,
            val_denoise: val_parts.denoise,
            val_segment: val_parts.segment,
        });
        log::debug!(
            "epoch {epoch}: lr {lr:.2e} train {:.5} val {:.5}",
            acc.total / n,
            val_parts.total
        );
        if best.as_ref().is_none_or(|(loss, _)| val_parts.total < *loss) {
            best = Some((val_parts.total, model.clone()));
            history.best_epoch = epoch;
        }
        scheduler.observe(val_parts.total);
    }
    let (_, best_model) = best.expect("at least one epoch ran");
    Ok((best_model, history))
}

/// Result of the two-stage scheme: a denoiser and a segmentation network
/// trained on its outputs.
#[derive(Clone, Debug)]
pub struct SequentialModel {
    pub denoiser: UNet<f32>,
    pub segmenter: UNet<f32>,
    pub denoiser_history: TrainHistory,
    pub segmenter_history: TrainHistory,
}

/// Channel-0 predictions of `model` for each patch, batched.
pub fn denoise_patches(
    model: &UNet<f32>,
    patches: &[AnnotatedPatch],
    batch_size: usize,
) -> Result<Vec<AnnotatedPatch>> {
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(batch_size.max(1)) {
        let (rows, cols) = chunk[0].patch.dim();
        let mut input = Array4::<f32>::zeros((chunk.len(), 1, rows, cols));
        for (j, p) in chunk.iter().enumerate() {
            ensure!(p.patch.dim() == (rows, cols), Input, "patches differ in shape");
            input
                .index_axis_mut(Axis(0), j)
                .index_axis_mut(Axis(0), 0)
                .assign(p.patch.pixels());
        }
        let pred = model.forward_eval(&input)?;
        for (j, p) in chunk.iter().enumerate() {
            let denoised = pred.index_axis(Axis(0), j).index_axis(Axis(0), 0).to_owned();
            out.push(AnnotatedPatch {
                patch: RawImage::new(denoised)?,
                annotation: p.annotation.clone(),
            });
        }
    }
    Ok(out)
}

/// Trains a pure denoiser (alpha = 1) on all raw patches, then a fresh
/// segmentation-only network (alpha = 0) on the denoised patches.
pub fn train_sequential(
    network: &NetworkConfig,
    split: &DatasetSplit,
    config: &TrainConfig,
) -> Result<SequentialModel> {
    ensure!(
        split.train.iter().any(|p| p.annotation.is_labeled()),
        Config,
        "the sequential scheme needs at least one labeled training patch"
    );
    let phase1 = TrainConfig {
        alpha: 1.0,
        seed: child_seed(config.seed, "sequential-denoiser", 0),
        ..config.clone()
    };
    let denoiser = UNet::new(network.clone(), phase1.seed)?;
    let (denoiser, denoiser_history) = train(denoiser, split, &phase1)?;

    let denoised = DatasetSplit {
        train: denoise_patches(&denoiser, &split.train, config.batch_size)?,
        val: denoise_patches(&denoiser, &split.val, config.batch_size)?,
        split_seed: split.split_seed,
    };
    let phase2 = TrainConfig {
        alpha: 0.0,
        seed: child_seed(config.seed, "sequential-segmenter", 0),
        ..config.clone()
    };
    let segmenter = UNet::new(network.clone(), phase2.seed)?;
    let (segmenter, segmenter_history) = train(segmenter, &denoised, &phase2)?;
    Ok(SequentialModel {
        denoiser,
        segmenter,
        denoiser_history,
        segmenter_history,
    })
}
