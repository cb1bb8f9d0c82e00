//! Sweeps over noise levels, labeled-subset sizes, loss weights and
//! repeats, with reporting.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{
    add_gaussian_noise, extract_patches, generate_blobs, select_labeled_subset, split_train_val, AnnotatedPatch,
    InstanceLabelMap, RawImage, DEFAULT_PATCH_SIZE, DEFAULT_TRAIN_RATIO,
};
use crate::error::{ensure, Error, Result};
use crate::metrics::psnr;
use crate::network::{NetworkConfig, UNet};
use crate::pipeline::{standardize_split, InferenceModel, Predictor, Thresholds};
use crate::postprocess::{foreground_probability, mean_metric, optimize_threshold_on_probabilities, Metric};
use crate::seed::derive_seed;
use crate::storage::{load_dataset, load_raster_directory, DatasetRecord};
use crate::trainer::{train, train_sequential, TrainConfig, TrainHistory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// One network, joint loss at the configured alpha.
    Denoiseg,
    /// Same network and batches, segmentation loss only.
    Baseline,
    /// Denoiser first, then a segmentation network on its outputs.
    Sequential,
}

impl Scheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::Denoiseg => "denoiseg",
            Scheme::Baseline => "baseline",
            Scheme::Sequential => "sequential",
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where the clean training pool and the test images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// Generated blob images, scaled from [0, 1] by `intensity_scale`.
    Synthetic {
        train_images: usize,
        test_images: usize,
        side: usize,
        min_objects: usize,
        max_objects: usize,
        intensity_scale: f64,
    },
    /// Raster directories; label directories hold files with matching stems.
    Directories {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    /// Dataset container files.
    Container { train: PathBuf, test: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            train_images: 200,
            test_images: 20,
            side: 64,
            min_objects: 4,
            max_objects: 10,
            intensity_scale: 100.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub data: DataSource,
    pub patch_size: usize,
    pub train_ratio: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            patch_size: DEFAULT_PATCH_SIZE,
            train_ratio: DEFAULT_TRAIN_RATIO,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub noise_sigmas: Vec<f64>,
    pub labeled_counts: Vec<usize>,
    pub alphas: Vec<f64>,
    pub repeats: usize,
    pub base_seed: u64,
    pub scheme: Scheme,
    /// `alpha` and `seed` in here are replaced per cell.
    pub train: TrainConfig,
    pub network: NetworkConfig,
    /// Cells trained concurrently; 0 uses every available core.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec {
                patch_size: 64,
                ..Default::default()
            },
            noise_sigmas: vec![0.0, 10.0, 20.0],
            labeled_counts: vec![10],
            alphas: vec![0.5],
            repeats: 5,
            base_seed: 0,
            scheme: Scheme::Denoiseg,
            train: TrainConfig {
                epochs: 30,
                ..Default::default()
            },
            network: NetworkConfig::default(),
            workers: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.repeats >= 1, Config, "repeats must be >= 1");
        ensure!(!self.noise_sigmas.is_empty(), Config, "noise_sigmas is empty");
        ensure!(!self.labeled_counts.is_empty(), Config, "labeled_counts is empty");
        for &s in &self.noise_sigmas {
            ensure!(s >= 0.0 && s.is_finite(), Config, "noise sigma {s} is negative");
        }
        if self.scheme != Scheme::Baseline {
            ensure!(!self.alphas.is_empty(), Config, "alphas is empty");
        }
        for &a in &self.alphas {
            ensure!((0.0..=1.0).contains(&a), Config, "alpha {a} outside [0, 1]");
        }
        if self.scheme == Scheme::Sequential {
            ensure!(
                self.labeled_counts.iter().all(|&c| c >= 1),
                Config,
                "the sequential scheme needs labeled_count >= 1"
            );
        }
        ensure!(
            self.dataset.train_ratio > 0.0 && self.dataset.train_ratio < 1.0,
            Config,
            "train ratio must lie in (0, 1)"
        );
        self.network.validate()?;
        ensure!(
            self.dataset.patch_size % self.network.size_multiple() == 0,
            Config,
            "patch size {} must be a multiple of {}",
            self.dataset.patch_size,
            self.network.size_multiple()
        );
        self.train.validate()
    }

    /// Alpha values actually trained; the baseline always uses 0.
    pub fn effective_alphas(&self) -> Vec<f64> {
        match self.scheme {
            Scheme::Baseline => vec![0.0],
            Scheme::Sequential => vec![f64::NAN],
            Scheme::Denoiseg => self.alphas.clone(),
        }
    }

    /// Every cell in sweep order: sigma, labeled count, alpha, repeat.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        let mut cells = Vec::new();
        for &sigma in &self.noise_sigmas {
            for &labeled_count in &self.labeled_counts {
                for alpha in self.effective_alphas() {
                    for repeat in 0..self.repeats {
                        let alpha = (!alpha.is_nan()).then_some(alpha);
                        cells.push(Cell {
                            scheme: self.scheme,
                            sigma,
                            labeled_count,
                            alpha,
                            repeat,
                            seed: cell_seed(self.base_seed, self.scheme, sigma, labeled_count, alpha, repeat),
                        });
                    }
                }
            }
        }
        let distinct: HashSet<u64> = cells.iter().map(|c| c.seed).collect();
        ensure!(
            distinct.len() == cells.len(),
            Config,
            "cell seeds collide; remove duplicate sigma, count or alpha entries"
        );
        Ok(cells)
    }
}

/// One training run of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub scheme: Scheme,
    pub sigma: f64,
    pub labeled_count: usize,
    /// `None` for the sequential scheme, which trains at fixed weights.
    pub alpha: Option<f64>,
    pub repeat: usize,
    pub seed: u64,
}

pub fn cell_seed(
    base: u64,
    scheme: Scheme,
    sigma: f64,
    labeled_count: usize,
    alpha: Option<f64>,
    repeat: usize,
) -> u64 {
    derive_seed(&[
        b"cell",
        &base.to_le_bytes(),
        &sigma.to_bits().to_le_bytes(),
        &(labeled_count as u64).to_le_bytes(),
        &alpha.map_or(u64::MAX, f64::to_bits).to_le_bytes(),
        &(repeat as u64).to_le_bytes(),
        scheme.as_str().as_bytes(),
    ])
}

/// Seeds for data preparation. They leave out scheme and alpha so that
/// runs being compared see the same noise, split and labeled subset.
fn noise_seed(base: u64, sigma: f64, part: &str) -> u64 {
    derive_seed(&[
        b"noise",
        &base.to_le_bytes(),
        &sigma.to_bits().to_le_bytes(),
        part.as_bytes(),
    ])
}

fn split_seed(base: u64, repeat: usize) -> u64 {
    derive_seed(&[b"split", &base.to_le_bytes(), &(repeat as u64).to_le_bytes()])
}

fn subset_seed(base: u64, labeled_count: usize, repeat: usize) -> u64 {
    derive_seed(&[
        b"subset",
        &base.to_le_bytes(),
        &(labeled_count as u64).to_le_bytes(),
        &(repeat as u64).to_le_bytes(),
    ])
}

/// Clean images shared by every cell.
#[derive(Clone, Debug)]
pub struct SourceData {
    pub train: Vec<DatasetRecord>,
    pub test: Vec<DatasetRecord>,
}

fn synthetic_records(
    count: usize,
    side: usize,
    objects: (usize, usize),
    scale: f64,
    seed: u64,
    prefix: &str,
) -> Result<Vec<DatasetRecord>> {
    ensure!(
        scale > 0.0 && scale.is_finite(),
        Config,
        "intensity scale must be positive"
    );
    generate_blobs(count, side, objects, seed)?
        .into_iter()
        .enumerate()
        .map(|(i, (image, labels))| {
            let scaled = image.pixels().mapv(|v| (v as f64 * scale) as f32);
            Ok(DatasetRecord {
                name: format!("{prefix}{i:05}"),
                image: RawImage::with_clean(scaled.clone(), scaled)?,
                labels: Some(labels),
            })
        })
        .collect()
}

impl SourceData {
    pub fn load(dataset: &DatasetSpec, base_seed: u64) -> Result<Self> {
        let data = match &dataset.data {
            DataSource::Synthetic {
                train_images,
                test_images,
                side,
                min_objects,
                max_objects,
                intensity_scale,
            } => {
                let objects = (*min_objects, *max_objects);
                let train_seed = derive_seed(&[b"synthetic-train", &base_seed.to_le_bytes()]);
                let test_seed = derive_seed(&[b"synthetic-test", &base_seed.to_le_bytes()]);
                Self {
                    train: synthetic_records(*train_images, *side, objects, *intensity_scale, train_seed, "train")?,
                    test: synthetic_records(*test_images, *side, objects, *intensity_scale, test_seed, "test")?,
                }
            }
            DataSource::Directories {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => Self {
                train: load_raster_directory(train_images, Some(train_labels))?,
                test: load_raster_directory(test_images, Some(test_labels))?,
            },
            DataSource::Container { train, test } => Self {
                train: load_dataset(train)?,
                test: load_dataset(test)?,
            },
        };
        ensure!(!data.train.is_empty(), Input, "training pool is empty");
        ensure!(!data.test.is_empty(), Input, "test set is empty");
        ensure!(
            data.test.iter().all(|r| r.labels.is_some()),
            Input,
            "every test image needs labels"
        );
        Ok(data)
    }
}

/// Noisy copies of `records`; with sigma 0 the stored pixels are used as is.
fn noisy_records(records: &[DatasetRecord], sigma: f64, seed: u64) -> Result<Vec<DatasetRecord>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let image = if sigma > 0.0 {
                add_gaussian_noise(&r.image, sigma, crate::seed::child_seed(seed, "image", i as u64))?
            } else {
                r.image.clone()
            };
            Ok(DatasetRecord {
                name: r.name.clone(),
                image,
                labels: r.labels.clone(),
            })
        })
        .collect()
}

/// Everything produced by one cell.
#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub row: ResultRow,
    pub model: InferenceModel,
    pub histories: Vec<TrainHistory>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scheme: Scheme,
    pub sigma: f64,
    pub labeled_count: usize,
    pub alpha: Option<f64>,
    pub repeat: usize,
    pub seed: u64,
    pub ap: f64,
    pub seg: f64,
    /// Mean PSNR of channel 0 on test images with a clean reference.
    pub psnr: Option<f64>,
    /// Mean PSNR of the noisy test inputs.
    pub noisy_psnr: Option<f64>,
    pub ap_threshold: f64,
    pub seg_threshold: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn to_csv_string<R: Serialize>(rows: impl IntoIterator<Item = R>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

impl ResultTable {
    pub fn to_csv(&self) -> Result<String> {
        to_csv_string(&self.rows)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let rows = csv::Reader::from_reader(text.as_bytes())
            .deserialize()
            .collect::<Result<Vec<ResultRow>, _>>()
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self { rows })
    }
}

fn mean_psnr(pairs: impl Iterator<Item = Result<Option<f64>>>) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut n = 0;
    for v in pairs {
        if let Some(v) = v? {
            sum += v;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// Prepares data, trains and evaluates one cell.
pub fn run_cell(config: &ExperimentConfig, source: &SourceData, cell: &Cell) -> Result<CellOutcome> {
    let base = config.base_seed;
    let dataset = &config.dataset;
    let train_pool = noisy_records(&source.train, cell.sigma, noise_seed(base, cell.sigma, "train"))?;
    let test = noisy_records(&source.test, cell.sigma, noise_seed(base, cell.sigma, "test"))?;

    let mut patches: Vec<AnnotatedPatch> = Vec::new();
    for r in &train_pool {
        patches.extend(extract_patches(&r.image, r.labels.as_ref(), dataset.patch_size)?);
    }
    let mut split = split_train_val(patches, dataset.train_ratio, split_seed(base, cell.repeat))?;
    split.train = select_labeled_subset(
        split.train,
        cell.labeled_count,
        subset_seed(base, cell.labeled_count, cell.repeat),
    )?;
    let (standardized, normalization) = standardize_split(&split)?;

    let train_config = TrainConfig {
        alpha: cell.alpha.unwrap_or(0.0),
        seed: cell.seed,
        ..config.train.clone()
    };
    let (predictor, histories) = match cell.scheme {
        Scheme::Denoiseg | Scheme::Baseline => {
            let net = UNet::new(config.network.clone(), cell.seed)?;
            let (net, history) = train(net, &standardized, &train_config)?;
            (Predictor::Joint(net), vec![history])
        }
        Scheme::Sequential => {
            let seq = train_sequential(&config.network, &standardized, &train_config)?;
            (
                Predictor::Sequential {
                    denoiser: seq.denoiser,
                    segmenter: seq.segmenter,
                },
                vec![seq.denoiser_history, seq.segmenter_history],
            )
        }
    };
    let mut model = InferenceModel {
        predictor,
        normalization,
        thresholds: None,
        seed: cell.seed,
    };

    let (val_probs, val_gt): (Vec<_>, Vec<_>) = {
        let labeled: Vec<&AnnotatedPatch> = split.val.iter().filter(|p| p.annotation.is_labeled()).collect();
        let images: Vec<_> = labeled.iter().map(|p| p.patch.pixels().clone()).collect();
        let preds = model.predict_batch(&images)?;
        let probs = preds
            .iter()
            .map(|o| foreground_probability(o.class_scores.view()))
            .collect::<Result<Vec<_>>>()?;
        let gt = labeled.iter().map(|p| p.annotation.labels().unwrap().clone()).collect();
        (probs, gt)
    };
    let (ap_threshold, _) = optimize_threshold_on_probabilities(&val_probs, &val_gt, Metric::Ap)?;
    let (seg_threshold, _) = optimize_threshold_on_probabilities(&val_probs, &val_gt, Metric::Seg)?;
    model.thresholds = Some(Thresholds {
        ap: ap_threshold,
        seg: seg_threshold,
    });

    let test_images: Vec<_> = test.iter().map(|r| r.image.pixels().clone()).collect();
    let preds = model.predict_batch(&test_images)?;
    let test_probs = preds
        .iter()
        .map(|o| foreground_probability(o.class_scores.view()))
        .collect::<Result<Vec<_>>>()?;
    let test_gt: Vec<InstanceLabelMap> = test.iter().map(|r| r.labels.clone().unwrap()).collect();
    let ap = mean_metric(&test_probs, &test_gt, ap_threshold, Metric::Ap)?.expect("test set is non-empty");
    let seg = mean_metric(&test_probs, &test_gt, seg_threshold, Metric::Seg)?
        .ok_or_else(|| Error::Input("no test image has objects; SEG is undefined".into()))?;

    let psnr_value = mean_psnr(test.iter().zip(&preds).map(|(r, o)| {
        r.image
            .clean_reference()
            .map(|c| psnr(o.denoised.view(), c.view()))
            .transpose()
    }))?;
    let noisy_psnr = mean_psnr(test.iter().map(|r| {
        r.image
            .clean_reference()
            .map(|c| psnr(r.image.pixels().view(), c.view()))
            .transpose()
    }))?;
    if psnr_value.is_none() {
        log::warn!(
            "cell sigma={} count={} repeat={}: no clean references, PSNR omitted",
            cell.sigma,
            cell.labeled_count,
            cell.repeat
        );
    }
    log::info!(
        "{} sigma={} count={} alpha={} repeat={}: AP {:.4} SEG {:.4} PSNR {}",
        cell.scheme,
        cell.sigma,
        cell.labeled_count,
        fmt_opt(cell.alpha),
        cell.repeat,
        ap,
        seg,
        fmt_opt(psnr_value)
    );

    Ok(CellOutcome {
        row: ResultRow {
            scheme: cell.scheme,
            sigma: cell.sigma,
            labeled_count: cell.labeled_count,
            alpha: cell.alpha,
            repeat: cell.repeat,
            seed: cell.seed,
            ap,
            seg,
            psnr: psnr_value,
            noisy_psnr,
            ap_threshold,
            seg_threshold,
        },
        model,
        histories,
    })
}

/// Runs every cell, in parallel up to `workers`; outcomes are in cell order.
pub fn run_cells(config: &ExperimentConfig) -> Result<Vec<CellOutcome>> {
    config.validate()?;
    let cells = config.cells()?;
    let source = SourceData::load(&config.dataset, config.base_seed)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| cells.par_iter().map(|c| run_cell(config, &source, c)).collect())
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ResultTable> {
    Ok(ResultTable {
        rows: run_cells(config)?.into_iter().map(|o| o.row).collect(),
    })
}

/// Outcome of the alpha sweep for one (sigma, labeled count) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaCell {
    pub sigma: f64,
    pub labeled_count: usize,
    pub best_alpha: f64,
    pub best_ap: f64,
    pub reference_ap: f64,
    /// `(alpha, mean AP(alpha) - mean AP(0.5))` in config order.
    pub deltas: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaSearch {
    pub table: ResultTable,
    pub cells: Vec<AlphaCell>,
}

pub const REFERENCE_ALPHA: f64 = 0.5;

impl AlphaSearch {
    pub fn from_table(table: ResultTable, alphas: &[f64]) -> Result<Self> {
        let mut groups: BTreeMap<(u64, usize), BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
        for r in &table.rows {
            let alpha = r
                .alpha
                .ok_or_else(|| Error::Input("alpha search rows need an alpha".into()))?;
            groups
                .entry((r.sigma.to_bits(), r.labeled_count))
                .or_default()
                .entry(alpha.to_bits())
                .or_default()
                .push(r.ap);
        }
        let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        let mut cells = Vec::new();
        for ((sigma, labeled_count), by_alpha) in groups {
            let reference_ap = mean(
                by_alpha
                    .get(&REFERENCE_ALPHA.to_bits())
                    .ok_or_else(|| Error::Input("no rows at alpha 0.5".into()))?,
            );
            let mut deltas = Vec::new();
            let mut best: Option<(f64, f64)> = None;
            for &a in alphas {
                let Some(v) = by_alpha.get(&a.to_bits()) else { continue };
                let ap = mean(v);
                deltas.push((a, ap - reference_ap));
                if best.is_none_or(|(_, b)| ap > b) {
                    best = Some((a, ap));
                }
            }
            let (best_alpha, best_ap) = best.expect("reference alpha is present");
            cells.push(AlphaCell {
                sigma: f64::from_bits(sigma),
                labeled_count,
                best_alpha,
                best_ap,
                reference_ap,
                deltas,
            });
        }
        Ok(Self { table, cells })
    }

    pub fn to_csv(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Record {
            sigma: f64,
            labeled_count: usize,
            alpha: f64,
            mean_ap: f64,
            delta_vs_reference: f64,
            is_best: bool,
        }
        to_csv_string(self.cells.iter().flat_map(|c| {
            c.deltas.iter().map(move |&(alpha, delta)| Record {
                sigma: c.sigma,
                labeled_count: c.labeled_count,
                alpha,
                mean_ap: c.reference_ap + delta,
                delta_vs_reference: delta,
                is_best: alpha == c.best_alpha,
            })
        }))
    }
}

pub fn check_alpha_grid(config: &ExperimentConfig) -> Result<()> {
    ensure!(
        config.scheme == Scheme::Denoiseg,
        Config,
        "the alpha search needs the denoiseg scheme"
    );
    ensure!(
        config.alphas.len() >= 2,
        Config,
        "the alpha search needs at least 2 alphas"
    );
    ensure!(
        config.alphas.contains(&REFERENCE_ALPHA),
        Config,
        "the alpha list must contain the reference value 0.5"
    );
    Ok(())
}

/// Runs the sweep over `config.alphas` and compares every alpha with 0.5.
pub fn alpha_grid_search(config: &ExperimentConfig) -> Result<AlphaSearch> {
    check_alpha_grid(config)?;
    AlphaSearch::from_table(run_experiment(config)?, &config.alphas)
}

/// Mean and standard error (sample sd over sqrt(n)); the error is `None`
/// for fewer than two values.
pub fn mean_sem(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

/// Key of an aggregate group: scheme, sigma, labeled count, alpha.
type GroupKey = (Scheme, u64, usize, Option<u64>);

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub scheme: Scheme,
    pub sigma: f64,
    pub labeled_count: usize,
    pub alpha: Option<f64>,
    pub n: usize,
    pub ap: (f64, Option<f64>),
    pub seg: (f64, Option<f64>),
    pub psnr: Option<(f64, Option<f64>)>,
    pub noisy_psnr: Option<(f64, Option<f64>)>,
}

pub fn aggregate(table: &ResultTable) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<GroupKey, Vec<&ResultRow>> = BTreeMap::new();
    for r in &table.rows {
        groups
            .entry((r.scheme, r.sigma.to_bits(), r.labeled_count, r.alpha.map(f64::to_bits)))
            .or_default()
            .push(r);
    }
    let mut out: Vec<AggregateRow> = groups
        .into_values()
        .map(|rows| {
            let r0 = rows[0];
            let col = |f: &dyn Fn(&ResultRow) -> Option<f64>| -> Option<(f64, Option<f64>)> {
                let v: Vec<f64> = rows.iter().filter_map(|r| f(r)).collect();
                (!v.is_empty()).then(|| mean_sem(&v))
            };
            AggregateRow {
                scheme: r0.scheme,
                sigma: r0.sigma,
                labeled_count: r0.labeled_count,
                alpha: r0.alpha,
                n: rows.len(),
                ap: col(&|r| Some(r.ap)).unwrap(),
                seg: col(&|r| Some(r.seg)).unwrap(),
                psnr: col(&|r| r.psnr),
                noisy_psnr: col(&|r| r.noisy_psnr),
            }
        })
        .collect();
    out.sort_by(|a, b| {
        (a.scheme, a.labeled_count)
            .cmp(&(b.scheme, b.labeled_count))
            .then(a.sigma.total_cmp(&b.sigma))
            .then(a.alpha.unwrap_or(-1.0).total_cmp(&b.alpha.unwrap_or(-1.0)))
    });
    out
}

#[derive(Serialize)]
struct AggregateRecord {
    scheme: Scheme,
    sigma: f64,
    labeled_count: usize,
    alpha: Option<f64>,
    n: usize,
    ap_mean: f64,
    ap_sem: Option<f64>,
    seg_mean: f64,
    seg_sem: Option<f64>,
    psnr_mean: Option<f64>,
    psnr_sem: Option<f64>,
    noisy_psnr_mean: Option<f64>,
    noisy_psnr_sem: Option<f64>,
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> Result<String> {
    to_csv_string(rows.iter().map(|r| AggregateRecord {
        scheme: r.scheme,
        sigma: r.sigma,
        labeled_count: r.labeled_count,
        alpha: r.alpha,
        n: r.n,
        ap_mean: r.ap.0,
        ap_sem: r.ap.1,
        seg_mean: r.seg.0,
        seg_sem: r.seg.1,
        psnr_mean: r.psnr.map(|p| p.0),
        psnr_sem: r.psnr.and_then(|p| p.1),
        noisy_psnr_mean: r.noisy_psnr.map(|p| p.0),
        noisy_psnr_sem: r.noisy_psnr.and_then(|p| p.1),
    }))
}

struct Series {
    label: String,
    points: Vec<(f64, f64, f64)>,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Line plot of mean score against labeled count with ±SEM bars.
fn line_plot_svg(title: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (70.0, 180.0, 40.0, 50.0);
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y, e) in pts {
        if !y.is_finite() {
            continue;
        }
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y - e);
        y1 = y1.max(y + e);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x0 -= 1.0;
        x1 += 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{title}</text>"#,
        (w - right + left) / 2.0
    )
    .unwrap();
    writeln!(
        svg,
        r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#,
        h - bottom,
        w - right,
        h - bottom,
        h - bottom
    )
    .unwrap();
    for i in 0..=4 {
        let y = y0 + (y1 - y0) * i as f64 / 4.0;
        writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{y:.3}</text>"#,
            left - 6.0,
            py(y) + 4.0
        )
        .unwrap();
    }
    let mut xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    for x in xs {
        writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{x}</text>"#,
            px(x),
            h - bottom + 18.0
        )
        .unwrap();
    }
    writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">labeled images</text>"#,
        (w - right + left) / 2.0,
        h - 12.0
    )
    .unwrap();
    writeln!(
        svg,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{y_label}</text>"#,
        (h - bottom + top) / 2.0,
        (h - bottom + top) / 2.0
    )
    .unwrap();
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let finite: Vec<_> = s.points.iter().filter(|p| p.1.is_finite()).collect();
        let path: Vec<String> = finite
            .iter()
            .map(|p| format!("{:.1},{:.1}", px(p.0), py(p.1)))
            .collect();
        writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        )
        .unwrap();
        for p in finite {
            writeln!(
                svg,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                px(p.0),
                py(p.1)
            )
            .unwrap();
            if p.2 > 0.0 {
                writeln!(
                    svg,
                    r#"<line x1="{0:.1}" y1="{1:.1}" x2="{0:.1}" y2="{2:.1}" stroke="{color}"/>"#,
                    px(p.0),
                    py(p.1 - p.2),
                    py(p.1 + p.2)
                )
                .unwrap();
            }
        }
        let ly = top + 16.0 * i as f64;
        writeln!(
            svg,
            r#"<line x1="{0}" y1="{ly}" x2="{1}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{2}" y="{3}">{4}</text>"#,
            w - right + 12.0,
            w - right + 32.0,
            w - right + 38.0,
            ly + 4.0,
            s.label
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

fn plot_series(rows: &[AggregateRow], pick: impl Fn(&AggregateRow) -> Option<(f64, Option<f64>)>) -> Vec<Series> {
    let mut by_line: BTreeMap<(Scheme, u64, Option<u64>), Vec<(f64, f64, f64)>> = BTreeMap::new();
    for r in rows {
        if let Some((m, s)) = pick(r) {
            by_line
                .entry((r.scheme, r.sigma.to_bits(), r.alpha.map(f64::to_bits)))
                .or_default()
                .push((r.labeled_count as f64, m, s.unwrap_or(0.0)));
        }
    }
    by_line
        .into_iter()
        .map(|((scheme, sigma, alpha), mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            let alpha = alpha.map(|a| format!(" a={}", f64::from_bits(a))).unwrap_or_default();
            Series {
                label: format!("{scheme} n{}{alpha}", f64::from_bits(sigma)),
                points,
            }
        })
        .collect()
}

/// Writes `raw.csv`, `aggregate.csv` and one SVG plot per score into
/// `out_dir`, returning the written paths.
pub fn emit_report(table: &ResultTable, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    ensure!(!table.rows.is_empty(), Input, "cannot report an empty table");
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let agg = aggregate(table);
    let mut written = Vec::new();
    let mut write = |name: &str, text: String| -> Result<()> {
        let p = out_dir.join(name);
        fs::write(&p, text)?;
        written.push(p);
        Ok(())
    };
    write("raw.csv", table.to_csv()?)?;
    write("aggregate.csv", aggregate_csv(&agg)?)?;
    write(
        "ap.svg",
        line_plot_svg("AP", "mean AP", &plot_series(&agg, |r| Some(r.ap))),
    )?;
    write(
        "seg.svg",
        line_plot_svg("SEG", "mean SEG", &plot_series(&agg, |r| Some(r.seg))),
    )?;
    if agg.iter().any(|r| r.psnr.is_some()) {
        write("psnr.svg", line_plot_svg("PSNR", "dB", &plot_series(&agg, |r| r.psnr)))?;
    }
    Ok(written)
}
