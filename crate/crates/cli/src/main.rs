use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use denoiseg::dataio::{add_gaussian_noise, generate_blobs, RawImage};
use denoiseg::experiments::{
    alpha_grid_search, emit_report, run_cell, run_cells, Cell, ExperimentConfig, ResultTable, SourceData,
};
use denoiseg::metrics::{average_precision, psnr, seg_score};
use denoiseg::postprocess::extract_instances;
use denoiseg::storage::{
    load_checkpoint, load_dataset, load_raster_directory, read_raster, save_checkpoint, save_dataset, write_float_tiff,
    write_label_png, DatasetRecord,
};

#[derive(Parser)]
#[command(name = "denoiseg", version, about = "Joint denoising and instance segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the first cell of a config (or the one picked by the flags) and save the model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        labeled_count: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value_t = 0)]
        repeat: usize,
    },
    /// Denoise and segment images with a saved model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// An image file or a directory of images.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Foreground threshold; defaults to the model's AP threshold.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Score a saved model on labeled images.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        /// Dataset container file.
        #[arg(long, conflicts_with_all = ["images", "labels"])]
        data: Option<PathBuf>,
        #[arg(long, requires = "labels")]
        images: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Write per-image scores here as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run every cell of a config and write tables and plots.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also save each cell's checkpoint.
        #[arg(long)]
        save_models: bool,
    },
    /// Sweep the config's alphas and compare each against 0.5.
    AlphaSearch {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate blob images into a dataset container and optionally raster directories.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        side: usize,
        #[arg(long, default_value_t = 4)]
        min_objects: usize,
        #[arg(long, default_value_t = 12)]
        max_objects: usize,
        #[arg(long, default_value_t = 1.0)]
        intensity_scale: f64,
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory to receive `images/` (float TIFF) and `labels/` (16-bit PNG).
        #[arg(long)]
        raster_dir: Option<PathBuf>,
    },
    /// Print the default experiment config as TOML.
    DefaultConfig,
}

fn read_config(path: &Path) -> Result<(ExperimentConfig, String)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let config = ExperimentConfig::from_toml(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok((config, text))
}

fn prepare_run_dir(out: &Path, config_text: &str) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), config_text)?;
    Ok(())
}

fn train_cmd(
    config_path: &Path,
    out: &Path,
    sigma: Option<f64>,
    labeled_count: Option<usize>,
    alpha: Option<f64>,
    repeat: usize,
) -> Result<()> {
    let (mut config, text) = read_config(config_path)?;
    if let Some(s) = sigma {
        config.noise_sigmas = vec![s];
    }
    if let Some(c) = labeled_count {
        config.labeled_counts = vec![c];
    }
    if let Some(a) = alpha {
        config.alphas = vec![a];
    }
    config.repeats = config.repeats.max(repeat + 1);
    config.validate()?;
    let cell: Cell = config
        .cells()?
        .into_iter()
        .find(|c| c.repeat == repeat)
        .expect("the requested repeat exists");
    prepare_run_dir(out, &text)?;
    let source = SourceData::load(&config.dataset, config.base_seed)?;
    let outcome = run_cell(&config, &source, &cell)?;
    save_checkpoint(&outcome.model, out.join("model.dnsg"))?;
    for (i, h) in outcome.histories.iter().enumerate() {
        let name = if outcome.histories.len() == 1 {
            "history.csv".to_string()
        } else {
            format!("history_phase{}.csv", i + 1)
        };
        fs::write(out.join(name), h.to_csv()?)?;
    }
    let table = ResultTable {
        rows: vec![outcome.row.clone()],
    };
    fs::write(out.join("result.csv"), table.to_csv()?)?;
    println!(
        "AP {:.4}  SEG {:.4}  PSNR {}  (thresholds {} / {})",
        outcome.row.ap,
        outcome.row.seg,
        outcome.row.psnr.map_or("n/a".into(), |p| format!("{p:.2} dB")),
        outcome.row.ap_threshold,
        outcome.row.seg_threshold
    );
    Ok(())
}

fn input_files(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_dir() {
        let records = fs::read_dir(input)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect::<Vec<_>>();
        let mut files = records;
        files.sort();
        Ok(files)
    } else {
        Ok(vec![input.to_path_buf()])
    }
}

fn predict_cmd(model_path: &Path, input: &Path, out: &Path, threshold: Option<f64>) -> Result<()> {
    let model = load_checkpoint(model_path)?;
    let threshold = match (threshold, model.thresholds) {
        (Some(t), _) => t,
        (None, Some(t)) => t.ap,
        (None, None) => 0.5,
    };
    fs::create_dir_all(out)?;
    for path in input_files(input)? {
        let Ok(image) = read_raster(&path) else {
            log::warn!("skipping {}: not a readable raster", path.display());
            continue;
        };
        let pred = model.predict(&image)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        write_float_tiff(&pred.denoised, out.join(format!("{stem}_denoised.tif")))?;
        let labels = extract_instances(pred.class_scores.view(), threshold)?;
        write_label_png(&labels, out.join(format!("{stem}_labels.png")))?;
        println!("{stem}: {} instances", labels.instance_count());
    }
    Ok(())
}

fn evaluate_cmd(
    model_path: &Path,
    data: Option<&Path>,
    images: Option<&Path>,
    labels: Option<&Path>,
    csv_out: Option<&Path>,
) -> Result<()> {
    let model = load_checkpoint(model_path)?;
    let records: Vec<DatasetRecord> = match (data, images) {
        (Some(d), _) => load_dataset(d)?,
        (None, Some(i)) => load_raster_directory(i, labels)?,
        (None, None) => bail!("pass --data or --images/--labels"),
    };
    let thresholds = model.thresholds.context("the model has no stored thresholds")?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["image", "ap", "seg", "psnr"])?;
    let (mut ap_sum, mut seg_sum, mut psnr_sum) = (0.0, 0.0, 0.0);
    let (mut n_ap, mut n_seg, mut n_psnr) = (0usize, 0usize, 0usize);
    for r in &records {
        let Some(gt) = &r.labels else {
            log::warn!("{}: no labels, skipped", r.name);
            continue;
        };
        let pred = model.predict(r.image.pixels())?;
        let ap = average_precision(&extract_instances(pred.class_scores.view(), thresholds.ap)?, gt)?;
        let seg = (gt.instance_count() > 0)
            .then(|| seg_score(&extract_instances(pred.class_scores.view(), thresholds.seg)?, gt))
            .transpose()?;
        let p = r
            .image
            .clean_reference()
            .map(|c| psnr(pred.denoised.view(), c.view()))
            .transpose()?;
        ap_sum += ap;
        n_ap += 1;
        if let Some(s) = seg {
            seg_sum += s;
            n_seg += 1;
        }
        if let Some(p) = p {
            psnr_sum += p;
            n_psnr += 1;
        }
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([r.name.clone(), ap.to_string(), opt(seg), opt(p)])?;
    }
    if n_ap == 0 {
        bail!("no labeled images to evaluate");
    }
    if let Some(path) = csv_out {
        fs::write(path, w.into_inner()?)?;
    }
    println!("images {n_ap}");
    println!("AP   {:.4}", ap_sum / n_ap as f64);
    if n_seg > 0 {
        println!("SEG  {:.4}", seg_sum / n_seg as f64);
    }
    if n_psnr > 0 {
        println!("PSNR {:.2} dB", psnr_sum / n_psnr as f64);
    }
    Ok(())
}

fn sweep_cmd(config_path: &Path, out: &Path, save_models: bool) -> Result<()> {
    let (config, text) = read_config(config_path)?;
    prepare_run_dir(out, &text)?;
    let outcomes = run_cells(&config)?;
    let cells_dir = out.join("cells");
    fs::create_dir_all(&cells_dir)?;
    for o in &outcomes {
        let r = &o.row;
        let alpha = r.alpha.map(|a| format!("_a{a}")).unwrap_or_default();
        let tag = format!("{}_s{}_n{}{alpha}_r{}", r.scheme, r.sigma, r.labeled_count, r.repeat);
        for (i, h) in o.histories.iter().enumerate() {
            fs::write(cells_dir.join(format!("{tag}_history{}.csv", i + 1)), h.to_csv()?)?;
        }
        if save_models {
            save_checkpoint(&o.model, cells_dir.join(format!("{tag}.dnsg")))?;
        }
    }
    let table = ResultTable {
        rows: outcomes.into_iter().map(|o| o.row).collect(),
    };
    for p in emit_report(&table, out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn alpha_search_cmd(config_path: &Path, out: &Path) -> Result<()> {
    let (config, text) = read_config(config_path)?;
    prepare_run_dir(out, &text)?;
    let search = alpha_grid_search(&config)?;
    emit_report(&search.table, out)?;
    fs::write(out.join("alpha.csv"), search.to_csv()?)?;
    for c in &search.cells {
        println!(
            "sigma {} labeled {}: best alpha {} (AP {:.4}, {:+.4} vs 0.5)",
            c.sigma,
            c.labeled_count,
            c.best_alpha,
            c.best_ap,
            c.best_ap - c.reference_ap
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn make_synthetic_cmd(
    out: &Path,
    count: usize,
    side: usize,
    objects: (usize, usize),
    scale: f64,
    sigma: f64,
    seed: u64,
    raster_dir: Option<&Path>,
) -> Result<()> {
    if !(scale > 0.0) {
        bail!("intensity scale must be positive");
    }
    let blobs = generate_blobs(count, side, objects, seed)?;
    let mut records = Vec::with_capacity(count);
    for (i, (image, labels)) in blobs.into_iter().enumerate() {
        let scaled = image.pixels().mapv(|v| (v as f64 * scale) as f32);
        let clean = RawImage::with_clean(scaled.clone(), scaled)?;
        let noise_seed = denoiseg::seed::child_seed(seed, "make-synthetic-noise", i as u64);
        records.push(DatasetRecord {
            name: format!("blobs{i:05}"),
            image: add_gaussian_noise(&clean, sigma, noise_seed)?,
            labels: Some(labels),
        });
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_dataset(&records, out)?;
    if let Some(dir) = raster_dir {
        let (img_dir, lbl_dir) = (dir.join("images"), dir.join("labels"));
        fs::create_dir_all(&img_dir)?;
        fs::create_dir_all(&lbl_dir)?;
        for r in &records {
            write_float_tiff(r.image.pixels(), img_dir.join(format!("{}.tif", r.name)))?;
            write_label_png(r.labels.as_ref().unwrap(), lbl_dir.join(format!("{}.png", r.name)))?;
        }
    }
    println!("wrote {count} images to {}", out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train {
            config,
            out,
            sigma,
            labeled_count,
            alpha,
            repeat,
        } => train_cmd(&config, &out, sigma, labeled_count, alpha, repeat),
        Command::Predict {
            model,
            input,
            out,
            threshold,
        } => predict_cmd(&model, &input, &out, threshold),
        Command::Evaluate {
            model,
            data,
            images,
            labels,
            csv,
        } => evaluate_cmd(
            &model,
            data.as_deref(),
            images.as_deref(),
            labels.as_deref(),
            csv.as_deref(),
        ),
        Command::Sweep {
            config,
            out,
            save_models,
        } => sweep_cmd(&config, &out, save_models),
        Command::AlphaSearch { config, out } => alpha_search_cmd(&config, &out),
        Command::MakeSynthetic {
            out,
            count,
            side,
            min_objects,
            max_objects,
            intensity_scale,
            sigma,
            seed,
            raster_dir,
        } => make_synthetic_cmd(
            &out,
            count,
            side,
            (min_objects, max_objects),
            intensity_scale,
            sigma,
            seed,
            raster_dir.as_deref(),
        ),
        Command::DefaultConfig => {
            print!("{}", ExperimentConfig::default().to_toml()?);
            Ok(())
        }
    }
}
