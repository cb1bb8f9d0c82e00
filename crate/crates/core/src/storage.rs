//! On-disk formats: model checkpoints, the dataset container and raster
//! image directories.
//!
//! Checkpoints and dataset containers share one layout:
//!
//! ```text
//! magic       8 bytes   "DNSGCKPT" or "DNSGDATA"
//! version     u32 LE
//! header_len  u64 LE
//! header      header_len bytes of UTF-8 JSON
//! payload     little-endian numbers addressed by byte offsets in the header
//! ```
//!
//! Parameters are stored as f32 bit patterns, so a reloaded model
//! reproduces inference bit-exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataio::{InstanceLabelMap, Normalization, RawImage};
use crate::error::{ensure, Error, Result};
use crate::network::{NetworkConfig, UNet};
use crate::pipeline::{InferenceModel, Predictor, Thresholds};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DNSGCKPT";
pub const DATASET_MAGIC: &[u8; 8] = b"DNSGDATA";
pub const FORMAT_VERSION: u32 = 1;

fn write_container(path: &Path, magic: &[u8; 8], header: &impl Serialize, payload: &[u8]) -> Result<()> {
    let header = serde_json::to_vec(header).map_err(|e| Error::Format(e.to_string()))?;
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    f.write_all(magic)?;
    f.write_all(&FORMAT_VERSION.to_le_bytes())?;
    f.write_all(&(header.len() as u64).to_le_bytes())?;
    f.write_all(&header)?;
    f.write_all(payload)?;
    f.flush()?;
    Ok(())
}

fn read_container<H: for<'de> Deserialize<'de>>(path: &Path, magic: &[u8; 8]) -> Result<(H, Vec<u8>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let name = path.display();
    ensure!(bytes.len() >= 20, Format, "{name}: file too short");
    ensure!(&bytes[..8] == magic, Format, "{name}: unexpected file signature");
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    ensure!(
        version == FORMAT_VERSION,
        Format,
        "{name}: unsupported format version {version}"
    );
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    ensure!(bytes.len() >= 20 + header_len, Format, "{name}: truncated header");
    let header = serde_json::from_slice(&bytes[20..20 + header_len])
        .map_err(|e| Error::Format(format!("{name}: bad header: {e}")))?;
    Ok((header, bytes.split_off(20 + header_len)))
}

fn payload_slice<'a>(payload: &'a [u8], offset: usize, len: usize, elem: usize) -> Result<&'a [u8]> {
    let end = offset
        .checked_add(len * elem)
        .filter(|&e| e <= payload.len())
        .ok_or_else(|| Error::Format("tensor extends past the end of the payload".into()))?;
    Ok(&payload[offset..end])
}

fn push_f32(payload: &mut Vec<u8>, values: &[f32]) -> usize {
    let offset = payload.len();
    for v in values {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    offset
}

fn read_f32(payload: &[u8], offset: usize, len: usize) -> Result<Vec<f32>> {
    Ok(payload_slice(payload, offset, len, 4)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct NetworkEntry {
    role: String,
    config: NetworkConfig,
    params: Vec<TensorEntry>,
    buffers: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize, Clone, Copy, PartialEq, Eq, Debug)]
#[serde(rename_all = "lowercase")]
enum ModelKind {
    Joint,
    Sequential,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    kind: ModelKind,
    seed: u64,
    normalization: Normalization,
    thresholds: Option<Thresholds>,
    networks: Vec<NetworkEntry>,
}

fn encode_network(role: &str, net: &UNet<f32>, payload: &mut Vec<u8>) -> NetworkEntry {
    let params = net
        .params()
        .into_iter()
        .map(|p| TensorEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            offset: push_f32(payload, &p.value),
        })
        .collect();
    let buffers = net
        .buffers()
        .into_iter()
        .map(|(name, v)| TensorEntry {
            name,
            shape: vec![v.len()],
            offset: push_f32(payload, v),
        })
        .collect();
    NetworkEntry {
        role: role.to_string(),
        config: net.config().clone(),
        params,
        buffers,
    }
}

fn decode_network(entry: &NetworkEntry, payload: &[u8]) -> Result<UNet<f32>> {
    let mut net = UNet::new(entry.config.clone(), 0)?;
    let params = net.params_mut();
    ensure!(
        params.len() == entry.params.len(),
        Format,
        "network '{}' stores {} tensors, expected {}",
        entry.role,
        entry.params.len(),
        params.len()
    );
    for (p, t) in params.into_iter().zip(&entry.params) {
        ensure!(
            p.name == t.name && p.shape == t.shape,
            Format,
            "tensor {} {:?} does not match {} {:?}",
            t.name,
            t.shape,
            p.name,
            p.shape
        );
        p.value = read_f32(payload, t.offset, p.value.len())?;
    }
    let buffers = net.buffers_mut();
    ensure!(buffers.len() == entry.buffers.len(), Format, "buffer count mismatch");
    for ((name, v), t) in buffers.into_iter().zip(&entry.buffers) {
        ensure!(
            name == t.name && vec![v.len()] == t.shape,
            Format,
            "buffer {} does not match {name}",
            t.name
        );
        *v = read_f32(payload, t.offset, v.len())?;
    }
    Ok(net)
}

pub fn save_checkpoint(model: &InferenceModel, path: impl AsRef<Path>) -> Result<()> {
    let mut payload = Vec::new();
    let (kind, networks) = match &model.predictor {
        Predictor::Joint(net) => (ModelKind::Joint, vec![encode_network("joint", net, &mut payload)]),
        Predictor::Sequential { denoiser, segmenter } => (
            ModelKind::Sequential,
            vec![
                encode_network("denoiser", denoiser, &mut payload),
                encode_network("segmenter", segmenter, &mut payload),
            ],
        ),
    };
    let header = CheckpointHeader {
        kind,
        seed: model.seed,
        normalization: model.normalization,
        thresholds: model.thresholds,
        networks,
    };
    write_container(path.as_ref(), CHECKPOINT_MAGIC, &header, &payload)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<InferenceModel> {
    let (header, payload): (CheckpointHeader, _) = read_container(path.as_ref(), CHECKPOINT_MAGIC)?;
    let expected = match header.kind {
        ModelKind::Joint => 1,
        ModelKind::Sequential => 2,
    };
    ensure!(
        header.networks.len() == expected,
        Format,
        "{:?} checkpoint holds {} networks",
        header.kind,
        header.networks.len()
    );
    let mut nets = header
        .networks
        .iter()
        .map(|n| decode_network(n, &payload))
        .collect::<Result<Vec<_>>>()?;
    let predictor = match header.kind {
        ModelKind::Joint => Predictor::Joint(nets.remove(0)),
        ModelKind::Sequential => {
            let segmenter = nets.pop().unwrap();
            Predictor::Sequential {
                denoiser: nets.pop().unwrap(),
                segmenter,
            }
        }
    };
    Ok(InferenceModel {
        predictor,
        normalization: header.normalization,
        thresholds: header.thresholds,
        seed: header.seed,
    })
}

/// One image of a dataset, optionally with a clean reference and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub name: String,
    pub image: RawImage,
    pub labels: Option<InstanceLabelMap>,
}

#[derive(Serialize, Deserialize)]
struct RecordEntry {
    name: String,
    rows: usize,
    cols: usize,
    pixels: usize,
    clean: Option<usize>,
    labels: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    records: Vec<RecordEntry>,
}

pub fn save_dataset(records: &[DatasetRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(records.len());
    for r in records {
        let (rows, cols) = r.image.dim();
        let pixels = push_f32(&mut payload, r.image.pixels().as_standard_layout().as_slice().unwrap());
        let clean = r
            .image
            .clean_reference()
            .map(|c| push_f32(&mut payload, c.as_standard_layout().as_slice().unwrap()));
        let labels = r.labels.as_ref().map(|l| {
            ensure!(l.dim() == (rows, cols), Input, "labels of '{}' differ in shape", r.name);
            let offset = payload.len();
            for v in l.0.iter() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            Ok(offset)
        });
        entries.push(RecordEntry {
            name: r.name.clone(),
            rows,
            cols,
            pixels,
            clean,
            labels: labels.transpose()?,
        });
    }
    write_container(
        path.as_ref(),
        DATASET_MAGIC,
        &DatasetHeader { records: entries },
        &payload,
    )
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    let (header, payload): (DatasetHeader, _) = read_container(path.as_ref(), DATASET_MAGIC)?;
    header
        .records
        .into_iter()
        .map(|e| {
            let n = e.rows * e.cols;
            let grid = |offset| -> Result<Array2<f32>> {
                Array2::from_shape_vec((e.rows, e.cols), read_f32(&payload, offset, n)?)
                    .map_err(|err| Error::Format(err.to_string()))
            };
            let pixels = grid(e.pixels)?;
            let image = match e.clean {
                Some(c) => RawImage::with_clean(pixels, grid(c)?)?,
                None => RawImage::new(pixels)?,
            };
            let labels = e
                .labels
                .map(|offset| -> Result<InstanceLabelMap> {
                    let ids = payload_slice(&payload, offset, n, 4)?
                        .chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Ok(InstanceLabelMap(
                        Array2::from_shape_vec((e.rows, e.cols), ids).map_err(|err| Error::Format(err.to_string()))?,
                    ))
                })
                .transpose()?;
            Ok(DatasetRecord {
                name: e.name,
                image,
                labels,
            })
        })
        .collect()
}

const RASTER_EXTENSIONS: [&str; 4] = ["png", "tif", "tiff", "pgm"];

/// Reads a single-channel raster as raw intensities. 8- and 16-bit
/// images keep their integer values; float images keep theirs; color
/// images are converted to luminance.
pub fn read_raster(path: impl AsRef<Path>) -> Result<Array2<f32>> {
    let img = image::open(path.as_ref())?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values: Vec<f32> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(f32::from).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(f32::from).collect(),
        DynamicImage::ImageRgb32F(b) => b.pixels().map(|p| p.0[0]).collect(),
        other => other.to_luma32f().into_raw(),
    };
    Array2::from_shape_vec((h, w), values).map_err(|e| Error::Format(e.to_string()))
}

/// Reads an integer label raster (8- or 16-bit).
pub fn read_label_raster(path: impl AsRef<Path>) -> Result<InstanceLabelMap> {
    let path = path.as_ref();
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let ids: Vec<u32> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(u32::from).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(u32::from).collect(),
        _ => {
            return Err(Error::Input(format!(
                "{}: label images must be 8- or 16-bit single channel",
                path.display()
            )))
        }
    };
    Ok(InstanceLabelMap(
        Array2::from_shape_vec((h, w), ids).map_err(|e| Error::Format(e.to_string()))?,
    ))
}

/// Writes labels as a 16-bit PNG.
pub fn write_label_png(labels: &InstanceLabelMap, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = labels.dim();
    let max = labels.0.iter().copied().max().unwrap_or(0);
    ensure!(
        max <= u16::MAX as u32,
        Input,
        "instance id {max} does not fit in 16 bits"
    );
    let raw: Vec<u16> = labels.0.iter().map(|&v| v as u16).collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(w as u32, h as u32, raw).unwrap();
    buf.save(path.as_ref())?;
    Ok(())
}

/// Writes intensities as a 32-bit float TIFF, preserving values exactly.
pub fn write_float_tiff(grid: &Array2<f32>, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = grid.dim();
    let raw: Vec<f32> = grid.iter().flat_map(|&v| [v, v, v]).collect();
    let buf: ImageBuffer<image::Rgb<f32>, Vec<f32>> = ImageBuffer::from_raw(w as u32, h as u32, raw).unwrap();
    DynamicImage::ImageRgb32F(buf).save_with_format(path.as_ref(), image::ImageFormat::Tiff)?;
    Ok(())
}

fn raster_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| RASTER_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Loads every raster in `image_dir`, pairing each with the label raster
/// of the same file stem in `label_dir` when one exists.
pub fn load_raster_directory(image_dir: impl AsRef<Path>, label_dir: Option<&Path>) -> Result<Vec<DatasetRecord>> {
    let image_dir = image_dir.as_ref();
    let labels: Vec<PathBuf> = match label_dir {
        Some(d) => raster_files(d)?,
        None => Vec::new(),
    };
    let files = raster_files(image_dir)?;
    ensure!(!files.is_empty(), Input, "no raster images in {}", image_dir.display());
    files
        .into_iter()
        .map(|path| {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            let image = RawImage::new(read_raster(&path)?)?;
            let label = labels
                .iter()
                .find(|l| l.file_stem().and_then(|s| s.to_str()) == Some(stem.as_str()))
                .map(read_label_raster)
                .transpose()?;
            if let Some(l) = &label {
                ensure!(
                    l.dim() == image.dim(),
                    Input,
                    "labels for {stem} are {:?} but the image is {:?}",
                    l.dim(),
                    image.dim()
                );
            }
            Ok(DatasetRecord {
                name: stem,
                image,
                labels: label,
            })
        })
        .collect()
}
