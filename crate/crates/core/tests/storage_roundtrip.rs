use denoiseg::dataio::{generate_blobs, InstanceLabelMap, Normalization, RawImage};
use denoiseg::network::{NetworkConfig, UNet};
use denoiseg::pipeline::{InferenceModel, Predictor, Thresholds};
use denoiseg::storage::{
    load_checkpoint, load_dataset, load_raster_directory, read_label_raster, read_raster, save_checkpoint,
    save_dataset, write_float_tiff, write_label_png, DatasetRecord,
};
use ndarray::{Array2, Array4};

fn small_net(seed: u64) -> UNet<f32> {
    let c = NetworkConfig {
        depth: 2,
        initial_features: 4,
        ..Default::default()
    };
    let mut net = UNet::new(c, seed).unwrap();
    // non-default running statistics
    let x = Array4::from_shape_fn((2, 1, 8, 8), |(n, _, y, x)| (n * 3 + y * x) as f32 * 0.1);
    net.forward(&x, denoiseg::network::Mode::Train).unwrap();
    net
}

fn model(predictor: Predictor) -> InferenceModel {
    InferenceModel {
        predictor,
        normalization: Normalization { mean: 12.5, std: 3.25 },
        thresholds: Some(Thresholds { ap: 0.45, seg: 0.6 }),
        seed: 77,
    }
}

fn same_net(a: &UNet<f32>, b: &UNet<f32>) -> bool {
    a.config() == b.config()
        && a.params()
            .iter()
            .zip(b.params())
            .all(|(p, q)| p.name == q.name && p.value == q.value)
        && a.buffers() == b.buffers()
}

#[test]
fn joint_checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.dnsg");
    let m = model(Predictor::Joint(small_net(3)));
    save_checkpoint(&m, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.normalization, m.normalization);
    assert_eq!(back.thresholds, m.thresholds);
    assert_eq!(back.seed, 77);
    match (&m.predictor, &back.predictor) {
        (Predictor::Joint(a), Predictor::Joint(b)) => assert!(same_net(a, b)),
        _ => panic!("predictor kind changed"),
    }
    let image = Array2::from_shape_fn((16, 16), |(y, x)| (y * 16 + x) as f32);
    assert_eq!(m.predict(&image).unwrap(), back.predict(&image).unwrap());
}

#[test]
fn sequential_checkpoint_keeps_both_networks() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.dnsg");
    let m = InferenceModel {
        thresholds: None,
        ..model(Predictor::Sequential {
            denoiser: small_net(1),
            segmenter: small_net(2),
        })
    };
    save_checkpoint(&m, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.thresholds, None);
    match (&m.predictor, &back.predictor) {
        (
            Predictor::Sequential {
                denoiser: a,
                segmenter: b,
            },
            Predictor::Sequential {
                denoiser: c,
                segmenter: d,
            },
        ) => {
            assert!(same_net(a, c));
            assert!(same_net(b, d));
        }
        _ => panic!("predictor kind changed"),
    }
}

#[test]
fn corrupt_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.dnsg");
    save_checkpoint(&model(Predictor::Joint(small_net(3))), &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();

    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    std::fs::write(&path, &bad_magic).unwrap();
    assert!(load_checkpoint(&path).is_err());

    bytes.truncate(bytes.len() - 4);
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_checkpoint(&path).is_err());

    assert!(load_checkpoint(dir.path().join("missing.dnsg")).is_err());

    let data = dir.path().join("d.dnsg");
    save_dataset(&[], &data).unwrap();
    assert!(load_checkpoint(&data).is_err());
}

#[test]
fn dataset_container_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.dnsg");
    let blobs = generate_blobs(3, 32, (1, 3), 5).unwrap();
    let mut records: Vec<DatasetRecord> = blobs
        .into_iter()
        .enumerate()
        .map(|(i, (image, labels))| DatasetRecord {
            name: format!("img{i}"),
            image,
            labels: Some(labels),
        })
        .collect();
    records.push(DatasetRecord {
        name: "plain".into(),
        image: RawImage::new(Array2::from_shape_fn((5, 7), |(y, x)| y as f32 - x as f32 * 0.5)).unwrap(),
        labels: None,
    });
    save_dataset(&records, &path).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), records);
}

#[test]
fn raster_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    let labels = dir.path().join("labels");
    std::fs::create_dir_all(&images).unwrap();
    std::fs::create_dir_all(&labels).unwrap();

    let grid = Array2::from_shape_fn((6, 9), |(y, x)| (y * 9 + x) as f32 * 1.5 - 20.0);
    write_float_tiff(&grid, images.join("a.tif")).unwrap();
    assert_eq!(read_raster(images.join("a.tif")).unwrap(), grid);
    write_float_tiff(&grid, images.join("b.tif")).unwrap();

    let map = InstanceLabelMap(Array2::from_shape_fn(
        (6, 9),
        |(y, x)| if x < 4 { 0 } else { 300 + y as u32 },
    ));
    write_label_png(&map, labels.join("a.png")).unwrap();
    assert_eq!(read_label_raster(labels.join("a.png")).unwrap(), map);

    let loaded = load_raster_directory(&images, Some(labels.as_path())).unwrap();
    assert_eq!(loaded.len(), 2);
    let a = loaded.iter().find(|r| r.name == "a").unwrap();
    assert_eq!(a.labels.as_ref(), Some(&map));
    assert!(loaded.iter().find(|r| r.name == "b").unwrap().labels.is_none());
}

#[test]
fn eight_bit_rasters_keep_raw_values() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.png");
    let img = image::GrayImage::from_fn(4, 3, |x, y| image::Luma([(x * 10 + y) as u8]));
    img.save(&path).unwrap();
    let grid = read_raster(&path).unwrap();
    assert_eq!(grid.dim(), (3, 4));
    assert_eq!(grid[[2, 3]], 32.0);
}
