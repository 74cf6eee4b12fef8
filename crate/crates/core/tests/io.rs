use std::path::{Path, PathBuf};

use eqprop::data::{
    augment, encode_cifar10, encode_idx_images, encode_idx_labels, load_cifar10_bin,
    load_mnist_idx, parse_cifar10, parse_idx_images, AugmentOptions, Dataset,
};
use eqprop::{toy, Checkpoint, Connection, Error, LossHead, RunConfig, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// Two 2x3 images with pixel bytes 0..12 and labels 7, 3.
fn idx_fixture() -> (Vec<u8>, Vec<u8>) {
    let mut images = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3];
    images.extend(0u8..12);
    let labels = vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 3];
    (images, labels)
}

#[test]
fn idx_fixture_decodes_pixel_by_pixel() {
    let (img, lab) = idx_fixture();
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
    std::fs::write(&ip, &img).unwrap();
    std::fs::write(&lp, &lab).unwrap();
    let d = load_mnist_idx(&ip, &lp).unwrap();
    assert_eq!(d.images.shape(), &[2, 1, 2, 3]);
    assert_eq!(d.labels, vec![7, 3]);
    for (i, v) in d.images.data().iter().enumerate() {
        assert_eq!(*v, i as f64 / 255.0);
    }
    // byte-identical round trip
    assert_eq!(encode_idx_images(&d.images).unwrap(), img);
    assert_eq!(encode_idx_labels(&d.labels).unwrap(), lab);
}

#[test]
fn idx_errors_are_reported() {
    let (img, lab) = idx_fixture();
    let mut bad = img.clone();
    bad[3] = 1;
    assert!(matches!(parse_idx_images(&bad), Err(Error::Format { .. })));
    assert!(parse_idx_images(&img[..20]).is_err());
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
    std::fs::write(&ip, &img).unwrap();
    let mut lab3 = lab.clone();
    lab3[7] = 3;
    lab3.push(1);
    std::fs::write(&lp, &lab3).unwrap();
    assert!(load_mnist_idx(&ip, &lp).is_err());
    assert!(matches!(
        load_mnist_idx(&dir.path().join("missing"), &lp),
        Err(Error::Io { .. })
    ));
}

#[test]
fn cifar_records_decode_in_channel_order() {
    let mut bytes = Vec::new();
    for (label, base) in [(4u8, 0usize), (9, 100)] {
        bytes.push(label);
        bytes.extend((0..3072).map(|i| ((i + base) % 256) as u8));
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("batch.bin");
    std::fs::write(&p, &bytes).unwrap();
    let d = load_cifar10_bin(&p).unwrap();
    assert_eq!(d.images.shape(), &[2, 3, 32, 32]);
    assert_eq!(d.labels, vec![4, 9]);
    // red plane first, then green: entry (c, i, j) is byte 1 + c*1024 + i*32 + j
    let s = d.images.sample(1);
    assert_eq!(
        s[1024 + 5 * 32 + 7],
        ((1024 + 5 * 32 + 7 + 100) % 256) as f64 / 255.0
    );
    assert_eq!(encode_cifar10(&d).unwrap(), bytes);
    assert!(parse_cifar10(&bytes[..3000]).is_err());
    let mut bad = bytes.clone();
    bad[0] = 10;
    assert!(parse_cifar10(&bad).is_err());
}

#[test]
fn normalization_uses_channel_statistics() {
    let images = Tensor::new(
        vec![2, 2, 1, 2],
        vec![0.0, 1.0, 5.0, 5.0, 2.0, 3.0, 7.0, 9.0],
    )
    .unwrap();
    let d = Dataset::new(images, vec![0, 1], 2).unwrap();
    let st = d.stats();
    assert_eq!(st.mean, vec![1.5, 6.5]);
    assert!((st.std[0] - 1.25f64.sqrt()).abs() < 1e-12);
    let n = d.normalized(&st).unwrap();
    let ns = n.stats();
    for c in 0..2 {
        assert!(ns.mean[c].abs() < 1e-12);
        assert!((ns.std[c] - 1.0).abs() < 1e-12);
    }
    assert_eq!(n.norm, Some(st));
    assert!(Dataset::new(Tensor::zeros(&[2, 1, 1, 1]), vec![0, 2], 2).is_err());
}

#[test]
fn augmentation_is_seeded_and_shape_preserving() {
    let d = eqprop::data::synthetic(8, [3, 6, 6], 2, 0.2, 1);
    let opts = AugmentOptions {
        hflip: true,
        crop_padding: 2,
    };
    let a = augment(&d.images, &mut ChaCha8Rng::seed_from_u64(3), &opts).unwrap();
    let b = augment(&d.images, &mut ChaCha8Rng::seed_from_u64(3), &opts).unwrap();
    let c = augment(&d.images, &mut ChaCha8Rng::seed_from_u64(4), &opts).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.shape(), d.images.shape());
    let off = augment(
        &d.images,
        &mut ChaCha8Rng::seed_from_u64(3),
        &AugmentOptions::default(),
    )
    .unwrap();
    assert_eq!(off, d.images);
    // flipping only permutes pixels within rows
    let flip = AugmentOptions {
        hflip: true,
        crop_padding: 0,
    };
    let f = augment(&d.images, &mut ChaCha8Rng::seed_from_u64(5), &flip).unwrap();
    for (r, o) in f.data().chunks(6).zip(d.images.data().chunks(6)) {
        let mut rev = o.to_vec();
        rev.reverse();
        assert!(r == o || r == rev.as_slice());
    }
}

#[test]
fn shipped_configs_parse_and_validate() {
    let mut seen = 0;
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("toml") {
            continue;
        }
        let cfg = RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate()
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        // serialization round trip
        let again = RunConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(again, cfg);
        seen += 1;
    }
    assert!(seen >= 4);
}

#[test]
fn unknown_keys_are_named_in_the_error() {
    let text = std::fs::read_to_string(configs_dir().join("toy.toml")).unwrap();
    for (section, key) in [
        ("[hyperparams]", "momentun"),
        ("[architecture]", "chanels"),
        ("[data]", "shuffle"),
    ] {
        let bad = text.replacen(section, &format!("{section}\n{key} = 1"), 1);
        match RunConfig::from_toml_str(&bad) {
            Err(Error::InvalidConfig { field, .. }) => assert!(field.contains(key), "{field}"),
            other => panic!("{key}: {other:?}"),
        }
    }
    let top = format!("verbose = true\n{text}");
    assert!(RunConfig::from_toml_str(&top).is_err());
}

#[test]
fn relative_paths_resolve_against_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let sub = dir.path().join("cfg");
    std::fs::create_dir(&sub).unwrap();
    let (img, lab) = idx_fixture();
    let text = std::fs::read_to_string(configs_dir().join("toy.toml")).unwrap();
    let mut cfg = RunConfig::from_toml_str(&text).unwrap();
    cfg.data.kind = eqprop::config::DataKind::Mnist;
    cfg.data.train_images = Some("../idx/img".into());
    cfg.data.train_labels = Some("../idx/lab".into());
    cfg.data.test_images = Some("../idx/img".into());
    cfg.data.test_labels = Some("../idx/lab".into());
    cfg.out_dir = Some("runs/x".into());
    std::fs::create_dir(dir.path().join("idx")).unwrap();
    std::fs::write(dir.path().join("idx/img"), &img).unwrap();
    std::fs::write(dir.path().join("idx/lab"), &lab).unwrap();
    let p = sub.join("run.toml");
    std::fs::write(&p, cfg.to_toml_string().unwrap()).unwrap();
    let loaded = RunConfig::load(&p).unwrap();
    assert_eq!(
        loaded.data.train_images.as_deref(),
        Some(sub.join("../idx/img").as_path())
    );
    assert_eq!(
        loaded.out_dir.as_deref(),
        Some(sub.join("runs/x").as_path())
    );
    // the toy architecture does not fit 2x3 digits
    assert!(loaded.validate().is_err());
}

#[test]
fn checkpoints_round_trip_through_files() {
    let p = toy::problem(LossHead::SquaredError, Connection::Unidirectional, 2);
    let hp = toy::training_hyperparams(eqprop::EstimatorKind::VfSym, 0.5, 2);
    let ck = Checkpoint::new(p.net.arch().clone(), hp, p.params, None, 7);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/ck.eqp");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(Checkpoint::from_bytes(&magic).is_err());
}
