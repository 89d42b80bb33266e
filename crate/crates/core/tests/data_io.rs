use approxprop::config::ExperimentConfig;
use approxprop::data::{
    load_cifar10, load_cifar10_test, read_cifar_file, synth_textures, TextureParams, CIFAR_RECORD, CIFAR_TEST_FILE,
    CIFAR_TRAIN_FILES,
};
use approxprop::Error;

fn textures(n: usize, seed: u64) -> approxprop::data::RawImages {
    synth_textures(seed, n, 10, TextureParams::default()).unwrap()
}

#[test]
fn cifar_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let parts: Vec<_> = (0..5).map(|i| textures(12, i)).collect();
    for (raw, name) in parts.iter().zip(CIFAR_TRAIN_FILES) {
        raw.write_cifar(dir.path().join(name)).unwrap();
    }
    let test = textures(10, 9);
    test.write_cifar(dir.path().join(CIFAR_TEST_FILE)).unwrap();

    let ds = load_cifar10(dir.path()).unwrap();
    assert_eq!(ds.len(), 60);
    assert_eq!(ds.classes, 10);
    let expect: Vec<usize> = parts
        .iter()
        .flat_map(|p| p.labels.iter().map(|&l| l as usize))
        .collect();
    assert_eq!(ds.labels, expect);
    let bytes = std::fs::metadata(dir.path().join(CIFAR_TRAIN_FILES[0])).unwrap().len();
    assert_eq!(bytes as usize, 12 * CIFAR_RECORD);

    let t = load_cifar10_test(dir.path(), &ds).unwrap();
    assert_eq!((t.len(), &t.mean, &t.std), (10, &ds.mean, &ds.std));
    assert_eq!(read_cifar_file(dir.path().join(CIFAR_TEST_FILE)).unwrap(), test);
}

#[test]
fn damaged_files_report_their_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data_batch_1.bin");
    std::fs::write(&path, vec![0u8; CIFAR_RECORD + 7]).unwrap();
    match read_cifar_file(&path) {
        Err(Error::Format { path: p, .. }) => assert_eq!(p, path),
        other => panic!("{other:?}"),
    }
    let mut record = vec![0u8; CIFAR_RECORD];
    record[0] = 10;
    std::fs::write(&path, record).unwrap();
    assert!(matches!(read_cifar_file(&path), Err(Error::Format { .. })));
    assert!(matches!(
        load_cifar10(dir.path().join("missing")),
        Err(Error::Io { .. })
    ));
}

fn write_config(dir: &std::path::Path, data: &str) -> std::path::PathBuf {
    let path = dir.join("exp.json");
    let text = format!(
        r#"{{
            "network": {{"input": {{"channels": 3, "height": 32, "width": 32}},
                         "body": [{{"type": "layer", "kind": "conv", "out": 4}}],
                         "head": {{"classes": 10}}}},
            "data": {data},
            "train": {{"mode": "exact", "bits": 8, "batch_size": 4, "total_iters": 1, "lr_schedule": [[0, 0.1]]}}
        }}"#
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn missing_cifar_falls_back_only_when_asked() {
    let dir = tempfile::tempdir().unwrap();
    let with = write_config(
        dir.path(),
        r#"{"source": "cifar10", "dir": "nowhere", "fallback": {"n": 30, "seed": 2}}"#,
    );
    let ds = ExperimentConfig::load(&with).unwrap().dataset().unwrap();
    assert_eq!((ds.len(), ds.classes), (30, 10));
    let without = write_config(dir.path(), r#"{"source": "cifar10", "dir": "nowhere"}"#);
    assert!(ExperimentConfig::load(&without).unwrap().dataset().is_err());
}

#[test]
fn cifar_limit_truncates() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("cifar");
    std::fs::create_dir(&data).unwrap();
    for (i, name) in CIFAR_TRAIN_FILES.iter().enumerate() {
        textures(10, i as u64).write_cifar(data.join(name)).unwrap();
    }
    let cfg = write_config(dir.path(), r#"{"source": "cifar10", "dir": "cifar", "limit": 17}"#);
    let ds = ExperimentConfig::load(&cfg).unwrap().dataset().unwrap();
    assert_eq!(ds.len(), 17);
}

#[test]
fn unknown_config_fields_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"source": "textures", "n": 20, "colour": true}"#);
    assert!(matches!(ExperimentConfig::load(&cfg), Err(Error::Json { .. })));
}
