use std::fs;
use std::path::Path;

use m2unet::data::{load_dataset, synth_polyp_raw, write_raw_dataset};
use m2unet::trainer::{evaluate_checkpoint, load_training_data, DataSource, TrainConfig, Trainer};

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    for sub in ["images", "masks"] {
        for entry in fs::read_dir(dir.join(sub)).unwrap() {
            let path = entry.unwrap().path();
            files.push((path.display().to_string(), fs::read(&path).unwrap()));
        }
    }
    files.sort();
    files
}

#[test]
fn tiny_model_loss_falls_over_twenty_epochs() {
    let cfg = TrainConfig::parse("model.preset = tiny\ntrain.epochs = 20\ntrain.synth_n = 8\ntrain.lr_max = 0.001").unwrap();
    let data = load_training_data(&cfg).unwrap();
    let mut t = Trainer::new(cfg, data).unwrap();
    let logs = t.run(|_| {}).unwrap();
    assert_eq!(logs.len(), 20);
    assert!(logs[19].mean_loss < logs[0].mean_loss, "epoch 1 {} vs epoch 20 {}", logs[0].mean_loss, logs[19].mean_loss);
}

#[test]
fn training_from_a_directory_leaves_it_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("ds");
    write_raw_dataset(&data_dir, &synth_polyp_raw(3, 64, 9).unwrap()).unwrap();
    let before = snapshot(&data_dir);

    let out = dir.path().join("run");
    let cfg = TrainConfig {
        model: m2unet::model::ModelConfig { image_size: (32, 32), ..m2unet::model::ModelConfig::gradcheck() },
        target_size: 32,
        epochs: 2,
        batch_size: 2,
        checkpoint_every: 1,
        data: DataSource::Dir(data_dir.clone()),
        out_dir: Some(out.clone()),
        ..TrainConfig::default()
    };
    let data = load_training_data(&cfg).unwrap();
    assert_eq!(data, load_dataset(&data_dir, 32).unwrap());
    Trainer::new(cfg, data).unwrap().run(|_| {}).unwrap();

    assert_eq!(snapshot(&data_dir), before);
    for name in ["config.txt", "log.tsv", "epoch_0001.ckpt", "epoch_0002.ckpt", "final.ckpt"] {
        assert!(out.join(name).exists(), "{name} missing");
    }
    let final_bytes = fs::read(out.join("final.ckpt")).unwrap();
    assert_eq!(fs::read(out.join("epoch_0002.ckpt")).unwrap(), final_bytes);
    let report = evaluate_checkpoint(&out.join("final.ckpt"), &data_dir).unwrap();
    assert_eq!(report.per_sample.len(), 3);
}

#[test]
fn evaluating_at_the_wrong_size_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    write_raw_dataset(dir.path(), &synth_polyp_raw(1, 32, 0).unwrap()).unwrap();
    let cfg = TrainConfig::parse("model.preset = gradcheck\ntrain.target_size = 32\ntrain.synth_n = 2\ntrain.epochs = 1").unwrap();
    let data = load_training_data(&cfg).unwrap();
    let t = Trainer::new(cfg, data).unwrap();
    let other = m2unet::data::synth_polyp_dataset(1, 64, 0).unwrap();
    assert!(matches!(t.evaluate(&other), Err(m2unet::Error::Usage(_))));
}
