use pvit::data::{split_train_test, synth_dataset, PatternFamily, SynthSpec};
use pvit::mlp::{MlpClassifier, MlpConfig};
use pvit::model::{PViTConfig, PViTModel};
use pvit::prior::train_prior_model;
use pvit::train::{accuracy, train, Network, Sample, TrainConfig};

fn tiny_pvit(alpha: f64, seed: u64) -> PViTModel {
    let cfg = PViTConfig {
        image_h: 8,
        image_w: 8,
        patch_size: 4,
        embed_dim: 16,
        depth: 1,
        heads: 2,
        mlp_dim: 16,
        alpha,
        ..PViTConfig::desk(3)
    };
    PViTModel::new(cfg, seed).unwrap()
}

fn image(seed: usize) -> Vec<f64> {
    (0..64).map(|i| ((i * 7 + seed * 13) % 11) as f64 / 11.0 - 0.5).collect()
}

#[test]
fn overfits_a_single_sample() {
    let mut model = tiny_pvit(0.5, 1);
    let img = image(0);
    let prior = [0.2, 1.0, -0.4];
    let samples = [Sample { pixels: &img, prior: &prior }];
    let cfg = TrainConfig { epochs: 60, batch_size: 1, base_lr: 1e-2, warmup_epochs: 1, ..TrainConfig::default() };
    let report = train(&mut model, &samples, &[2], &cfg, None, &mut |_| {}).unwrap();
    let first = report.curve.first().unwrap().loss;
    let last = report.curve.last().unwrap().loss;
    assert!(last < 0.05, "loss {first} -> {last}");
    assert_eq!(accuracy(&model, &samples, &[2]).unwrap(), 1.0);
}

#[test]
fn loss_falls_after_warmup() {
    let mut model = tiny_pvit(0.1, 2);
    let imgs: Vec<Vec<f64>> = (0..12).map(image).collect();
    let prior = [0.0, 0.0, 0.0];
    let samples: Vec<Sample<'_>> = imgs.iter().map(|p| Sample { pixels: p, prior: &prior }).collect();
    let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
    let cfg = TrainConfig { epochs: 20, batch_size: 12, base_lr: 5e-3, warmup_epochs: 5, ..TrainConfig::default() };
    let report = train(&mut model, &samples, &labels, &cfg, None, &mut |_| {}).unwrap();
    let at5 = report.curve[5].loss;
    let end = report.curve.last().unwrap().loss;
    assert!(end < at5, "{at5} -> {end}");
}

#[test]
fn zero_alpha_freezes_prior_projection() {
    let mut model = tiny_pvit(0.0, 3);
    let before = model.prior_projection().clone();
    let imgs: Vec<Vec<f64>> = (0..6).map(image).collect();
    let priors: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, -1.0, 0.5]).collect();
    let samples: Vec<Sample<'_>> = imgs.iter().zip(&priors).map(|(p, q)| Sample { pixels: p, prior: q }).collect();
    let cfg = TrainConfig { epochs: 3, batch_size: 2, base_lr: 1e-2, weight_decay: 0.0, ..TrainConfig::default() };
    train(&mut model, &samples, &[0, 1, 2, 0, 1, 2], &cfg, None, &mut |_| {}).unwrap();
    assert_eq!(model.prior_projection(), &before);
    // Other parameters did move.
    let fresh = tiny_pvit(0.0, 3);
    assert_ne!(model.params().by_name("head.weight"), fresh.params().by_name("head.weight"));
}

#[test]
fn prior_mlp_separates_blobs() {
    let spec = SynthSpec { pattern: PatternFamily::Blobs, ..SynthSpec::new(4, 150, 0.3, 5) };
    let ds = synth_dataset(&spec).unwrap();
    let (train_set, test_set) = split_train_test(&ds, 50, 0).unwrap();
    let cfg = TrainConfig { epochs: 5, base_lr: 1e-3, ..TrainConfig::default() };
    let fit = train_prior_model(&train_set, 32, &cfg).unwrap();
    assert!(fit.train_accuracy >= 0.99, "{}", fit.train_accuracy);
    let samples: Vec<Sample<'_>> = test_set.images.iter().map(|p| Sample { pixels: p, prior: &[] }).collect();
    let acc = accuracy(&fit.model, &samples, test_set.labels.as_ref().unwrap()).unwrap();
    assert!(acc >= 0.99, "{acc}");
}

#[test]
fn untrained_prior_is_at_init() {
    let spec = SynthSpec { pattern: PatternFamily::Blobs, ..SynthSpec::new(4, 50, 0.3, 5) };
    let ds = synth_dataset(&spec).unwrap();
    let cfg = TrainConfig { epochs: 0, warmup_epochs: 0, seed: 9, ..TrainConfig::default() };
    let fit = train_prior_model(&ds, 32, &cfg).unwrap();
    assert!(fit.report.curve.is_empty());
    let init = MlpClassifier::new(MlpConfig { input_dim: 784, hidden: 32, num_classes: 4 }, 9).unwrap();
    assert_eq!(fit.model.params(), init.params());
    assert!(fit.train_accuracy < 0.99, "{}", fit.train_accuracy);
}
