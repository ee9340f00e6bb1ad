use decipher::codebook::{assign_patterns, CodebookSpec};
use decipher::data::Dataset;
use decipher::model::ModelConfig;
use decipher::training::{Distance, DistanceKind, TrainConfig, Trainer};

#[test]
fn toy_run_drives_loss_below_a_tenth() {
    let model = ModelConfig::toy();
    let spec = CodebookSpec::from_channels(&model.hierarchy_channels, &model.active_channels, 1, 0).unwrap();
    let data = Dataset::synthetic(8, 32, 11).unwrap();
    let codebook = assign_patterns(8, &spec, None).unwrap();
    let cfg = TrainConfig {
        batch_size: 8,
        epochs_phase1: 100,
        epochs_phase2: 400,
        wd_max: 0.0,
        wd_warmup_epochs: 100,
        ema_decay: 0.99,
        distance: DistanceKind::Mse,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(model, cfg, Distance::Mse).unwrap();
    let mut losses = Vec::new();
    for _ in 0..500 {
        let loss = t.run_epoch(&data, &codebook).unwrap();
        assert!(loss.is_finite());
        losses.push(loss);
    }
    assert_eq!(t.step(), 500);
    let (first, last) = (losses[0], *losses.last().unwrap());
    assert!(last < 0.1 * first, "loss {first} -> {last}");
}
