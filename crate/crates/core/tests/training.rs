use sunet::backbone::BackboneConfig;
use sunet::channel::ChannelConfig;
use sunet::model::{ModelConfig, SunetModel};
use sunet::synthdata::{generate, GenerateSpec, SegmentationSample};
use sunet::trainer::{split_by_subject, train, EpochReport, TrainConfig};
use sunet::Error;

fn fixture() -> Vec<SegmentationSample> {
    let spec = GenerateSpec {
        n: 4,
        image_size: 16,
        area_range: [10.0, 30.0],
        p_present: 1.0,
        slices_per_subject: 2,
        ..GenerateSpec::default()
    };
    generate(&spec, 0).unwrap()
}

fn model_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            base_channels: 4,
            depth: 2,
            input_size: [16, 16],
            ..BackboneConfig::default()
        },
        channel: Some(ChannelConfig {
            sentence_length: 3,
            vocab_size: 8,
            hidden_size: 8,
            cell_size: 8,
            embedding_dim: 4,
            ..ChannelConfig::default()
        }),
    }
}

fn run(epochs: usize, seed: u64) -> (SunetModel, Vec<EpochReport>) {
    let data = fixture();
    let mut model = SunetModel::new(model_config(), seed).unwrap();
    let cfg = TrainConfig {
        epochs,
        seed,
        ..TrainConfig::default()
    };
    let out = train(&mut model, &data, &data, &cfg, |_, _| Ok(())).unwrap();
    (model, out.reports)
}

#[test]
fn loss_decreases_over_first_five_epochs() {
    let (_, reports) = run(5, 0);
    let losses: Vec<f64> = reports.iter().map(|r| r.train_loss).collect();
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn one_epoch_moves_every_parameter() {
    let init = SunetModel::new(model_config(), 0).unwrap();
    let data = fixture();
    let mut model = init.clone();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let out = train(&mut model, &data, &[], &cfg, |_, _| Ok(())).unwrap();
    assert!(out.reports[0].train_loss.is_finite());
    for (name, t) in init.params.learnable() {
        let after = model.params.get(name).unwrap();
        assert!(t.data().iter().zip(after.data()).any(|(a, b)| a != b), "{name} unchanged");
    }
}

#[test]
fn same_seed_same_reports() {
    let (a, ra) = run(2, 7);
    let (b, rb) = run(2, 7);
    assert_eq!(ra, rb);
    for (name, t) in a.params.iter() {
        assert_eq!(t.data(), b.params.get(name).unwrap().data(), "{name}");
    }
    let (_, rc) = run(2, 8);
    assert_ne!(ra, rc);
}

#[test]
fn best_validation_params_are_kept() {
    let data = fixture();
    let mut model = SunetModel::new(model_config(), 1).unwrap();
    let cfg = TrainConfig {
        epochs: 4,
        learning_rate: 0.01,
        seed: 1,
        ..TrainConfig::default()
    };
    let mut snapshots = Vec::new();
    let out = train(&mut model, &data, &data, &cfg, |_, m| {
        snapshots.push(m.params.clone());
        Ok(())
    })
    .unwrap();
    let best = out
        .reports
        .iter()
        .fold(&out.reports[0], |b, r| if r.val_dsc > b.val_dsc { r } else { b });
    assert_eq!(out.best_epoch, best.epoch);
    let kept = &snapshots[best.epoch - 1];
    for (name, t) in kept.iter() {
        assert_eq!(t.data(), model.params.get(name).unwrap().data(), "{name}");
    }
}

#[test]
fn exploding_learning_rate_aborts_with_context() {
    let data = fixture();
    let mut model = SunetModel::new(model_config(), 0).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        learning_rate: 1e300,
        ..TrainConfig::default()
    };
    match train(&mut model, &data, &data, &cfg, |_, _| Ok(())) {
        Err(Error::NumericalAbort { epoch, tau, lr, .. }) => {
            assert!(epoch >= 1);
            assert_eq!(tau, 1.0);
            assert_eq!(lr, 1e300);
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training should abort"),
    }
}

#[test]
fn validation_holds_out_last_subjects() {
    let spec = GenerateSpec {
        n: 50,
        image_size: 16,
        area_range: [10.0, 30.0],
        slices_per_subject: 5,
        ..GenerateSpec::default()
    };
    let data = generate(&spec, 3).unwrap();
    let (train_set, val) = split_by_subject(&data, 0.2);
    assert_eq!((train_set.len(), val.len()), (40, 10));
    assert!(val.iter().all(|s| s.sample_id == "P008" || s.sample_id == "P009"));
    // ceil(0.25 * 10) = 3 subjects
    let (_, val) = split_by_subject(&data, 0.25);
    assert_eq!(val.len(), 15);
}
