use cpf_core::data::{synth_generate, SynthConfig, SynthData};
use cpf_core::rng::{stream, Stream};
use cpf_core::training::{dataset_losses, train, train_from, TrainConfig};
use cpf_core::{CpfParams, Dims, FeatureBundle};

fn tiny() -> SynthData {
    synth_generate(&SynthConfig {
        num_attrs: 3,
        num_objs: 3,
        visual_dim: 6,
        text_dim: 4,
        tokens: 3,
        blocks: 2,
        seen_fraction: 0.67,
        samples_per_composition: 3,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn init_for(data: &SynthData, cfg: &TrainConfig) -> CpfParams {
    let b = &data.train[0];
    let dims = Dims {
        visual: b.visual_dim(),
        text: data.text.dim(),
        blocks: b.shallow_blocks.len(),
    };
    CpfParams::init(dims, cfg.head, &mut stream(cfg.seed, Stream::Init))
}

#[test]
fn zero_epochs_returns_the_initialisation() {
    let data = tiny();
    let cfg = TrainConfig {
        epochs: 0,
        seed: 5,
        ..TrainConfig::default()
    };
    let out = train(&data.train, &data.text, &data.space, &cfg).unwrap();
    assert_eq!(out.params, init_for(&data, &cfg));
    assert!(out.log.epochs.is_empty());
    assert_eq!(out.log.initial, out.log.last);
}

#[test]
fn same_seed_same_log_and_params() {
    let data = tiny();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let a = train(&data.train, &data.text, &data.space, &cfg).unwrap();
    let b = train(&data.train, &data.text, &data.space, &cfg).unwrap();
    assert_eq!(a.log.to_text(), b.log.to_text());
    assert_eq!(a.log, b.log);
    assert_eq!(a.params, b.params);
}

#[test]
fn text_embeddings_untouched() {
    let data = tiny();
    let before: Vec<u64> = data
        .text
        .attrs
        .data()
        .iter()
        .chain(data.text.objs.data())
        .map(|x| x.to_bits())
        .collect();
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    train(&data.train, &data.text, &data.space, &cfg).unwrap();
    let after: Vec<u64> = data
        .text
        .attrs
        .data()
        .iter()
        .chain(data.text.objs.data())
        .map(|x| x.to_bits())
        .collect();
    assert_eq!(before, after);
    let mut thawed = data.text.clone();
    thawed.frozen = false;
    assert!(train(&data.train, &thawed, &data.space, &cfg).is_err());
}

/// Oracle for the first update: central differences for the gradient, then
/// Adam's first step, which moves each weight by `lr * g / (|g| + eps)`.
#[test]
fn one_sample_one_step_matches_reference() {
    let data = tiny();
    let sample: Vec<FeatureBundle> = vec![data.train[0].clone()];
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 1,
        base_lr: 1e-3,
        seed: 2,
        ..TrainConfig::default()
    };
    let init = init_for(&data, &cfg);
    let out = train_from(init.clone(), &sample, &data.text, &data.space, &cfg).unwrap();

    let loss = |p: &CpfParams| {
        dataset_losses(p, &data.text, &data.space, &sample, false, 1)
            .unwrap()
            .total
    };
    let h = 1e-6;
    let mut checked = 0;
    for k in 0..10 {
        for i in 0..init.tensors()[k].len() {
            let mut plus = init.clone();
            plus.tensors_mut()[k].data_mut()[i] += h;
            let mut minus = init.clone();
            minus.tensors_mut()[k].data_mut()[i] -= h;
            let g = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let before = init.tensors()[k].data()[i];
            let after = out.params.tensors()[k].data()[i];
            let step = after - before;
            assert!(step.abs() <= cfg.base_lr * (1.0 + 1e-9), "tensor {k}[{i}] moved {step}");
            if g.abs() > 1e-3 {
                let want = -cfg.base_lr * g / (g.abs() + 1e-8);
                assert!((step - want).abs() < 1e-9, "tensor {k}[{i}]: {step} vs {want}");
                checked += 1;
            }
        }
    }
    assert!(checked > 20, "only {checked} coordinates had a usable gradient");
}

#[test]
fn zero_attribute_weight_leaves_attribute_projection() {
    let data = tiny();
    let mut cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        ..TrainConfig::default()
    };
    cfg.head.alpha_attr = 0.0;
    let init = init_for(&data, &cfg);
    let out = train_from(init.clone(), &data.train, &data.text, &data.space, &cfg).unwrap();
    assert_eq!(out.params.proj_attr, init.proj_attr);
    assert_ne!(out.params.proj_obj, init.proj_obj);
}

#[test]
fn epoch_means_mostly_decrease_on_separable_data() {
    let data = synth_generate(&SynthConfig::default()).unwrap();
    let out = train(&data.train, &data.text, &data.space, &TrainConfig::default()).unwrap();
    let means: Vec<f64> = out.log.epochs.iter().map(|e| e.mean.total).collect();
    assert_eq!(means.len(), 10);
    // the first epoch is compared with the loss before training
    let mut prev = out.log.initial.total;
    let mut down = 0;
    for &m in &means {
        if m <= prev {
            down += 1;
        }
        prev = m;
    }
    assert!(down >= 8, "{means:?}");
    assert!(out.log.last.total < out.log.initial.total);
}

#[test]
fn unseen_training_label_rejected() {
    let data = tiny();
    let mut bad = data.train.clone();
    let p = *data.space.test_unseen.iter().next().unwrap();
    bad[0].attr = p.attr;
    bad[0].obj = p.obj;
    let err = train(&bad, &data.text, &data.space, &TrainConfig::default()).unwrap_err();
    assert!(err.to_string().contains("not a seen composition"), "{err}");
}
