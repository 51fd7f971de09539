use cpf_core::data::{synth_generate, SynthConfig};
use cpf_core::eval::{accuracies_at, build_score_table, evaluate};
use cpf_core::rng::{stream, Stream};
use cpf_core::{CpfParams, Dims, HeadConfig, Setting};

/// Accuracy of a head that has seen no data sits at chance, `1 / |C|`, up
/// to three binomial standard deviations. Each image is scored by its own
/// freshly drawn head so the trials are independent; images of one pair
/// under a shared head would decide alike.
#[test]
fn untrained_head_is_at_chance() {
    let cfg = SynthConfig {
        seen_fraction: 0.5,
        ..SynthConfig::default()
    };
    let data = synth_generate(&cfg).unwrap();
    let dims = Dims {
        visual: cfg.visual_dim,
        text: cfg.text_dim,
        blocks: cfg.blocks,
    };
    let cands = data.space.candidates(Setting::ClosedWorld);
    let (mut hits, mut totals) = ([0usize; 2], [0usize; 2]);
    for (i, b) in data.test.iter().enumerate() {
        let params = CpfParams::init(dims, HeadConfig::default(), &mut stream(i as u64, Stream::Init));
        let t = build_score_table(std::slice::from_ref(b), &params, &data.text, &data.space, Setting::ClosedWorld, 1)
            .unwrap();
        let (_, _, preds) = accuracies_at(&t, 0.0);
        let slot = usize::from(!data.space.is_seen(b.pair()));
        totals[slot] += 1;
        hits[slot] += usize::from(cands[preds[0]] == b.pair());
    }
    let p = 1.0 / cands.len() as f64;
    for (slot, what) in ["seen", "unseen"].iter().enumerate() {
        let n = totals[slot] as f64;
        let acc = hits[slot] as f64 / n;
        let sigma = (p * (1.0 - p) / n).sqrt();
        eprintln!("{what}: {acc:.4} vs chance {p:.4} (sigma {sigma:.4}, n {n})");
        assert!((acc - p).abs() <= 3.0 * sigma, "{what} accuracy {acc} vs chance {p}");
    }
}

#[test]
fn closed_and_open_world_agree_when_every_unseen_pair_is_tested() {
    let cfg = SynthConfig {
        num_attrs: 3,
        num_objs: 3,
        visual_dim: 8,
        text_dim: 4,
        tokens: 3,
        blocks: 2,
        seen_fraction: 0.67,
        samples_per_composition: 4,
        ..SynthConfig::default()
    };
    let mut data = synth_generate(&cfg).unwrap();
    let moved: Vec<_> = data.space.val_unseen.iter().copied().collect();
    data.space.test_unseen.extend(moved);
    data.space.val_unseen.clear();
    let params = CpfParams::init(
        Dims { visual: 8, text: 4, blocks: 2 },
        HeadConfig::default(),
        &mut stream(0, Stream::Init),
    );
    let cw = evaluate(&data.test, &params, &data.text, &data.space, Setting::ClosedWorld, 1).unwrap();
    let ow = evaluate(&data.test, &params, &data.text, &data.space, Setting::OpenWorld, 1).unwrap();
    assert_eq!(cw.curve, ow.curve);
    assert_eq!(cw.summary_line(), ow.summary_line());
}

#[test]
fn test_label_outside_candidates_is_named() {
    let cfg = SynthConfig {
        num_attrs: 3,
        num_objs: 3,
        visual_dim: 8,
        text_dim: 4,
        tokens: 3,
        blocks: 2,
        seen_fraction: 0.67,
        samples_per_composition: 2,
        ..SynthConfig::default()
    };
    let data = synth_generate(&cfg).unwrap();
    let params = CpfParams::init(
        Dims { visual: 8, text: 4, blocks: 2 },
        HeadConfig::default(),
        &mut stream(0, Stream::Init),
    );
    let p = *data.space.val_unseen.iter().next().unwrap();
    let mut test = data.test.clone();
    test[0].attr = p.attr;
    test[0].obj = p.obj;
    let err = evaluate(&test, &params, &data.text, &data.space, Setting::ClosedWorld, 1).unwrap_err();
    assert!(err.to_string().contains(&data.space.pair_name(p)), "{err}");
}
