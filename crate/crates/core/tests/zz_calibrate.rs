//! Temporary calibration harness (deleted before release): explores default
//! hyperparameters and sanity-checks directional claims at small scale.

use deadbits_core::*;

fn bundle_from(spec: SyntheticSpec, query: usize, train: usize, split_seed: u64) -> DatasetBundle {
    let full = generate_synthetic(&spec).unwrap();
    let mut b = split_bundle(&full, query, train, split_seed).unwrap();
    b.standardize().unwrap();
    b
}

#[test]
#[ignore]
fn untrained_map_two_classes() {
    // How does an untrained encoder score on 2 well-separated classes?
    let spec = SyntheticSpec {
        num_classes: 2,
        samples_per_class: 200,
        dim: 16,
        cluster_spread: 0.3,
        class_center_scale: 1.0,
        multilabel_overlap: 0.0,
        seed: 11,
    };
    let data = bundle_from(spec, 50, 200, 3);
    let mut maps = Vec::new();
    for seed in 0..20u64 {
        let cfg = RunConfig {
            code_length: 16,
            hidden_dims: vec![32, 16],
            ..RunConfig::default()
        };
        let model = EncoderModel::new(&cfg.layer_dims(16), Activation::Relu, seed).unwrap();
        let m = evaluate(&model, &data.query, &data.gallery, 100).unwrap();
        maps.push(m.map);
    }
    let mean = maps.iter().sum::<f64>() / maps.len() as f64;
    println!("untrained 2-class MAP over 20 seeds: mean={mean:.4} min={:.4} max={:.4}",
        maps.iter().cloned().fold(f64::INFINITY, f64::min),
        maps.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    // class prior here ~= 0.5
}

#[test]
#[ignore]
fn untrained_map_random_labels() {
    // Null check: one blob, labels assigned at random -> no signal.
    let spec = SyntheticSpec {
        num_classes: 2,
        samples_per_class: 200,
        dim: 16,
        cluster_spread: 1.0,
        class_center_scale: 1e-9, // all centers at ~origin: labels carry no geometry
        multilabel_overlap: 0.0,
        seed: 11,
    };
    let data = bundle_from(spec, 50, 200, 3);
    let mut maps = Vec::new();
    for seed in 0..20u64 {
        let cfg = RunConfig {
            code_length: 16,
            hidden_dims: vec![32, 16],
            ..RunConfig::default()
        };
        let model = EncoderModel::new(&cfg.layer_dims(16), Activation::Relu, seed).unwrap();
        let m = evaluate(&model, &data.query, &data.gallery, 100).unwrap();
        maps.push(m.map);
    }
    let mean = maps.iter().sum::<f64>() / maps.len() as f64;
    println!("untrained random-label MAP over 20 seeds: mean={mean:.4}");
}

#[test]
#[ignore]
fn small_training_run() {
    let spec = SyntheticSpec {
        num_classes: 10,
        samples_per_class: 60,
        dim: 16,
        cluster_spread: 0.8,
        class_center_scale: 1.0,
        multilabel_overlap: 0.1,
        seed: 5,
    };
    let data = bundle_from(spec, 100, 400, 3);
    let cfg = RunConfig {
        code_length: 16,
        hidden_dims: vec![32, 16],
        epochs: 20,
        eval_top_k: 100,
        batch_size: 64,
        ..RunConfig::default()
    };
    let untrained = EncoderModel::new(&cfg.layer_dims(16), Activation::Relu, cfg.seed).unwrap();
    let u = evaluate(&untrained, &data.query, &data.gallery, 100).unwrap();
    let (model, log) = train(&cfg, &data.train).unwrap();
    let t = evaluate(&model, &data.query, &data.gallery, 100).unwrap();
    let first = log.epochs().next().unwrap().mean_step_loss;
    let last = log.epochs().last().unwrap().mean_step_loss;
    let deads: Vec<u64> = log.epochs().map(|e| e.dead_count).collect();
    println!("untrained MAP {:.4} -> trained MAP {:.4}", u.map, t.map);
    println!("mean step loss first epoch {first:.3} last epoch {last:.3}");
    println!("epoch dead counts: {deads:?}");
}

#[test]
#[ignore]
fn lr_sweep_small() {
    let spec = SyntheticSpec {
        num_classes: 10,
        samples_per_class: 60,
        dim: 16,
        cluster_spread: 0.8,
        class_center_scale: 1.0,
        multilabel_overlap: 0.1,
        seed: 5,
    };
    let data = bundle_from(spec, 100, 400, 3);
    for lr in [1e-3, 3e-4, 1e-4, 3e-5, 1e-5] {
        let cfg = RunConfig {
            code_length: 16,
            hidden_dims: vec![32, 16],
            epochs: 20,
            eval_top_k: 100,
            batch_size: 64,
            base_lr: lr,
            ..RunConfig::default()
        };
        let (model, log) = train(&cfg, &data.train).unwrap();
        let t = evaluate(&model, &data.query, &data.gallery, 100).unwrap();
        let first = log.epochs().next().unwrap().mean_step_loss;
        let last = log.epochs().last().unwrap().mean_step_loss;
        let deads: Vec<u64> = log.epochs().map(|e| e.dead_count).collect();
        println!(
            "lr={lr:>7}: MAP {:.4}  loss {first:>9.1} -> {last:>9.1}  dead last5 {:?}",
            t.map,
            &deads[deads.len() - 5..]
        );
    }
}

#[test]
#[ignore]
fn default_scale_variants() {
    // Timing + direction at the default experiment scale.
    let t0 = std::time::Instant::now();
    let cfg = RunConfig {
        base_lr: std::env::var("CAL_LR")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(3e-4),
        ..RunConfig::default()
    };
    let data = match load_data(&cfg).unwrap() {
        LoadedData::Bundle(b) => b,
        _ => unreachable!(),
    };
    println!("data ready at {:?}", t0.elapsed());

    for (name, variant) in [
        ("full", AblationVariant::Full),
        ("baseline", AblationVariant::Baseline),
    ] {
        let t1 = std::time::Instant::now();
        let vcfg = variant.apply(&cfg);
        let (model, log) = train(&vcfg, &data.train).unwrap();
        let metrics = evaluate(&model, &data.query, &data.gallery, cfg.eval_top_k).unwrap();
        let deads: Vec<u64> = log.epochs().map(|e| e.dead_count).collect();
        let tail = &deads[deads.len() - 15..];
        let tail_mean = tail.iter().sum::<u64>() as f64 / tail.len() as f64;
        println!(
            "{name}: map={:.4} dead tail mean={tail_mean:.1} run took {:?}",
            metrics.map,
            t1.elapsed()
        );
        println!("  dead series: {deads:?}");
    }
}
