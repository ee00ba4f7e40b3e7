use saformer::labeler::{param_hash, Labeler, LabelerConfig, LabelerSample};
use saformer::pipeline::{crop_samples, prepare};
use saformer::rng::stream;
use saformer::synth::{generate_world, WorldConfig};
use saformer::trainer::{augment, finetune_smt, pretrain, AugmentConfig, StepEvent, TrainConfig};

fn samples(n: usize) -> Vec<LabelerSample> {
    let world = WorldConfig {
        num_scenes: 8,
        seed: 21,
        ..WorldConfig::default()
    };
    let scenes = generate_world(&world).unwrap();
    let mut out = prepare(&crop_samples(&scenes, 0.1).unwrap()).unwrap();
    out.truncate(n);
    assert_eq!(out.len(), n);
    out
}

#[test]
fn overfits_a_single_sample() {
    let data = samples(1);
    let (labeler, init) = Labeler::new(&LabelerConfig::default()).unwrap();
    let cfg = TrainConfig {
        sim_epochs: 200,
        sim_batch: 1,
        ..TrainConfig::default()
    };
    let out = pretrain(&labeler, init, &data, &cfg).unwrap();
    let first = out.metrics.first().unwrap().total;
    let last = out.metrics.last().unwrap().total;
    assert!(last <= 0.1 * first, "loss {first} -> {last}");
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let data = samples(3);
    let (labeler, init) = Labeler::new(&LabelerConfig::default()).unwrap();
    let cfg = TrainConfig {
        sim_epochs: 2,
        sim_batch: 2,
        real_epochs: 1,
        real_batch: 2,
        lr: 0.0,
        finetune_lr: 0.0,
        ema_decay: 0.5,
        ..TrainConfig::default()
    };
    let out = pretrain(&labeler, init.clone(), &data, &cfg).unwrap();
    assert_eq!(out.params, init);
    let ft = finetune_smt(&labeler, &init, &data, &cfg, |_: &StepEvent| {}).unwrap();
    assert_eq!(param_hash(&ft.teacher), param_hash(&init));
    assert_eq!(ft.student, init);
}

#[test]
fn finetune_observer_sees_every_step() {
    let data = samples(5);
    let (labeler, init) = Labeler::new(&LabelerConfig::default()).unwrap();
    let cfg = TrainConfig {
        real_epochs: 2,
        real_batch: 2,
        ..TrainConfig::default()
    };
    let mut steps = Vec::new();
    let out = finetune_smt(&labeler, &init, &data, &cfg, |ev: &StepEvent| steps.push(ev.step)).unwrap();
    assert_eq!(steps, (0..6).collect::<Vec<u64>>());
    assert_eq!(out.steps, 6);
    assert!(out.metrics.iter().all(|m| m.total.is_finite() && (0.0..=1.0).contains(&m.coverage)));
}

#[test]
fn jitter_has_the_configured_spread() {
    let data = samples(4);
    let cfg = AugmentConfig {
        flip: false,
        elastic: false,
        jitter_sigma: 0.01,
        ..AugmentConfig::default()
    };
    let mut diffs = Vec::new();
    for (i, s) in data.iter().enumerate() {
        let a = augment(s, &cfg, &mut stream(31, i as u64));
        let d = &a.input.features - &s.input.features;
        for r in d.rows() {
            diffs.extend(r.iter().take(3).copied());
            assert!(r.iter().skip(3).all(|&c| c == 0.0));
        }
    }
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean.abs() < 4.0 * 0.01 / n.sqrt(), "mean {mean}");
    assert!((sd - 0.01).abs() < 0.05 * 0.01, "sd {sd}");
}

#[test]
fn flip_is_an_involution() {
    let s = &samples(1)[0];
    let cfg = AugmentConfig {
        flip_p: 1.0,
        jitter_sigma: 0.0,
        elastic: false,
        ..AugmentConfig::default()
    };
    let once = augment(s, &cfg, &mut stream(1, 0));
    for (a, b) in once.input.features.rows().into_iter().zip(s.input.features.rows()) {
        assert_eq!([a[0], a[1], a[2]], [-b[0], -b[1], b[2]]);
    }
    let twice = augment(&once, &cfg, &mut stream(2, 0));
    assert_eq!(twice, *s);
}

#[test]
fn elastic_distortion_is_small_and_smooth() {
    let s = &samples(1)[0];
    let cfg = AugmentConfig {
        flip: false,
        jitter_sigma: 0.0,
        ..AugmentConfig::default()
    };
    let a = augment(s, &cfg, &mut stream(5, 0));
    let d = &a.input.features - &s.input.features;
    let max = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(max > 0.0 && max < cfg.elastic_magnitude * 3.0, "max displacement {max}");
    assert_eq!(a.split, s.split);
    assert_eq!(a.input.superpoint, s.input.superpoint);
}
