use ndarray::Array2;
use rand::Rng as _;

use saformer::autodiff::Tape;
use saformer::encoder::{Encoder, EncoderConfig, EncoderInput, EncoderPreset};
use saformer::nn::ParamStore;
use saformer::rng::stream;

fn input(seed: u64, n: usize, superpoints: usize) -> EncoderInput {
    let mut rng = stream(seed, 1);
    let positions: Vec<[f64; 3]> = (0..n).map(|_| [0, 1, 2].map(|_| rng.random_range(0.0..0.3))).collect();
    let colors: Vec<[f64; 3]> = (0..n).map(|_| [0, 1, 2].map(|_| rng.random::<f64>())).collect();
    let sp = (0..n).map(|i| i % superpoints).collect();
    EncoderInput::new(&positions, &colors, sp).unwrap()
}

fn gradient_check(cfg: EncoderConfig) {
    let mut rng = stream(9, 0);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &cfg, &mut rng).unwrap();
    let x = input(3, 40, 6);
    let weights = Array2::from_shape_fn((6, cfg.channels), |_| rng.random_range(-1.0..1.0));
    let loss = |store: &ParamStore| {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let (_, sup) = enc.forward(&mut tape, &p, &x);
        (tape.value(sup) * &weights).sum()
    };
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let (_, sup) = enc.forward(&mut tape, &p, &x);
    let grads = tape.backward(&[(sup, weights.clone())]);
    let analytic = p.gradients(&grads, &store);
    // small step: shared biases move many ReLU inputs at once, so a wide step crosses kinks
    let mut worst: f64 = 0.0;
    for idx in 0..store.len() {
        let (rows, cols) = store.values()[idx].dim();
        for e in (0..rows * cols).step_by((rows * cols / 6).max(1)) {
            let at = [e / cols, e % cols];
            let orig = store.values()[idx][at];
            store.values_mut()[idx][at] = orig + 1e-7;
            let up = loss(&store);
            store.values_mut()[idx][at] = orig - 1e-7;
            let down = loss(&store);
            store.values_mut()[idx][at] = orig;
            let numeric = (up - down) / 2e-7;
            let a = analytic[idx][at];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    assert!(worst < 1e-3, "max relative error {worst}");
}

#[test]
fn toy_gradients_match_finite_differences() {
    gradient_check(EncoderConfig {
        channels: 8,
        ..EncoderConfig::default()
    });
}

#[test]
fn paper_gradients_match_finite_differences() {
    gradient_check(EncoderConfig {
        channels: 8,
        preset: EncoderPreset::Paper,
        voxel: 0.05,
        ..EncoderConfig::default()
    });
}

#[test]
fn paper_preset_encodes_a_sample() {
    let mut rng = stream(5, 0);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &EncoderConfig::paper(), &mut rng).unwrap();
    let x = input(4, 300, 20);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let (f, sup) = enc.forward(&mut tape, &p, &x);
    assert_eq!(tape.value(f).dim(), (300, 32));
    assert_eq!(tape.value(sup).dim(), (20, 32));
    assert!(tape.value(sup).iter().all(|v| v.is_finite()));
}
