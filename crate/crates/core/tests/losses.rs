use ndarray::Array2;
use rand::Rng as _;

use saformer::losses::{dice_loss, loss_sim, loss_sup, loss_unsup, soft_bce, LossWeights};
use saformer::rng::stream;

fn logits(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = stream(seed, 0);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-5.0..5.0))
}

#[test]
fn losses_are_non_negative_and_dice_bounded() {
    let w = LossWeights::default();
    for seed in 0..50 {
        let x = logits(2, 17, seed);
        let t = logits(2, 17, seed + 100).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let c = logits(2, 5, seed + 200);
        let out = loss_sim(&x, &t, &c, [0, 4], &w);
        assert!(out.total >= 0.0 && out.bce >= 0.0 && out.cls >= 0.0);
        assert!((0.0..=1.0).contains(&out.dice));
        assert!(loss_sup(&x, 6, &w).total >= 0.0);
        assert!(loss_unsup(&x, &logits(2, 17, seed + 300), &w).term.total >= 0.0);
        let (d, _) = dice_loss(&x, &t, None);
        assert!((0.0..=1.0).contains(&d));
    }
}

#[test]
fn unsupervised_gradient_vanishes_off_the_gate() {
    let w = LossWeights::default();
    let student = logits(2, 40, 1);
    let teacher = logits(2, 40, 2);
    let out = loss_unsup(&student, &teacher, &w);
    assert!(out.gate.iter().any(|&g| g) && out.gate.iter().any(|&g| !g));
    for (g, &on) in out.term.grad.iter().zip(out.gate.iter()) {
        if !on {
            assert_eq!(*g, 0.0);
        }
    }
    let mut moved = student.clone();
    for ((v, &on), k) in moved.iter_mut().zip(out.gate.iter()).zip(0..) {
        if !on {
            *v = if k % 2 == 0 { 30.0 } else { -30.0 };
        }
    }
    assert_eq!(loss_unsup(&moved, &teacher, &w).term.total, out.term.total);
}

#[test]
fn weights_scale_linearly() {
    let w = LossWeights::default();
    let x = logits(2, 12, 3);
    let t = x.mapv(|v| if v > 1.0 { 1.0 } else { 0.0 });
    let c = logits(2, 5, 4);
    let base = loss_sim(&x, &t, &c, [1, 2], &w).total;
    let scaled = loss_sim(&x, &t, &c, [1, 2], &w.scaled(3.0)).total;
    assert!((scaled - 3.0 * base).abs() < 1e-12);
    let sup = loss_sup(&x, 5, &w).total;
    assert!((loss_sup(&x, 5, &w.scaled(0.5)).total - 0.5 * sup).abs() < 1e-12);
}

#[test]
fn soft_bce_with_uniform_weights_is_plain_mean() {
    let x = logits(2, 9, 5);
    let ones = Array2::ones((2, 9));
    let (loss, _) = soft_bce(&x, &ones);
    let plain: f64 = x.iter().map(|&v| (1.0 + (-v).exp()).ln()).sum::<f64>() / 18.0;
    assert!((loss - plain).abs() < 1e-12);
    let mut single = Array2::zeros((2, 9));
    single[[1, 4]] = 0.7;
    let (one, _) = soft_bce(&x, &single);
    let p = 1.0 / (1.0 + (-x[[1, 4]]).exp());
    assert!((one - -(0.7 * p.ln() + 0.3 * (1.0 - p).ln())).abs() < 1e-12);
}
