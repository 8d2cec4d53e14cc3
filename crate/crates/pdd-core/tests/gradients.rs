//! Finite-difference verification of every differentiable primitive and
//! every training loss, plus tape semantics that the suite relies on.

use pdd_core::gradcheck::{self, random_tensor};
use pdd_core::objectives::{loss_div, loss_kr, loss_prp, loss_total, DivThresholds, LossWeights};
use pdd_core::ops;
use pdd_core::rng::Stream;
use pdd_core::tape::Tape;
use pdd_core::tensor::{FeaturePyramid, Tensor};

#[test]
fn full_gradient_suite() {
    let start = std::time::Instant::now();
    let lines = gradcheck::run_full_suite(100).expect("gradient suite failed");
    for line in &lines {
        println!(
            "gradcheck {:<24} cases={:<4} max_rel={:.3e}",
            line.name, line.cases, line.max_rel_error
        );
        assert!(line.cases >= 100, "{} ran only {} cases", line.name, line.cases);
        assert!(line.max_rel_error < 1e-4);
    }
    assert!(lines.len() >= 12, "suite shrank: {} op lines", lines.len());
    println!("gradient suite wall time: {:.1?}", start.elapsed());
}

#[test]
fn backward_scalar_mse_hand_derivative() {
    // loss = mse(x, t) with scalar x: dloss/dx = 2(x - t).
    let mut tape = Tape::new();
    let x = tape.watch(&Tensor::scalar(1.5f64));
    let t = Tensor::scalar(0.25);
    let loss = ops::mse(&mut tape, &x, &t).unwrap();
    let grads = tape.backward(&loss).unwrap();
    let g = grads.for_tensor(&x).unwrap();
    assert!((g[0] - 2.0 * (1.5 - 0.25)).abs() < 1e-12);
}

#[test]
fn backward_accumulates_across_multiple_uses() {
    // y = x + x => dy/dx = 2 elementwise.
    let mut tape = Tape::new();
    let x = tape.watch(&Tensor::from_vec(vec![3], vec![1.0f64, -2.0, 0.5]).unwrap());
    let y = ops::add(&mut tape, &x, &x).unwrap();
    let loss = ops::mean_all(&mut tape, &y).unwrap();
    let grads = tape.backward(&loss).unwrap();
    let g = grads.for_tensor(&x).unwrap();
    for v in g {
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn backward_rejects_non_scalar_and_ignores_empty_graph() {
    let mut tape = Tape::new();
    let x = tape.watch(&Tensor::from_vec(vec![2], vec![1.0f64, 2.0]).unwrap());
    let y = ops::add(&mut tape, &x, &x).unwrap();
    assert!(tape.backward(&y).is_err());

    // Backward over a constant (nothing recorded) is a no-op.
    let empty: Tape<f64> = Tape::new();
    let c = Tensor::scalar(3.0f64);
    let grads = empty.backward(&c).unwrap();
    assert!(grads.for_tensor(&c).is_none());
}

#[test]
fn frozen_leaves_receive_no_grad() {
    use pdd_core::param::Param;
    let mut tape = Tape::new();
    let frozen = Param::new("frozen", Tensor::scalar(2.0f64), false);
    let live = Param::new("live", Tensor::scalar(1.0f64), true);
    let f = tape.attach(&frozen);
    let l = tape.attach(&live);
    let y = ops::add(&mut tape, &f, &l).unwrap();
    let loss = ops::mean_all(&mut tape, &y).unwrap();
    let grads = tape.backward(&loss).unwrap();
    assert!(grads.for_param(frozen.id()).is_none());
    assert!((grads.for_param(live.id()).unwrap()[0] - 1.0).abs() < 1e-12);
}

#[test]
fn loss_total_gradient_superposition() {
    // Gradient of the weighted total equals the weighted sum of component
    // gradients, checked by separate backward passes.
    let mut s = Stream::from_seed(321);
    let shapes = [
        vec![2usize, 2, 4, 4],
        vec![2, 3, 2, 2],
        vec![2, 4, 1, 1],
        vec![2, 4, 1, 1],
    ];
    let draw = |s: &mut Stream| {
        let stages: Vec<Tensor<f64>> = shapes.iter().map(|sh| random_tensor(s, sh)).collect();
        FeaturePyramid::new(stages.try_into().unwrap())
    };
    let a_src = draw(&mut s);
    let b_src = draw(&mut s);
    let weights = LossWeights::default();
    let thresholds = DivThresholds::default();

    let grads_of = |which: usize| -> Vec<f64> {
        let mut tape = Tape::new();
        let watched: Vec<Tensor<f64>> = b_src
            .iter()
            .map(|t| tape.watch(&t.detached()))
            .collect();
        let b = FeaturePyramid::new([
            watched[0].clone(),
            watched[1].clone(),
            watched[2].clone(),
            watched[3].clone(),
        ]);
        let loss = match which {
            0 => loss_kr(&mut tape, &a_src, &b).unwrap(),
            1 => loss_prp(&mut tape, &a_src, &b, &weights).unwrap(),
            2 => loss_div(&mut tape, &a_src, &b, &thresholds).unwrap(),
            _ => {
                let kr = loss_kr(&mut tape, &a_src, &b).unwrap();
                let prp = loss_prp(&mut tape, &a_src, &b, &weights).unwrap();
                let div = loss_div(&mut tape, &a_src, &b, &thresholds).unwrap();
                loss_total(&mut tape, &kr, &prp, &div, &weights).unwrap()
            }
        };
        let grads = tape.backward(&loss).unwrap();
        watched
            .iter()
            .flat_map(|t| grads.for_tensor(t).map(|g| g.to_vec()).unwrap_or_default())
            .collect()
    };

    let g_kr = grads_of(0);
    let g_prp = grads_of(1);
    let g_div = grads_of(2);
    let g_total = grads_of(3);
    for i in 0..g_total.len() {
        let expect =
            weights.lambda_kr * g_kr[i] + weights.lambda_prp * g_prp[i] + weights.lambda_div * g_div[i];
        assert!(
            (g_total[i] - expect).abs() < 1e-10 * expect.abs().max(1.0),
            "superposition failed at {i}: {} vs {}",
            g_total[i],
            expect
        );
    }
}
