mod common;

use common::random_tensor;
use gsimclr_tensor::{exec, Adam, AdamConfig, Padding, Tape, Tensor, TensorError};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn sum_of_squares_gradient() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn unreachable_leaf_gets_zero_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::full(&[3], 1.0));
    let unused = tape.param(Tensor::full(&[2, 2], 5.0));
    let loss = tape.sum(x).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(unused).unwrap(), &Tensor::zeros(&[2, 2]));
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let c = tape.constant(Tensor::full(&[3], 1.0));
    let loss = tape.sum(c).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(c).is_none());
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::full(&[3], 1.0));
    let err = tape.backward(x).unwrap_err();
    assert_eq!(err, TensorError::NonScalarLoss { shape: vec![3] });
}

#[test]
fn adam_single_scalar_step_matches_recurrence() {
    // Direct evaluation of the bias-corrected recurrence for p=1, g=0.5.
    let (lr, b1, b2, eps) = (1e-3f64, 0.9f64, 0.999f64, 1e-7f64);
    let (p, g) = (1.0f64, 0.5f64);
    let m = (1.0 - b1) * g;
    let v = (1.0 - b2) * g * g;
    let m_hat = m / (1.0 - b1);
    let v_hat = v / (1.0 - b2);
    let expected = p - lr * m_hat / (v_hat.sqrt() + eps);
    assert!((expected - 0.999_000_000_2).abs() < 1e-12);

    let mut params = vec![Tensor::<f64>::scalar(p)];
    let mut adam = Adam::new(AdamConfig::default(), &params);
    adam.step(&mut params, &[Tensor::scalar(g)]).unwrap();
    assert!((params[0].item() - expected).abs() < 1e-15);

    let mut single = vec![Tensor::<f32>::scalar(1.0)];
    let mut adam32 = Adam::new(AdamConfig::default(), &single);
    adam32.step(&mut single, &[Tensor::scalar(0.5)]).unwrap();
    assert_eq!(single[0].item(), expected as f32);
}

#[test]
fn identical_adam_states_stay_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let start = vec![random_tensor::<f32>(&mut rng, &[4, 3], -1.0, 1.0)];
    let grads: Vec<_> = (0..5)
        .map(|_| vec![random_tensor::<f32>(&mut rng, &[4, 3], -1.0, 1.0)])
        .collect();
    let run = || {
        let mut p = start.clone();
        let mut adam = Adam::new(AdamConfig::default(), &p);
        for g in &grads {
            adam.step(&mut p, g).unwrap();
        }
        (p, adam.steps())
    };
    assert_eq!(run(), run());
}

fn conv_pipeline(seed: u64) -> (Vec<f32>, Vec<Vec<f32>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor::<f32>(&mut rng, &[9, 8, 8, 3], 0.0, 1.0);
    let k1 = random_tensor::<f32>(&mut rng, &[3, 3, 3, 8], -0.3, 0.3);
    let k2 = random_tensor::<f32>(&mut rng, &[3, 3, 4, 8], -0.3, 0.3);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let k1v = tape.param(k1);
    let k2v = tape.param(k2);
    let h = tape.conv2d(xv, k1v, 2, Padding::Same).unwrap();
    let h = tape.relu(h).unwrap();
    let y = tape.conv_transpose2d(h, k2v, 2, Padding::Same).unwrap();
    let loss = tape.mean(y).unwrap();
    let grads = tape.backward(loss).unwrap();
    (
        tape.value(y).data().to_vec(),
        vec![
            grads.get(k1v).unwrap().data().to_vec(),
            grads.get(k2v).unwrap().data().to_vec(),
        ],
    )
}

#[test]
fn forward_and_backward_are_pure() {
    assert_eq!(conv_pipeline(11), conv_pipeline(11));
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let reference = conv_pipeline(5);
    for threads in [1, 2, 3, 7] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        assert_eq!(pool.install(|| conv_pipeline(5)), reference, "{threads} threads");
    }
    exec::set_parallel(false);
    let sequential = conv_pipeline(5);
    exec::set_parallel(true);
    assert_eq!(sequential, reference);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// backward(l1 + l2) == backward(l1) + backward(l2) on random small graphs.
    #[test]
    fn backward_is_linear(seed in 0u64..10_000, rows in 1usize..5, cols in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_tensor::<f64>(&mut rng, &[rows, cols], -1.0, 1.0);
        let w = random_tensor::<f64>(&mut rng, &[cols, 3], -1.0, 1.0);
        let y = random_tensor::<f64>(&mut rng, &[rows, 3], -1.0, 1.0);

        let build = |which: u8| {
            let mut tape = Tape::new();
            let av = tape.param(a.clone());
            let wv = tape.param(w.clone());
            let yv = tape.constant(y.clone());
            let p = tape.matmul(av, wv).unwrap();
            let s = tape.sigmoid(p).unwrap();
            let l1 = tape.mse(s, yv).unwrap();
            let n = tape.l2_normalize(p, 1).unwrap();
            let l2 = tape.sum(n).unwrap();
            let loss = match which {
                0 => l1,
                1 => l2,
                _ => tape.add(l1, l2).unwrap(),
            };
            let g = tape.backward(loss).unwrap();
            (g.get(av).unwrap().clone(), g.get(wv).unwrap().clone())
        };
        let (a1, w1) = build(0);
        let (a2, w2) = build(1);
        let (at, wt) = build(2);
        for (t, (x, y)) in [(at, (a1, a2)), (wt, (w1, w2))] {
            for ((&s, &p), &q) in t.data().iter().zip(x.data()).zip(y.data()) {
                prop_assert!((s - (p + q)).abs() < 1e-12);
            }
        }
    }
}
