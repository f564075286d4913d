use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

fn check<F>(f: F, params: &[Tensor])
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let report = grad_check(f, params, 1e-3, 1e-4).unwrap();
    assert!(
        report.passed,
        "max rel err {} over {} coords",
        report.max_rel_err,
        report.coords.len()
    );
}

#[test]
fn softmax_uniform() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[1, 4]));
    let s = tape.softmax(a);
    assert_eq!(tape.value(s).data(), &[0.25; 4]);
}

#[test]
fn softplus_zero() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::scalar(0.0));
    let s = tape.softplus(a);
    assert!((tape.value(s).item() - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn identity_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut eye = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 4] = 1.0;
    }
    let a = rand_tensor(&mut rng, &[3, 5]);
    let mut tape = Tape::new();
    let (e, av) = (tape.constant(eye), tape.constant(a.clone()));
    let out = tape.matmul(e, av).unwrap();
    assert_eq!(tape.value(out), &a);
}

#[test]
fn shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 2]));
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    assert!(tape.add(a, b).is_err());
}

#[test]
fn square_sum_grad() {
    let mut tape = Tape::new();
    let w = tape.param(0, Tensor::from_vec(vec![1.0, 2.0]));
    let sq = tape.square(w);
    let loss = tape.sum(sq);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(0).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn untouched_param_gets_zero() {
    let mut tape = Tape::new();
    let w = tape.param(0, Tensor::from_vec(vec![1.0, 2.0]));
    let _unused = tape.param(1, Tensor::zeros(&[3]));
    let sq = tape.square(w);
    let loss = tape.sum(sq);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(1).unwrap().data(), &[0.0; 3]);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut tape = Tape::new();
    let w = tape.param(0, Tensor::from_vec(vec![1.0, 2.0]));
    assert!(tape.backward(w).is_err());
}

#[test]
fn sin_square_gradcheck_tight() {
    let f = |t: &mut Tape, v: &[Var]| {
        let w0 = t.gather(v[0], vec![0], &[])?;
        let w1 = t.gather(v[0], vec![1], &[])?;
        let s = t.sin(w0);
        let q = t.square(w1);
        t.add(s, q)
    };
    let r = grad_check(f, &[Tensor::from_vec(vec![0.3, -1.2])], 1e-3, 1e-6).unwrap();
    assert!(r.passed, "{}", r.max_rel_err);
}

#[test]
fn constant_function_passes() {
    let f = |t: &mut Tape, _: &[Var]| Ok(t.constant(Tensor::scalar(3.0)));
    let r = grad_check(f, &[Tensor::from_vec(vec![1.0, 2.0])], 1e-3, 1e-4).unwrap();
    assert!(r.passed);
    assert!(r
        .coords
        .iter()
        .all(|c| c.analytic == 0.0 && c.numeric == 0.0));
}

#[test]
fn non_finite_is_flagged() {
    // sqrt of a negative input turns NaN inside the bracket
    let f = |t: &mut Tape, v: &[Var]| {
        let s = t.sqrt(v[0]);
        Ok(t.sum(s))
    };
    let r = grad_check(f, &[Tensor::from_vec(vec![1e-4])], 1e-3, 1e-4).unwrap();
    assert!(!r.passed);
    assert!(!r.coords[0].finite);
}

#[test]
fn bad_step_rejected() {
    let f = |t: &mut Tape, v: &[Var]| Ok(t.sum(v[0]));
    assert!(grad_check(f, &[Tensor::from_vec(vec![1.0])], 0.0, 1e-4).is_err());
}

#[test]
fn huber_grad_seed7() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = rand_tensor(&mut rng, &[12]);
    let target: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let r = grad_check(
        |t, v| {
            let h = t.huber(v[0], target.clone(), 1.0)?;
            Ok(t.sum(h))
        },
        &[w],
        1e-3,
        1e-4,
    )
    .unwrap();
    assert!(r.passed, "{}", r.max_rel_err);
}

#[test]
fn elementwise_and_reduction_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[3, 4]);
    let row = rand_tensor(&mut rng, &[4]);
    let col = Tensor::new(&[3], vec![0.7, 1.3, 2.1]).unwrap();
    let weights: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).cos()).collect();
    check(
        |t, v| {
            let x = t.mul(v[0], v[1])?;
            let x = t.sub(x, v[0])?;
            let x = t.add_row(x, v[2])?;
            let x = t.mul_row(x, v[2])?;
            let x = t.mul_col(x, v[3])?;
            let x = t.div_col(x, v[3])?;
            let s = t.silu(x);
            let sp = t.softplus(s);
            let sm = t.softmax(sp);
            let l = t.logsumexp(x);
            let m = t.mean_last(sm);
            let r = t.mean_rows(x);
            let sq = t.square(r);
            let ws = t.weighted_sum(s, weights.clone())?;
            let lm = t.add(l, m)?;
            let a = t.sum(lm);
            let b = t.sum(sq);
            let ab = t.add(a, b)?;
            let abs = t.scale(ab, 0.5);
            let abs = t.add_scalar(abs, 3.0);
            let root = t.sqrt(abs);
            t.add(root, ws)
        },
        &[a, b, row, col],
    );
}

#[test]
fn structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[2, 5, 4]);
    let w = rand_tensor(&mut rng, &[4, 3]);
    check(
        |t, v| {
            let s = t.bmm(v[0], v[1], true)?; // [2, 3, 5]
            let bb = t.bmm(s, v[1], false)?; // [2, 3, 4]
            let flat = t.reshape(bb, &[6, 4])?;
            let m = t.matmul(flat, v[2])?; // [6, 3]
            let a2 = t.reshape(v[0], &[6, 4])?;
            let c = t.concat(&[flat, a2])?; // [12, 4]
            let g = t.gather(c, vec![0, 5, 5, 17, 47, 3], &[2, 3])?;
            let sc = t.scatter_add(g, vec![1, 1, 0, 2, 3, 0], &[4])?;
            let sq = t.square(sc);
            let l1 = t.sum(sq);
            let sm = t.sin(m);
            let l2 = t.sum(sm);
            t.add(l1, l2)
        },
        &[a, b, w],
    );
}

#[test]
fn pinball_grad_away_from_kinks() {
    let w = Tensor::from_vec(vec![0.3, -0.8, 1.1, 0.05]);
    let target = vec![0.0, 0.0, 0.5, -1.0];
    let q = vec![0.1, 0.5, 0.9, 0.7];
    check(
        |t, v| {
            let p = t.pinball(v[0], target.clone(), q.clone())?;
            Ok(t.sum(p))
        },
        &[w],
    );
}

#[test]
fn kink_coordinate_is_excluded() {
    // |w - 0| with w inside the finite-difference bracket of the kink
    let f = |t: &mut Tape, v: &[Var]| {
        let p = t.pinball(v[0], vec![0.0], vec![0.5])?;
        Ok(t.sum(p))
    };
    let r = grad_check(f, &[Tensor::from_vec(vec![1e-4])], 1e-3, 1e-4).unwrap();
    assert_eq!(r.kinks_skipped, 1);
    assert!(r.coords[0].kink);
}

#[test]
fn duplicate_param_ids_accumulate() {
    let mut tape = Tape::new();
    let a = tape.param(0, Tensor::from_vec(vec![1.0]));
    let b = tape.param(0, Tensor::from_vec(vec![1.0]));
    let s = tape.add(a, b).unwrap();
    let loss = tape.sum(s);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(0).unwrap().data(), &[2.0]);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        data in proptest::collection::vec(-50.0f64..50.0, 1..40),
        width in 1usize..8,
    ) {
        let rows = data.len() / width;
        prop_assume!(rows > 0);
        let t = Tensor::new(&[rows, width], data[..rows * width].to_vec()).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(t);
        let s = tape.softmax(a);
        for row in tape.value(s).data().chunks(width) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[4, 2]);
        let run = || {
            let mut tape = Tape::new();
            let (x, y) = (tape.constant(a.clone()), tape.constant(w.clone()));
            let m = tape.matmul(x, y).unwrap();
            let s = tape.softmax(m);
            tape.value(s).clone()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn random_matmul_softmax_gradcheck(seed in 0u64..10_000, m in 1usize..4, k in 1usize..4, n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[m, k]);
        let b = rand_tensor(&mut rng, &[k, n]);
        let w: Vec<f64> = (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = grad_check(
            |t, v| {
                let x = t.matmul(v[0], v[1])?;
                let s = t.softmax(x);
                t.weighted_sum(s, w.clone())
            },
            &[a, b],
            1e-3,
            1e-4,
        )
        .unwrap();
        prop_assert!(r.passed, "{}", r.max_rel_err);
    }
}
