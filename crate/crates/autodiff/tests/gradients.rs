use autodiff::gradcheck::rel_error;
use autodiff::registry::registered_ops;
use autodiff::{grad_check, GradCheck, Module, Param, Tape, Tensor};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::SeedableRng;

/// Runs a case on seed `s`, redrawing inputs that fall near a kink.
fn check_case(case: &autodiff::registry::OpCase, seed: u64) -> f64 {
    for attempt in 0..10u64 {
        let mut rng = StdRng::seed_from_u64(seed * 1000 + attempt);
        let inputs = (case.inputs)(&mut rng);
        match grad_check(case.f, &inputs).unwrap() {
            GradCheck::Checked { max_rel_error } => return max_rel_error,
            GradCheck::Excluded { .. } => continue,
        }
    }
    panic!("{}: every draw landed in an excluded region", case.name);
}

#[test]
fn every_registered_op_passes_grad_check() {
    for case in registered_ops() {
        for seed in 0..20 {
            let err = check_case(&case, seed);
            assert!(err < 1e-4, "{} seed {seed}: {err:e}", case.name);
        }
    }
}

#[test]
fn linear_map_is_exact() {
    let mut rng = StdRng::seed_from_u64(3);
    let x = Tensor::randn(2, 3, 1.0, &mut rng);
    let w = Tensor::randn(3, 2, 1.0, &mut rng);
    let r = grad_check(|t, v| v[0].matmul(t.constant(w.clone())).sum(), &[x]).unwrap();
    assert!(r.max_error().unwrap() < 1e-9, "{r:?}");
}

#[test]
fn l2_normalize_at_zero_is_excluded() {
    let r = grad_check(|_, v| v[0].l2_normalize().sum(), &[Tensor::zeros(1, 3)]).unwrap();
    assert!(r.is_excluded());
}

#[test]
fn squared_matmul_residual_matches_central_differences() {
    let mut rng = StdRng::seed_from_u64(11);
    let a = Tensor::randn(3, 3, 1.0, &mut rng);
    let b = Tensor::randn(3, 3, 1.0, &mut rng);
    let c = Tensor::randn(3, 3, 1.0, &mut rng);
    let loss = |a: &Tensor, b: &Tensor| -> f64 {
        let r = a.matmul(b).unwrap();
        r.data().iter().zip(c.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 9.0
    };
    let tape = Tape::new();
    let av = tape.input(a.clone());
    let bv = tape.input(b.clone());
    let l = av.matmul(bv).squared_error(tape.constant(c.clone()));
    assert!((l.item() - loss(&a, &b)).abs() < 1e-12);
    let g = tape.backward(l).unwrap();
    let h = 1e-5;
    for (which, grad) in [(0, g.get(av).unwrap()), (1, g.get(bv).unwrap())] {
        for j in 0..9 {
            let (mut ap, mut am, mut bp, mut bm) = (a.clone(), a.clone(), b.clone(), b.clone());
            if which == 0 {
                ap.data_mut()[j] += h;
                am.data_mut()[j] -= h;
            } else {
                bp.data_mut()[j] += h;
                bm.data_mut()[j] -= h;
            }
            let num = (loss(&ap, &bp) - loss(&am, &bm)) / (2.0 * h);
            assert!(rel_error(grad.data()[j], num) < 1e-4);
        }
    }
}

#[test]
fn gradients_accumulate_until_zeroed() {
    let mut p = Param::new("w", Tensor::row(&[0.5, -1.0]));
    for _ in 0..2 {
        let tape = Tape::new();
        let l = tape.param(&p).square().sum();
        let g = tape.backward(l).unwrap();
        p.accumulate(&g);
    }
    assert_eq!(p.grad.data(), &[2.0, -4.0]);
    p.zero_grad();
    assert_eq!(p.grad.data(), &[0.0, 0.0]);
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = StdRng::seed_from_u64(5);
    let w = Param::new("w", Tensor::randn(3, 3, 1.0, &mut rng));
    let x = Tensor::randn(2, 3, 1.0, &mut rng);
    fn l1<'t>(t: &'t Tape, w: &Param, x: &Tensor) -> autodiff::Var<'t> {
        t.constant(x.clone()).matmul(t.param(w)).tanh().sum()
    }
    fn l2<'t>(t: &'t Tape, w: &Param) -> autodiff::Var<'t> {
        t.param(w).softmax().log().mean()
    }
    let g_of = |which: u8| {
        let t = Tape::new();
        let l = match which {
            0 => l1(&t, &w, &x),
            1 => l2(&t, &w),
            _ => l1(&t, &w, &x).add(l2(&t, &w)),
        };
        t.backward(l).unwrap().param(w.id()).unwrap()
    };
    let (a, b, s) = (g_of(0), g_of(1), g_of(2));
    for i in 0..9 {
        assert!((a.data()[i] + b.data()[i] - s.data()[i]).abs() < 1e-12);
    }
}

#[test]
fn module_grad_check_restores_values() {
    struct Two(Param, Param);
    impl Module for Two {
        fn params(&self) -> Vec<&Param> {
            vec![&self.0, &self.1]
        }
        fn params_mut(&mut self) -> Vec<&mut Param> {
            vec![&mut self.0, &mut self.1]
        }
    }
    let mut rng = StdRng::seed_from_u64(9);
    let mut m = Two(
        Param::new("a", Tensor::randn(2, 3, 1.0, &mut rng)),
        Param::new("b", Tensor::randn(3, 1, 1.0, &mut rng)),
    );
    let before = m.0.value.clone();
    let r = autodiff::grad_check_module(&mut m, |m, t| t.param(&m.0).matmul(t.param(&m.1)).sigmoid().sum())
        .unwrap();
    assert!(r.max_error().unwrap() < 1e-6);
    assert_eq!(m.0.value, before);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(3, 4, data).unwrap());
        let y = x.softmax().value();
        for r in 0..3 {
            prop_assert!((y.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalized_rows_have_unit_norm(data in proptest::collection::vec(-5.0f64..5.0, 8)) {
        prop_assume!(data[..4].iter().any(|v| v.abs() > 1e-3) && data[4..].iter().any(|v| v.abs() > 1e-3));
        let tape = Tape::new();
        let y = tape.constant(Tensor::new(2, 4, data).unwrap()).l2_normalize().value();
        for r in 0..2 {
            let n: f64 = y.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_moves_against_gradient(g in prop_oneof![-10.0f64..-1e-6, 1e-6f64..10.0]) {
        let mut p = Param::new("w", Tensor::scalar(0.0));
        p.grad = Tensor::scalar(g);
        autodiff::Adam::new(0.01).step(vec![&mut p]).unwrap();
        prop_assert!(p.value.item() * g < 0.0);
    }
}
