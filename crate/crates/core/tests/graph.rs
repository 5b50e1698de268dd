use proptest::prelude::*;
use rankmoe_core::gradcheck::audit_ops;
use rankmoe_core::{rng, Graph, Tensor};

proptest! {
    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..50.0) {
        let x = rng::normal(&mut rng::rng(seed), [rows, cols], scale);
        let mut g = Graph::new();
        let v = g.constant(x);
        let s = g.softmax(v).unwrap();
        for row in g.value(s).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn permute_round_trips(seed in any::<u64>(), a in 1usize..4, b in 1usize..4, c in 1usize..4) {
        let x = rng::normal(&mut rng::rng(seed), [a, b, c], 1.0);
        let p = x.permute(&[2, 0, 1]).unwrap();
        prop_assert_eq!(p.shape(), &[c, a, b]);
        prop_assert_eq!(p.permute(&[1, 2, 0]).unwrap(), x);
    }

    #[test]
    fn matmul_is_linear(seed in any::<u64>()) {
        let mut r = rng::rng(seed);
        let a = rng::normal(&mut r, [3, 4], 1.0);
        let b = rng::normal(&mut r, [4, 2], 1.0);
        let c = rng::normal(&mut r, [4, 2], 1.0);
        let lhs = a.matmul(&b.add(&c).unwrap()).unwrap();
        let rhs = a.matmul(&b).unwrap().add(&a.matmul(&c).unwrap()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }
}

#[test]
fn every_operation_passes_finite_differences() {
    let report = audit_ops(10, 17, 1e-6).unwrap();
    assert!(report.len() >= 29);
    for a in &report {
        assert!(a.worst <= 1e-4, "{} worst {:e}", a.op, a.worst);
    }
}

#[test]
fn unreached_leaves_get_zero_gradient() {
    let mut g = Graph::new();
    let a = g.param("a", Tensor::full([2], 3.0));
    let b = g.param("b", Tensor::full([2], 1.0));
    let s = g.square(a);
    let l = g.sum(s);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.wrt(&g, a).data(), &[6.0, 6.0]);
    assert_eq!(grads.wrt(&g, b).data(), &[0.0, 0.0]);
}
