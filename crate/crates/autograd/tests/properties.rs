use nz_autograd::gradcheck::check_gradients;
use nz_autograd::{Array, Var};
use proptest::prelude::*;

fn arb_array(shape: &'static [usize], lo: f64, hi: f64) -> impl Strategy<Value = Array> {
    let n: usize = shape.iter().product();
    prop::collection::vec(lo..hi, n).prop_map(move |v| Array::from_vec(shape, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn smooth_elementwise_chain(x in arb_array(&[2, 3], -2.0, 2.0), y in arb_array(&[2, 3], 0.5, 2.0)) {
        check_gradients(&[x, y], |v| {
            v[0].mul(&v[1]).tanh().add(&v[1].ln()).sigmoid().div(&v[1]).softplus().sum()
        }, 1e-6);
    }

    #[test]
    fn broadcast_add_and_matmul(a in arb_array(&[3, 4], -1.0, 1.0), b in arb_array(&[4, 2], -1.0, 1.0), c in arb_array(&[1, 2], -1.0, 1.0)) {
        check_gradients(&[a, b, c], |v| v[0].matmul(&v[1]).add(&v[2]).square().mean(), 1e-6);
    }

    #[test]
    fn conv_pool_upsample(x in arb_array(&[1, 2, 4, 4], -1.0, 1.0), w in arb_array(&[3, 2, 3, 3], -0.5, 0.5)) {
        check_gradients(&[x, w], |v| v[0].conv2d(&v[1], 1, 1).avg_pool2().upsample2().square().sum(), 1e-6);
    }

    #[test]
    fn backward_is_linear_in_the_seed(x in arb_array(&[5], -1.0, 1.0), s in -3.0..3.0f64) {
        let v = Var::param(x);
        let y = v.exp().scale(2.0);
        let g1 = y.backward_with(Array::ones(&[5])).get_or_zeros(&v);
        let gs = y.backward_with(Array::full(&[5], s)).get_or_zeros(&v);
        for (a, b) in g1.data().iter().zip(gs.data()) {
            prop_assert!((a * s - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn slices_concatenate_back(x in arb_array(&[2, 6], -1.0, 1.0), cut in 1usize..6) {
        let v = Var::constant(x.clone());
        let joined = Var::concat(&[&v.slice(1, 0, cut), &v.slice(1, cut, 6 - cut)], 1);
        prop_assert_eq!(joined.value(), &x);
    }
}
