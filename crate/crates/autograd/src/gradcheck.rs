//! Central finite-difference oracles for validating analytic gradients.

use crate::array::Array;
use crate::var::Var;

/// Central-difference gradient of a scalar function of one array.
pub fn numeric_gradient(x: &Array, h: f64, mut f: impl FnMut(&Array) -> f64) -> Array {
    let mut probe = x.clone();
    let mut grad = Array::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute norm when both are tiny.
pub fn relative_error(a: &Array, b: &Array) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let diff = a.zip_map(b, |x, y| x - y).sq_norm().sqrt();
    let scale = a.sq_norm().sqrt().max(b.sq_norm().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Deterministic pseudo-random array with entries in `[-1, 1)`.
pub fn random_array(shape: &[usize], seed: u64) -> Array {
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
    Array::from_fn(shape, |_| {
        // splitmix64
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    })
}

/// Assert that reverse-mode gradients of `f` with respect to every input
/// agree with central differences to within `tol` relative error.
pub fn check_gradients(inputs: &[Array], f: impl Fn(&[Var]) -> Var, tol: f64) {
    let vars: Vec<Var> = inputs.iter().cloned().map(Var::param).collect();
    let grads = f(&vars).backward();
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(&vars[i]);
        let numeric = numeric_gradient(x, 1e-6, |probe| {
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, a)| Var::constant(if j == i { probe.clone() } else { a.clone() }))
                .collect();
            f(&vs).item()
        });
        let err = relative_error(&analytic, &numeric);
        assert!(
            err <= tol,
            "input {i}: relative gradient error {err:e} > {tol:e}\nanalytic {analytic:?}\nnumeric {numeric:?}"
        );
    }
}
