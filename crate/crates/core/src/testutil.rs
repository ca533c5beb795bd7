//! Helpers shared by unit tests: seeded tensors and a central finite
//! difference gradient oracle that only ever evaluates forward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tape, Tensor, Var};

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Largest per-input relative error between tape gradients and central
/// differences (h = 1e-6), measured as `‖g_tape − g_fd‖ / max(‖g_tape‖, ‖g_fd‖, 1e-8)`.
pub fn check_gradients(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |vals: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).values()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (idx, input) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[idx])
            .map(|g| g.into_values())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let mut numeric = vec![0.0; input.len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[idx].values_mut()[k] += h;
            let mut minus = inputs.to_vec();
            minus[idx].values_mut()[k] -= h;
            *slot = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / na.max(nn).max(1e-8));
    }
    worst
}
