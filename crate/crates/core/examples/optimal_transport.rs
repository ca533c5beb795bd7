//! Wasserstein distances between point clouds: the exact solver, entropic
//! Sinkhorn, and the gradient of the transport cost.

use grafuse::tensor::{Tape, Tensor};
use grafuse::transport::{cost_matrix, exact_wr, sinkhorn_wr, DiscreteCloud, SinkhornConfig};

fn main() {
    let a = DiscreteCloud::uniform(Tensor::from_rows(&[
        vec![0.0, 0.0],
        vec![1.0, 0.0],
        vec![0.0, 1.0],
    ]))
    .unwrap();
    let b = DiscreteCloud::new(
        Tensor::from_rows(&[vec![2.0, 2.0], vec![1.0, 1.5]]),
        vec![0.25, 0.75],
    )
    .unwrap();
    println!(
        "cost matrix {:?}",
        cost_matrix(&a, &b, 2.0).unwrap().values()
    );

    let (exact, plan) = exact_wr(&a, &b, 2.0).unwrap();
    println!("exact W2 {exact:.6}, coupling {:?}", plan.coupling.values());
    for scale in [0.5, 0.05, 0.005] {
        let cfg = SinkhornConfig {
            epsilon_scale: scale,
            max_iters: 20_000,
            ..SinkhornConfig::default()
        };
        let (approx, p) = sinkhorn_wr(&a, &b, &cfg).unwrap();
        println!(
            "sinkhorn eps scale {scale}: {approx:.6} after {} sweeps (converged {})",
            p.iterations, p.converged
        );
    }

    // envelope gradient: the plan is held fixed
    let mut tape = Tape::new();
    let x = tape.leaf(a.points().clone());
    let y = tape.constant(b.points().clone());
    let cost = tape.plan_cost(x, y, plan.coupling.values(), 2.0).unwrap();
    tape.backward(cost).unwrap();
    println!(
        "d W2 / d source points {:?}",
        tape.grad(x).unwrap().values()
    );
}
