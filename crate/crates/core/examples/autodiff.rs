//! Reverse-mode gradients on the tape, checked against central differences.

use grafuse::tensor::{Tape, Tensor};

fn loss(x: &Tensor, w: &Tensor) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.leaf(w.clone());
    let logits = tape.matmul(xv, wv).unwrap();
    let logp = tape.log_softmax(logits);
    let loss = tape.masked_nll(logp, &[0, 1, 2], &[2, 0, 1], None).unwrap();
    tape.backward(loss).unwrap();
    let grad = tape.grad(wv).unwrap().into_values();
    (tape.value(loss).values()[0], grad)
}

fn main() {
    let x = Tensor::from_rows(&[
        vec![1.0, 0.5, -0.3],
        vec![-0.2, 1.5, 0.8],
        vec![0.7, -1.1, 0.4],
    ]);
    let w = Tensor::from_rows(&[
        vec![0.1, -0.2, 0.3],
        vec![0.0, 0.4, -0.1],
        vec![-0.3, 0.2, 0.5],
    ]);
    let (value, grad) = loss(&x, &w);
    println!("loss {value:.6}");

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, g) in grad.iter().enumerate() {
        let mut plus = w.clone();
        plus.values_mut()[k] += h;
        let mut minus = w.clone();
        minus.values_mut()[k] -= h;
        let fd = (loss(&x, &plus).0 - loss(&x, &minus).0) / (2.0 * h);
        worst = worst.max((fd - g).abs());
        println!("dL/dw[{k}] tape {g:+.8} finite diff {fd:+.8}");
    }
    println!("largest absolute difference {worst:.2e}");
}
