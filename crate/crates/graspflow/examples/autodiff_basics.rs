//! The autodiff engine on its own: build a small expression, run backward,
//! and compare one gradient against the analytic derivative.

use graspflow::tensor::ops::{add, dense, mul, relu, sum_all};
use graspflow::tensor::Tensor;
use graspflow::Result;

fn main() -> Result<()> {
    // loss = sum((relu(x W^T + b))^2) for a 2x3 input batch.
    let x = Tensor::param(&[2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.3, -0.7]);
    let w = Tensor::param(&[2, 3], vec![0.1, 0.4, -0.2, 0.6, -0.5, 0.3]);
    let b = Tensor::param(&[2], vec![0.05, -0.1]);

    let h = relu(&dense(&x, &w, &b)?);
    let loss = sum_all(&mul(&h, &h)?);
    println!("loss = {:.6}", loss.data()[0]);

    loss.backward()?;
    for (name, t) in [("x", &x), ("W", &w), ("b", &b)] {
        let g = t.grad().expect("parameters accumulate gradients");
        println!("d loss / d {name} = {g:?}");
    }

    // Hand check: d loss / d b_j = sum over rows of 2 * h_j (zero rows drop
    // out with the relu).
    let h_vals = h.data().to_vec();
    let expect_b0: f64 = (0..2).map(|r| 2.0 * h_vals[r * 2]).sum();
    let got_b0 = b.grad().unwrap()[0];
    assert!((expect_b0 - got_b0).abs() < 1e-12);
    println!("\nanalytic d loss / d b_0 = {expect_b0:.6} matches autodiff {got_b0:.6}");

    // Gradients accumulate across backward passes until cleared.
    let loss2 = sum_all(&add(&x, &x)?);
    loss2.backward()?;
    println!("after a second backward, d/dx[0] accumulates to {:.3}", x.grad().unwrap()[0]);
    Ok(())
}
