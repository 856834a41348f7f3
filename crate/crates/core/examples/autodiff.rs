//! Reverse-mode differentiation on the tape, checked against central
//! finite differences.

use cmnet::tensor::{finite_difference_check, GradCheckOptions, Tape, Tensor};

fn main() -> cmnet::Result<()> {
    // f(x) = sum(sigmoid(x) * tanh(x))
    let x = Tensor::new(&[2, 3], vec![-1.5, -0.2, 0.0, 0.4, 1.1, 2.5])?;
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let s = tape.sigmoid(xv);
    let t = tape.tanh(xv);
    let p = tape.mul(s, t)?;
    let f = tape.sum(p);
    let grads = tape.backward(f)?;
    println!("f(x) = {:.6}", tape.value(f).data()[0]);
    println!("df/dx = {:?}", grads.get_or_zeros(xv).data());

    let report = finite_difference_check(
        |tape, v| {
            let s = tape.sigmoid(v);
            let t = tape.tanh(v);
            let p = tape.mul(s, t)?;
            Ok(tape.sum(p))
        },
        &x,
        &GradCheckOptions::with_tol(1e-6),
    )?;
    println!("finite-difference check: max rel err {:.2e}, passed {}", report.max_rel_err, report.passed);
    Ok(())
}
