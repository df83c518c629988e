//! Build a small graph on the tape, backpropagate, and compare the result
//! with central finite differences.

use segdenoise::tensor::finite_difference_check;
use segdenoise::{ConvSpec, Result, Tape, Tensor};

fn main() -> Result<()> {
    let x = Tensor::from_fn(&[1, 2, 6, 6], |i| ((i * 37 % 11) as f64 - 5.0) / 5.0);
    let w = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 13 % 7) as f64 - 3.0) / 10.0);
    let b = Tensor::from_fn(&[3], |i| 0.1 * i as f64 + 0.05);
    let target = Tensor::full(&[1, 3, 6, 6], 0.2);

    // conv -> relu -> mse, differentiated with respect to the kernel
    let loss_of_kernel = |t: &mut Tape, k| {
        let xv = t.constant(x.clone());
        let bv = t.constant(b.clone());
        let y = t.conv2d(xv, k, bv, ConvSpec::same(3, 2))?;
        let y = t.relu(y)?;
        let tv = t.constant(target.clone());
        t.mse_loss(y, tv)
    };

    let mut tape = Tape::new();
    let k = tape.leaf(w.clone(), true);
    let loss = loss_of_kernel(&mut tape, k)?;
    tape.backward(loss)?;
    let grad = tape.take_grad(k).expect("kernel gradient");
    println!("loss {:.6}", tape.value(loss).data()[0]);
    println!("dL/dw[0..4] = {:?}", &grad.data()[..4]);

    let err = finite_difference_check(loss_of_kernel, &w, 1e-6)?;
    println!("max relative error vs finite differences: {err:.2e}");
    Ok(())
}
