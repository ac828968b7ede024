//! Builds a small expression on the tape, prints its gradients and checks
//! them against central differences.

use akt::autodiff::{Graph, Var};
use akt::error::Result;
use akt::gradcheck::grad_check;
use akt::tensor::Tensor;

fn objective(g: &mut Graph, v: &[Var]) -> Result<Var> {
    let h = g.matmul(v[0], v[1])?;
    let h = g.tanh(h)?;
    let s = g.softmax(h, 1)?;
    let l = g.ln(s)?;
    g.mean_all(l)
}

fn main() -> Result<()> {
    let x = Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 0.1, 0.3, -0.7])?;
    let w = Tensor::new(&[3, 2], vec![0.2, -0.4, 1.1, 0.6, -0.3, 0.9])?;

    let mut g = Graph::new();
    let vars = [g.variable(x.clone()), g.variable(w.clone())];
    let loss = objective(&mut g, &vars)?;
    g.backward(loss)?;
    println!("loss = {:.6}", g.value(loss).item()?);
    println!("dloss/dx = {:?}", g.grad(vars[0]).unwrap_or_default());
    println!("dloss/dw = {:?}", g.grad(vars[1]).unwrap_or_default());

    let report = grad_check(objective, &[x, w], 1e-5, 1e-4)?;
    println!(
        "grad check: {} entries, max relative error {:.2e}, passed = {}",
        report.entries,
        report.max_rel_error,
        report.passed()
    );
    Ok(())
}
