//! Matches point predictions to ground truth and evaluates the set loss.

use akt::autodiff::Graph;
use akt::error::Result;
use akt::matching::{hungarian, training_loss, CostMatrix};
use akt::tensor::Tensor;

fn main() -> Result<()> {
    let gt = [[0.10, 0.10], [0.50, 0.50], [0.80, 0.20]];
    let preds = [[0.48, 0.53], [0.90, 0.90], [0.12, 0.09], [0.79, 0.22], [0.30, 0.30]];
    let logits = [0.2, -0.5, 1.0, 0.4, 0.0];
    let conf: Vec<f64> = logits.iter().map(|z: &f64| 1.0 / (1.0 + (-z).exp())).collect();

    let costs = CostMatrix::from_points(&preds, &conf, &gt)?;
    for i in 0..costs.rows() {
        let row: Vec<String> = (0..costs.cols()).map(|j| format!("{:6.3}", costs.get(i, j))).collect();
        println!("gt {i}: [{}]", row.join(" "));
    }
    let m = hungarian(&costs)?;
    println!("assignment {:?}, total {:.4}, unmatched {:?}", m.assignment, m.total_cost, m.unmatched);

    let mut g = Graph::new();
    let c = g.variable(Tensor::new(&[5, 2], preds.iter().flatten().copied().collect())?);
    let l = g.variable(Tensor::new(&[5], logits.to_vec())?);
    let (loss, _) = training_loss(&mut g, c, l, &gt, [256.0, 256.0])?;
    g.backward(loss)?;
    println!("loss {:.5}", g.value(loss).item()?);
    println!("d loss / d logits {:?}", g.grad(l).unwrap_or_default());
    Ok(())
}
