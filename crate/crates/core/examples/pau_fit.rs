//! Fits a Padé activation unit to tanh with Adam, starting from the SiLU
//! initialisation.

use akt::autodiff::Graph;
use akt::error::Result;
use akt::kan::{grouped_pau, silu, PauParams};
use akt::optim::{Adam, AdamConfig};
use akt::params::{Gradients, ParamStore};
use akt::tensor::Tensor;

fn main() -> Result<()> {
    let init = PauParams::silu_init();
    let dev = (0..=600)
        .map(|i| -3.0 + i as f64 * 0.01)
        .map(|x| (init.eval(x) - silu(x)).abs())
        .fold(0.0, f64::max);
    println!("SiLU initialisation: orders {:?}, max |PAU − SiLU| on [-3, 3] = {dev:.2e}", init.orders());

    let xs: Vec<f64> = (0..=120).map(|i| -3.0 + i as f64 * 0.05).collect();
    let target: Vec<f64> = xs.iter().map(|x| x.tanh()).collect();
    let x = Tensor::new(&[xs.len(), 1], xs.clone())?;
    let t = Tensor::new(&[xs.len(), 1], target)?;

    let mut store = ParamStore::new();
    let num = store.add("num", Tensor::new(&[1, 6], init.numerator.clone())?);
    let den = store.add("den", Tensor::new(&[4], init.denominator.clone())?);
    let scale = store.add("scale", Tensor::new(&[1], vec![1.0])?);
    let cfg = AdamConfig {
        lr: 0.01,
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(cfg, &store)?;
    for step in 0..=2000 {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (a, b, s) = (g.param(&store, num), g.param(&store, den), g.param(&store, scale));
        let y = grouped_pau(&mut g, xv, a, b, s)?;
        let tv = g.constant(t.clone());
        let d = g.sub(y, tv)?;
        let sq = g.mul(d, d)?;
        let loss = g.mean_all(sq)?;
        if step % 500 == 0 {
            println!("step {step:>4}: mse {:.3e}", g.value(loss).item()?);
        }
        g.backward(loss)?;
        let mut grads = Gradients::zeros_like(&store);
        g.accumulate_param_grads(&mut grads);
        adam.step(&mut store, &grads)?;
    }
    let fitted = PauParams::new(
        store.get(num).data().to_vec(),
        store.get(den).data().to_vec(),
        store.get(scale).data()[0],
    )?;
    let worst = xs.iter().map(|&x| (fitted.eval(x) - x.tanh()).abs()).fold(0.0, f64::max);
    println!("fitted max |PAU − tanh| = {worst:.3e}");
    Ok(())
}
