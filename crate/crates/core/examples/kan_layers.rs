//! B-spline bases, a KAN edge function and the layers built from them.

use akt::autodiff::Graph;
use akt::error::Result;
use akt::kan::{count_kan_params, BSplineGrid, KanLinear, PkanBlock, PkanConfig};
use akt::params::ParamStore;
use akt::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let grid = BSplineGrid::uniform(-1.0, 1.0, 5, 3)?;
    println!("knots: {:?}", grid.knots());
    for x in [-1.0, -0.3, 0.0, 0.75, 1.0] {
        let b = grid.basis(x);
        let shown: Vec<String> = b.iter().map(|v| format!("{v:.3}")).collect();
        println!("basis({x:>5}) = [{}], sum {:.15}", shown.join(", "), b.iter().sum::<f64>());
    }

    let rng = &mut ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let kan = KanLinear::new(&mut store, "kan", 4, 3, grid.clone(), rng);
    let pkan = PkanBlock::new(&mut store, "pkan", 4, 8, PkanConfig::default(), rng)?;
    println!(
        "KAN 4→3: {} parameters (formula {}); PKAN 4→8→4: {} parameters",
        kan.num_params(),
        count_kan_params(4, 3, &grid),
        pkan.num_params()
    );

    let x = Tensor::new(&[2, 4], vec![0.1, -0.5, 0.9, 0.0, -1.0, 0.4, 0.2, 0.7])?;
    let mut g = Graph::new();
    let xv = g.constant(x);
    let y = kan.forward(&mut g, &store, xv)?;
    let z = pkan.forward(&mut g, &store, xv)?;
    println!("KAN output {:?}", g.value(y).data());
    println!("PKAN output {:?}", g.value(z).data());
    Ok(())
}
