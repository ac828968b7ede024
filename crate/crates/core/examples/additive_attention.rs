//! One additive-attention block next to dot-product attention: outputs,
//! intermediate shapes and analytic costs.

use akt::attention::{attention_flops, flops_crossover, AttentionVariant, MultiHeadAttention, PaaBlock, PaaConfig};
use akt::autodiff::Graph;
use akt::error::Result;
use akt::params::ParamStore;
use akt::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let (n, d) = (6, 8);
    let rng = &mut ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let paa = PaaBlock::new(&mut store, "paa", PaaConfig::new(d), rng)?;
    let mha = MultiHeadAttention::new(&mut store, "mha", d, 2, rng)?;
    let x = Tensor::new(&[n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect())?;

    let mut g = Graph::new();
    let xv = g.constant(x);
    let st = paa.attend(&mut g, &store, xv)?;
    println!("PAA weights α over {n} tokens: {:?}", g.value(st.alpha).data());
    println!("global context shape {:?}, output shape {:?}", g.shape(st.context), g.shape(st.output));
    let y = mha.forward(&mut g, &store, xv)?;
    println!("MHA output shape {:?}", g.shape(y));
    println!("parameters: PAA {}, MHA {}", paa.num_params(), mha.num_params());

    for n in [64, 256, 1024, 4096] {
        println!(
            "N = {n:>4}, d = 64: PAA {:.3e} FLOPs, MHA {:.3e} FLOPs",
            attention_flops(AttentionVariant::Paa, n, 64)?,
            attention_flops(AttentionVariant::Mha, n, 64)?
        );
    }
    println!("PAA becomes cheaper from N = {} at d = 64", flops_crossover(64)?);
    Ok(())
}
