//! Parameter and multiply-add counts of the model for both encoder
//! attention variants across input sizes.

use akt::attention::AttentionVariant;
use akt::model::{count_params_flops, ModelConfig};

fn main() -> akt::error::Result<()> {
    println!("input,tokens,variant,params,flops_encoder,flops_total");
    for side in [256, 512, 1024] {
        for variant in [AttentionVariant::Paa, AttentionVariant::Mha] {
            let cfg = ModelConfig {
                height: side,
                width: side,
                encoder_attention: variant,
                ..ModelConfig::default()
            };
            let c = count_params_flops(&cfg)?;
            println!(
                "{side}x{side},{},{variant},{},{:.4e},{:.4e}",
                cfg.tokens(),
                c.params.total(),
                c.flops.encoder,
                c.flops.total()
            );
        }
    }
    Ok(())
}
