//! Trains a small detector on synthetic plots and scores it on held-out
//! scenes. The first argument sets the number of steps (default 300).

use std::time::Instant;

use akt::metrics::{LocalizationAccumulator, MetricConfig};
use akt::model::ModelConfig;
use akt::synthfield::{generate_samples, FieldConfig};
use akt::train::{evaluate_loss, predict_points, TrainConfig, Trainer};

fn main() -> akt::error::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let field = FieldConfig {
        jitter_m: 0.005,
        weed_density: 0.0,
        seed: 1,
        ..FieldConfig::default()
    };
    let train = generate_samples(&field, 100)?;
    let test = generate_samples(&FieldConfig { seed: 999, ..field.clone() }, 8)?;

    let model = ModelConfig {
        backbone_channels: 64,
        embed_dim: 32,
        queries: 32,
        kan_hidden: 16,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        steps,
        batch: 4,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, cfg)?;
    println!("initial loss on 8 training scenes: {:.4}", evaluate_loss(&trainer.model, &trainer.store, &train[..8])?);
    let start = Instant::now();
    for step in 1..=steps {
        let loss = trainer.train_step(&train)?;
        if step % 10 == 0 {
            println!("step {step:>4}: batch loss {loss:.4} ({:.1} s)", start.elapsed().as_secs_f64());
        }
    }
    println!("final loss on 8 training scenes: {:.4}", evaluate_loss(&trainer.model, &trainer.store, &train[..8])?);

    let mut acc = LocalizationAccumulator::new(&MetricConfig::default());
    for s in &test {
        acc.add(&predict_points(&trainer.model, &trainer.store, &s.image, 0.5)?, &s.points);
    }
    let r = acc.report();
    println!("held-out Av.P {:.3}  Av.R {:.3}  Av.F {:.3}", r.avp, r.avr, r.avf);
    Ok(())
}
