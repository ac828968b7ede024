//! Inter-plant spacing on a jittered plot, compared with the sowing
//! geometry.

use akt::metrics::{spacing_accuracy, spacing_estimate};
use akt::synthfield::{generate_scene, FieldConfig};

fn main() -> akt::error::Result<()> {
    let cfg = FieldConfig {
        jitter_m: 0.01,
        emergence: 0.85,
        weed_density: 0.0,
        width: 768,
        height: 768,
        ..FieldConfig::default()
    };
    let (mut est, mut reference) = (Vec::new(), Vec::new());
    for i in 0..5 {
        let scene = generate_scene(&cfg, i)?;
        let e = spacing_estimate(&scene.points(), cfg.gsd_mm, cfg.row_spacing_px());
        println!("scene {i}: {} rows, {} pairs", e.rows.len(), e.pairs.len());
        for (k, &(a, b)) in e.pairs.iter().enumerate() {
            let slots = scene.plants[a].slot.abs_diff(scene.plants[b].slot) as f64;
            est.push(e.distances_cm[k]);
            reference.push(slots * cfg.interval_m * 100.0);
        }
    }
    let r = spacing_accuracy(&est, &reference)?;
    println!(
        "{} pairs: RMSE {:.3} cm, R² {:.4}, fit est = {:.3}·ref + {:.3}",
        r.pairs, r.rmse, r.r_squared, r.slope, r.intercept
    );
    Ok(())
}
