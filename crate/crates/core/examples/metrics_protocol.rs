//! Localization scores over distance thresholds plus counting errors.

use akt::metrics::{counting_metrics, localization_metrics, px_to_cm, MetricConfig};

fn main() -> akt::error::Result<()> {
    let cfg = MetricConfig::default();
    let gt = [[20.0, 30.0], [83.0, 31.0], [146.0, 29.0], [209.0, 30.0]];
    let pred = [[21.0, 30.5], [86.5, 33.0], [140.0, 29.0], [120.0, 120.0]];
    let r = localization_metrics(&pred, &gt, &cfg);
    println!("alpha,precision,recall,f1,alpha_cm");
    for s in &r.per_alpha {
        println!(
            "{},{:.3},{:.3},{:.3},{:.2}",
            s.alpha,
            s.precision,
            s.recall,
            s.f1,
            px_to_cm(s.alpha as f64, cfg.gsd_mm)
        );
    }
    println!("Av.P {:.3}  Av.R {:.3}  Av.F {:.3}", r.avp, r.avr, r.avf);

    let c = counting_metrics(&[38.0, 41.0, 35.0], &[40.0, 41.0, 39.0])?;
    println!("counting: MAE {:.3}, MSE {:.3}, RMSE {:.3}", c.mae, c.mse, c.rmse);
    Ok(())
}
