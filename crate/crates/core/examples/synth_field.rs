//! Generates a synthetic plot, applies every augmentation and writes a small
//! dataset to a directory (first argument, default `synth_out`).

use std::path::PathBuf;

use akt::error::Result;
use akt::synthfield::{
    augment, generate_samples, generate_scene, render, write_dataset, write_ppm, AugmentOp, FieldConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synth_out".into()));
    let cfg = FieldConfig::default();
    let scene = generate_scene(&cfg, 0)?;
    println!(
        "scene 0: {} plants, {} weeds, in-row gap {:.2} px, row gap {:.1} px",
        scene.plants.len(),
        scene.weeds.len(),
        cfg.interval_px(),
        cfg.row_spacing_px()
    );
    let img = render(&scene);
    let donor = render(&generate_scene(&cfg, 1)?);
    let donor_pts = generate_scene(&cfg, 1)?.points();
    let rng = &mut ChaCha8Rng::seed_from_u64(0);
    for op in ["rotate", "hflip", "vflip", "contrast", "brightness", "gauss_noise", "rescale", "cutmix"] {
        let kind: AugmentOp = op.parse()?;
        let (a, pts) = augment(&img, &scene.points(), kind, rng, Some((&donor, &donor_pts)))?;
        println!("{op:>12}: image {:?}, {} points", a.shape(), pts.len());
    }

    let samples = generate_samples(&cfg, 20)?;
    let sizes = write_dataset(&out, &samples)?;
    write_ppm(&out.join("preview.ppm"), &img)?;
    println!("wrote {} scenes to {} (train/val/test = {sizes:?})", samples.len(), out.display());
    Ok(())
}
