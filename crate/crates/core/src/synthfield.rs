//! Procedural maize-plot imagery with point annotations, the augmentation
//! pipeline, and the on-disk dataset format.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal, Poisson};

use crate::error::{dim_err, io_err, Error, Result};
use crate::tensor::Tensor;

pub type Point = [f64; 2];

/// Plot geometry and imaging parameters. Lengths in metres, `gsd_mm` in
/// millimetres per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldConfig {
    pub rows: usize,
    pub row_spacing_m: f64,
    pub interval_m: f64,
    /// Seeds sown per plot, split evenly over the rows.
    pub seeds: usize,
    pub emergence: f64,
    /// Standard deviation of the positional jitter.
    pub jitter_m: f64,
    /// Expected weeds per square metre of imaged ground.
    pub weed_density: f64,
    pub gsd_mm: f64,
    pub width: usize,
    pub height: usize,
    /// Nominal plant radius in pixels; each plant varies ±20% around it.
    pub plant_radius_px: f64,
    /// Half-width of the uniform background noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            rows: 2,
            row_spacing_m: 0.97,
            interval_m: 0.15,
            seeds: 80,
            emergence: 0.9,
            jitter_m: 0.01,
            weed_density: 2.0,
            gsd_mm: 2.38,
            width: 256,
            height: 256,
            plant_radius_px: 12.0,
            noise: 0.02,
            seed: 0,
        }
    }
}

impl FieldConfig {
    pub fn px_per_m(&self) -> f64 {
        1000.0 / self.gsd_mm
    }

    pub fn interval_px(&self) -> f64 {
        self.interval_m * self.px_per_m()
    }

    pub fn row_spacing_px(&self) -> f64 {
        self.row_spacing_m * self.px_per_m()
    }

    pub fn plants_per_row(&self) -> usize {
        self.seeds / self.rows.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("row_spacing_m", self.row_spacing_m),
            ("interval_m", self.interval_m),
            ("gsd_mm", self.gsd_mm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.emergence) {
            return bad(format!("emergence {} outside [0, 1]", self.emergence));
        }
        if !(self.jitter_m >= 0.0 && self.weed_density >= 0.0 && self.noise >= 0.0 && self.plant_radius_px > 0.0) {
            return bad("jitter, weed density, noise must be non-negative and radius positive".into());
        }
        if self.rows == 0 {
            return bad("a plot needs at least one row".into());
        }
        let gap = self.interval_px();
        if (self.width as f64) < gap || (self.height as f64) < gap {
            return bad(format!(
                "image {}×{} is smaller than one in-row interval ({gap:.1} px)",
                self.width, self.height
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Plant {
    pub center: Point,
    pub radius: f64,
    pub intensity: f64,
    pub row: usize,
    /// Sowing position along the row.
    pub slot: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldScene {
    pub width: usize,
    pub height: usize,
    /// Plants whose centres fall inside the image, ordered by row then slot.
    pub plants: Vec<Plant>,
    pub weeds: Vec<Plant>,
    pub texture_seed: u64,
    pub noise: f64,
}

impl FieldScene {
    /// Ground-truth points, one per plant centre.
    pub fn points(&self) -> Vec<Point> {
        self.plants.iter().map(|p| p.center).collect()
    }

    /// Index pairs of plants that are neighbours within a row.
    pub fn adjacent_pairs(&self) -> Vec<(usize, usize)> {
        self.plants
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[0].row == w[1].row)
            .map(|(i, _)| (i, i + 1))
            .collect()
    }
}

/// Window offset along one axis: keep the whole extent in view when it fits,
/// otherwise slide across it.
fn window_offset(extent: f64, image: f64, margin: f64, rng: &mut impl Rng) -> f64 {
    let slack = image - extent - 2.0 * margin;
    if slack >= 0.0 {
        -(margin + rng.random::<f64>() * slack)
    } else {
        -margin + rng.random::<f64>() * (extent - image + 2.0 * margin)
    }
}

/// Scene drawn from the generator stream `index` of `cfg.seed`.
pub fn generate_scene(cfg: &FieldConfig, index: u64) -> Result<FieldScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let rng = &mut rng;

    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let gap = cfg.interval_px();
    let spacing = cfg.row_spacing_px();
    let per_row = cfg.plants_per_row();
    let margin = cfg.plant_radius_px;
    let along = per_row.saturating_sub(1) as f64 * gap;
    let across = (cfg.rows - 1) as f64 * spacing;

    let off_x = window_offset(along, w, margin, rng);
    let off_y = if across + 2.0 * margin <= h {
        window_offset(across, h, margin, rng)
    } else {
        // Put a random row somewhere in view.
        let r = rng.random_range(0..cfg.rows) as f64;
        r * spacing - (margin + rng.random::<f64>() * (h - 2.0 * margin).max(0.0))
    };

    let jitter = Normal::new(0.0, cfg.jitter_m * cfg.px_per_m()).map_err(|e| Error::Config(e.to_string()))?;
    let emerge = Bernoulli::new(cfg.emergence).map_err(|e| Error::Config(e.to_string()))?;
    let mut plants = Vec::new();
    for row in 0..cfg.rows {
        for slot in 0..per_row {
            // Draw everything unconditionally so the stream layout does not
            // depend on which plants end up visible.
            let dx = jitter.sample(rng);
            let dy = jitter.sample(rng);
            let up = emerge.sample(rng);
            let radius = cfg.plant_radius_px * rng.random_range(0.8..1.2);
            let intensity = rng.random_range(0.75..1.0);
            let x = slot as f64 * gap - off_x + dx;
            let y = row as f64 * spacing - off_y + dy;
            if up && (0.0..w).contains(&x) && (0.0..h).contains(&y) {
                plants.push(Plant {
                    center: [x, y],
                    radius,
                    intensity,
                    row,
                    slot,
                });
            }
        }
    }

    let area_m2 = w * h * (cfg.gsd_mm / 1000.0).powi(2);
    let lambda = cfg.weed_density * area_m2;
    let n_weeds = if lambda > 0.0 {
        Poisson::new(lambda).map_err(|e| Error::Config(e.to_string()))?.sample(rng) as usize
    } else {
        0
    };
    let weeds = (0..n_weeds)
        .map(|_| Plant {
            center: [rng.random::<f64>() * w, rng.random::<f64>() * h],
            radius: cfg.plant_radius_px * rng.random_range(0.3..0.6),
            intensity: rng.random_range(0.6..0.9),
            row: usize::MAX,
            slot: usize::MAX,
        })
        .collect();

    Ok(FieldScene {
        width: cfg.width,
        height: cfg.height,
        plants,
        weeds,
        texture_seed: rng.random(),
        noise: cfg.noise,
    })
}

/// The scene of stream 0.
pub fn generate_field(cfg: &FieldConfig) -> Result<FieldScene> {
    generate_scene(cfg, 0)
}

const SOIL: [f64; 3] = [0.36, 0.27, 0.19];
const PLANT: [f64; 3] = [0.22, 0.78, 0.18];
const WEED: [f64; 3] = [0.72, 0.62, 0.16];

fn paint(img: &mut [f64], width: usize, height: usize, p: &Plant, color: [f64; 3]) {
    let [cx, cy] = p.center;
    let r = p.radius;
    let x0 = (cx - r).floor().max(0.0) as usize;
    let y0 = (cy - r).floor().max(0.0) as usize;
    let x1 = ((cx + r).ceil() as usize).min(width);
    let y1 = ((cy + r).ceil() as usize).min(height);
    for i in y0..y1 {
        for j in x0..x1 {
            let d = ((j as f64 + 0.5 - cx).powi(2) + (i as f64 + 0.5 - cy).powi(2)).sqrt();
            // Cone profile: a single sharp peak at the centre.
            let a = p.intensity * (1.0 - d / r).max(0.0);
            if a > 0.0 {
                let px = &mut img[(i * width + j) * 3..][..3];
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - a) + color[c] * a;
                }
            }
        }
    }
}

/// `[H×W×3]` image in `[0, 1]`. Pixel `(i, j)` covers `[j, j+1)×[i, i+1)`.
pub fn render(scene: &FieldScene) -> Tensor {
    let (w, h) = (scene.width, scene.height);
    let mut rng = ChaCha8Rng::seed_from_u64(scene.texture_seed);
    let mut img = Vec::with_capacity(w * h * 3);
    for _ in 0..w * h {
        let shade = scene.noise * (2.0 * rng.random::<f64>() - 1.0);
        for c in SOIL {
            img.push(c + shade);
        }
    }
    for weed in &scene.weeds {
        paint(&mut img, w, h, weed, WEED);
    }
    for plant in &scene.plants {
        paint(&mut img, w, h, plant, PLANT);
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::from_raw(vec![h, w, 3], img)
}

fn image_dims(img: &Tensor) -> Result<(usize, usize)> {
    match *img.shape() {
        [h, w, 3] => Ok((h, w)),
        ref s => dim_err(format!("expected an [H×W×3] image, got {s:?}")),
    }
}

/// Bilinear sample at continuous pixel coordinates; `None` outside.
fn sample(img: &[f64], w: usize, h: usize, x: f64, y: f64) -> Option<[f64; 3]> {
    let (fx, fy) = (x - 0.5, y - 0.5);
    if fx < -0.5 || fy < -0.5 || fx > w as f64 - 0.5 || fy > h as f64 - 0.5 {
        return None;
    }
    let x0 = fx.floor().clamp(0.0, (w - 1) as f64);
    let y0 = fy.floor().clamp(0.0, (h - 1) as f64);
    let tx = (fx - x0).clamp(0.0, 1.0);
    let ty = (fy - y0).clamp(0.0, 1.0);
    let (x0, y0) = (x0 as usize, y0 as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let at = |i: usize, j: usize, c: usize| img[(i * w + j) * 3 + c];
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let top = at(y0, x0, c) * (1.0 - tx) + at(y0, x1, c) * tx;
        let bot = at(y1, x0, c) * (1.0 - tx) + at(y1, x1, c) * tx;
        *o = top * (1.0 - ty) + bot * ty;
    }
    Some(out)
}

fn channel_mean(img: &Tensor) -> [f64; 3] {
    let mut m = [0.0; 3];
    for px in img.data().chunks(3) {
        for c in 0..3 {
            m[c] += px[c];
        }
    }
    let n = (img.numel() / 3).max(1) as f64;
    m.map(|v| v / n)
}

/// Rotation by `degrees` about the image centre (clockwise on screen, since
/// `y` points down). Uncovered corners take the mean colour.
pub fn rotate(img: &Tensor, points: &[Point], degrees: f64) -> Result<(Tensor, Vec<Point>)> {
    let (h, w) = image_dims(img)?;
    let (s, c) = degrees.to_radians().sin_cos();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let fill = channel_mean(img);
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for i in 0..h {
        for j in 0..w {
            let (dx, dy) = (j as f64 + 0.5 - cx, i as f64 + 0.5 - cy);
            let (sx, sy) = (cx + c * dx + s * dy, cy - s * dx + c * dy);
            out.extend(sample(src, w, h, sx, sy).unwrap_or(fill));
        }
    }
    let pts = points
        .iter()
        .map(|&[x, y]| {
            let (dx, dy) = (x - cx, y - cy);
            [cx + c * dx - s * dy, cy + s * dx + c * dy]
        })
        .collect();
    Ok((Tensor::from_raw(vec![h, w, 3], out), pts))
}

pub fn hflip(img: &Tensor, points: &[Point]) -> Result<(Tensor, Vec<Point>)> {
    let (h, w) = image_dims(img)?;
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for i in 0..h {
        for j in (0..w).rev() {
            out.extend_from_slice(&src[(i * w + j) * 3..][..3]);
        }
    }
    let pts = points.iter().map(|&[x, y]| [w as f64 - x, y]).collect();
    Ok((Tensor::from_raw(vec![h, w, 3], out), pts))
}

pub fn vflip(img: &Tensor, points: &[Point]) -> Result<(Tensor, Vec<Point>)> {
    let (h, w) = image_dims(img)?;
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for i in (0..h).rev() {
        out.extend_from_slice(&src[i * w * 3..][..w * 3]);
    }
    let pts = points.iter().map(|&[x, y]| [x, h as f64 - y]).collect();
    Ok((Tensor::from_raw(vec![h, w, 3], out), pts))
}

fn map_pixels(img: &Tensor, f: impl Fn(usize, f64) -> f64) -> Tensor {
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| f(i % 3, v).clamp(0.0, 1.0))
        .collect();
    Tensor::from_raw(img.shape().to_vec(), data)
}

/// Scales deviations from the per-channel mean by `factor`.
pub fn contrast(img: &Tensor, factor: f64) -> Result<Tensor> {
    image_dims(img)?;
    let mean = channel_mean(img);
    Ok(map_pixels(img, |c, v| mean[c] + factor * (v - mean[c])))
}

pub fn brightness(img: &Tensor, delta: f64) -> Result<Tensor> {
    image_dims(img)?;
    Ok(map_pixels(img, |_, v| v + delta))
}

pub fn gauss_noise(img: &Tensor, sigma: f64, rng: &mut impl Rng) -> Result<Tensor> {
    image_dims(img)?;
    let n = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let data = img.data().iter().map(|&v| (v + n.sample(rng)).clamp(0.0, 1.0)).collect();
    Ok(Tensor::from_raw(img.shape().to_vec(), data))
}

/// Resamples to `round(scale·W) × round(scale·H)`, mimicking a change of
/// flight altitude.
pub fn rescale(img: &Tensor, points: &[Point], scale: f64) -> Result<(Tensor, Vec<Point>)> {
    let (h, w) = image_dims(img)?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Config(format!("rescale factor {scale} must be positive")));
    }
    let nw = ((w as f64 * scale).round() as usize).max(1);
    let nh = ((h as f64 * scale).round() as usize).max(1);
    let (sx, sy) = (nw as f64 / w as f64, nh as f64 / h as f64);
    let src = img.data();
    let mut out = Vec::with_capacity(nw * nh * 3);
    for i in 0..nh {
        for j in 0..nw {
            let x = (j as f64 + 0.5) / sx;
            let y = (i as f64 + 0.5) / sy;
            out.extend(sample(src, w, h, x, y).expect("inside by construction"));
        }
    }
    let pts = points.iter().map(|&[x, y]| [x * sx, y * sy]).collect();
    Ok((Tensor::from_raw(vec![nh, nw, 3], out), pts))
}

/// Axis-aligned pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn contains(&self, p: Point) -> bool {
        (self.x0 as f64..self.x1 as f64).contains(&p[0]) && (self.y0 as f64..self.y1 as f64).contains(&p[1])
    }
}

/// Pastes `rect` from the donor and swaps the enclosed annotations.
pub fn cutmix(img: &Tensor, points: &[Point], donor: (&Tensor, &[Point]), rect: Rect) -> Result<(Tensor, Vec<Point>)> {
    let (h, w) = image_dims(img)?;
    if donor.0.shape() != img.shape() {
        return dim_err(format!(
            "cutmix donor {:?} does not match image {:?}",
            donor.0.shape(),
            img.shape()
        ));
    }
    if rect.x0 >= rect.x1 || rect.y0 >= rect.y1 || rect.x1 > w || rect.y1 > h {
        return dim_err(format!("cutmix rectangle {rect:?} outside {w}×{h} image"));
    }
    let mut out = img.data().to_vec();
    let d = donor.0.data();
    for i in rect.y0..rect.y1 {
        let a = (i * w + rect.x0) * 3;
        let b = (i * w + rect.x1) * 3;
        out[a..b].copy_from_slice(&d[a..b]);
    }
    let mut pts: Vec<Point> = points.iter().copied().filter(|&p| !rect.contains(p)).collect();
    pts.extend(donor.1.iter().copied().filter(|&p| rect.contains(p)));
    Ok((Tensor::from_raw(vec![h, w, 3], out), pts))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentOp {
    /// Uniform angle in `[-15°, 15°]`.
    Rotate,
    HFlip,
    VFlip,
    /// Factor in `[0.7, 1.3]`.
    Contrast,
    /// Offset in `[-0.1, 0.1]`.
    Brightness,
    /// Additive noise with σ = 0.02.
    GaussNoise,
    /// Scale in `[0.5, 1.5]`.
    Rescale,
    /// Rectangle with sides in `[W/4, W/2]`, `[H/4, H/2]`.
    CutMix,
}

impl std::str::FromStr for AugmentOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "rotate" => Self::Rotate,
            "hflip" => Self::HFlip,
            "vflip" => Self::VFlip,
            "contrast" => Self::Contrast,
            "brightness" => Self::Brightness,
            "gauss_noise" => Self::GaussNoise,
            "rescale" => Self::Rescale,
            "cutmix" => Self::CutMix,
            _ => return Err(Error::Config(format!("unknown augmentation {s:?}"))),
        })
    }
}

/// Applies `op` with parameters drawn from `rng`. `donor` is required for
/// [`AugmentOp::CutMix`] and ignored otherwise.
pub fn augment(
    img: &Tensor,
    points: &[Point],
    op: AugmentOp,
    rng: &mut impl Rng,
    donor: Option<(&Tensor, &[Point])>,
) -> Result<(Tensor, Vec<Point>)> {
    let (h, w) = image_dims(img)?;
    match op {
        AugmentOp::Rotate => rotate(img, points, rng.random_range(-15.0..=15.0)),
        AugmentOp::HFlip => hflip(img, points),
        AugmentOp::VFlip => vflip(img, points),
        AugmentOp::Contrast => Ok((contrast(img, rng.random_range(0.7..=1.3))?, points.to_vec())),
        AugmentOp::Brightness => Ok((brightness(img, rng.random_range(-0.1..=0.1))?, points.to_vec())),
        AugmentOp::GaussNoise => Ok((gauss_noise(img, 0.02, rng)?, points.to_vec())),
        AugmentOp::Rescale => rescale(img, points, rng.random_range(0.5..=1.5)),
        AugmentOp::CutMix => {
            let donor = donor.ok_or_else(|| Error::Usage("cutmix needs a donor sample".into()))?;
            let rw = rng.random_range((w / 4).max(1)..=(w / 2).max(1));
            let rh = rng.random_range((h / 4).max(1)..=(h / 2).max(1));
            let x0 = rng.random_range(0..=w - rw);
            let y0 = rng.random_range(0..=h - rh);
            let rect = Rect {
                x0,
                y0,
                x1: x0 + rw,
                y1: y0 + rh,
            };
            cutmix(img, points, donor, rect)
        }
    }
}

/// One annotated image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: Tensor,
    pub points: Vec<Point>,
    /// Within-row neighbour pairs, indices into `points`.
    pub adjacent: Vec<(usize, usize)>,
}

impl Sample {
    pub fn from_scene(name: impl Into<String>, scene: &FieldScene) -> Self {
        Self {
            name: name.into(),
            image: render(scene),
            points: scene.points(),
            adjacent: scene.adjacent_pairs(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn manifest(self) -> &'static str {
        match self {
            Split::Train => "train.txt",
            Split::Val => "val.txt",
            Split::Test => "test.txt",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// Sizes of the train/val/test partition of `n` samples, 60/15/25.
pub fn split_sizes(n: usize) -> [usize; 3] {
    let train = n * 60 / 100;
    let val = n * 15 / 100;
    [train, val, n - train - val]
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = image_dims(img)?;
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let perr = |msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg: msg.into(),
    };
    // Header: four whitespace-separated tokens, then one whitespace byte.
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(perr("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(perr("expected a binary P6 image with maxval 255"));
    }
    let w: usize = fields[1].parse().map_err(|_| perr("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| perr("bad height"))?;
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != w * h * 3 {
        return Err(perr("pixel payload has the wrong length"));
    }
    Ok(Tensor::from_raw(vec![h, w, 3], body.iter().map(|&b| b as f64 / 255.0).collect()))
}

pub fn format_annotation(points: &[Point]) -> String {
    let mut s = format!("{}\n", points.len());
    for p in points {
        let _ = writeln!(s, "{} {}", p[0], p[1]);
    }
    s
}

/// Parses a count line followed by that many `x y` lines.
pub fn parse_annotation(text: &str, path: &Path) -> Result<Vec<Point>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (_, head) = lines.next().ok_or_else(|| err(1, "missing count line".into()))?;
    let count: usize = head.parse().map_err(|_| err(1, format!("bad count {head:?}")))?;
    let mut points = Vec::with_capacity(count);
    for (n, line) in lines {
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let mut coord = || -> Result<f64> {
            let tok = it.next().ok_or_else(|| err(n, "expected two coordinates".into()))?;
            let v: f64 = tok.parse().map_err(|_| err(n, format!("bad number {tok:?}")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(err(n, format!("non-finite coordinate {tok:?}")))
            }
        };
        let p = [coord()?, coord()?];
        if it.next().is_some() {
            return Err(err(n, "more than two values".into()));
        }
        points.push(p);
    }
    if points.len() != count {
        return Err(err(1, format!("count says {count} points, found {}", points.len())));
    }
    Ok(points)
}

fn format_meta(adjacent: &[(usize, usize)]) -> String {
    let pairs: Vec<String> = adjacent.iter().map(|(a, b)| format!("{a}-{b}")).collect();
    format!("adjacent = {}\n", pairs.join(" "))
}

fn parse_meta(text: &str, path: &Path) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let Some((key, value)) = line.split_once('=') else { continue };
        if key.trim() != "adjacent" {
            continue;
        }
        for tok in value.split_whitespace() {
            let pair = tok
                .split_once('-')
                .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
                .ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("bad pair {tok:?}"),
                })?;
            out.push(pair);
        }
    }
    Ok(out)
}

fn image_path(dir: &Path, name: &str) -> PathBuf {
    dir.join("images").join(format!("{name}.ppm"))
}

fn label_path(dir: &Path, name: &str, ext: &str) -> PathBuf {
    dir.join("labels").join(format!("{name}.{ext}"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut f = BufWriter::new(f);
    f.write_all(text.as_bytes()).map_err(io_err(path))?;
    f.flush().map_err(io_err(path))
}

/// Writes images, annotations and the three split manifests. Samples are
/// assigned to splits in order.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<[usize; 3]> {
    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    for s in samples {
        write_ppm(&image_path(dir, &s.name), &s.image)?;
        write_text(&label_path(dir, &s.name, "txt"), &format_annotation(&s.points))?;
        write_text(&label_path(dir, &s.name, "meta"), &format_meta(&s.adjacent))?;
    }
    let sizes = split_sizes(samples.len());
    let mut start = 0;
    for (split, n) in Split::ALL.into_iter().zip(sizes) {
        let text: String = samples[start..start + n]
            .iter()
            .map(|s| format!("images/{}.ppm\n", s.name))
            .collect();
        write_text(&dir.join(split.manifest()), &text)?;
        start += n;
    }
    Ok(sizes)
}

/// Names listed in a split manifest.
pub fn read_manifest(dir: &Path, split: Split) -> Result<Vec<String>> {
    let path = dir.join(split.manifest());
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .strip_prefix("images/")
                .and_then(|s| s.strip_suffix(".ppm"))
                .map(str::to_owned)
                .ok_or_else(|| Error::Parse {
                    path: path.clone(),
                    line: i + 1,
                    msg: format!("expected images/<name>.ppm, got {l:?}"),
                })
        })
        .collect()
}

pub fn read_sample(dir: &Path, name: &str) -> Result<Sample> {
    let image = read_ppm(&image_path(dir, name))?;
    let lp = label_path(dir, name, "txt");
    let text = fs::read_to_string(&lp).map_err(io_err(&lp))?;
    let points = parse_annotation(&text, &lp)?;
    let mp = label_path(dir, name, "meta");
    let adjacent = match fs::read_to_string(&mp) {
        Ok(t) => parse_meta(&t, &mp)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(Error::Io { path: mp, source: e }),
    };
    Ok(Sample {
        name: name.to_owned(),
        image,
        points,
        adjacent,
    })
}

pub fn read_split(dir: &Path, split: Split) -> Result<Vec<Sample>> {
    read_manifest(dir, split)?.iter().map(|n| read_sample(dir, n)).collect()
}

/// `n` rendered scenes named `scene_00000`, … from consecutive streams.
pub fn generate_samples(cfg: &FieldConfig, n: usize) -> Result<Vec<Sample>> {
    (0..n)
        .map(|i| {
            let scene = generate_scene(cfg, i as u64)?;
            Ok(Sample::from_scene(format!("scene_{i:05}"), &scene))
        })
        .collect()
}
