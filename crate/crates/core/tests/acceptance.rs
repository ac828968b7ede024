//! Acceptance checks, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines are always printed.

use std::fs;
use std::time::{Duration, Instant};

use akt::attention::{AttentionVariant, PaaBlock, PaaConfig};
use akt::autodiff::{Graph, Var};
use akt::checkpoint::Checkpoint;
use akt::cli::{cmd_bench, cmd_generate, cmd_train};
use akt::config::RunConfig;
use akt::error::Result;
use akt::gradcheck::{grad_check, grad_check_params, GradCheckReport};
use akt::kan::{grouped_pau, silu, BSplineGrid, KanLinear, PauParams, PkanBlock, PkanConfig};
use akt::matching::{hungarian, match_cost, training_loss, CostMatrix};
use akt::metrics::{localization_metrics, px_to_cm, spacing_accuracy, spacing_estimate, MetricConfig};
use akt::model::{count_params_flops, ModelConfig};
use akt::params::ParamStore;
use akt::synthfield::{generate_samples, generate_scene, FieldConfig};
use akt::tensor::Tensor;
use akt::train::{evaluate_loss, predict_points, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;
const PROBES: usize = 100;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn randomize(store: &mut ParamStore, rng: &mut impl Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        store.set(id, random(&shape, -0.8, 0.8, rng)).unwrap();
    }
}

/// `Σ w ⊙ y` with fixed random weights, so every output entry matters.
fn weighted_sum(g: &mut Graph, y: Var, rng_seed: u64) -> Result<Var> {
    let rng = &mut ChaCha8Rng::seed_from_u64(rng_seed);
    let w = g.constant(random(g.shape(y), -1.0, 1.0, rng));
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

fn summarize(name: &str, r: &GradCheckReport) -> String {
    format!("{name}: {} probes, max rel {:.2e}", r.entries, r.max_rel_error)
}

fn gradient_suite() -> Result<Outcome> {
    let rng = &mut ChaCha8Rng::seed_from_u64(2024);
    let mut reports = Vec::new();

    // Grouped Padé unit: inputs and coefficients are all probed.
    let x = random(&[8, 16], -2.5, 2.5, rng);
    let num = random(&[4, 6], -0.8, 0.8, rng);
    let den = random(&[4], -0.8, 0.8, rng);
    let scales = random(&[4], 0.5, 1.5, rng);
    let pau = |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let y = grouped_pau(g, v[0], v[1], v[2], v[3])?;
        weighted_sum(g, y, 1)
    };
    reports.push(("PAU", grad_check(pau, &[x, num, den, scales], EPS, TOL)?));

    let mut store = ParamStore::new();
    let grid = BSplineGrid::uniform(-1.0, 1.0, 5, 3)?;
    let kan = KanLinear::new(&mut store, "kan", 4, 3, grid, rng);
    randomize(&mut store, rng);
    let xk = random(&[6, 4], -0.95, 0.95, rng);
    let f = |g: &mut Graph, s: &ParamStore| -> Result<Var> {
        let x = g.constant(xk.clone());
        let y = kan.forward(g, s, x)?;
        weighted_sum(g, y, 2)
    };
    reports.push(("KAN linear", grad_check_params(f, &store, PROBES, EPS, TOL, rng)?));

    let mut store = ParamStore::new();
    let pkan = PkanBlock::new(&mut store, "pkan", 8, 8, PkanConfig::default(), rng)?;
    randomize(&mut store, rng);
    let xp = random(&[5, 8], -1.0, 1.0, rng);
    let f = |g: &mut Graph, s: &ParamStore| -> Result<Var> {
        let x = g.constant(xp.clone());
        let y = pkan.forward(g, s, x)?;
        weighted_sum(g, y, 3)
    };
    reports.push(("PKAN", grad_check_params(f, &store, 2 * PROBES, EPS, TOL, rng)?));

    let mut store = ParamStore::new();
    let paa = PaaBlock::new(&mut store, "paa", PaaConfig::new(8), rng)?;
    randomize(&mut store, rng);
    let xa = random(&[6, 8], -1.0, 1.0, rng);
    let f = |g: &mut Graph, s: &ParamStore| -> Result<Var> {
        let x = g.constant(xa.clone());
        let y = paa.forward(g, s, x)?;
        weighted_sum(g, y, 4)
    };
    reports.push(("PAA", grad_check_params(f, &store, 2 * PROBES, EPS, TOL, rng)?));

    let coords = random(&[60, 2], 0.0, 1.0, rng);
    let logits = random(&[60], -2.0, 2.0, rng);
    let gt: Vec<[f64; 2]> = (0..20).map(|_| [rng.random(), rng.random()]).collect();
    let f = |g: &mut Graph, v: &[Var]| -> Result<Var> { Ok(training_loss(g, v[0], v[1], &gt, [256.0, 256.0])?.0) };
    reports.push(("loss", grad_check(f, &[coords, logits], EPS, TOL)?));

    let pass = reports.iter().all(|(_, r)| r.passed() && r.entries >= PROBES);
    let detail: Vec<String> = reports.iter().map(|(n, r)| summarize(n, r)).collect();
    outcome(pass, detail.join("; "))
}

fn brute_force(c: &CostMatrix) -> f64 {
    fn go(c: &CostMatrix, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == c.rows() {
            *best = best.min(acc);
            return;
        }
        for j in 0..c.cols() {
            if !used[j] {
                used[j] = true;
                go(c, row + 1, used, acc + c.get(row, j), best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(c, 0, &mut vec![false; c.cols()], 0.0, &mut best);
    best
}

fn hungarian_exactness() -> Result<Outcome> {
    let rng = &mut ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let rows = rng.random_range(1..=7);
        let cols = rng.random_range(rows..=8);
        let c = CostMatrix::from_fn(rows, cols, |_, _| rng.random_range(-5.0..5.0))?;
        if hungarian(&c)?.total_cost != brute_force(&c) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} of 1000 differ from brute force"))
}

fn cost_semantics() -> Result<Outcome> {
    let a = match_cost([0.4, 0.6], 0.9, [0.4, 0.6]);
    let b = match_cost([0.0, 0.0], 0.0, [0.3, 0.4]);
    outcome(a == -0.9 && b == 0.3 + 0.4, format!("coincident {a}, (0.3,0.4) {b}"))
}

fn pau_safety() -> Result<Outcome> {
    let rng = &mut ChaCha8Rng::seed_from_u64(4);
    let fitted = PauParams::silu_init();
    let random_pau = PauParams::new(
        (0..6).map(|_| rng.random_range(-3.0..3.0)).collect(),
        (0..4).map(|_| rng.random_range(-3.0..3.0)).collect(),
        1.0,
    )?;
    let mut min_den = f64::INFINITY;
    for p in [&fitted, &random_pau] {
        for _ in 0..1_000_000 {
            min_den = min_den.min(p.denominator_at(rng.random_range(-100.0..=100.0)));
        }
    }
    let dev = (0..=60_000)
        .map(|i| -3.0 + i as f64 * 1e-4)
        .map(|x| (fitted.eval(x) - silu(x)).abs())
        .fold(0.0, f64::max);
    outcome(min_den >= 1.0 && dev < 0.1, format!("min denominator {min_den:.6}, max |PAU − SiLU| {dev:.2e}"))
}

fn partition_of_unity() -> Result<Outcome> {
    let rng = &mut ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for grid_count in 3..=12 {
        for degree in [2, 3] {
            let grid = BSplineGrid::uniform(-1.0, 1.0, grid_count, degree)?;
            for i in 0..10_000 {
                let x = match i {
                    0 => -1.0,
                    1 => 1.0,
                    _ => rng.random_range(-1.0..1.0),
                };
                worst = worst.max((grid.basis(x).iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    outcome(worst <= 1e-12, format!("max |Σ basis − 1| {worst:.2e}"))
}

fn attention_scaling() -> Result<Outcome> {
    let rows = cmd_bench(64, 4, 20, &[512, 1024], 11)?;
    let paa = rows[1].paa_ms / rows[0].paa_ms;
    let mha = rows[1].mha_ms / rows[0].mha_ms;
    let big = ModelConfig {
        height: 1024,
        width: 1024,
        ..ModelConfig::default()
    };
    let paa_flops = count_params_flops(&big)?.flops.total();
    let mha_flops = count_params_flops(&ModelConfig {
        encoder_attention: AttentionVariant::Mha,
        ..big.clone()
    })?
    .flops
    .total();
    outcome(
        paa < 2.5 && mha > 3.0 && paa_flops < mha_flops,
        format!(
            "time ratio 512→1024: PAA {paa:.2}, MHA {mha:.2}; model FLOPs at N={}: PAA {paa_flops:.4e} < MHA {mha_flops:.4e}",
            big.tokens()
        ),
    )
}

fn metrics_protocol() -> Result<Outcome> {
    let cfg = MetricConfig::default();
    let gt = [[12.0, 40.0], [70.5, 41.0], [130.0, 39.5]];
    let perfect = localization_metrics(&gt, &gt, &cfg);
    let perfect_ok = perfect.avp == 1.0 && perfect.avr == 1.0 && perfect.avf == 1.0;
    let worked = localization_metrics(&[[0.0, 3.0], [100.0, 100.0]], &[[0.0, 0.0], [10.0, 0.0]], &cfg);
    let s = worked.at(3).expect("α=3 present");
    let worked_ok = (s.precision, s.recall, s.f1) == (0.5, 0.5, 0.5);
    let cm = px_to_cm(10.0, 2.38);
    outcome(
        perfect_ok && worked_ok && cm == 2.38,
        format!(
            "perfect Av.P/R/F {}/{}/{}; worked α=3 P/R/F {}/{}/{}; 10 px = {cm} cm",
            perfect.avp, perfect.avr, perfect.avf, s.precision, s.recall, s.f1
        ),
    )
}

fn spacing_pipeline() -> Result<Outcome> {
    let cfg = FieldConfig {
        jitter_m: 0.0,
        emergence: 0.8,
        weed_density: 0.0,
        width: 768,
        height: 768,
        seed: 3,
        ..FieldConfig::default()
    };
    let (mut est_cm, mut ref_cm) = (Vec::new(), Vec::new());
    let mut worst_px: f64 = 0.0;
    for i in 0..10 {
        let scene = generate_scene(&cfg, i)?;
        let e = spacing_estimate(&scene.points(), cfg.gsd_mm, cfg.row_spacing_px());
        for (k, &(a, b)) in e.pairs.iter().enumerate() {
            let (pa, pb) = (&scene.plants[a], &scene.plants[b]);
            if pa.row != pb.row {
                return outcome(false, format!("scene {i}: pair ({a}, {b}) crosses rows"));
            }
            let slots = pa.slot.abs_diff(pb.slot) as f64;
            worst_px = worst_px.max((e.distances_px[k] / slots - cfg.interval_px()).abs());
            est_cm.push(e.distances_cm[k]);
            ref_cm.push(slots * cfg.interval_m * 100.0);
        }
    }
    let r = spacing_accuracy(&est_cm, &ref_cm)?;
    outcome(
        worst_px < 0.5 && r.rmse < 0.1 && r.r_squared > 0.999,
        format!(
            "{} pairs, interval error {worst_px:.2e} px, RMSE {:.2e} cm, R² {:.6}",
            r.pairs, r.rmse, r.r_squared
        ),
    )
}

fn learning_signal() -> Result<Outcome> {
    let field = FieldConfig {
        jitter_m: 2.0 * 2.38 / 1000.0,
        weed_density: 0.0,
        seed: 1,
        ..FieldConfig::default()
    };
    let train = generate_samples(&field, 200)?;
    let test = generate_samples(&FieldConfig { seed: 999, ..field }, 20)?;
    let model = ModelConfig::default();
    let cfg = TrainConfig {
        steps: 500,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let probe = &train[..16];
    let loss0 = evaluate_loss(&trainer.model, &trainer.store, probe)?;
    let mut loss200 = f64::NAN;
    for step in 0..cfg.steps {
        if step == 200 {
            loss200 = evaluate_loss(&trainer.model, &trainer.store, probe)?;
        }
        trainer.train_step(&train)?;
    }
    let metric = MetricConfig::default();
    let mut acc = akt::metrics::LocalizationAccumulator::new(&metric);
    for s in &test {
        acc.add(&predict_points(&trainer.model, &trainer.store, &s.image, metric.tau)?, &s.points);
    }
    let report = acc.report();
    let f10 = report.at(10).expect("α=10 present").f1;
    outcome(
        f10 >= 0.8 && loss200 < loss0,
        format!(
            "{} steps; held-out F1 at α=10 {:.1}% (Av.F over α=1..10 {:.1}%); loss step 0 {loss0:.4}, step 200 {loss200:.4}",
            cfg.steps,
            100.0 * f10,
            100.0 * report.avf
        ),
    )
}

fn determinism() -> Result<Outcome> {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut cfg = RunConfig::from_text(
        "model.height = 64\nmodel.width = 64\nmodel.backbone_channels = 32\nmodel.embed_dim = 16\n\
         model.queries = 8\nmodel.heads = 2\nmodel.kan_hidden = 8\nfield.width = 64\nfield.height = 64\n\
         field.scenes = 12\ntrain.batch = 2\ntrain.steps = 3\ntrain.checkpoint_every = 0\n",
    )?;
    cfg.set_seed(21);
    let read_all = |d: &std::path::Path| -> Vec<(String, Vec<u8>)> {
        let mut v = Vec::new();
        for sub in ["", "images", "labels"] {
            let p = d.join(sub);
            for e in fs::read_dir(&p).expect("dataset dir") {
                let path = e.expect("entry").path();
                if path.is_file() {
                    v.push((path.strip_prefix(d).unwrap().display().to_string(), fs::read(&path).unwrap()));
                }
            }
        }
        v.sort();
        v
    };
    let mut gen = |name: &str| -> Result<Vec<(String, Vec<u8>)>> {
        cfg.out_dir = dir.path().join(name);
        cmd_generate(&cfg)?;
        Ok(read_all(&cfg.out_dir))
    };
    let (a, b) = (gen("a")?, gen("b")?);
    let generate_ok = a == b && !a.is_empty();

    cfg.data_dir = dir.path().join("a");
    cfg.out_dir = dir.path().join("run");
    let first = cmd_train(&cfg)?;
    let ckpt1 = fs::read(&first.checkpoint).unwrap();
    let log1 = fs::read(cfg.out_dir.join("loss.csv")).unwrap();
    let second = cmd_train(&cfg)?;
    let train_ok = first.losses == second.losses
        && ckpt1 == fs::read(&second.checkpoint).unwrap()
        && log1 == fs::read(cfg.out_dir.join("loss.csv")).unwrap();

    let again = dir.path().join("again.bin");
    Checkpoint::load(&first.checkpoint)?.save(&again)?;
    let persist_ok = fs::read(&again).unwrap() == ckpt1;
    outcome(
        generate_ok && train_ok && persist_ok,
        format!(
            "generate identical: {generate_ok} ({} files); train identical: {train_ok}; save→load→save identical: {persist_ok} ({} bytes)",
            a.len(),
            ckpt1.len()
        ),
    )
}

type Check = fn() -> Result<Outcome>;

fn main() {
    let criteria: [(&str, Option<u64>, Check); 10] = [
        ("gradient suite", Some(60), gradient_suite),
        ("Hungarian exactness", Some(30), hungarian_exactness),
        ("matching cost semantics", None, cost_semantics),
        ("PAU safety and SiLU fit", None, pau_safety),
        ("B-spline partition of unity", None, partition_of_unity),
        ("linear-attention scaling", Some(120), attention_scaling),
        ("metrics protocol", None, metrics_protocol),
        ("spacing pipeline", Some(10), spacing_pipeline),
        ("end-to-end learning signal", Some(15 * 60), learning_signal),
        ("determinism and persistence", None, determinism),
    ];
    let mut failed = 0;
    for (i, (name, limit, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let within = limit.is_none_or(|s| elapsed <= Duration::from_secs(s));
        let (pass, detail) = match result {
            Ok(o) => (o.pass && within, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let budget = limit.map_or_else(String::new, |s| format!(" of {s} s"));
        println!(
            "{} {:>2}. {name}: {detail} [{:.1} s{budget}]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            elapsed.as_secs_f64()
        );
        failed += usize::from(!pass);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
