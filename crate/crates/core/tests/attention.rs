use akt::attention::{
    attention_flops, flops_crossover, AttentionVariant, GateOrder, GateParams, MultiHeadAttention, PaaBlock,
    PaaConfig,
};
use akt::autodiff::{Graph, Var};
use akt::error::{Error, Result};
use akt::kan::{silu, PauParams, PkanConfig};
use akt::nn::Linear;
use akt::params::ParamStore;
use akt::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn randomize(store: &mut ParamStore, rng: &mut impl Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = store.get(id);
        let data = (0..t.numel()).map(|_| rng.random_range(-0.9..0.9)).collect();
        store.set(id, Tensor::new(&t.shape().to_vec(), data).unwrap()).unwrap();
    }
}

fn random_tokens(n: usize, d: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::new(&[n, d], (0..n * d).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

fn run(x: &Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var>) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = f(&mut g, v).unwrap();
    g.value(y).clone()
}

type Rows = Vec<Vec<f64>>;

fn rows(t: &Tensor) -> Rows {
    let d = t.shape()[1];
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}

fn linear(store: &ParamStore, l: &Linear, x: &[f64]) -> Vec<f64> {
    let (w, b) = (store.get(l.weight).data(), store.get(l.bias).data());
    (0..l.n_out)
        .map(|o| b[o] + (0..l.n_in).map(|i| x[i] * w[i * l.n_out + o]).sum::<f64>())
        .collect()
}

fn channel_gate_ref(store: &ParamStore, gp: &GateParams, x: &Rows) -> Rows {
    let d = x[0].len();
    let mean: Vec<f64> = (0..d).map(|c| x.iter().map(|r| r[c]).sum::<f64>() / x.len() as f64).collect();
    let h: Vec<f64> = linear(store, &gp.channel.reduce, &mean).into_iter().map(silu).collect();
    let s: Vec<f64> = linear(store, &gp.channel.expand, &h).into_iter().map(sigmoid).collect();
    x.iter().map(|r| r.iter().zip(&s).map(|(a, b)| a * b).collect()).collect()
}

fn spatial_gate_ref(store: &ParamStore, gp: &GateParams, x: &Rows) -> Rows {
    x.iter()
        .map(|r| {
            let s = sigmoid(linear(store, &gp.spatial.scorer, r)[0]);
            r.iter().map(|v| v * s).collect()
        })
        .collect()
}

fn gates_ref(store: &ParamStore, gp: &GateParams, x: &Rows, order: GateOrder) -> Rows {
    match order {
        GateOrder::SpatialAfterChannel => spatial_gate_ref(store, gp, &channel_gate_ref(store, gp, x)),
        GateOrder::ChannelAfterSpatial => channel_gate_ref(store, gp, &spatial_gate_ref(store, gp, x)),
    }
}

/// Steps 1–5 of the additive block written as plain loops. Only the
/// rational part of the feed-forward block is modelled, so callers build it
/// without the spline term.
fn paa_ref(store: &ParamStore, b: &PaaBlock, x: &Rows) -> (Rows, Rows) {
    let d = b.cfg.dim;
    let q: Rows = x.iter().map(|r| linear(store, &b.q, r)).collect();
    let k: Rows = x.iter().map(|r| linear(store, &b.k, r)).collect();
    let v: Rows = x.iter().map(|r| linear(store, &b.v, r)).collect();
    let gq = gates_ref(store, &b.q_gates, &q, b.cfg.gate_order);
    let gk = gates_ref(store, &b.k_gates, &k, b.cfg.gate_order);
    let u: Rows = gq
        .iter()
        .zip(&gk)
        .map(|(a, c)| linear(store, &b.reduce, &[a.clone(), c.clone()].concat()))
        .collect();
    let w_a = store.get(b.score).data();
    let s: Vec<f64> = u
        .iter()
        .map(|r| r.iter().zip(w_a).map(|(a, c)| a * c).sum::<f64>() / (d as f64).sqrt())
        .collect();
    let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    let ctx: Vec<f64> = (0..d).map(|c| u.iter().zip(&e).map(|(r, w)| w / z * r[c]).sum()).collect();
    let y: Rows = v.iter().map(|r| r.iter().zip(&ctx).map(|(a, c)| a * c).collect()).collect();

    let akt::kan::FeedForward::Pkan(p) = &b.ffn else {
        panic!("reference expects a PKAN feed-forward block")
    };
    let num = store.get(p.numerators).data();
    let den = store.get(p.denominator).data().to_vec();
    let sc = store.get(p.scales).data();
    let m1 = p.cfg.num_order + 1;
    let per = p.hidden / p.cfg.groups;
    let out = x
        .iter()
        .zip(&y)
        .map(|(xr, yr)| {
            let h = linear(store, &p.lin1, yr);
            let a: Vec<f64> = h
                .iter()
                .enumerate()
                .map(|(j, &z)| {
                    let gi = j / per;
                    PauParams::new(num[gi * m1..(gi + 1) * m1].to_vec(), den.clone(), sc[gi]).unwrap().eval(z)
                })
                .collect();
            let f = linear(store, &p.lin2, &a);
            xr.iter().zip(f).map(|(a, b)| a + b).collect()
        })
        .collect();
    (y, out)
}

fn small_paa(d: usize, groups: usize, order: GateOrder, seed: u64) -> (PaaBlock, ParamStore) {
    let cfg = PaaConfig {
        gate_order: order,
        pkan: PkanConfig {
            groups,
            keep_spline: false,
            ..PkanConfig::default()
        },
        ..PaaConfig::new(d)
    };
    let mut store = ParamStore::new();
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let block = PaaBlock::new(&mut store, "paa", cfg, rng).unwrap();
    randomize(&mut store, rng);
    (block, store)
}

fn assert_close(a: &Rows, b: &Tensor, tol: f64) {
    for (r, br) in a.iter().zip(rows(b)) {
        for (u, v) in r.iter().zip(br) {
            assert!((u - v).abs() < tol, "{u} vs {v}");
        }
    }
}

#[test]
fn channel_gate_examples() {
    let mut store = ParamStore::new();
    let rng = &mut ChaCha8Rng::seed_from_u64(1);
    let gp = GateParams::new(&mut store, "g", 4, 4, rng);
    let x = Tensor::new(&[3, 4], vec![0.5, 2.0, -1.0, 3.0, 0.5, -2.0, 4.0, 1.0, 0.5, 0.0, 1.5, -3.0]).unwrap();

    // The constant first column gets the same gate on every token.
    let y = run(&x, |g, v| gp.channel.forward(g, &store, v));
    let first: Vec<f64> = rows(&y).iter().map(|r| r[0]).collect();
    assert!(first.iter().all(|&v| v == first[0]));

    randomize(&mut store, rng);
    let y = run(&x, |g, v| gp.channel.forward(g, &store, v));
    assert_close(&channel_gate_ref(&store, &gp, &rows(&x)), &y, 1e-14);
    let y = run(&x, |g, v| gp.spatial.forward(g, &store, v));
    assert_close(&spatial_gate_ref(&store, &gp, &rows(&x)), &y, 1e-14);

    let one = Tensor::new(&[1, 4], vec![1.0, -2.0, 0.5, 4.0]).unwrap();
    let y = run(&one, |g, v| gp.spatial.forward(g, &store, v));
    let ratio = y.data()[0] / one.data()[0];
    for (a, b) in y.data().iter().zip(one.data()) {
        assert!((a - b * ratio).abs() < 1e-15);
    }
    assert!(ratio > 0.0 && ratio < 1.0);
}

#[test]
fn paa_matches_loop_reference() {
    for order in [GateOrder::SpatialAfterChannel, GateOrder::ChannelAfterSpatial] {
        let (block, store) = small_paa(2, 2, order, 17);
        let x = random_tokens(3, 2, &mut ChaCha8Rng::seed_from_u64(18));
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let st = block.forward_state(&mut g, &store, xv).unwrap();
        let (y, out) = paa_ref(&store, &block, &rows(&x));
        assert_close(&y, g.value(st.y), 1e-13);
        assert_close(&out, g.value(st.output), 1e-13);
        assert_eq!(g.shape(st.gated), &[3, 4]);
    }
}

#[test]
fn paa_single_token() {
    let (block, store) = small_paa(4, 4, GateOrder::default(), 2);
    let x = random_tokens(1, 4, &mut ChaCha8Rng::seed_from_u64(3));
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let st = block.forward_state(&mut g, &store, xv).unwrap();
    assert_eq!(g.data(st.alpha), &[1.0]);
    assert_eq!(g.data(st.context), g.data(st.reduced));
    let uv: Vec<f64> = g.data(st.reduced).iter().zip(g.data(st.v)).map(|(a, b)| a * b).collect();
    assert_eq!(g.data(st.y), uv.as_slice());
    let branch = block.branch(&mut g, &store, xv).unwrap();
    let diff: Vec<f64> = g.data(st.output).iter().zip(x.data()).map(|(a, b)| a - b).collect();
    for (a, b) in diff.iter().zip(g.data(branch)) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn paa_zero_values_shift_by_a_constant() {
    let (block, mut store) = small_paa(4, 4, GateOrder::default(), 5);
    for id in [block.v.weight, block.v.bias] {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(&shape)).unwrap();
    }
    let rng = &mut ChaCha8Rng::seed_from_u64(6);
    let shift = |x: &Tensor| {
        let y = run(x, |g, v| block.forward(g, &store, v));
        let d: Vec<f64> = y.data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
        d
    };
    let a = shift(&random_tokens(5, 4, rng));
    let b = shift(&random_tokens(5, 4, rng));
    for (u, v) in a.iter().zip(&b) {
        assert!((u - v).abs() < 1e-14);
    }
    assert!(a.chunks(4).all(|r| r.iter().zip(&a[..4]).all(|(u, v)| (u - v).abs() < 1e-14)));
}

#[test]
fn gate_orders_differ() {
    let x = random_tokens(6, 8, &mut ChaCha8Rng::seed_from_u64(9));
    let (a, sa) = small_paa(8, 4, GateOrder::SpatialAfterChannel, 10);
    let (b, sb) = small_paa(8, 4, GateOrder::ChannelAfterSpatial, 10);
    let ya = run(&x, |g, v| a.forward(g, &sa, v));
    let yb = run(&x, |g, v| b.forward(g, &sb, v));
    assert!(ya.max_abs_diff(&yb) > 1e-6);
    assert_eq!("ca_sa".parse::<GateOrder>().unwrap(), GateOrder::ChannelAfterSpatial);
    assert!("sideways".parse::<GateOrder>().is_err());
}

#[test]
fn paa_rejects_wrong_width_and_empty_input() {
    let (block, store) = small_paa(4, 4, GateOrder::default(), 1);
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[3, 5]));
    assert!(matches!(block.forward(&mut g, &store, x), Err(Error::Dimension(_))));
    let x = g.constant(Tensor::zeros(&[0, 4]));
    assert!(block.forward(&mut g, &store, x).is_err());
}

fn mha(dim: usize, heads: usize, seed: u64) -> (MultiHeadAttention, ParamStore) {
    let mut store = ParamStore::new();
    let m = MultiHeadAttention::new(&mut store, "mha", dim, heads, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (m, store)
}

fn set(store: &mut ParamStore, id: akt::params::ParamId, data: &[f64]) {
    let shape = store.get(id).shape().to_vec();
    store.set(id, Tensor::new(&shape, data.to_vec()).unwrap()).unwrap();
}

#[test]
fn mha_hand_evaluation() {
    let (m, mut store) = mha(2, 1, 0);
    set(&mut store, m.q.weight, &[1.0, 0.0, 0.0, 1.0]);
    set(&mut store, m.k.weight, &[2.0, 0.0, 0.0, 1.0]);
    set(&mut store, m.v.weight, &[1.0, 2.0, 3.0, 4.0]);
    set(&mut store, m.out.weight, &[1.0, 0.0, 0.0, 1.0]);
    let y = run(&Tensor::eye(2), |g, v| m.forward(g, &store, v));
    let expect = [1.391_140_634_986_086_2, 2.391_140_634_986_086_4, 2.339_523_098_653_313_8, 3.339_523_098_653_313_8];
    for (a, b) in y.data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-14, "{y:?}");
    }
}

#[test]
fn mha_single_token_and_identical_tokens() {
    let (m, store) = mha(8, 2, 3);
    let x = random_tokens(1, 8, &mut ChaCha8Rng::seed_from_u64(4));
    let y = run(&x, |g, v| m.forward(g, &store, v));
    let expect = run(&x, |g, v| {
        let v = m.v.forward(g, &store, v)?;
        m.out.forward(g, &store, v)
    });
    assert!(y.max_abs_diff(&expect) < 1e-14);

    let same = Tensor::new(&[4, 8], x.data().repeat(4)).unwrap();
    let y = run(&same, |g, v| m.forward(g, &store, v));
    for r in rows(&y) {
        assert!(r.iter().zip(&rows(&y)[0]).all(|(a, b)| (a - b).abs() < 1e-14));
    }
    assert!(MultiHeadAttention::new(&mut ParamStore::new(), "x", 6, 4, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn flops_formulas() {
    let d = 64;
    for n in [1, 17, 1000] {
        let a = attention_flops(AttentionVariant::Paa, n, d).unwrap();
        let b = attention_flops(AttentionVariant::Paa, 2 * n, d).unwrap();
        assert_eq!(a / b, 0.5);
        let m = attention_flops(AttentionVariant::Mha, n, d).unwrap();
        assert_eq!(m, (4 * n * d * d + 2 * n * n * d) as f64);
    }
    let big = attention_flops(AttentionVariant::Mha, 1 << 22, d).unwrap() / attention_flops(AttentionVariant::Mha, 1 << 21, d).unwrap();
    assert!((big - 4.0).abs() < 1e-3);
    assert!(attention_flops(AttentionVariant::Paa, 1, 0).is_err());
    assert_eq!("mha".parse::<AttentionVariant>().unwrap(), AttentionVariant::Mha);
    assert!("linear".parse::<AttentionVariant>().is_err());

    // Direct scan of both formulas for d = 256 and d = 64.
    assert_eq!(flops_crossover(256).unwrap(), 399);
    assert_eq!(flops_crossover(64).unwrap(), 111);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn flops_are_monotone(n in 1usize..5000, d in 1usize..512) {
        for v in [AttentionVariant::Mha, AttentionVariant::Paa] {
            let f = attention_flops(v, n, d).unwrap();
            prop_assert!(attention_flops(v, n + 1, d).unwrap() > f);
            prop_assert!(attention_flops(v, n, d + 1).unwrap() > f);
        }
    }

    #[test]
    fn permuting_tokens_permutes_y(seed in 0u64..10_000, n in 2usize..7) {
        let (block, store) = small_paa(8, 4, GateOrder::default(), seed);
        let rng = &mut ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let x = random_tokens(n, 8, rng);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.rotate_left(1);
        perm.swap(0, n - 1);
        let xp = Tensor::new(&[n, 8], perm.iter().flat_map(|&i| x.row(i).to_vec()).collect()).unwrap();
        let y = |x: &Tensor| {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let st = block.attend(&mut g, &store, v).unwrap();
            (g.value(st.y).clone(), g.value(st.context).clone())
        };
        let (y0, c0) = y(&x);
        let (y1, c1) = y(&xp);
        prop_assert!(c0.max_abs_diff(&c1) < 1e-12);
        for (k, &i) in perm.iter().enumerate() {
            for (a, b) in y1.row(k).iter().zip(y0.row(i)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
