//! Acceptance suite. Each test prints one `PASS`/`FAIL` line to stderr
//! (written directly, so it shows without `--nocapture`) and then asserts.
//! Tests hold a shared lock so that wall-clock budgets and latency ratios are
//! measured without competing for the CPU.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use ordrep_core::compression::rd_curve;
use ordrep_core::data::{gen_gaussian, gen_pinwheel, PinwheelParams};
use ordrep_core::experiment::split_dataset;
use ordrep_core::numerics::{seeded_rng, ForwardOptions};
use ordrep_core::pca::{check_commutativity, column_cosines, extract_t, lemma1_structure_check, pca, train_orthonormal};
use ordrep_core::retrieval::{expected_depth_estimate, hamming_scan};
use ordrep_core::trainer::unit_params;
use ordrep_core::truncation::{geometric_pmf_unnormalized, geometric_tail_unnormalized, telescoped_cost};
use ordrep_core::{
    Activation, BinarizerModel, BitCode, Gradients, Matrix, Network, Ordering, PrefixTrieIndex, SweepConfig,
    TrainConfig, Trainer, TruncationDistribution,
};
use rand::Rng;

static LOCK: Mutex<()> = Mutex::new(());

fn exclusive() -> std::sync::MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(id: u32, name: &str, ok: bool, detail: &str) {
    let line = format!("[acceptance {id:>2}] {} {name}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "criterion {id} ({name}) failed: {detail}");
}

const SPECTRUM: [f64; 10] = [8.0, 5.0, 3.0, 2.0, 1.5, 1.0, 0.8, 0.6, 0.4, 0.2];

// ---- 1 -------------------------------------------------------------------

#[test]
fn c01_pca_recovery() {
    let _g = exclusive();
    let gap = SPECTRUM[..6].windows(2).map(|w| w[0] / w[1]).fold(f64::INFINITY, f64::min);
    let mut ok = gap >= 1.2;
    let mut detail = format!("min eigengap ratio {gap:.3}");
    for seed in 0..3u64 {
        let ds = gen_gaussian(10, 2000, &SPECTRUM, 100 + seed).unwrap();
        let p = pca(ds.matrix(), 5).unwrap();
        let dist = TruncationDistribution::geometric(0.9, 5).unwrap();
        let mut cfg = TrainConfig::new(dist.clone());
        cfg.expected_gradient = true;
        cfg.learning_rate = 0.01;
        cfg.minibatch_size = 2000;
        cfg.rng_seed = seed;
        let t0 = Instant::now();
        let run = train_orthonormal((10, 5), ds.matrix(), &dist, &cfg, 3000).unwrap();
        let secs = t0.elapsed().as_secs_f64();
        let cos = column_cosines(run.net.decoder()[0].weights(), &p.q);
        let worst = cos.iter().copied().fold(f64::INFINITY, f64::min);
        ok &= worst > 0.99 && secs < 60.0 && run.max_orthonormality_error < 1e-8;
        detail += &format!("; seed {seed}: min |cos| {worst:.5} in {secs:.1}s");
    }
    verdict(1, "PCA recovery", ok, &detail);
}

// ---- 2 -------------------------------------------------------------------

fn linear_run(data: &Matrix, k: usize, dist: TruncationDistribution, steps: usize, seed: u64) -> Network {
    let net = Network::autoencoder(&[data.nrows(), k], Activation::Linear, Activation::Linear, false, seed).unwrap();
    let mut cfg = TrainConfig::new(dist);
    cfg.expected_gradient = true;
    cfg.learning_rate = 0.01;
    cfg.momentum = 0.9;
    cfg.minibatch_size = data.ncols();
    let mut t = Trainer::new(net, cfg).unwrap();
    for _ in 0..steps {
        t.train_step(data).unwrap();
    }
    t.into_net()
}

#[test]
fn c02_identifiability_gap() {
    let _g = exclusive();
    let t0 = Instant::now();
    let ds = gen_gaussian(10, 2000, &SPECTRUM, 11).unwrap();
    let data = ds.matrix();
    let k = 5;
    let p = pca(data, k).unwrap();
    let nested = linear_run(data, k, TruncationDistribution::geometric(0.9, k).unwrap(), 6000, 1);
    let plain = linear_run(data, k, TruncationDistribution::point_mass(k, k).unwrap(), 6000, 1);
    let tn = extract_t(&nested, &p, data).unwrap();
    let tp = extract_t(&plain, &p, data).unwrap();
    let rn = check_commutativity(&tn.t, 1e-3).unwrap();
    let rp = check_commutativity(&tp.t, 1e-3).unwrap();
    let lemma = lemma1_structure_check(&tn.t, 1e-3).unwrap();
    let ratio = rp.max_defect() / rn.max_defect();
    let secs = t0.elapsed().as_secs_f64();
    let ok = rn.passed && lemma.passed && ratio >= 10.0 && secs < 120.0;
    verdict(
        2,
        "identifiability gap",
        ok,
        &format!(
            "nested defect {:.2e} (commutes: {}, structure: {}), plain defect {:.2e}, ratio {ratio:.1}, {secs:.1}s",
            rn.max_defect(),
            rn.passed,
            lemma.passed,
            rp.max_defect()
        ),
    );
}

// ---- 3 -------------------------------------------------------------------

#[test]
fn c03_geometric_facts() {
    let _g = exclusive();
    let rho = 0.9;
    let beyond_50 = geometric_tail_unnormalized(rho, 50);
    // probability that unit 100 is kept, P[B >= 100]
    let reach_100 = geometric_tail_unnormalized(rho, 99);
    let pmf_100 = geometric_pmf_unnormalized(rho, 100);
    let mut ok = (beyond_50 - 0.00515).abs() <= 1e-4 && (reach_100 - 2.95e-5).abs() <= 1e-6;
    // independent closed forms
    ok &= (beyond_50 - 0.9f64.powf(50.0)).abs() < 1e-15 && (pmf_100 - 0.1 * 0.9f64.powf(99.0)).abs() < 1e-18;
    let mut worst = 0.0f64;
    for k in [10, 50, 100, 250] {
        let d = TruncationDistribution::geometric(rho, k).unwrap();
        let z = 1.0 - rho.powi(k as i32);
        for b in 1..=k {
            let closed = rho.powi(b as i32 - 1) * (1.0 - rho);
            worst = worst.max((d.pmf(b).unwrap() * z - closed).abs() / closed);
        }
        ok &= (d.pmf_table().iter().sum::<f64>() - 1.0).abs() < 1e-12;
    }
    ok &= worst < 1e-12;
    verdict(
        3,
        "geometric distribution facts",
        ok,
        &format!(
            "P[b>50] = {beyond_50:.6}, P[B>=100] = {reach_100:.4e} (pmf(100) = {pmf_100:.4e}), \
             renormalized table max rel err {worst:.1e}"
        ),
    );
}

// ---- 4 -------------------------------------------------------------------

#[test]
fn c04_telescoping_identity() {
    let _g = exclusive();
    let mut rng = seeded_rng(4);
    let mut worst = 0.0f64;
    for trial in 0..1000 {
        let k = rng.random_range(1..=64);
        let dist = if trial % 2 == 0 {
            TruncationDistribution::geometric(rng.random_range(0.05..0.99), k).unwrap()
        } else {
            let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            TruncationDistribution::explicit(&raw.iter().map(|v| v / s).collect::<Vec<_>>()).unwrap()
        };
        let costs: Vec<f64> = (0..k).map(|_| rng.random::<f64>() * 10.0).collect();
        let direct: f64 = (1..=k).map(|b| dist.pmf(b).unwrap() * costs[b - 1]).sum();
        worst = worst.max((telescoped_cost(&dist, &costs).unwrap() - direct).abs());
    }
    verdict(4, "telescoping identity", worst < 1e-10, &format!("1000 trials, max |diff| {worst:.2e}"));
}

// ---- 5 -------------------------------------------------------------------

fn act(a: Activation, z: f64) -> f64 {
    match a {
        Activation::Linear => z,
        Activation::Relu => z.max(0.0),
        Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
    }
}

/// A dense layer as plain nested vectors: (weights[row][col], bias, activation).
type PlainLayer = (Vec<Vec<f64>>, Vec<f64>, Activation);
type Plain = Vec<PlainLayer>;

fn to_plain(net: &Network) -> (Plain, Plain) {
    let conv = |l: &ordrep_core::numerics::Layer| {
        let w = l.weights();
        (
            (0..w.nrows()).map(|r| (0..w.ncols()).map(|c| w[(r, c)]).collect()).collect(),
            l.bias().iter().copied().collect(),
            l.spec().activation,
        )
    };
    (net.encoder().iter().map(conv).collect(), net.decoder().iter().map(conv).collect())
}

/// Summed squared error with code units `b..` zeroed, evaluated by scalar
/// loops. For tied networks, decoder weights are read from the encoder.
fn plain_loss(enc: &Plain, dec: &Plain, tied: bool, x: &Matrix, b: usize) -> (f64, f64) {
    let mut total = 0.0;
    let mut margin = f64::INFINITY;
    for n in 0..x.ncols() {
        let mut a: Vec<f64> = x.column(n).iter().copied().collect();
        let mut run = |layers: &[PlainLayer], a: &mut Vec<f64>, decoder: bool| {
            for (li, (w, bias, f)) in layers.iter().enumerate() {
                let rows = bias.len();
                let z: Vec<f64> = (0..rows)
                    .map(|r| {
                        let dot: f64 = (0..a.len())
                            .map(|c| {
                                let wrc = if decoder && tied { enc[enc.len() - 1 - li].0[c][r] } else { w[r][c] };
                                wrc * a[c]
                            })
                            .sum();
                        dot + bias[r]
                    })
                    .collect();
                if *f == Activation::Relu {
                    margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
                }
                *a = z.into_iter().map(|v| act(*f, v)).collect();
            }
        };
        run(enc, &mut a, false);
        for v in a.iter_mut().skip(b) {
            *v = 0.0;
        }
        run(dec, &mut a, true);
        total += (0..x.nrows()).map(|r| (x[(r, n)] - a[r]).powi(2)).sum::<f64>();
    }
    (total, margin)
}

#[derive(Clone, Copy)]
enum Slot {
    W(bool, usize, usize, usize),
    B(bool, usize, usize),
}

fn slot_mut(p: &mut (Plain, Plain), s: Slot) -> &mut f64 {
    match s {
        Slot::W(d, l, r, c) => &mut (if d { &mut p.1 } else { &mut p.0 })[l].0[r][c],
        Slot::B(d, l, r) => &mut (if d { &mut p.1 } else { &mut p.0 })[l].1[r],
    }
}

fn slot_grad(g: &Gradients, s: Slot) -> f64 {
    match s {
        Slot::W(false, l, r, c) => g.encoder[l].weights[(r, c)],
        Slot::W(true, l, r, c) => g.decoder[l].weights[(r, c)],
        Slot::B(false, l, r) => g.encoder[l].bias[r],
        Slot::B(true, l, r) => g.decoder[l].bias[r],
    }
}

#[test]
fn c05_gradient_correctness() {
    let _g = exclusive();
    let k = 6;
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut cases = 0;
    for a in [Activation::Linear, Activation::Relu, Activation::Sigmoid] {
        for tied in [false, true] {
            for b in [1, k / 2, k] {
                let mut rng = seeded_rng(50);
                let x = Matrix::from_fn(5, 4, |_, _| rng.random::<f64>() * 2.0 - 1.0);
                // first seed whose ReLU pre-activations stay clear of the kink
                let (net, base) = (0..100)
                    .map(|seed| Network::autoencoder(&[5, 7, k], a, a, tied, seed).unwrap())
                    .map(|net| {
                        let p = to_plain(&net);
                        (net, p)
                    })
                    .find(|(_, p)| plain_loss(&p.0, &p.1, tied, &x, b).1 > 1e-3)
                    .expect("kink-free seed");
                let cache = net.forward_batch(&x, &[b], &mut ForwardOptions::default()).unwrap();
                let mut g = net.backward(&cache, &x).unwrap();
                if tied {
                    g.tie();
                }
                let mut slots = Vec::new();
                for (d, layers) in [(false, &base.0), (true, &base.1)] {
                    for (l, (w, bias, _)) in layers.iter().enumerate() {
                        if !(d && tied) {
                            for r in 0..w.len() {
                                for c in 0..w[r].len() {
                                    slots.push(Slot::W(d, l, r, c));
                                }
                            }
                        }
                        for r in 0..bias.len() {
                            slots.push(Slot::B(d, l, r));
                        }
                    }
                }
                for s in slots {
                    let eval = |delta: f64| {
                        let mut p = base.clone();
                        *slot_mut(&mut p, s) += delta;
                        plain_loss(&p.0, &p.1, tied, &x, b).0
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let an = slot_grad(&g, s);
                    worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-3));
                }
                cases += 1;
            }
        }
    }
    verdict(
        5,
        "gradient correctness",
        worst < 1e-5,
        &format!("{cases} activation/tying/mask cases, max rel err {worst:.2e}"),
    );
}

// ---- 6 -------------------------------------------------------------------

fn random_codes(n: usize, k: usize, beta: f64, rng: &mut impl Rng) -> Vec<BitCode> {
    (0..n)
        .map(|_| BitCode::from_bits(&(0..k).map(|_| rng.random::<f64>() < beta).collect::<Vec<_>>()))
        .collect()
}

#[test]
fn c06_retrieval_oracle() {
    let _g = exclusive();
    let mut rng = seeded_rng(6);
    let (n, k) = (10_000, 64);
    let codes = random_codes(n, k, 0.5, &mut rng);
    let index = PrefixTrieIndex::build(&codes).unwrap();
    let audit = index.audit().is_ok();
    let bools: Vec<Vec<bool>> = codes.iter().map(|c| c.to_bits()).collect();
    let mut queries = random_codes(50, k, 0.5, &mut rng);
    queries.extend((0..50).map(|i| codes[i * 199].clone()));
    let mut mismatches = 0;
    let mut nesting_ok = true;
    for q in &queries {
        let qb = q.to_bits();
        for r in [2, 32, 512] {
            let got = index.query(q, r).unwrap();
            // truncated Hamming neighborhoods, widened one bit at a time
            let mut prev: Vec<u32> = (0..n as u32).collect();
            let mut depth = 0;
            for bit in 0..k {
                let next: Vec<u32> = prev.iter().copied().filter(|&i| bools[i as usize][bit] == qb[bit]).collect();
                nesting_ok &= next.iter().all(|i| prev.binary_search(i).is_ok());
                nesting_ok &= index.prefix_count(&qb[..=bit]) == next.len();
                if next.len() < r {
                    break;
                }
                prev = next;
                depth = bit + 1;
            }
            if got.neighbor_ids != prev || got.terminal_depth != depth {
                mismatches += 1;
            }
            nesting_ok &= got.visited_counts.windows(2).all(|w| w[0] >= w[1]);
        }
    }
    verdict(
        6,
        "retrieval oracle equivalence",
        mismatches == 0 && nesting_ok && audit,
        &format!("{} queries x 3 R, {mismatches} mismatches, nesting {nesting_ok}, count audit {audit}", queries.len()),
    );
}

// ---- 7 -------------------------------------------------------------------

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn time_queries(index: &PrefixTrieIndex, queries: &[BitCode], r: usize) -> f64 {
    let t0 = Instant::now();
    for q in queries {
        std::hint::black_box(index.query(q, r).unwrap());
    }
    t0.elapsed().as_secs_f64() / queries.len() as f64
}

/// Append 1792 random bits to a 256-bit prefix.
fn extend(bits: &[bool], rng: &mut impl Rng) -> BitCode {
    let mut v = bits.to_vec();
    v.extend((0..2048 - 256).map(|_| rng.random::<bool>()));
    BitCode::from_bits(&v)
}

#[test]
fn c07_retrieval_scaling() {
    let _g = exclusive();
    let mut rng = seeded_rng(7);
    let r = 16;
    let mut ok = true;
    let mut detail = String::from("depth/estimate:");
    for beta in [0.5, 0.2] {
        let mut index = PrefixTrieIndex::new(64).unwrap();
        let queries = random_codes(200, 64, beta, &mut rng);
        let mut inserted = 0usize;
        for log_n in 12..=18 {
            let target = 1usize << log_n;
            for c in random_codes(target - inserted, 64, beta, &mut rng) {
                index.insert(&c).unwrap();
            }
            inserted = target;
            let mean = queries.iter().map(|q| index.query(q, r).unwrap().terminal_depth as f64).sum::<f64>()
                / queries.len() as f64;
            let est = expected_depth_estimate(target, r, beta);
            let rel = mean / est;
            ok &= (rel - 1.0).abs() <= 0.2;
            detail += &format!(" b{beta}/2^{log_n} {rel:.3}");
        }
    }

    // long codes whose first 256 bits equal the short ones: same walk, wider rows
    let n = 1 << 16;
    let short_bits: Vec<Vec<bool>> = (0..n).map(|_| (0..256).map(|_| rng.random::<bool>()).collect()).collect();
    let mut tail_rng = seeded_rng(70);
    let short = PrefixTrieIndex::build(&short_bits.iter().map(|b| BitCode::from_bits(b)).collect::<Vec<_>>()).unwrap();
    let long =
        PrefixTrieIndex::build(&short_bits.iter().map(|b| extend(b, &mut tail_rng)).collect::<Vec<_>>()).unwrap();
    let q_bits: Vec<Vec<bool>> = (0..500).map(|_| (0..256).map(|_| rng.random::<bool>()).collect()).collect();
    let q_short: Vec<BitCode> = q_bits.iter().map(|b| BitCode::from_bits(b)).collect();
    let q_long: Vec<BitCode> = q_bits.iter().map(|b| extend(b, &mut tail_rng)).collect();
    let (mut ts, mut tl) = (Vec::new(), Vec::new());
    for round in 0..31 {
        if round % 2 == 0 {
            ts.push(time_queries(&short, &q_short, 32));
            tl.push(time_queries(&long, &q_long, 32));
        } else {
            tl.push(time_queries(&long, &q_long, 32));
            ts.push(time_queries(&short, &q_short, 32));
        }
    }
    let latency_ratio = median(tl) / median(ts);
    ok &= (0.8..=1.25).contains(&latency_ratio);
    drop((short, long));

    let n = 1 << 18;
    let codes = random_codes(n, 512, 0.5, &mut rng);
    let index = PrefixTrieIndex::build(&codes).unwrap();
    drop(codes);
    let queries = random_codes(200, 512, 0.5, &mut rng);
    let trie = median((0..5).map(|_| time_queries(&index, &queries, 32)).collect());
    let t0 = Instant::now();
    for q in &queries[..10] {
        std::hint::black_box(hamming_scan(&index, q));
    }
    let scan = t0.elapsed().as_secs_f64() / 10.0;
    let speedup = scan / trie;
    ok &= speedup >= 100.0;
    detail += &format!(
        "; K=2048/K=256 latency ratio {latency_ratio:.3}; at N=2^18 K=512 trie {:.2}us vs scan {:.0}us ({speedup:.0}x)",
        trie * 1e6,
        scan * 1e6
    );
    verdict(7, "retrieval scaling", ok, &detail);
}

// ---- 8 -------------------------------------------------------------------

fn trained_sigmoid(dist: TruncationDistribution, seed: u64) -> (Network, Matrix) {
    let spectrum: Vec<f64> = (0..16).map(|i| 4.0 * 0.75f64.powi(i)).collect();
    let data = gen_gaussian(16, 2000, &spectrum, 40 + seed).unwrap().into_matrix();
    let net = Network::autoencoder(&[16, 16], Activation::Sigmoid, Activation::Sigmoid, false, seed).unwrap();
    let mut cfg = TrainConfig::new(dist);
    cfg.learning_rate = 0.01;
    cfg.lr_decay = 0.985;
    cfg.minibatch_size = 100;
    cfg.epochs = 300;
    cfg.rng_seed = seed;
    let mut t = Trainer::new(net, cfg).unwrap();
    t.fit(&data, 0).unwrap();
    (t.into_net(), data)
}

#[test]
fn c08_compression_curves() {
    let _g = exclusive();
    // linear optimum: the planted PCA network
    let data = gen_gaussian(12, 800, &[9.0, 7.0, 5.0, 4.0, 3.0, 2.0, 1.5, 1.0, 0.5, 0.25, 0.1, 0.05], 8)
        .unwrap()
        .into_matrix();
    let p = pca(&data, 8).unwrap();
    let curve = rd_curve(&p.planted_network(0).unwrap(), &data, &(1..=8).collect::<Vec<_>>(), Ordering::Plain).unwrap();
    let linear_err = (1..8)
        .map(|b| {
            let drop = curve.loss_at(b).unwrap() - curve.loss_at(b + 1).unwrap();
            let expect = p.eigenvalues[b] / data.ncols() as f64;
            (drop - expect).abs() / expect
        })
        .fold(0.0, f64::max);
    let mut ok = linear_err <= 1e-6;

    let k = 16;
    let bs: Vec<usize> = (1..=k).collect();
    let mut detail = format!("linear drop max rel err {linear_err:.1e}");
    for seed in 1..=3 {
        let (nested, data) = trained_sigmoid(TruncationDistribution::geometric(0.9, k).unwrap(), seed);
        let (plain, _) = trained_sigmoid(TruncationDistribution::point_mass(k, k).unwrap(), seed);
        let cn = rd_curve(&nested, &data, &bs, Ordering::NestedDropout).unwrap();
        let cp = rd_curve(&plain, &data, &bs, Ordering::Plain).unwrap();
        let violations = cn.points.windows(2).filter(|w| w[1].mean_l2 > w[0].mean_l2 + 1e-9).count();
        let frac = violations as f64 / (k - 1) as f64;
        let dominated = [1, k / 8, k / 4].iter().all(|&b| cn.loss_at(b).unwrap() <= cp.loss_at(b).unwrap());
        ok &= frac <= 0.01 && dominated;
        detail += &format!("; seed {seed}: {violations} violations, nested <= plain at b=1,2,4: {dominated}");
    }
    verdict(8, "compression curves", ok, &detail);
}

// ---- 9 -------------------------------------------------------------------

/// Fraction of code units whose incident parameters moved by more than
/// 1e-3 (L2) over a fixed number of minibatch steps.
fn moved_fraction(sweep: bool, seed: u64) -> (f64, usize) {
    let k = 100;
    let spectrum: Vec<f64> = (0..16).map(|i| 4.0 * 0.8f64.powi(i)).collect();
    let data = gen_gaussian(16, 2000, &spectrum, seed).unwrap().into_matrix();
    let net = Network::autoencoder(&[16, k], Activation::Sigmoid, Activation::Linear, false, seed).unwrap();
    let before: Vec<Vec<f64>> = (0..k).map(|u| unit_params(&net, u)).collect();
    let mut cfg = TrainConfig::new(TruncationDistribution::geometric(0.9, k).unwrap());
    cfg.learning_rate = 3e-4;
    cfg.minibatch_size = 100;
    cfg.rng_seed = seed;
    cfg.sweep = SweepConfig {
        enabled: sweep,
        convergence_window: 3,
        convergence_tol: 1e-2,
    };
    let mut t = Trainer::new(net, cfg).unwrap();
    for step in 0..200 {
        let start = (step * 100) % data.ncols();
        t.train_step(&data.columns(start, 100).into_owned()).unwrap();
    }
    let moved = (0..k)
        .filter(|&u| {
            let after = unit_params(t.net(), u);
            after.iter().zip(&before[u]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() > 1e-3
        })
        .count();
    (moved as f64 / k as f64, t.sweep_state().frozen_prefix())
}

#[test]
fn c09_unit_sweeping() {
    let _g = exclusive();
    let mut ok = true;
    let mut detail = String::from("moved fraction without/with sweeping:");
    for seed in 0..3 {
        let (plain, _) = moved_fraction(false, seed);
        let (swept, frozen) = moved_fraction(true, seed);
        ok &= swept - plain >= 0.2;
        detail += &format!(" seed {seed} {plain:.2}/{swept:.2} ({frozen} frozen)");
    }
    verdict(9, "unit sweeping effect", ok, &detail);
}

// ---- 10 ------------------------------------------------------------------

#[test]
fn c10_binarization_calibration() {
    let _g = exclusive();
    let p = PinwheelParams {
        points_per_arm: 2000,
        ..PinwheelParams::default()
    };
    let mut ds = gen_pinwheel(&p, 10).unwrap();
    ds.normalize().unwrap();
    let (train, holdout) = split_dataset(&ds, 0.5, 10);
    let net = Network::autoencoder(&[2, 16, 32], Activation::Relu, Activation::Sigmoid, false, 10).unwrap();
    let mut cfg = TrainConfig::new(TruncationDistribution::geometric(0.9, 32).unwrap());
    cfg.epochs = 5;
    cfg.learning_rate = 0.005;
    let mut t = Trainer::new(net, cfg).unwrap();
    t.fit(&train, 0).unwrap();
    let model = BinarizerModel::fit(&t.net().encode_batch(&train).unwrap(), 0.2).unwrap();
    let rates = model.positive_rates(&t.net().encode_batch(&holdout).unwrap()).unwrap();
    let worst = rates.iter().map(|r| (r - 0.2).abs()).fold(0.0, f64::max);
    let degenerate = model.degenerate.iter().filter(|d| **d).count();
    verdict(
        10,
        "binarization calibration",
        holdout.ncols() == 5000 && worst <= 0.05,
        &format!("N_holdout {}, {} units, max |rate - 0.2| {worst:.4}, {degenerate} degenerate", holdout.ncols(), rates.len()),
    );
}

// ---- 11 ------------------------------------------------------------------

/// Files whose bytes depend only on config and seed (the latency table,
/// per-step wall times and the reports embedding them are excluded).
const DETERMINISTIC: [&str; 8] = [
    "config.toml",
    "dataset.bin",
    "model.json",
    "plain_model.json",
    "binarizer.json",
    "codes.bin",
    "index.bin",
    "curve.csv",
];

fn run_once(config: &Path, out: &Path) -> (bool, Duration, String) {
    let t0 = Instant::now();
    let o = std::process::Command::new(env!("CARGO_BIN_EXE_ordrep"))
        .args(["run", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .env_remove("ORDREP_SEED")
        .output()
        .expect("spawn ordrep");
    (o.status.success(), t0.elapsed(), String::from_utf8_lossy(&o.stderr).into_owned())
}

#[test]
fn c11_end_to_end_smoke() {
    let _g = exclusive();
    let config: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "configs", "pinwheel.toml"].iter().collect();
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let (ok_a, time_a, err_a) = run_once(&config, &a);
    let (ok_b, time_b, err_b) = run_once(&config, &b);
    let mut ok = ok_a && ok_b && time_a.as_secs_f64() < 30.0 && time_b.as_secs_f64() < 30.0;
    let mut differing = Vec::new();
    if ok {
        for name in DETERMINISTIC {
            if std::fs::read(a.join(name)).ok() != std::fs::read(b.join(name)).ok() {
                differing.push(name);
            }
        }
        ok &= differing.is_empty() && a.join("model.json").exists();
    }
    verdict(
        11,
        "end-to-end smoke",
        ok,
        &format!(
            "runs took {:.2}s and {:.2}s, {} artifacts compared, differing: {differing:?}{}{}",
            time_a.as_secs_f64(),
            time_b.as_secs_f64(),
            DETERMINISTIC.len(),
            err_a.trim(),
            err_b.trim()
        ),
    );
}
