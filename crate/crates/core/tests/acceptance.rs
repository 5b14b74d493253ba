//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion does.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use tcgpn::augment::{augment, AugmentConfig, SpanMode};
use tcgpn::backtest::{compute_metrics, ic_series, IcKind, PnlSeries, Predictions, Returns};
use tcgpn::config::RunConfig;
use tcgpn::data::{business_days, gen_synthetic, split_by_ratio, window_samples, Standardizer, SyntheticSpec, TimePanel, WindowSample};
use tcgpn::graphs::{CorrelationGraph, MaskMode};
use tcgpn::losses::{loss_graph_var, loss_temporal_var};
use tcgpn::model::{adjacency_decoder, encoder_forward, finetune_head, init_params, pretrain_forward, temporal_decoder, EncoderInput, ModelConfig};
use tcgpn::tensorcore::{memory, Graph, Real, Tensor};
use tcgpn::train::{self, mean_ic, model_gradcheck, persistence_predictions, tiny_gradcheck_model, TrainConfig};

struct Verdict {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn verdict(id: usize, name: &'static str, passed: bool, detail: String) -> Verdict {
    Verdict { id, name, passed, detail }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

fn random_graph(n: usize, density: f64, rng: &mut ChaCha8Rng) -> CorrelationGraph {
    let ids: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j && rng.random_bool(density) {
                w[i * n + j] = rng.random_range(0.1..2.0);
            }
        }
    }
    w[1] = 1.0;
    CorrelationGraph::new(ids, w, true).unwrap()
}

fn random_window(n: usize, t: usize, f: usize, rng: &mut ChaCha8Rng) -> WindowSample {
    let d = business_days(2);
    WindowSample {
        node_ids: (0..n).map(|i| format!("n{i}")).collect(),
        t,
        f,
        values: (0..n * t * f).map(|_| rng.sample(StandardNormal)).collect(),
        target: (0..n).map(|_| rng.sample(StandardNormal)).collect(),
        end_date: d[0],
        target_date: d[1],
        end_index: t - 1,
    }
}

fn small_model(t: usize, use_gat: bool) -> ModelConfig {
    ModelConfig {
        f: 3,
        t,
        d_model: 8,
        gat_heads: 2,
        gat_dim: 4,
        tgm_blocks: 2,
        tgm_heads: 2,
        ffn_dim: 16,
        sigma_h: t as f64 / 4.0,
        d_a: 4,
        head_hidden: 8,
        use_gat,
        ..Default::default()
    }
}

// ---- 1. gradient fidelity ---------------------------------------------------

fn gradient_fidelity() -> Verdict {
    let start = Instant::now();
    let model = tiny_gradcheck_model();
    let r = model_gradcheck(&model, 4, 0, 1e-5, 1e-4).unwrap();
    let elapsed = start.elapsed();
    let covered: BTreeSet<&str> = r.pretrain.paths.iter().chain(&r.finetune.paths).map(|p| p.path.as_str()).collect();
    let all: BTreeSet<String> = model.param_shapes().into_iter().map(|(p, _)| p).collect();
    let missing: Vec<&String> = all.iter().filter(|p| !covered.contains(p.as_str())).collect();
    let worst = r.pretrain.max_rel_err().max(r.finetune.max_rel_err());
    let passed = r.passed() && missing.is_empty() && elapsed < Duration::from_secs(60);
    verdict(
        1,
        "gradient fidelity",
        passed,
        format!(
            "{} paths checked, {} uncovered, max rel err {worst:.2e} (< 1e-4), {:.1}s (< 60s)",
            covered.len(),
            missing.len(),
            elapsed.as_secs_f64()
        ),
    )
}

// ---- 2. causality -------------------------------------------------------------

fn encoder_and_decoder(params: &tcgpn::tensorcore::ParamStore<f64>, input: &EncoderInput<f64>, model: &ModelConfig) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::with_params(params);
    let o = encoder_forward(&mut g, input, model).unwrap();
    let r = temporal_decoder(&mut g, o, model).unwrap();
    (g.value(o).to_f64_vec(), g.value(r).to_f64_vec())
}

fn causality() -> Verdict {
    let (n, t, f) = (5, 12, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut violations = 0usize;
    let mut later_changed = 0usize;
    let trials = 200;
    let mut params = None;
    let mut model = small_model(t, true);
    for trial in 0..trials {
        if trial % 20 == 0 {
            model = small_model(t, trial % 40 == 0);
            model.sigma_h = rng.random_range(0.5..10.0);
            params = Some(init_params::<f64>(&model, trial as u64).unwrap());
        }
        let params = params.as_ref().unwrap();
        let values: Vec<f64> = (0..n * t * f).map(|_| rng.sample(StandardNormal)).collect();
        let conn: Vec<bool> = (0..n * n).map(|k| k / n == k % n || rng.random_bool(0.5)).collect();
        let cut = rng.random_range(0..t - 1);
        let scale = 10f64.powf(rng.random_range(-2.0..3.0));
        let mut perturbed = values.clone();
        for i in 0..n {
            if rng.random_bool(0.7) || i == 0 {
                for s in cut + 1..t {
                    for c in 0..f {
                        perturbed[(i * t + s) * f + c] += scale * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
        }
        let a = EncoderInput::<f64>::new(1, n, t, f, &values, &conn).unwrap();
        let b = EncoderInput::<f64>::new(1, n, t, f, &perturbed, &conn).unwrap();
        let (oa, ra) = encoder_and_decoder(params, &a, &model);
        let (ob, rb) = encoder_and_decoder(params, &b, &model);
        let d = model.d_model;
        let mut changed = false;
        for i in 0..n {
            for s in 0..t {
                let enc_same = (0..d).all(|c| oa[(i * t + s) * d + c].to_bits() == ob[(i * t + s) * d + c].to_bits());
                let dec_same = (0..f).all(|c| ra[(i * t + s) * f + c].to_bits() == rb[(i * t + s) * f + c].to_bits());
                if s <= cut && !(enc_same && dec_same) {
                    violations += 1;
                }
                if s > cut && !enc_same {
                    changed = true;
                }
            }
        }
        later_changed += changed as usize;
    }
    verdict(
        2,
        "causality",
        violations == 0 && later_changed == trials,
        format!("{trials} trials, {violations} earlier (node, step) outputs changed, later outputs moved in {later_changed} trials"),
    )
}

// ---- 3. node-order invariance ---------------------------------------------------

struct Outputs {
    encoded: Vec<f64>,
    adjacency: Vec<f64>,
    scores: Vec<f64>,
}

fn full_outputs<T: Real>(params: &tcgpn::tensorcore::ParamStore<T>, input: &EncoderInput<T>, model: &ModelConfig) -> Outputs {
    let mut g = Graph::with_params(params);
    let o = encoder_forward(&mut g, input, model).unwrap();
    let a = adjacency_decoder(&mut g, o, model).unwrap();
    let y = finetune_head(&mut g, o, model).unwrap();
    Outputs {
        encoded: g.value(o).to_f64_vec(),
        adjacency: g.value(a).to_f64_vec(),
        scores: g.value(y).to_f64_vec(),
    }
}

fn node_order_invariance() -> Verdict {
    let (n, t, f) = (7, 8, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = small_model(t, true);
    let params = init_params::<f32>(&model, 3).unwrap();
    let d = model.d_model;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let values: Vec<f64> = (0..n * t * f).map(|_| rng.sample(StandardNormal)).collect();
        let conn: Vec<bool> = (0..n * n).map(|k| k / n == k % n || rng.random_bool(0.4)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut pv = Vec::with_capacity(values.len());
        for &p in &perm {
            pv.extend_from_slice(&values[p * t * f..(p + 1) * t * f]);
        }
        let pc: Vec<bool> = (0..n * n).map(|k| conn[perm[k / n] * n + perm[k % n]]).collect();
        let base = full_outputs(&params, &EncoderInput::new(1, n, t, f, &values, &conn).unwrap(), &model);
        let moved = full_outputs(&params, &EncoderInput::new(1, n, t, f, &pv, &pc).unwrap(), &model);
        let mut enc = Vec::new();
        for &p in &perm {
            enc.extend_from_slice(&base.encoded[p * t * d..(p + 1) * t * d]);
        }
        let adj: Vec<f64> = (0..n * n).map(|k| base.adjacency[perm[k / n] * n + perm[k % n]]).collect();
        let scores: Vec<f64> = perm.iter().map(|&p| base.scores[p]).collect();
        worst = worst
            .max(rel_err(&moved.encoded, &enc))
            .max(rel_err(&moved.adjacency, &adj))
            .max(rel_err(&moved.scores, &scores));
    }
    verdict(
        3,
        "node-order invariance",
        worst < 1e-5,
        format!("100 permutations, encoder/adjacency/head max rel err {worst:.2e} (< 1e-5, f32)"),
    )
}

// ---- 4. mask locality -------------------------------------------------------------

fn mask_locality() -> Verdict {
    let (n, t, f) = (6, 10, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = small_model(t, true);
    let params = init_params::<f64>(&model, 4).unwrap();
    let acfg = AugmentConfig {
        n_sub: 0,
        r_t: 0.3,
        r_g: 0.3,
        span_mode: SpanMode::PerNode,
        mask_mode: MaskMode::Edge,
    };
    let (mut leaks, mut silent) = (0usize, 0usize);
    for trial in 0..50 {
        let window = random_window(n, t, f, &mut rng);
        let graph = random_graph(n, 0.5, &mut rng);
        let s = augment(&window, &graph, &acfg, trial).unwrap();
        let input = EncoderInput::<f64>::from_samples(&[&s]).unwrap();
        let mut g = Graph::with_params(&params);
        let out = pretrain_forward(&mut g, &input, &model).unwrap();
        let recon = g.value(out.reconstruction).clone();
        let a_hat = g.value(out.adjacency).clone();

        let mut g = Graph::<f64>::new();
        let xr = g.input(recon.with_requires_grad(true));
        let x = Tensor::from_f64(&[1, n, t, f], &s.original).unwrap();
        let lt = loss_temporal_var(&mut g, &x, xr, &s.panel.mask_positions).unwrap();
        let gx = g.backward(lt).unwrap().get(xr).unwrap().to_f64_vec();
        for (k, &m) in s.panel.mask_positions.iter().enumerate() {
            let cell = &gx[k * f..(k + 1) * f];
            if !m && cell.iter().any(|&v| v != 0.0) {
                leaks += 1;
            }
            if m && cell.iter().all(|&v| v == 0.0) {
                silent += 1;
            }
        }

        let mut g = Graph::<f64>::new();
        let ah = g.input(a_hat.with_requires_grad(true));
        let a = Tensor::from_f64(&[1, n, n], &s.graph.base.weights).unwrap();
        let lg = loss_graph_var(&mut g, &a, ah, &s.graph.mask_kept).unwrap();
        let ga = g.backward(lg).unwrap().get(ah).unwrap().to_f64_vec();
        for (k, &kept) in s.graph.mask_kept.iter().enumerate() {
            if !kept && ga[k] != 0.0 {
                leaks += 1;
            }
            if kept && ga[k] == 0.0 {
                silent += 1;
            }
        }
    }
    verdict(
        4,
        "mask locality",
        leaks == 0 && silent == 0,
        format!("50 masked samples: {leaks} nonzero gradients outside the supervised set, {silent} zero gradients inside it"),
    )
}

// ---- 5. metrics oracle -------------------------------------------------------------

struct OracleMetrics {
    pnl: f64,
    ar: f64,
    vol: f64,
    sharpe: Option<f64>,
    mdd: f64,
    calmar: Option<f64>,
    winr: f64,
    pl_ratio: Option<f64>,
}

fn oracle_metrics(d: &[f64]) -> OracleMetrics {
    let n = d.len() as f64;
    let mut curve = vec![0.0];
    for x in d {
        curve.push(curve.last().unwrap() + x);
    }
    let mean = d.iter().sum::<f64>() / n;
    // Pairwise form of the sample variance.
    let mut pair = 0.0;
    for i in 0..d.len() {
        for j in i + 1..d.len() {
            pair += (d[i] - d[j]) * (d[i] - d[j]);
        }
    }
    let var = pair / (n * (n - 1.0));
    let mut mdd: f64 = 0.0;
    for i in 0..curve.len() {
        for j in i + 1..curve.len() {
            mdd = mdd.max(curve[i] - curve[j]);
        }
    }
    let ar = 252.0 * mean;
    let vol = (252.0 * var).sqrt();
    let wins: Vec<f64> = d.iter().copied().filter(|&x| x > 0.0).collect();
    let losses: Vec<f64> = d.iter().copied().filter(|&x| x < 0.0).collect();
    OracleMetrics {
        pnl: *curve.last().unwrap(),
        ar,
        vol,
        sharpe: (vol > 0.0).then(|| ar / vol),
        mdd,
        calmar: (mdd > 0.0).then(|| ar / mdd),
        winr: wins.len() as f64 / n,
        pl_ratio: (!wins.is_empty() && !losses.is_empty())
            .then(|| (wins.iter().sum::<f64>() / wins.len() as f64) / (-losses.iter().sum::<f64>() / losses.len() as f64)),
    }
}

fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * b.abs().max(1.0)
}

fn close_opt(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => close(a, b),
        (None, None) => true,
        _ => false,
    }
}

fn metrics_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = Vec::new();
    for series in 0..100 {
        let len = rng.random_range(2..=200);
        let daily: Vec<f64> = (0..len)
            .map(|_| if rng.random_bool(0.1) { 0.0 } else { 0.02 * rng.sample::<f64, _>(StandardNormal) })
            .collect();
        let m = compute_metrics(&PnlSeries::from_daily(daily.clone()), 252.0).unwrap();
        let o = oracle_metrics(&daily);
        let checks = [
            ("pnl", close(m.pnl, o.pnl)),
            ("ar", close(m.ar, o.ar)),
            ("vol", close(m.vol, o.vol)),
            ("sharpe", close_opt(m.sharpe, o.sharpe)),
            ("mdd", close(m.mdd, o.mdd)),
            ("calmar", close_opt(m.calmar, o.calmar)),
            ("winr", close(m.winr, o.winr)),
            ("pl_ratio", close_opt(m.pl_ratio, o.pl_ratio)),
        ];
        for (name, ok) in checks {
            if !ok {
                mismatches.push(format!("{name}@{series}"));
            }
        }

        let dates = business_days(len);
        let width = rng.random_range(3..12);
        let mut preds = Predictions::default();
        let mut rets = Returns::default();
        let mut oracle_ics = Vec::new();
        for &day in &dates {
            let p: Vec<f64> = (0..width).map(|_| rng.sample(StandardNormal)).collect();
            let r: Vec<f64> = (0..width).map(|_| rng.sample(StandardNormal)).collect();
            for k in 0..width {
                preds.push(day, format!("s{k}"), p[k]);
                rets.values.insert((day, format!("s{k}")), r[k]);
            }
            oracle_ics.push(oracle_pearson(&p, &r));
        }
        let ic = ic_series(&preds, &rets, IcKind::Pearson).mean().unwrap();
        if !close(ic, oracle_ics.iter().sum::<f64>() / oracle_ics.len() as f64) {
            mismatches.push(format!("ic@{series}"));
        }
    }
    let hand = compute_metrics(&PnlSeries::from_daily(vec![1.0, -2.0, 1.0]), 252.0).unwrap();
    let hand_ok = hand.mdd == 2.0 && close(hand.winr, 2.0 / 3.0) && hand.pl_ratio == Some(0.5);
    verdict(
        5,
        "metrics oracle equivalence",
        mismatches.is_empty() && hand_ok,
        format!(
            "100 series x 9 metrics, {} mismatches beyond 1e-9{}; hand case MDD={} WinR={:.4} PL={:?}",
            mismatches.len(),
            if mismatches.is_empty() { String::new() } else { format!(" ({})", mismatches.join(" ")) },
            hand.mdd,
            hand.winr,
            hand.pl_ratio
        ),
    )
}

// ---- 6-8. synthetic benchmark -----------------------------------------------------

const SEEDS: [u64; 3] = [0, 1, 2];
const PRETRAIN_EPOCHS: usize = 3;
const FINETUNE_EPOCHS: usize = 10;

struct Bench {
    train: Vec<WindowSample>,
    val: Vec<WindowSample>,
    val_panel: TimePanel,
    graph: CorrelationGraph,
}

fn bench() -> Bench {
    let spec = SyntheticSpec {
        n_clusters: 4,
        nodes_per_cluster: 5,
        lag: 1,
        noise_std: 0.0,
        length: 600,
        ..Default::default()
    };
    let (panel, graph) = gen_synthetic(&spec).unwrap();
    let splits = split_by_ratio(&panel, 0.7, 0.15).unwrap();
    let st = Standardizer::fit(&splits.train);
    let train_panel = st.apply(&splits.train);
    let val_panel = st.apply(&splits.val);
    Bench {
        train: window_samples(&train_panel, 30, 1),
        val: window_samples(&val_panel, 30, 1),
        val_panel,
        graph,
    }
}

fn bench_model(use_gat: bool) -> ModelConfig {
    ModelConfig {
        f: 3,
        t: 30,
        d_model: 32,
        gat_heads: 4,
        gat_dim: 8,
        tgm_blocks: 2,
        tgm_heads: 4,
        ffn_dim: 64,
        sigma_h: 7.5,
        d_a: 8,
        head_hidden: 32,
        use_gat,
        ..Default::default()
    }
}

fn pretrain_cfg(seed: u64, beta: f64) -> TrainConfig {
    TrainConfig {
        epochs: PRETRAIN_EPOCHS,
        r_t: 0.3,
        r_g: 0.3,
        beta,
        seed,
        early_stop_patience: 0,
        ..Default::default()
    }
}

fn finetune_cfg(seed: u64, freeze: bool) -> TrainConfig {
    TrainConfig {
        epochs: FINETUNE_EPOCHS,
        seed,
        early_stop_patience: 0,
        freeze_encoder: freeze,
        ..Default::default()
    }
}

struct SeedRun {
    l_t: f64,
    baseline: f64,
    pretrain_time: Duration,
    full_ic: f64,
    scratch_ic: f64,
    random_frozen_ic: f64,
    persistence_ic: f64,
    no_gat_ic: f64,
    no_graph_loss_ic: f64,
}

fn pretrain_then_finetune(b: &Bench, model: &ModelConfig, seed: u64, beta: f64) -> (f64, f64, Duration, f64) {
    let start = Instant::now();
    let pre = train::pretrain::<f32>(&b.train, &b.val, &b.graph, &pretrain_cfg(seed, beta), model).unwrap();
    let elapsed = start.elapsed();
    let fine = train::finetune(&pre.params, &b.train, &b.val, &b.graph, &finetune_cfg(seed, true), model).unwrap();
    (pre.best_val.l_t, pre.val_baseline_l_t, elapsed, fine.best_val_ic)
}

fn run_seed(b: &Bench, seed: u64) -> SeedRun {
    let model = bench_model(true);
    let (l_t, baseline, pretrain_time, full_ic) = pretrain_then_finetune(b, &model, seed, 1.0);
    let fresh = init_params::<f32>(&model, seed).unwrap();
    let scratch_ic = train::finetune(&fresh, &b.train, &b.val, &b.graph, &finetune_cfg(seed, false), &model).unwrap().best_val_ic;
    let random_frozen_ic = train::finetune(&fresh, &b.train, &b.val, &b.graph, &finetune_cfg(seed, true), &model).unwrap().best_val_ic;
    let persistence = persistence_predictions(&b.val_panel, &b.val).unwrap();
    let persistence_ic = mean_ic(&persistence, &b.val).unwrap();
    let no_gat_ic = pretrain_then_finetune(b, &bench_model(false), seed, 1.0).3;
    let no_graph_loss_ic = pretrain_then_finetune(b, &model, seed, 0.0).3;
    let run = SeedRun {
        l_t,
        baseline,
        pretrain_time,
        full_ic,
        scratch_ic,
        random_frozen_ic,
        persistence_ic,
        no_gat_ic,
        no_graph_loss_ic,
    };
    println!(
        "  seed {seed}: l_t {:.4} / baseline {:.4}; IC full {:.4}, scratch {:.4}, random-frozen {:.4}, persistence {:.4}, no-GAT {:.4}, no-L_g {:.4}",
        run.l_t, run.baseline, run.full_ic, run.scratch_ic, run.random_frozen_ic, run.persistence_ic, run.no_gat_ic, run.no_graph_loss_ic
    );
    run
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn synthetic_benchmark() -> [Verdict; 3] {
    let b = bench();
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| run_seed(&b, s)).collect();

    let first = &runs[0];
    let ratio = first.l_t / first.baseline;
    let c6 = verdict(
        6,
        "synthetic pretraining efficacy",
        ratio < 0.5 && first.pretrain_time < Duration::from_secs(600),
        format!(
            "val masked MSE {:.4} vs mean imputation {:.4} (ratio {ratio:.3} < 0.5) after {PRETRAIN_EPOCHS} epochs, {:.0}s",
            first.l_t,
            first.baseline,
            first.pretrain_time.as_secs_f64()
        ),
    );

    let full = mean(runs.iter().map(|r| r.full_ic));
    let scratch = mean(runs.iter().map(|r| r.scratch_ic));
    let persistence = mean(runs.iter().map(|r| r.persistence_ic));
    let random_frozen = mean(runs.iter().map(|r| r.random_frozen_ic));
    let c7 = verdict(
        7,
        "synthetic fine-tuning efficacy",
        full - persistence >= 0.05 && full - scratch >= 0.05,
        format!(
            "mean IC pretrained+frozen {full:.4}; persistence {persistence:.4} (margin {:+.4}); scratch, jointly trained {scratch:.4} (margin {:+.4}); needs >= 0.05 on both [frozen random encoder {random_frozen:.4}]",
            full - persistence,
            full - scratch
        ),
    );

    let no_gat = mean(runs.iter().map(|r| r.no_gat_ic));
    let no_lg = mean(runs.iter().map(|r| r.no_graph_loss_ic));
    let c8 = verdict(
        8,
        "ablation direction",
        no_gat < full && no_lg < full,
        format!("mean IC full {full:.4}, without GAT {no_gat:.4}, without graph loss {no_lg:.4}"),
    );
    [c6, c7, c8]
}

// ---- 9. memory contract -------------------------------------------------------------

fn pretrain_peak(panel_windows: &[WindowSample], graph: &CorrelationGraph, n_sub: usize) -> usize {
    let model = small_model(8, true);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 1,
        n_sub,
        early_stop_patience: 0,
        ..Default::default()
    };
    memory::reset_peak();
    let base = memory::live_bytes();
    let out = train::pretrain::<f32>(panel_windows, &[], graph, &cfg, &model).unwrap();
    let peak = memory::peak_bytes() - base;
    drop(out);
    peak
}

fn memory_contract() -> Verdict {
    let spec = SyntheticSpec {
        n_clusters: 100,
        nodes_per_cluster: 5,
        length: 20,
        ..Default::default()
    };
    let (panel, graph) = gen_synthetic(&spec).unwrap();
    let windows: Vec<WindowSample> = window_samples(&panel, 8, 1).into_iter().take(1).collect();
    let sub = pretrain_peak(&windows, &graph, 50);
    let full = pretrain_peak(&windows, &graph, 500);
    let ratio = sub as f64 / full as f64;
    verdict(
        9,
        "memory contract",
        ratio < 0.05,
        format!(
            "N=500: peak live tensor bytes {} with n_sub=50 vs {} with n_sub=500 (ratio {:.4} < 0.05)",
            sub, full, ratio
        ),
    )
}

// ---- 10. default config -------------------------------------------------------------

fn default_config() -> Verdict {
    let cfg = RunConfig::default();
    let expected: [(&str, &str); 10] = [
        ("r_t", "0.3"),
        ("r_g", "0.3"),
        ("lambda_m", "0.3"),
        ("window", "30"),
        ("gat_heads", "4"),
        ("gat_dim", "32"),
        ("tgm_heads", "8"),
        ("d_model", "128"),
        ("tgm_blocks", "3"),
        ("decoder_blocks", "1"),
    ];
    let text = cfg.to_toml();
    let mut wrong = Vec::new();
    for (k, v) in expected {
        let line = format!("{k} = {v}");
        if !text.lines().any(|l| l.trim() == line) {
            wrong.push(k);
        }
    }
    let round_trip = RunConfig::from_toml(&text).map(|c| c == cfg).unwrap_or(false);
    let model = cfg.model_config(3);
    let shape_ok = (model.t, model.gat_heads, model.gat_dim, model.tgm_heads, model.d_model, model.tgm_blocks) == (30, 4, 32, 8, 128, 3);
    verdict(
        10,
        "default config snapshot",
        wrong.is_empty() && round_trip && shape_ok,
        format!("{} of {} default values differ, TOML round trip {}", wrong.len(), expected.len(), if round_trip { "exact" } else { "lossy" }),
    )
}

#[test]
fn acceptance() {
    let mut verdicts = vec![
        gradient_fidelity(),
        causality(),
        node_order_invariance(),
        mask_locality(),
        metrics_oracle(),
    ];
    verdicts.extend(synthetic_benchmark());
    verdicts.push(memory_contract());
    verdicts.push(default_config());
    verdicts.sort_by_key(|v| v.id);
    for v in &verdicts {
        println!(
            "[{}] criterion {:>2} {}: {}",
            if v.passed { "PASS" } else { "FAIL" },
            v.id,
            v.name,
            v.detail
        );
    }
    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.passed).map(|v| v.id).collect();
    assert!(failed.is_empty(), "acceptance criteria failed: {failed:?}");
}
