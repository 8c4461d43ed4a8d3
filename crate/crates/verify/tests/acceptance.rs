//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::time::{Duration, Instant};

use armo_core::debias::{calibrate, spearman, CalibrateConfig, Metric};
use armo_core::eval::{best_fixed_simplex, percent_1dp, weighted_score, CategoryResult};
use armo_core::feature_store::{FeatureStore, RatedRecord};
use armo_core::gating::{bt_loss, gate_forward, layer_dims, GatingNetwork, PreparedPair};
use armo_core::regression_head::{fit_head, predict_store, DEFAULT_RIDGE};
use armo_core::synthetic::{gen_synthetic, SyntheticSpec};
use armo_core::train::{batch_loss, batch_loss_grad, holdout_split, prepare_pairs, train_gate, TrainConfig};
use armo_core::{BundleMetadata, ModelBundle};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

// Overall, then Chat, Chat Hard, Safety, Reasoning (weight 1.0), Prior Sets (0.5).
const TABLE_ONE: [(&str, f64, [f64; 5]); 8] = [
    ("HelpSteer2 Nemotron-4 340B", 89.3, [95.8, 87.1, 91.5, 93.7, 67.4]),
    ("ArmoRM Llama-3 8B + MoE", 89.0, [96.9, 76.8, 92.2, 97.3, 74.3]),
    ("HelpSteer2 Llama-3 70B", 86.3, [91.3, 80.3, 92.8, 90.7, 66.5]),
    ("Preference Model Llama-3 8B", 85.7, [98.3, 65.8, 89.7, 94.7, 74.6]),
    ("GPT-4 Turbo", 84.2, [95.3, 74.3, 87.2, 86.9, 70.9]),
    ("GPT-4o", 83.3, [96.6, 70.4, 86.7, 84.9, 72.6]),
    ("Bradley-Terry Llama-3 8B", 83.6, [99.4, 65.1, 87.8, 86.4, 74.9]),
    ("Bradley-Terry Yi-34B", 81.4, [96.9, 57.2, 88.2, 88.5, 71.4]),
];

fn table_one() -> Outcome {
    const TOL: f64 = 0.05;
    let names = ["chat", "chat-hard", "safety", "reasoning", "prior-sets"];
    let mut worst = (0.0f64, "");
    let mut misses = Vec::new();
    for (row, published, cats) in TABLE_ONE {
        let cats: Vec<CategoryResult> = names
            .iter()
            .zip(cats)
            .enumerate()
            .map(|(i, (n, a))| CategoryResult {
                name: n.to_string(),
                accuracy: a / 100.0,
                weight: if i == 4 { 0.5 } else { 1.0 },
                n_pairs: None,
            })
            .collect();
        let score = 100.0 * weighted_score(&cats).unwrap();
        let diff = (score - published).abs();
        if diff > worst.0 {
            worst = (diff, row);
        }
        if diff > TOL {
            misses.push(format!(
                "{row}: {score:.4} (reported {}) vs {published}",
                percent_1dp(score / 100.0)
            ));
        }
    }
    let detail = if misses.is_empty() {
        format!("8/8 rows within {TOL}; worst {:.4} ({})", worst.0, worst.1)
    } else {
        format!("{}/8 rows within {TOL}; off: {}", 8 - misses.len(), misses.join("; "))
    };
    outcome(misses.is_empty(), detail)
}

/// Random rated store where every objective has at least `d` present rows.
fn random_masked_store(rng: &mut ChaCha8Rng) -> FeatureStore {
    let d = rng.random_range(1..=10);
    let k = rng.random_range(1..=5);
    let n = rng.random_range(d.max(2)..=50);
    let mut records: Vec<RatedRecord> = (0..n)
        .map(|_| RatedRecord {
            feature: normal(rng, d),
            rating: (0..k).map(|_| rng.random::<f64>()).collect(),
            mask: (0..k).map(|_| rng.random_bool(0.6)).collect(),
        })
        .collect();
    for j in 0..k {
        let mut present = records.iter().filter(|r| r.mask[j]).count();
        while present < d {
            let i = rng.random_range(0..n);
            if !records[i].mask[j] {
                records[i].mask[j] = true;
                present += 1;
            }
        }
    }
    FeatureStore::rated(d, (0..k).map(|j| format!("o{j}")).collect(), records)
}

fn nalgebra_fit(store: &FeatureStore, j: usize, ridge: f64) -> Vec<f64> {
    let d = store.d;
    let rows: Vec<&RatedRecord> = store.rated_records().unwrap().iter().filter(|r| r.mask[j]).collect();
    let f = DMatrix::from_fn(rows.len(), d, |i, p| rows[i].feature[p]);
    let y = DVector::from_fn(rows.len(), |i, _| rows[i].rating[j]);
    let a = f.transpose() * &f + DMatrix::identity(d, d) * ridge;
    let b = f.transpose() * y;
    a.lu().solve(&b).expect("oracle system is nonsingular").iter().copied().collect()
}

fn regression_oracle() -> Outcome {
    const TOL: f64 = 1e-8;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let store = random_masked_store(&mut rng);
        let head = fit_head(&store, DEFAULT_RIDGE).unwrap();
        for j in 0..store.k() {
            let oracle = nalgebra_fit(&store, j, DEFAULT_RIDGE);
            for (a, b) in head.column(j).iter().zip(&oracle) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    outcome(worst <= TOL, format!("100 instances, max |w - w_oracle| = {worst:.3e} (tol {TOL:e})"))
}

fn mask_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa5c);
    let mut identical = 0;
    for _ in 0..20 {
        let store = random_masked_store(&mut rng);
        let before = fit_head(&store, DEFAULT_RIDGE).unwrap().to_bytes().unwrap();
        let mut records = store.rated_records().unwrap().to_vec();
        for r in &mut records {
            for j in 0..r.mask.len() {
                if !r.mask[j] {
                    r.rating[j] = rng.random_range(-1e6..1e6);
                }
            }
        }
        let mutated = FeatureStore::rated(store.d, store.objective_names.clone(), records);
        let after = fit_head(&mutated, DEFAULT_RIDGE).unwrap().to_bytes().unwrap();
        identical += usize::from(before == after);
    }
    outcome(identical == 20, format!("{identical}/20 trials bit-identical after mutating absent ratings"))
}

/// Rank of each element as (#less) + (#equal + 1) / 2, then the closed-form
/// rank correlation.
fn hand_spearman(a: &[i64], b: &[i64]) -> f64 {
    let rank = |v: &[i64]| -> Vec<f64> {
        v.iter()
            .map(|x| {
                let less = v.iter().filter(|y| *y < x).count() as f64;
                let equal = v.iter().filter(|y| *y == x).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (r, s) = (rank(a), rank(b));
    let n = r.len() as f64;
    let c = n * ((n + 1.0) / 2.0).powi(2);
    let rs: f64 = r.iter().zip(&s).map(|(x, y)| x * y).sum();
    let rr: f64 = r.iter().map(|x| x * x).sum();
    let ss: f64 = s.iter().map(|x| x * x).sum();
    if rr == c || ss == c {
        return 0.0;
    }
    (rs - c) / ((rr - c) * (ss - c)).sqrt()
}

fn spearman_oracle() -> Outcome {
    const TOL: f64 = 1e-12;
    const EXAMPLE: f64 = 0.9486832980505138;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5ea);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..=40);
        let span = rng.random_range(1..=10);
        let a: Vec<i64> = (0..n).map(|_| rng.random_range(0..=span)).collect();
        let b: Vec<i64> = (0..n).map(|_| rng.random_range(0..=span)).collect();
        let af: Vec<f64> = a.iter().map(|&x| x as f64).collect();
        let bf: Vec<f64> = b.iter().map(|&x| x as f64).collect();
        worst = worst.max((spearman(&af, &bf).unwrap() - hand_spearman(&a, &b)).abs());
    }
    let example = spearman(&[1.0, 2.0, 2.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let ex_err = (example - EXAMPLE).abs();
    outcome(
        worst <= TOL && ex_err <= TOL,
        format!("1000 tied vectors max err {worst:.3e}; tie example {example} (err {ex_err:.1e})"),
    )
}

fn calibration() -> Outcome {
    const CORR_TOL: f64 = 1e-3;
    const LAMBDA_TOL: f64 = 1e-9;
    let verbose = [0.2, 0.4, 0.6, 0.8, 1.0];
    let other = [0.6, 0.2, 0.8, 0.4, 1.0];
    let rows: Vec<Vec<f64>> = other.iter().zip(&verbose).map(|(&a, &v)| vec![a, v]).collect();
    let rho0 = spearman(&other, &verbose).unwrap();
    let p = calibrate(&rows, 1, &CalibrateConfig::default(), "constructed").unwrap();
    let adjusted: Vec<f64> = other.iter().zip(&verbose).map(|(a, v)| a - p.lambda[0] * v).collect();
    let achieved = spearman(&adjusted, &verbose).unwrap();
    let flagged = p.unattainable.first().copied().unwrap_or(false);
    let gap = p.step_gap.first().copied().unwrap_or(0.0);
    let spearman_ok = achieved.abs() <= CORR_TOL || (flagged && gap.is_finite() && gap != 0.0);

    let c = 0.37;
    let v: Vec<f64> = (0..20).map(|i| ((i * 7) % 13) as f64 + 0.5 * i as f64).collect();
    let rows: Vec<Vec<f64>> = v.iter().map(|&x| vec![c * x, x]).collect();
    let cfg = CalibrateConfig {
        metric: Metric::Pearson,
        ..CalibrateConfig::default()
    };
    let pp = calibrate(&rows, 1, &cfg, "proportional").unwrap();
    let lam_err = (pp.lambda[0] - c).abs();

    outcome(
        spearman_ok && lam_err <= LAMBDA_TOL,
        format!(
            "rho(0) = {rho0}; lambda = {} gives |rho| = {:.3e} (flagged {flagged}, step gap {gap}); \
             pearson lambda err {lam_err:.2e}",
            p.lambda[0],
            achieved.abs()
        ),
    )
}

fn random_pairs(rng: &mut ChaCha8Rng, n: usize, d: usize, k: usize) -> Vec<PreparedPair> {
    (0..n)
        .map(|_| PreparedPair {
            prompt: normal(rng, d),
            chosen: normal(rng, k),
            rejected: normal(rng, k),
        })
        .collect()
}

fn gradient_check() -> Outcome {
    const H: f64 = 1e-6;
    const TOL: f64 = 1e-5;
    // Relative error denominator floor, so entries that are zero up to
    // rounding do not divide by ~0.
    const FLOOR: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(0x9c);
    let mut worst = 0.0f64;
    for trial in 0..10 {
        let mut net = GatingNetwork::new(layer_dims(4, &[8, 8, 8], 3), 1.0, trial).unwrap();
        for p in net.params_mut() {
            *p = rng.random_range(-0.8..0.8);
        }
        net.beta = rng.random_range(0.5..3.0);
        let pairs = random_pairs(&mut rng, 8, 4, 3);
        let batch: Vec<usize> = (0..pairs.len()).collect();
        let (_, grad) = batch_loss_grad(&net, &pairs, &batch);
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(FLOOR);

        for i in 0..net.params().len() {
            let mut plus = net.clone();
            plus.params_mut()[i] += H;
            let mut minus = net.clone();
            minus.params_mut()[i] -= H;
            let num = (batch_loss(&plus, &pairs, &batch).unwrap() - batch_loss(&minus, &pairs, &batch).unwrap()) / (2.0 * H);
            worst = worst.max(rel(grad.params[i], num));
        }
        let mut plus = net.clone();
        plus.beta += H;
        let mut minus = net.clone();
        minus.beta -= H;
        let num = (batch_loss(&plus, &pairs, &batch).unwrap() - batch_loss(&minus, &pairs, &batch).unwrap()) / (2.0 * H);
        worst = worst.max(rel(grad.beta, num));
    }
    outcome(worst <= TOL, format!("10 networks [4,8,8,8,3] + beta, max rel err {worst:.3e} (tol {TOL:e})"))
}

fn bt_anchors() -> Outcome {
    const EQ_TOL: f64 = 1e-12;
    const ANCHOR: f64 = 4.5398899e-5;
    const ANCHOR_TOL: f64 = 1e-11;
    let mut eq_err = 0.0f64;
    for (r, beta) in [(0.0, 1.0), (0.7, 100.0), (-3.2, 0.01), (1e6, 7.0)] {
        eq_err = eq_err.max((bt_loss(r, r, beta).unwrap() - std::f64::consts::LN_2).abs());
    }
    let sweep: Vec<f64> = (0..100)
        .map(|i| bt_loss(-5.0 + 0.1 * i as f64, 0.0, 1.0).unwrap())
        .collect();
    let decreasing = sweep.windows(2).all(|w| w[1] < w[0]);
    let anchor = bt_loss(0.1, 0.0, 100.0).unwrap();
    let anchor_err = (anchor - ANCHOR).abs();
    outcome(
        eq_err <= EQ_TOL && decreasing && anchor_err <= ANCHOR_TOL,
        format!(
            "ln2 err {eq_err:.1e}; 100-point sweep strictly decreasing: {decreasing}; \
             beta=100 dR=0.1 -> {anchor:e} (err {anchor_err:.1e})"
        ),
    )
}

struct PipelineRun {
    bundle: ModelBundle,
    holdout_accuracy: f64,
    baseline_accuracy: f64,
    baseline_weights: Vec<f64>,
}

fn run_pipeline(n_pairs: usize, seed: u64, cfg: &TrainConfig) -> PipelineRun {
    let (d, k) = (16, 4);
    let spec = SyntheticSpec::two_context(n_pairs, d, k, seed);
    let data = gen_synthetic(&spec).unwrap();
    let head = fit_head(&data.rated, DEFAULT_RIDGE).unwrap();
    let reference = predict_store(&head, &data.rated).unwrap();
    let profile = calibrate(&reference, spec.verbosity_index(), &CalibrateConfig::default(), "synthetic").unwrap();
    let net = GatingNetwork::new(layer_dims(d, &[64, 64, 64], k), 100.0, seed).unwrap();
    let (net, history) = train_gate(&net, &data.pairs, &head, &profile, cfg).unwrap();

    let prepared = prepare_pairs(&data.pairs, &head, &profile).unwrap();
    let (_, hold) = holdout_split(prepared.len(), cfg.holdout_fraction, cfg.seed);
    let chosen: Vec<Vec<f64>> = hold.iter().map(|&i| prepared[i].chosen.clone()).collect();
    let rejected: Vec<Vec<f64>> = hold.iter().map(|&i| prepared[i].rejected.clone()).collect();
    let (baseline_weights, baseline_accuracy) = best_fixed_simplex(&chosen, &rejected, 0.05).unwrap();

    let mut metadata = BundleMetadata::default();
    metadata.seeds.insert("synth".into(), seed);
    metadata.seeds.insert("train".into(), cfg.seed);
    PipelineRun {
        bundle: ModelBundle::new(head, profile, net, metadata).unwrap(),
        holdout_accuracy: history.holdout_accuracy.unwrap(),
        baseline_accuracy,
        baseline_weights,
    }
}

fn e2e_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        steps: 1500,
        batch_size: 512,
        seed: 3,
        holdout_fraction: 0.2,
        ..TrainConfig::default()
    }
}

fn planted_recovery() -> Outcome {
    const MIN_ACC: f64 = 0.95;
    const MIN_LEAD: f64 = 0.10;
    const BUDGET: Duration = Duration::from_secs(300);
    let start = Instant::now();
    let run = run_pipeline(20_000, 7, &e2e_config());
    let elapsed = start.elapsed();
    let lead = run.holdout_accuracy - run.baseline_accuracy;
    outcome(
        run.holdout_accuracy >= MIN_ACC && lead >= MIN_LEAD && elapsed <= BUDGET,
        format!(
            "held-out acc {:.4}; best fixed simplex {:.4} at {:?}; lead {lead:.4}; {:.1}s",
            run.holdout_accuracy,
            run.baseline_accuracy,
            run.baseline_weights,
            elapsed.as_secs_f64()
        ),
    )
}

fn determinism() -> Outcome {
    let cfg = TrainConfig {
        steps: 60,
        batch_size: 128,
        ..e2e_config()
    };
    let a = run_pipeline(2_000, 11, &cfg).bundle.to_bytes().unwrap();
    let b = run_pipeline(2_000, 11, &cfg).bundle.to_bytes().unwrap();
    outcome(a == b, format!("two runs, bundles of {} and {} bytes, identical: {}", a.len(), b.len(), a == b))
}

fn simplex_fuzzing() -> Outcome {
    const TOL: f64 = 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(0xf22);
    let mut calls = 0usize;
    let mut bad = 0usize;
    let mut worst = 0.0f64;
    for net_i in 0..100 {
        let d = rng.random_range(1..=8);
        let k = rng.random_range(1..=8);
        let hidden: Vec<usize> = (0..rng.random_range(0..=3)).map(|_| rng.random_range(1..=16)).collect();
        let mut net = GatingNetwork::new(layer_dims(d, &hidden, k), 100.0, net_i).unwrap();
        let scale = 10f64.powi(rng.random_range(-2..=3));
        for p in net.params_mut() {
            *p = scale * rng.sample::<f64, _>(StandardNormal);
        }
        for _ in 0..1000 {
            let mag = 10f64.powi(rng.random_range(-3..=4));
            let prompt: Vec<f64> = normal(&mut rng, d).into_iter().map(|x| x * mag).collect();
            let g = gate_forward(&net, &prompt).unwrap();
            let err = (g.iter().sum::<f64>() - 1.0).abs();
            worst = worst.max(err);
            if err > TOL || g.iter().any(|&x| x.is_nan() || x < 0.0) {
                bad += 1;
            }
            calls += 1;
        }
    }
    outcome(bad == 0, format!("{calls} calls, {bad} off-simplex, max |sum - 1| = {worst:.2e}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("table-1 arithmetic", table_one),
        ("regression oracle", regression_oracle),
        ("mask correctness", mask_correctness),
        ("spearman oracle", spearman_oracle),
        ("calibration", calibration),
        ("gradient check", gradient_check),
        ("bt-loss anchors", bt_anchors),
        ("planted recovery", planted_recovery),
        ("determinism", determinism),
        ("simplex fuzzing", simplex_fuzzing),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let o = check();
        failed += usize::from(!o.pass);
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
