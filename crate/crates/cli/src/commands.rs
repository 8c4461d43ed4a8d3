use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use armo_core::debias::{calibrate as calibrate_profile, CalibrateConfig, DebiasProfile, Metric};
use armo_core::eval::{parse_steer, EvalManifest, Gate, Scorer};
use armo_core::feature_store::{ingest_rows, parse_manifest, parse_pair_rows, parse_rating_rows, save_store, FeatureStore};
use armo_core::gating::{layer_dims, GatingNetwork, DEFAULT_BETA, DEFAULT_HIDDEN};
use armo_core::optim::AdamWConfig;
use armo_core::regression_head::{fit_head, normal_equation_residual, predict_store, RewardHead, DEFAULT_RIDGE};
use armo_core::synthetic::{gen_synthetic, objective_names, SyntheticSpec};
use armo_core::train::{train_gate, TrainConfig};
use armo_core::{BundleMetadata, Error, ModelBundle};
use rayon::prelude::*;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::config::{sha256_hex, Config};
use crate::{CalibrateArgs, EvalArgs, FitArgs, IngestArgs, ScoreArgs, SynthArgs, TrainArgs};

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn load_store_bytes(path: &Path) -> Result<(FeatureStore, Vec<u8>)> {
    let bytes = read_bytes(path)?;
    let store = FeatureStore::from_bytes(&bytes).with_context(|| format!("loading store {}", path.display()))?;
    Ok((store, bytes))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn ingest(a: &IngestArgs) -> Result<Value> {
    let store = match (&a.pairs, &a.manifest, &a.ratings) {
        (Some(pairs), _, _) => parse_pair_rows(&read_text(pairs)?).with_context(|| format!("in {}", pairs.display()))?,
        (None, Some(manifest), Some(ratings)) => {
            let manifests = parse_manifest(&read_text(manifest)?).with_context(|| format!("in {}", manifest.display()))?;
            let rows = parse_rating_rows(&read_text(ratings)?).with_context(|| format!("in {}", ratings.display()))?;
            ingest_rows(&manifests, &rows).with_context(|| format!("ingesting {}", ratings.display()))?
        }
        _ => unreachable!("clap requires --pairs or --manifest with --ratings"),
    };
    save_store(&store, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(json!({
        "command": "ingest",
        "kind": if a.pairs.is_some() { "pair" } else { "rated" },
        "n": store.len(),
        "d": store.d,
        "k": store.k(),
        "objectives": store.objective_names,
        "present_counts": store.present_counts(),
        "out": a.out,
    }))
}

pub fn fit(a: &FitArgs) -> Result<Value> {
    let cfg = Config::load(a.config.as_deref(), &["ridge"])?;
    let ridge = cfg.pick(a.ridge, "ridge", DEFAULT_RIDGE)?;
    let (store, _) = load_store_bytes(&a.store)?;
    let head = fit_head(&store, ridge)?;
    let max_residual = (0..head.k())
        .map(|j| normal_equation_residual(&store, &head, j))
        .collect::<armo_core::Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    head.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(json!({
        "command": "fit",
        "n": store.len(),
        "d": head.d(),
        "k": head.k(),
        "ridge": ridge,
        "objectives": head.objective_names,
        "max_residual": max_residual,
        "out": a.out,
    }))
}

fn check_feature_dim(context: &str, head: &RewardHead, d: usize) -> Result<()> {
    if d != head.d() {
        return Err(Error::DimensionMismatch {
            context: context.to_string(),
            expected: head.d(),
            actual: d,
        }
        .into());
    }
    Ok(())
}

pub fn calibrate(a: &CalibrateArgs) -> Result<Value> {
    let cfg = Config::load(a.config.as_deref(), &["metric", "verbosity", "tol"])?;
    let metric: Metric = cfg.pick(a.metric.clone(), "metric", "spearman".to_string())?.parse()?;
    let verbosity = cfg.pick(a.verbosity.clone(), "verbosity", "verbosity".to_string())?;
    let tol = cfg.pick(a.tol, "tol", CalibrateConfig::default().tol)?;

    let head = RewardHead::load(&a.head).with_context(|| format!("loading head {}", a.head.display()))?;
    let (store, store_bytes) = load_store_bytes(&a.store)?;
    check_feature_dim("reference store feature dimension vs head", &head, store.d)?;
    let vi = head
        .objective_index(&verbosity)
        .ok_or_else(|| Error::UnknownObjective(verbosity.clone()))?;
    let rewards = predict_store(&head, &store)?;
    let ccfg = CalibrateConfig {
        metric,
        tol,
        ..CalibrateConfig::default()
    };
    let profile = calibrate_profile(&rewards, vi, &ccfg, &sha256_hex(&store_bytes))?;
    profile.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(json!({
        "command": "calibrate",
        "metric": profile.metric,
        "verbosity_index": vi,
        "lambda": profile.lambda,
        "achieved_corr": profile.achieved_corr,
        "unattainable": profile.unattainable,
        "step_gap": profile.step_gap,
        "reference_id": profile.reference_id,
        "out": a.out,
    }))
}

const TRAIN_KEYS: [&str; 8] = ["lr", "steps", "batch", "beta_init", "hidden", "weight_decay", "seed", "holdout"];

pub fn train(a: &TrainArgs) -> Result<Value> {
    let cfg = Config::load(a.config.as_deref(), &TRAIN_KEYS)?;
    let lr = cfg.pick(a.lr, "lr", 1e-3)?;
    let steps = cfg.pick(a.steps, "steps", 10_000usize)?;
    let batch = cfg.pick(a.batch, "batch", 1024usize)?;
    let beta_init = cfg.pick(a.beta_init, "beta_init", DEFAULT_BETA)?;
    let hidden = cfg.pick(a.hidden.clone(), "hidden", DEFAULT_HIDDEN.to_vec())?;
    let weight_decay = cfg.pick(a.weight_decay, "weight_decay", AdamWConfig::default().weight_decay)?;
    let seed = cfg.pick(a.seed, "seed", 0u64)?;
    let holdout = cfg.pick(a.holdout, "holdout", 0.0)?;
    let resolved = json!({
        "lr": lr,
        "steps": steps,
        "batch": batch,
        "beta_init": beta_init,
        "hidden": hidden,
        "weight_decay": weight_decay,
        "seed": seed,
        "holdout": holdout,
    });
    let train_cfg = TrainConfig {
        learning_rate: lr,
        steps,
        batch_size: batch,
        optimizer: AdamWConfig {
            weight_decay,
            ..AdamWConfig::default()
        },
        seed,
        holdout_fraction: holdout,
    };
    train_cfg.validate()?;

    let head_bytes = read_bytes(&a.head)?;
    let head = RewardHead::from_bytes(&head_bytes).with_context(|| format!("loading head {}", a.head.display()))?;
    let profile_text = read_text(&a.profile)?;
    let profile =
        DebiasProfile::from_json(&profile_text).with_context(|| format!("loading profile {}", a.profile.display()))?;
    let (pairs, pairs_bytes) = load_store_bytes(&a.pairs)?;
    check_feature_dim("pair store feature dimension vs head", &head, pairs.d)?;

    let mut metadata = BundleMetadata::default();
    metadata.digests.insert("head".into(), sha256_hex(&head_bytes));
    metadata.digests.insert("profile".into(), sha256_hex(profile_text.as_bytes()));
    metadata.digests.insert("pairs".into(), sha256_hex(&pairs_bytes));
    metadata.digests.insert("train_config".into(), sha256_hex(resolved.to_string().as_bytes()));
    metadata.seeds.insert("gate_init".into(), seed);
    metadata.seeds.insert("train".into(), seed);

    let net = GatingNetwork::new(layer_dims(head.d(), &hidden, head.k()), beta_init, seed)?;
    // Reject inconsistent components before any training work.
    ModelBundle::new(head.clone(), profile.clone(), net.clone(), metadata.clone())?;

    let (trained, history) = train_gate(&net, &pairs, &head, &profile, &train_cfg)?;
    let bundle = ModelBundle::new(head, profile, trained, metadata)?;
    bundle.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(path) = &a.history {
        write(path, history.to_csv())?;
    }
    Ok(json!({
        "command": "train-gating",
        "steps": steps,
        "final_loss": history.loss.last(),
        "beta": bundle.gate.beta,
        "holdout_accuracy": history.holdout_accuracy,
        "layer_dims": bundle.gate.layer_dims(),
        "config": resolved,
        "out": a.out,
    }))
}

fn scorer_from(bundle_path: &Path, steer: Option<&str>) -> Result<Scorer> {
    let bundle = ModelBundle::load(bundle_path).with_context(|| format!("loading bundle {}", bundle_path.display()))?;
    Ok(match steer {
        Some(spec) => {
            let w = parse_steer(spec, &bundle.head.objective_names)?;
            Scorer::new(bundle.head, bundle.profile, Gate::Fixed(w))?
        }
        None => bundle.scorer()?,
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreRow {
    prompt: Vec<f64>,
    response: Vec<f64>,
}

pub fn score(a: &ScoreArgs) -> Result<Value> {
    let scorer = scorer_from(&a.bundle, a.steer.as_deref())?;
    let text = read_text(&a.input)?;
    let rows = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<ScoreRow>(l).map_err(|e| Error::Manifest {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect::<armo_core::Result<Vec<_>>>()
        .with_context(|| format!("in {}", a.input.display()))?;
    if rows.is_empty() {
        return Err(Error::Empty(format!("{} has no rows", a.input.display())).into());
    }
    let reports = rows
        .par_iter()
        .map(|r| scorer.decompose(&r.prompt, &r.response))
        .collect::<armo_core::Result<Vec<_>>>()?;
    if let Some(out) = &a.out {
        let mut lines = String::new();
        for r in &reports {
            let _ = writeln!(lines, "{}", serde_json::to_string(r)?);
        }
        write(out, lines)?;
    }
    let scores: Vec<f64> = reports.iter().map(|r| r.scalar_score).collect();
    Ok(json!({
        "command": "score",
        "n": scores.len(),
        "steered": a.steer.is_some(),
        "mean_score": scores.iter().sum::<f64>() / scores.len() as f64,
        "scores": scores,
        "out": a.out,
    }))
}

pub fn eval(a: &EvalArgs) -> Result<Value> {
    let manifest = EvalManifest::load(&a.manifest).with_context(|| format!("loading {}", a.manifest.display()))?;
    let scorer = a
        .bundle
        .as_deref()
        .map(|b| scorer_from(b, a.steer.as_deref()))
        .transpose()?;
    let base = a.manifest.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    let report = manifest.evaluate(scorer.as_ref(), &base)?;
    eprint!("{}", report.to_table(&a.name));
    if let Some(out) = &a.out {
        write(out, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(json!({
        "command": "eval",
        "score": report.score,
        "score_percent": report.score_percent,
        "categories": report.categories,
        "out": a.out,
    }))
}

const SYNTH_KEYS: [&str; 7] = ["seed", "n_pairs", "n_rated", "d", "k", "noise", "test_fraction"];

pub fn synth(a: &SynthArgs) -> Result<Value> {
    let cfg = Config::load(a.config.as_deref(), &SYNTH_KEYS)?;
    let seed = cfg.pick(a.seed, "seed", 0u64)?;
    let n_pairs = cfg.pick(a.n_pairs, "n_pairs", 20_000usize)?;
    let n_rated = cfg.pick_opt(a.n_rated, "n_rated")?.unwrap_or(n_pairs);
    let d = cfg.pick(a.d, "d", 16usize)?;
    let k = cfg.pick(a.k, "k", 4usize)?;
    let noise = cfg.pick(a.noise, "noise", 0.05)?;
    let test_fraction = cfg.pick(a.test_fraction, "test_fraction", 0.2)?;
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::InvalidArgument(format!("test fraction must be in [0, 1), got {test_fraction}")).into());
    }

    let spec = SyntheticSpec {
        n_rated,
        noise_scale: noise,
        ..SyntheticSpec::two_context(n_pairs, d, k, seed)
    };
    let data = gen_synthetic(&spec)?;
    let mut pairs = data.pairs.pair_records()?.to_vec();
    let n_test = (n_pairs as f64 * test_fraction).floor() as usize;
    let test = pairs.split_off(n_pairs - n_test);

    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let path = |name: &str| a.out_dir.join(name);
    save_store(&data.rated, path("rated.afs"))?;
    save_store(&FeatureStore::pairs(d, pairs), path("train_pairs.afs"))?;
    data.planted.save(path("planted.ahd"))?;
    let mut files = vec!["rated.afs", "train_pairs.afs", "planted.ahd"];
    if n_test > 0 {
        save_store(&FeatureStore::pairs(d, test), path("test_pairs.afs"))?;
        let manifest = json!({
            "categories": [{"name": "synthetic-test", "weight": 1.0, "pairs_path": "test_pairs.afs"}]
        });
        write(&path("eval.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        files.extend(["test_pairs.afs", "eval.json"]);
    }
    Ok(json!({
        "command": "synth",
        "seed": seed,
        "n_rated": n_rated,
        "n_train_pairs": n_pairs - n_test,
        "n_test_pairs": n_test,
        "d": d,
        "k": k,
        "objectives": objective_names(k),
        "context_rule": data.rule,
        "files": files,
        "out_dir": a.out_dir,
    }))
}
