//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line per criterion and exits nonzero if any fails.

use std::collections::{BTreeMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tkg_core::autodiff::{Mode, Tape, Tensor};
use tkg_core::data::{gen_synthetic_tkg, SnapshotGraph, Split, Triple};
use tkg_core::disentangle::{disentangle_step, node_attention, Factors};
use tkg_core::encoder::evolve_snapshot;
use tkg_core::eval::{compute_metrics, evaluate_split, oracle_rank, rank_of_gold, time_aware_filter, FilterMode, RankRecord};
use tkg_core::gradsuite::{run_grad_suite, GradSuiteOptions};
use tkg_core::model::{Ctx, Model, ModelConfig};
use tkg_core::training::{TrainConfig, Trainer};

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn tkg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tkg"))
        .args(args)
        .env("TKG_LOG", "warn")
        .output()
        .expect("tkg binary runs")
}

fn tkg_ok(args: &[&str]) -> Result<Output, String> {
    let out = tkg(args);
    if out.status.success() {
        Ok(out)
    } else {
        Err(format!(
            "`tkg {}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn read_json(path: &Path) -> Result<Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn read_log(path: &Path) -> Result<Vec<Value>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| e.to_string()))
        .collect()
}

fn random_features(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect()).expect("shape matches")
}

fn random_snapshot(rng: &mut ChaCha8Rng, n: usize, num_rel: usize, edges: usize, t: usize) -> SnapshotGraph {
    let edges = (0..edges)
        .map(|_| Triple::new(rng.gen_range(0..n), rng.gen_range(0..num_rel), rng.gen_range(0..n)))
        .collect();
    SnapshotGraph::new(t, edges)
}

fn gradient_suite() -> Outcome {
    let report = run_grad_suite(&GradSuiteOptions::default()).map_err(|e| e.to_string())?;
    let failing: Vec<String> = report
        .failing()
        .iter()
        .map(|c| format!("{} {:.2e}", c.name, c.max_rel_error))
        .collect();
    check(failing.is_empty(), format!("above 1e-3: {}", failing.join(", ")))?;
    check(report.elapsed < Duration::from_secs(60), format!("took {:.1?}", report.elapsed))?;
    Ok(format!(
        "max relative error {:.2e} over {} tensors ({} coordinates) in {:.1?}",
        report.max_rel_error,
        report.components.len(),
        report.coordinates,
        report.elapsed
    ))
}

/// Compares the production rank with the pairwise oracle on one instance.
fn ranks_agree(scores: &[f64], query: Triple, facts: &HashSet<Triple>) -> Result<(), String> {
    let masked = time_aware_filter(scores, query, facts).map_err(|e| e.to_string())?;
    let fast = rank_of_gold(&masked, query.object).map_err(|e| e.to_string())?;
    let slow = oracle_rank(scores, query, facts);
    check(fast == slow, format!("rank {fast} vs oracle {slow} for {scores:?}, gold {}", query.object))
}

fn oracle_ranking() -> Outcome {
    // (a) every score vector over {0, 1, 2}, every gold, every filter mask.
    let mut exhaustive = 0usize;
    for n in 1..=8usize {
        let total = 3usize.pow(n as u32);
        for gold in 0..n {
            let others: Vec<usize> = (0..n).filter(|&c| c != gold).collect();
            for mask in 0..1usize << others.len() {
                let q = Triple::new(0, 0, gold);
                let mut facts: HashSet<Triple> = HashSet::from([q, Triple::new(0, 1, 0), Triple::new(1, 0, 0)]);
                for (bit, &c) in others.iter().enumerate() {
                    if mask >> bit & 1 == 1 {
                        facts.insert(Triple::new(0, 0, c));
                    }
                }
                let mut scores = vec![0.0; n];
                for code in 0..total {
                    let mut c = code;
                    for s in scores.iter_mut() {
                        *s = (c % 3) as f64;
                        c /= 3;
                    }
                    ranks_agree(&scores, q, &facts)?;
                    exhaustive += 1;
                }
            }
        }
    }
    // (b) random sizes with duplicated scores and random true facts.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10_000 {
        let n = rng.gen_range(1..=50);
        let pool: Vec<f64> = (0..rng.gen_range(1..=n)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut scores: Vec<f64> = (0..n).map(|_| *pool.choose(&mut rng).expect("non-empty")).collect();
        // Force a tie with the gold score now and then.
        let gold = rng.gen_range(0..n);
        if n > 1 && rng.gen_bool(0.5) {
            let other = rng.gen_range(0..n);
            scores[other] = scores[gold];
        }
        let q = Triple::new(rng.gen_range(0..n), rng.gen_range(0..3), gold);
        let mut facts = HashSet::from([q]);
        for c in 0..n {
            if rng.gen_bool(0.3) {
                facts.insert(Triple::new(q.subject, q.relation, c));
            }
            if rng.gen_bool(0.2) {
                facts.insert(Triple::new(q.subject, q.relation + 1, c));
            }
        }
        ranks_agree(&scores, q, &facts)?;
    }
    Ok(format!("{exhaustive} exhaustive and 10000 random instances agree exactly"))
}

fn metric_arithmetic() -> Outcome {
    let records: Vec<RankRecord> = [1.0, 2.0, 4.0]
        .iter()
        .map(|&r| RankRecord {
            query: Triple::new(0, 0, 0),
            time: 1,
            raw_rank: r,
            filtered_rank: r,
        })
        .collect();
    let m = compute_metrics(&records).map_err(|e| e.to_string())?;
    check((m.mrr - 0.583333).abs() <= 1e-6 && (m.mrr - 7.0 / 12.0).abs() <= 1e-9, format!("MRR {}", m.mrr))?;
    check(m.hits_at(1) == 1.0 / 3.0, format!("Hits@1 {}", m.hits_at(1)))?;
    check(m.hits_at(3) == 2.0 / 3.0, format!("Hits@3 {}", m.hits_at(3)))?;
    check(m.hits_at(10) == 1.0, format!("Hits@10 {}", m.hits_at(10)))?;
    Ok(format!("MRR {:.9}, Hits@1/3/10 = {:.6}/{:.6}/{}", m.mrr, m.hits_at(1), m.hits_at(3), m.hits_at(10)))
}

fn normalization_exclusivity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut sums, mut orders) = (0usize, 0usize);
    for call in 0..1000u64 {
        let n = rng.gen_range(2..10);
        let heads = rng.gen_range(1..=3);
        let d = heads * rng.gen_range(1..=3);
        let num_raw = rng.gen_range(1..=3);
        let model = Model::new(ModelConfig::new(n, num_raw, d, 1, heads), call).map_err(|e| e.to_string())?;
        let edges = rng.gen_range(0..3 * n);
        let prev = random_snapshot(&mut rng, n, 2 * num_raw, edges, 0);
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape, false);
        let h_t = tape.constant(random_features(&mut rng, n, d));
        let h_prev = tape.constant(random_features(&mut rng, n, d));
        let alpha = tape.constant(random_features(&mut rng, n, d));
        let mut step_rng = ChaCha8Rng::seed_from_u64(call);
        let out = {
            let mut ctx = Ctx {
                tape: &mut tape,
                vars: &vars,
                model: &model,
                mode: Mode::Eval,
                rng: &mut step_rng,
            };
            disentangle_step(&mut ctx, h_t, h_prev, &prev, alpha).map_err(|e| e.to_string())?
        };
        for h in 0..heads {
            let scores = tape.value(out.heads[h].scores).data();
            for o in 0..n {
                let (eta, eta_bar) = node_attention(&tape, &out, h, o);
                let s_eta: f64 = eta.iter().sum();
                let s_bar: f64 = eta_bar.iter().sum();
                check(
                    (s_eta - 1.0).abs() <= 1e-12 && (s_bar - 1.0).abs() <= 1e-12,
                    format!("call {call} head {h} node {o}: sums {s_eta} and {s_bar}"),
                )?;
                sums += 1;
                let e: Vec<f64> = out
                    .slots
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.object == o)
                    .map(|(i, _)| scores[i])
                    .collect();
                let distinct = e.iter().enumerate().all(|(i, a)| e[i + 1..].iter().all(|b| a != b));
                if distinct && e.len() > 1 {
                    let mut by_eta: Vec<usize> = (0..e.len()).collect();
                    by_eta.sort_by(|&a, &b| eta[b].total_cmp(&eta[a]));
                    let mut by_bar: Vec<usize> = (0..e.len()).collect();
                    by_bar.sort_by(|&a, &b| eta_bar[a].total_cmp(&eta_bar[b]));
                    check(by_eta == by_bar, format!("call {call} head {h} node {o}: orders differ"))?;
                    orders += 1;
                }
            }
        }
    }
    Ok(format!("1000 calls, {sums} normalisation checks, {orders} order checks"))
}

fn convex_sandwich() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut entries = 0usize;
    for call in 0..300u64 {
        let n = rng.gen_range(2..10);
        let heads = rng.gen_range(1..=2);
        let d = heads * rng.gen_range(1..=3);
        let layers = rng.gen_range(1..=3);
        let num_raw = rng.gen_range(1..=3);
        let model = Model::new(ModelConfig::new(n, num_raw, d, layers, heads), call).map_err(|e| e.to_string())?;
        let (e0, e1) = (rng.gen_range(0..2 * n), rng.gen_range(0..2 * n));
        let g0 = random_snapshot(&mut rng, n, 2 * num_raw, e0, 0);
        let g1 = random_snapshot(&mut rng, n, 2 * num_raw, e1, 1);
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape, false);
        let mut step_rng = ChaCha8Rng::seed_from_u64(call);
        let factors = Factors {
            active: tape.constant(random_features(&mut rng, n, d)),
            stable: tape.constant(random_features(&mut rng, n, d)),
        };
        let states = {
            let mut ctx = Ctx {
                tape: &mut tape,
                vars: &vars,
                model: &model,
                mode: Mode::Eval,
                rng: &mut step_rng,
            };
            let mut first = evolve_snapshot(&mut ctx, None, &g0).map_err(|e| e.to_string())?;
            // Nonzero factors so the gates vary per entry.
            first.factors = factors;
            let second = evolve_snapshot(&mut ctx, Some(&first), &g1).map_err(|e| e.to_string())?;
            vec![first, second]
        };
        for s in &states {
            for l in 1..s.h_hat.len() {
                let h = tape.value(s.h_hat[l]).data();
                let agg = tape.value(s.aggregated[l - 1]).data();
                let prev = tape.value(s.h_hat_prev[l]).data();
                for i in 0..h.len() {
                    let (lo, hi) = (agg[i].min(prev[i]), agg[i].max(prev[i]));
                    check(
                        h[i] >= lo - 1e-9 && h[i] <= hi + 1e-9,
                        format!("call {call} layer {l} entry {i}: {} outside [{lo}, {hi}]", h[i]),
                    )?;
                    entries += 1;
                }
            }
        }
    }
    Ok(format!("300 random configurations, {entries} entries inside their gate interval"))
}

fn synthetic_learning() -> Outcome {
    let start = Instant::now();
    let ds = gen_synthetic_tkg(20, 2, 2, 200, 1).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        dim: 32,
        history: 4,
        layers: 2,
        heads: 1,
        sample_k: 10,
        learning_rate: 1e-3,
        max_epochs: 60,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(cfg.clone(), &ds).map_err(|e| e.to_string())?;
    let records = trainer.run(&ds, |_, _, _| Ok(())).map_err(|e| e.to_string())?;
    let report = evaluate_split(&trainer.model, &ds, Split::Test, cfg.history, FilterMode::TimeAware)
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    check(report.mrr >= 0.70, format!("test MRR {:.4} below 0.70", report.mrr))?;
    check(elapsed < Duration::from_secs(15 * 60), format!("took {elapsed:.1?}"))?;
    Ok(format!(
        "test MRR {:.4} (Hits@1 {:.4}) after {} epochs in {elapsed:.1?}",
        report.mrr,
        report.hits_at(1),
        records.len()
    ))
}

fn ablation_harness(dir: &Path) -> Outcome {
    let variants: [(&str, &[&str]); 4] = [
        ("w/o multi-span", &["--ablate", "multi-span"]),
        ("w/o disentangle", &["--ablate", "disentangle"]),
        ("w/o both", &["--ablate", "both"]),
        ("w/o virtual graph", &["--no-virtual-graph"]),
    ];
    let mut summary = Vec::new();
    for (i, (name, flags)) in variants.iter().enumerate() {
        let run = dir.join(format!("ablation{i}"));
        let run_s = run.to_str().expect("utf-8 path");
        let mut args = vec!["train", "--data", "synth", "--preset", "synth", "--epochs", "2", "--out", run_s];
        args.extend_from_slice(flags);
        tkg_ok(&args)?;
        let ckpt = run.join("checkpoint.bin");
        let eval_dir = run.join("eval");
        tkg_ok(&[
            "eval",
            "--checkpoint",
            ckpt.to_str().expect("utf-8 path"),
            "--out",
            eval_dir.to_str().expect("utf-8 path"),
        ])?;
        let metrics = read_json(&eval_dir.join("metrics.json"))?;
        let mrr = metrics["mrr"].as_f64().ok_or(format!("{name}: no mrr"))?;
        check((0.0..=1.0).contains(&mrr), format!("{name}: MRR {mrr}"))?;
        for k in ["1", "3", "10"] {
            let h = metrics["hits"][k].as_f64().ok_or(format!("{name}: no Hits@{k}"))?;
            check((0.0..=1.0).contains(&h), format!("{name}: Hits@{k} {h}"))?;
        }
        let per_t = metrics["per_timestamp"].as_array().ok_or(format!("{name}: no per-timestamp metrics"))?;
        check(!per_t.is_empty(), format!("{name}: empty per-timestamp metrics"))?;
        check(metrics["num_queries"].as_u64().unwrap_or(0) > 0, format!("{name}: no queries"))?;
        let log = read_log(&run.join("train_log.jsonl"))?;
        check(log.len() == 2, format!("{name}: {} log records", log.len()))?;
        if flags.contains(&"disentangle") || flags.contains(&"both") {
            check(
                log.iter().all(|r| r["l_dis"].as_f64() == Some(0.0)),
                format!("{name}: nonzero L_dis"),
            )?;
        }
        summary.push(format!("{name} MRR {mrr:.3}"));
    }
    Ok(summary.join(", "))
}

fn logs_match(a: &[Value], b: &[Value]) -> Result<(), String> {
    check(a.len() == b.len(), format!("{} vs {} records", a.len(), b.len()))?;
    for (ra, rb) in a.iter().zip(b) {
        for key in ["epoch", "l_pred", "l_dis", "valid_mrr"] {
            let (x, y) = (ra[key].as_f64(), rb[key].as_f64());
            let same = match (x, y) {
                (Some(x), Some(y)) => (x - y).abs() <= 1e-12,
                (None, None) => ra[key] == rb[key],
                _ => false,
            };
            check(same, format!("{key} differs: {} vs {}", ra[key], rb[key]))?;
        }
    }
    Ok(())
}

fn determinism_persistence(dir: &Path) -> Outcome {
    let path = |name: &str| dir.join(name).to_str().expect("utf-8 path").to_string();
    let base = ["train", "--data", "synth", "--preset", "synth", "--seed", "7"];
    let run = |out: &str, epochs: &str| -> Result<(), String> {
        let mut args = base.to_vec();
        args.extend_from_slice(&["--epochs", epochs, "--out", out]);
        tkg_ok(&args).map(|_| ())
    };
    run(&path("a"), "3")?;
    run(&path("b"), "3")?;
    let log_a = read_log(&dir.join("a/train_log.jsonl"))?;
    logs_match(&log_a, &read_log(&dir.join("b/train_log.jsonl"))?).map_err(|e| format!("repeat run: {e}"))?;

    run(&path("c"), "1")?;
    let ckpt = path("c/checkpoint.bin");
    tkg_ok(&["train", "--resume", &ckpt, "--epochs", "3", "--out", &path("c")])?;
    logs_match(&log_a, &read_log(&dir.join("c/train_log.jsonl"))?).map_err(|e| format!("resumed run: {e}"))?;
    let bytes = |p: &str| std::fs::read(p).map_err(|e| e.to_string());
    check(
        bytes(&path("a/checkpoint.bin"))? == bytes(&ckpt)?,
        "resumed checkpoint differs from straight-through checkpoint",
    )?;
    Ok(format!("{} epochs identical across repeat and resume, final checkpoints byte-identical", log_a.len()))
}

fn preset_wiring(dir: &Path) -> Outcome {
    let expected = [
        ("icews14", 10, 3, 4),
        ("icews05-15", 2, 1, 1),
        ("icews18", 10, 3, 4),
        ("gdelt", 5, 3, 1),
    ];
    for (preset, m, omega, heads) in expected {
        let out = dir.join(format!("preset-{preset}"));
        tkg_ok(&[
            "train",
            "--preset",
            preset,
            "--data",
            "synth",
            "--dry-run",
            "--out",
            out.to_str().expect("utf-8 path"),
        ])?;
        let manifest = read_json(&out.join("manifest.json"))?;
        let cfg: BTreeMap<String, String> =
            serde_json::from_value(manifest["config"].clone()).map_err(|e| e.to_string())?;
        let want = [
            ("d", "128".to_string()),
            ("lr", "0.001".to_string()),
            ("k", "50".to_string()),
            ("max_epochs", "60".to_string()),
            ("m", m.to_string()),
            ("omega", omega.to_string()),
            ("heads", heads.to_string()),
        ];
        for (key, value) in want {
            check(
                cfg.get(key) == Some(&value),
                format!("{preset}: {key} = {:?}, expected {value}", cfg.get(key)),
            )?;
        }
        check(manifest["status"] == "dry-run", format!("{preset}: status {}", manifest["status"]))?;
    }
    Ok("icews14, icews05-15, icews18 and gdelt manifests carry the expected values".into())
}

fn main() {
    let dir = tempfile::tempdir().expect("temporary directory");
    let d = dir.path();
    let criteria: Vec<Criterion<'_>> = vec![
        ("gradient suite", Box::new(gradient_suite)),
        ("oracle ranking equivalence", Box::new(oracle_ranking)),
        ("metric arithmetic", Box::new(metric_arithmetic)),
        ("normalization and exclusivity", Box::new(normalization_exclusivity)),
        ("convex sandwich", Box::new(convex_sandwich)),
        ("synthetic learning", Box::new(synthetic_learning)),
        ("ablation harness", Box::new(move || ablation_harness(d))),
        ("determinism and persistence", Box::new(move || determinism_persistence(d))),
        ("preset wiring", Box::new(move || preset_wiring(d))),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
