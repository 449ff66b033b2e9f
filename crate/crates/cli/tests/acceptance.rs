//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Every criterion also has a wall-clock budget.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use renas::cellgraph::{CellGraph, Op};
use renas::costmodel::{network_costs, Skeleton};
use renas::datastore::{surrogate_label, SurrogateConfig};
use renas::encoder::{self, Encoder, NormScaler, CHANNELS, SIDE};
use renas::evosearch::{self, random_cell, EaConfig};
use renas::metrics;
use renas::ranking::{self, AdmissibilityCheckConfig, LossConfig, Triplet};
use renas::tensornet::{PredictorArch, PredictorModel};
use renas::trainer::{self, LossKind, TrainConfig, TrainSetup};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn encoding_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    let mut shapes = BTreeSet::new();
    for k in 0..1000 {
        let g = random_cell(3 + k % 5, &mut rng);
        let n = g.n();
        shapes.insert(n);
        // Oracle: insert the 7 − n padding rows/columns one at a time just
        // before OUTPUT.
        let mut a: Vec<Vec<u8>> = g.adjacency();
        let mut types: Vec<u8> = g.ops().iter().map(|op| op.id()).collect();
        while a.len() < SIDE {
            let at = a.len() - 1;
            for row in a.iter_mut() {
                row.insert(at, 0);
            }
            a.insert(at, vec![0; a.len() + 1]);
            types.insert(at, 0);
        }
        let costs = network_costs(&g, &Skeleton::default()).unwrap();
        let t = encoder::encode(&g, &costs, None).unwrap();
        let nested = t.to_nested();
        if nested.len() != CHANNELS || nested.iter().any(|p| p.len() != SIDE || p.iter().any(|r| r.len() != SIDE)) {
            return outcome(false, format!("cell {k}: tensor is not 19x7x7"));
        }
        for (c, plane) in nested.iter().enumerate() {
            for i in 0..SIDE {
                for j in 0..SIDE {
                    if plane[i][j] != 0.0 && a[i][j] == 0 {
                        return outcome(false, format!("cell {k}: channel {c} nonzero at ({i},{j}) outside A7"));
                    }
                    if c == 0 && plane[i][j] != f64::from(a[i][j]) * f64::from(types[j]) {
                        return outcome(false, format!("cell {k}: type channel differs at ({i},{j})"));
                    }
                }
            }
        }
        if types[SIDE - 1] != Op::Output.id() || types[0] != Op::Input.id() {
            return outcome(false, format!("cell {k}: terminals misplaced"));
        }
        checked += 1;
    }
    outcome(checked == 1000, format!("{checked} cells, node counts {shapes:?}"))
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for (k, &first) in items.iter().enumerate() {
        let rest: Vec<usize> = items.iter().enumerate().filter(|&(i, _)| i != k).map(|(_, &v)| v).collect();
        for mut tail in permutations(&rest) {
            tail.insert(0, first);
            out.push(tail);
        }
    }
    out
}

fn canonicalization_oracle() -> Outcome {
    let mut graphs = 0usize;
    let mut forms = BTreeSet::new();
    for n in 2..=5usize {
        let slots: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        let perms = permutations(&(1..n - 1).collect::<Vec<_>>());
        for mask in 0u32..(1 << slots.len()) {
            for code in 0..3usize.pow(n as u32 - 2) {
                let mut adj = vec![vec![0u8; n]; n];
                for (b, &(i, j)) in slots.iter().enumerate() {
                    adj[i][j] = (mask >> b & 1) as u8;
                }
                let mut ops = vec![Op::Input; n];
                for (v, op) in ops.iter_mut().enumerate().take(n - 1).skip(1) {
                    *op = Op::INTERIOR[code / 3usize.pow(v as u32 - 1) % 3];
                }
                ops[n - 1] = Op::Output;
                let reference = CellGraph::validate(&adj, &ops);
                for perm in &perms {
                    let mut label: Vec<usize> = (0..n).collect();
                    label[1..n - 1].copy_from_slice(perm);
                    let mut adj2 = vec![vec![0u8; n]; n];
                    let mut ops2 = ops.clone();
                    for i in 0..n {
                        ops2[label[i]] = ops[i];
                        for j in 0..n {
                            adj2[label[i]][label[j]] = adj[i][j];
                        }
                    }
                    let got = CellGraph::validate(&adj2, &ops2);
                    if got != reference {
                        return outcome(false, format!("n={n} mask={mask:#x} ops={code}: {got:?} vs {reference:?}"));
                    }
                    if let Ok(g) = &got {
                        if g.canonicalize() != *g {
                            return outcome(false, format!("n={n}: canonical form not a fixed point"));
                        }
                    }
                    graphs += 1;
                }
                if let Ok(g) = reference {
                    forms.insert(g);
                }
            }
        }
    }
    let enumerated = evosearch::enumerate_space(5).unwrap().len();
    outcome(
        forms.len() == enumerated,
        format!("{graphs} labelled graphs, {} canonical forms, enumeration {enumerated}", forms.len()),
    )
}

#[derive(Clone, Copy, Debug)]
enum Loss {
    L1,
    L2,
    Combined,
    Mse,
}

fn loss_value(model: &PredictorModel, x: &ndarray::Array2<f64>, y: &[f64], tr: &[Triplet], loss: Loss) -> f64 {
    let out = model.forward(x.view()).unwrap();
    let cfg = LossConfig::default();
    match loss {
        Loss::L1 => ranking::loss_l1(&out.scores, y, &cfg).unwrap().0,
        Loss::L2 => ranking::loss_l2(out.embeddings.view(), y, &cfg, tr).unwrap().0,
        Loss::Combined => ranking::loss_combined(&out.scores, out.embeddings.view(), y, &cfg, tr).unwrap().value,
        Loss::Mse => ranking::loss_mse(&out.scores, y).unwrap().0,
    }
}

fn gradient_checks() -> Outcome {
    const H: f64 = 1e-4;
    const TOL: f64 = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let cells: Vec<CellGraph> = (0..8).map(|_| random_cell(7, &mut rng)).collect();
    let enc = Encoder::default();
    let raw: Vec<_> = cells.iter().map(|c| enc.encode_raw(c).unwrap()).collect();
    let model = PredictorModel::new(PredictorArch::default(), enc, NormScaler::fit(&raw).unwrap(), 17).unwrap();
    let x = model.encode_batch(&cells).unwrap();
    let y: Vec<f64> = (0..8).map(|i| 0.9 + 0.01 * i as f64 + rng.random_range(0.0..0.001)).collect();
    let tr = ranking::sample_triplets(8, 4096, &mut rng);
    let cfg = LossConfig::default();

    let mut details = Vec::new();
    let mut pass = true;
    for loss in [Loss::L1, Loss::L2, Loss::Combined, Loss::Mse] {
        let (out, cache) = model.forward_train(x.view()).unwrap();
        let grads = match loss {
            Loss::L1 => model.backward(&cache, &ranking::loss_l1(&out.scores, &y, &cfg).unwrap().1, None),
            Loss::L2 => {
                let (_, d) = ranking::loss_l2(out.embeddings.view(), &y, &cfg, &tr).unwrap();
                model.backward(&cache, &[0.0; 8], Some(d.view()))
            }
            Loss::Combined => {
                let c = ranking::loss_combined(&out.scores, out.embeddings.view(), &y, &cfg, &tr).unwrap();
                model.backward(&cache, &c.d_scores, Some(c.d_embeddings.view()))
            }
            Loss::Mse => model.backward(&cache, &ranking::loss_mse(&out.scores, &y).unwrap().1, None),
        }
        .unwrap();
        let mut probe = model.clone();
        let mut central = |p: usize, h: f64| {
            let orig = probe.params()[p];
            probe.params_mut()[p] = orig + h;
            let plus = loss_value(&probe, &x, &y, &tr, loss);
            probe.params_mut()[p] = orig - h;
            let minus = loss_value(&probe, &x, &y, &tr, loss);
            probe.params_mut()[p] = orig;
            (plus - minus) / (2.0 * h)
        };
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
        // Half uniform over all parameters, half over parameters with a
        // non-negligible gradient.
        let live: Vec<usize> = (0..grads.len()).filter(|&i| grads[i].abs() > 1e-6).collect();
        let pools = [
            sample(&mut rng, grads.len(), 200).into_vec(),
            sample(&mut rng, live.len(), 200.min(live.len())).into_iter().map(|k| live[k]).collect(),
        ];
        let (mut worst, mut checked, mut kinks) = (0.0f64, 0, 0);
        for pool in &pools {
            let mut taken = 0;
            for &p in pool {
                if taken == 10 {
                    break;
                }
                let numeric = central(p, H);
                let err = rel(numeric, grads[p]);
                if err >= TOL && rel(numeric, central(p, H / 10.0)) >= TOL / 10.0 {
                    kinks += 1;
                    continue;
                }
                worst = worst.max(err);
                taken += 1;
            }
            checked += taken;
        }
        pass &= checked == 20 && worst < TOL;
        details.push(format!("{loss:?} worst {worst:.1e} over {checked} ({kinks} kinks skipped)"));
    }
    outcome(pass, details.join("; "))
}

/// Explicit pair enumeration with integer comparisons.
fn ktau_oracle(pred: &[f64], truth: &[f64]) -> f64 {
    let n = pred.len();
    let mut concordant = 0u64;
    for i in 0..n {
        for j in 0..n {
            if i < j && ((pred[i] < pred[j] && truth[i] < truth[j]) || (pred[i] > pred[j] && truth[i] > truth[j])) {
                concordant += 1;
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    2.0 * concordant as f64 / pairs - 1.0
}

fn ktau_oracle_check() -> Outcome {
    let hand = metrics::ktau(&[1.0, 3.0, 2.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap().ktau;
    if (hand - 2.0 / 3.0).abs() > 1e-15 {
        return outcome(false, format!("hand case gave {hand}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut with_ties = 0;
    for v in 0..1000 {
        let n = rng.random_range(2..=200);
        let levels = if v % 2 == 0 { 1_000_000 } else { rng.random_range(2..10) };
        let pred: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let truth: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let want = ktau_oracle(&pred, &truth);
        let exact = metrics::ktau(&pred, &truth).unwrap();
        let fast = metrics::ktau_fast(&pred, &truth).unwrap();
        with_ties += usize::from(exact.tied > 0);
        if exact.ktau != want || fast != exact {
            return outcome(false, format!("vector {v} (n={n}): {} / {} vs oracle {want}", exact.ktau, fast.ktau));
        }
    }
    outcome(true, format!("hand case 2/3 exact; 1000 vectors match ({with_ties} with ties)"))
}

fn admissibility() -> Outcome {
    let cfg = AdmissibilityCheckConfig::default();
    let ratio = ranking::admissibility_probe(&cfg, 2024).unwrap();
    outcome(ratio <= 1.0 + 1e-9, format!("max ratio {ratio:.12} over {} trials", cfg.trials))
}

fn distinct_random_cells(count: usize, seed: u64) -> Vec<CellGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut cells = Vec::with_capacity(count);
    while cells.len() < count {
        let c = random_cell(7, &mut rng);
        if seen.insert(c.clone()) {
            cells.push(c);
        }
    }
    cells
}

fn desk_setup(loss: LossKind) -> TrainSetup {
    TrainSetup {
        train: TrainConfig { epochs: 200, batch: 128, seed: 7, loss, eval_every: 1000, ..Default::default() },
        ..Default::default()
    }
}

fn end_to_end() -> Outcome {
    let cells = distinct_random_cells(424 + 5000, 2024);
    let cfg = SurrogateConfig::default();
    let y: Vec<f64> = cells.iter().map(|c| surrogate_label(c, &cfg)).collect();
    let (train, hold) = cells.split_at(424);
    let (ty, hy) = y.split_at(424);
    let ktau = |loss| -> f64 {
        let (_, logs) = trainer::train(train, ty, Some((hold, hy)), &desk_setup(loss), |_| {}).unwrap();
        logs.last().unwrap().holdout_ktau.unwrap()
    };
    let combined = ktau(LossKind::Combined);
    let mse = ktau(LossKind::Mse);
    outcome(combined >= 0.55 && combined > mse, format!("KTau combined {combined:.4}, mse {mse:.4} on 5000 holdout cells"))
}

fn search_quality() -> Outcome {
    let space = evosearch::enumerate_space(5).unwrap();
    let cfg = SurrogateConfig::default();
    let truth = |c: &CellGraph| surrogate_label(c, &cfg);
    let mut ranked: Vec<f64> = space.iter().map(truth).collect();
    ranked.sort_by(|a, b| b.total_cmp(a));

    let mut sample = space.clone();
    sample.shuffle(&mut ChaCha8Rng::seed_from_u64(11));
    let train = &sample[..424];
    let y: Vec<f64> = train.iter().map(truth).collect();
    let (model, _) = trainer::train(train, &y, None, &desk_setup(LossKind::Combined), |_| {}).unwrap();

    let mut hits = 0;
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let r = evosearch::ea_search(&model, &EaConfig { seed, max_nodes: 5, ..Default::default() }).unwrap();
        let best = r.top.iter().map(|s| truth(&s.cell)).fold(f64::NEG_INFINITY, f64::max);
        let pct = metrics::rank_of(best, &ranked);
        worst = worst.max(pct);
        hits += usize::from(pct < 1.0);
    }
    outcome(hits >= 18, format!("{hits}/20 seeds in the top 1% of {} cells (worst {worst:.2}%)", space.len()))
}

fn renas(dir: &Path, threads: &str, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_renas"))
        .current_dir(dir)
        .env("RENAS_THREADS", threads)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("renas {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

/// Runs the full command sequence in a fresh directory and returns the
/// produced files.
fn pipeline_run(threads: &str) -> Result<Vec<(&'static str, Vec<u8>)>, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    renas(d, threads, &["gen-synthetic", "--max-nodes", "5", "--out", "s.jsonl"])?;
    renas(d, threads, &[
        "train", "--data", "s.jsonl", "--split-fraction", "0.2", "--epochs", "8", "--batch", "128", "--seed", "3",
        "--model", "m.bin", "--log", "log.jsonl",
    ])?;
    renas(d, threads, &["search", "--model", "m.bin", "--max-nodes", "5", "--generations", "100", "--seed", "4", "--out", "ea.jsonl"])?;
    renas(d, threads, &["search", "--model", "m.bin", "--mode", "exhaustive", "--max-nodes", "5", "--out", "ex.jsonl"])?;
    ["s.jsonl", "m.bin", "log.jsonl", "ea.jsonl", "ex.jsonl"]
        .into_iter()
        .map(|f| std::fs::read(d.join(f)).map(|b| (f, b)).map_err(|e| format!("{f}: {e}")))
        .collect()
}

fn determinism() -> Outcome {
    let runs = (pipeline_run("1"), pipeline_run("4"));
    let (a, b) = match runs {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return outcome(false, e),
    };
    let mut same = Vec::new();
    for ((name, x), (_, y)) in a.iter().zip(&b) {
        if x != y || x.is_empty() {
            return outcome(false, format!("{name} differs between runs"));
        }
        same.push(format!("{name} ({} bytes)", x.len()));
    }
    outcome(true, format!("identical across runs with 1 and 4 threads: {}", same.join(", ")))
}

fn main() {
    type Criterion = (&'static str, u64, fn() -> Outcome);
    let criteria: [Criterion; 8] = [
        ("encoding invariants", 10, encoding_invariants),
        ("canonicalization oracle", 60, canonicalization_oracle),
        ("gradient checks", 60, gradient_checks),
        ("ktau oracle", 60, ktau_oracle_check),
        ("admissibility probe", 120, admissibility),
        ("end-to-end synthetic", 600, end_to_end),
        ("search quality", 600, search_quality),
        ("determinism", 600, determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, budget, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        let took = start.elapsed();
        let in_time = took <= Duration::from_secs(budget);
        let pass = o.pass && in_time;
        failed += usize::from(!pass);
        println!(
            "{} {name}: {} [{:.1}s of {budget}s]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
