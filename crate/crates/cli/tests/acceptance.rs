//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use hanna_core::analysis::{dominance, pareto_front, read_records, spearman, v_metrics, Dominance, ModelRecord};
use hanna_core::autodiff::{Graph, Tensor};
use hanna_core::childnet::{childnet_cost, sample_childnet, train_childnet, ChildNet, ChildTrainConfig};
use hanna_core::costmodel::{profile, CostTable, DeviceModel, Metric};
use hanna_core::data::{stratified_split, Dataset, SyntheticSpec};
use hanna_core::oracle::{self, gradient_check, MicroSpace};
use hanna_core::searchspace::{build_macro, ArchSource, MacroArch, NUM_CANDIDATES};
use hanna_core::supernet::{expected_cost_value, total_loss, LossBreakdown, LossKnobs, Theta};
use hanna_core::trainer::{run_search, SearchConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn gradient_suite() -> Outcome {
    let mut ops_worst = 0.0f64;
    let mut worst_op = "";
    let mut note = |name: &'static str, err: f64| {
        if err > ops_worst {
            ops_worst = err;
            worst_op = name;
        }
    };
    let seeds = 10u64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        for (cin, cout, k, s, groups) in [(4, 6, 3, 2, 1), (4, 4, 5, 1, 4), (4, 6, 1, 1, 2)] {
            let inputs = [
                random(&mut rng, &[2, cin, 5, 5]),
                random(&mut rng, &[cout, cin / groups, k, k]),
                random(&mut rng, &[cout]),
            ];
            let err = gradient_check(&inputs, 1e-5, 1e-3, |g, v| g.conv2d(v[0], v[1], Some(v[2]), s, k / 2, groups)).unwrap();
            note("conv2d", err);
        }
        let a = random(&mut rng, &[2, 4, 3, 3]);
        let b = random(&mut rng, &[2, 4, 3, 3]);
        note("relu", gradient_check(&[a.clone()], 1e-5, 1e-3, |g, v| Ok(g.relu(v[0]))).unwrap());
        note("add", gradient_check(&[a.clone(), b.clone()], 1e-5, 1e-3, |g, v| g.add(v[0], v[1])).unwrap());
        note("mul", gradient_check(&[a.clone(), b.clone()], 1e-5, 1e-3, |g, v| g.mul(v[0], v[1])).unwrap());
        note("sum", gradient_check(&[a.clone()], 1e-5, 1e-3, |g, v| Ok(g.sum(v[0]))).unwrap());
        note("scale", gradient_check(&[a.clone()], 1e-5, 1e-3, |g, v| Ok(g.scale(v[0], -1.7))).unwrap());
        note("global_avg_pool", gradient_check(&[a.clone()], 1e-5, 1e-3, |g, v| g.global_avg_pool(v[0])).unwrap());
        note("channel_shuffle", gradient_check(&[a.clone()], 1e-5, 1e-3, |g, v| g.channel_shuffle(v[0], 2)).unwrap());
        let w: Vec<f64> = (0..a.numel()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        note("dot_const", gradient_check(&[a.clone()], 1e-5, 1e-3, |g, v| g.dot_const(v[0], &w)).unwrap());
        let pos = Tensor::new(&[3], (0..3).map(|_| rng.gen_range(0.2..3.0)).collect()).unwrap();
        for e in [0.5, 1.0, 1.5, 2.0] {
            note("pow_floor", gradient_check(&[pos.clone()], 1e-6, 1e-3, |g, v| Ok(g.pow_floor(v[0], e, 1e-12))).unwrap());
        }
        let lin = [random(&mut rng, &[3, 5]), random(&mut rng, &[5, 4]), random(&mut rng, &[4])];
        note("linear", gradient_check(&lin, 1e-5, 1e-3, |g, v| g.linear(v[0], v[1], v[2])).unwrap());
        let logits = random(&mut rng, &[3, 4]);
        note("cross_entropy", gradient_check(&[logits], 1e-5, 1e-3, |g, v| g.softmax_cross_entropy(v[0], &[0, 3, 1])).unwrap());
        let mut theta = random(&mut rng, &[2, 4]);
        theta.data_mut()[5] = f64::NEG_INFINITY;
        let noise: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..2.0)).collect();
        for tau in [0.5, 1.0, 3.0] {
            note("gumbel_softmax", gradient_check(&[theta.clone()], 1e-6, 1e-3, |g, v| g.gumbel_softmax(v[0], &noise, tau)).unwrap());
        }
        let mask = Tensor::new(&[2, 3], (0..6).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let xs = [mask, random(&mut rng, &[1, 2, 2, 2]), random(&mut rng, &[1, 2, 2, 2])];
        note("mix", gradient_check(&xs, 1e-5, 1e-3, |g, v| g.mix(&[(0, v[1]), (2, v[2])], v[0], 1)).unwrap());
        let knobs = LossKnobs::new(rng.gen_range(0.0..1.0), rng.gen_range(0.5..2.0), rng.gen_range(0.0..1.0), rng.gen_range(0.5..2.0)).unwrap();
        let parts = [0.0, 0.0, 0.0].map(|_: f64| Tensor::new(&[1], vec![rng.gen_range(0.1..3.0)]).unwrap());
        note("total_loss", gradient_check(&parts, 1e-6, 1e-3, |g, v| Ok(total_loss(g, v[0], v[1], v[2], &knobs)?.0)).unwrap());
    }
    let mut e2e_worst = 0.0f64;
    for seed in 0..seeds {
        e2e_worst = e2e_worst.max(oracle::micro_supernet_gradient_check(seed, 1e-6, 1e-3).unwrap());
    }
    outcome(
        ops_worst < 1e-5 && e2e_worst < 1e-4,
        format!("{seeds} seeds; ops max rel err {ops_worst:.2e} ({worst_op}), end-to-end {e2e_worst:.2e}"),
    )
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn linearity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let logits: Vec<f64> = (0..9).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let rows: Vec<Vec<Option<f64>>> = (0..3).map(|_| (0..3).map(|_| Some(rng.gen_range(0.0..10.0))).collect()).collect();
        let table = CostTable::new(Metric::Latency, rows.clone()).unwrap();
        let p: Vec<Vec<f64>> = logits.chunks(3).map(softmax).collect();
        // Enumerate all 27 architectures and weight each path cost.
        let mut exact = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    let prob = p[0][a] * p[1][b] * p[2][c];
                    let cost = rows[0][a].unwrap() + rows[1][b].unwrap() + rows[2][c].unwrap();
                    exact += prob * cost;
                }
            }
        }
        let theta = Theta::new(3, 3, logits).unwrap();
        let relaxed = expected_cost_value(&theta.probabilities(), &table).unwrap();
        worst = worst.max((relaxed - exact).abs());
    }
    outcome(worst <= 1e-12, format!("100 pairs, max |relaxed - enumerated| {worst:.2e}"))
}

fn gumbel_max() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draws = 20_000;
    let (mut cell_worst, mut tv_worst) = (0.0f64, 0.0f64);
    for _ in 0..5 {
        let space = MicroSpace::random(&mut rng, 3, 3).unwrap();
        let logits: Vec<f64> = (0..9).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let theta = Theta::new(3, 3, logits.clone()).unwrap();
        let freq = oracle::gumbel_frequencies(&theta, &space, 1e-3, draws, &mut rng).unwrap();
        let p: Vec<Vec<f64>> = logits.chunks(3).map(softmax).collect();
        let exact: Vec<f64> = (0..27).map(|i| p[0][i / 9] * p[1][(i / 3) % 3] * p[2][i % 3]).collect();
        tv_worst = tv_worst.max(oracle::total_variation(&freq, &exact));
        for l in 0..3 {
            for c in 0..3 {
                let digit = |i: usize| [i / 9, (i / 3) % 3, i % 3][l];
                let marginal: f64 = (0..27).filter(|&i| digit(i) == c).map(|i| freq[i]).sum();
                cell_worst = cell_worst.max((marginal - p[l][c]).abs());
            }
        }
    }
    outcome(
        cell_worst <= 0.02 && tv_worst <= 0.03,
        format!("5 spaces x {draws} draws; max cell gap {cell_worst:.4}, max TV {tv_worst:.4}"),
    )
}

fn loss_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut tot_worst, mut grad_worst) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let ce = rng.gen_range(0.0..5.0);
        let lat: f64 = rng.gen_range(1e-3..20.0);
        let ener: f64 = rng.gen_range(1e-3..20.0);
        let k = LossKnobs::new(rng.gen_range(0.0..2.0), rng.gen_range(0.1..3.0), rng.gen_range(0.0..2.0), rng.gen_range(0.1..3.0)).unwrap();
        let want = ce + k.alpha * lat.powf(k.beta) + k.gamma * ener.powf(k.delta);
        let got = LossBreakdown::compute(ce, lat, ener, &k).unwrap().total;
        tot_worst = tot_worst.max((got - want).abs() / want.abs().max(1.0));

        let mut g = Graph::new();
        let cv = g.leaf(&Tensor::new(&[1], vec![ce]).unwrap().with_grad());
        let lv = g.leaf(&Tensor::new(&[1], vec![lat]).unwrap().with_grad());
        let ev = g.leaf(&Tensor::new(&[1], vec![ener]).unwrap().with_grad());
        let (t, _) = total_loss(&mut g, cv, lv, ev, &k).unwrap();
        g.backward(t).unwrap();
        let d = g.grad(lv).unwrap()[0];
        let want_d = k.alpha * k.beta * lat.powf(k.beta - 1.0);
        grad_worst = grad_worst.max((d - want_d).abs() / want_d.abs().max(1.0));
    }
    outcome(
        tot_worst <= 1e-12 && grad_worst <= 1e-9,
        format!("1000 inputs; total err {tot_worst:.2e}, d/dlat err {grad_worst:.2e}"),
    )
}

/// Block `(3 * l) % 8` costs 1 in layer `l`; every other admissible block 10.
fn rigged_tables(arch: &MacroArch) -> (CostTable, CostTable) {
    let rows: Vec<Vec<Option<f64>>> = arch
        .tbs_layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            (0..NUM_CANDIDATES)
                .map(|c| layer.admits(c).then(|| if c == (3 * l) % 8 { 1.0 } else { 10.0 }))
                .collect()
        })
        .collect();
    (
        CostTable::new(Metric::Latency, rows.clone()).unwrap(),
        CostTable::new(Metric::Energy, rows).unwrap(),
    )
}

struct Rig {
    arch: MacroArch,
    tables: (CostTable, CostTable),
    train: Dataset,
    test: Dataset,
}

fn rig() -> Rig {
    let arch = build_macro(ArchSource::Preset("desk"), 4).unwrap();
    let tables = rigged_tables(&arch);
    let mut all = Dataset::synthetic(&SyntheticSpec { samples: 512, ..Default::default() }).unwrap();
    all.standardize();
    let (train, test) = stratified_split(&all, 0.5, 0).unwrap();
    Rig { arch, tables, train, test }
}

fn searched_child(rig: &Rig, knobs: LossKnobs, seed: u64) -> (ChildNet, f64, f64) {
    let cfg = SearchConfig { knobs, seed, ..SearchConfig::desk() };
    let result = run_search(&cfg, &rig.arch, (&rig.tables.0, &rig.tables.1), &rig.train).unwrap();
    let child = sample_childnet(&result.theta, &rig.arch).unwrap();
    let (lat, ener) = childnet_cost(&child, &rig.tables.0, &rig.tables.1).unwrap();
    (child, lat, ener)
}

fn search_effectiveness(rig: &Rig) -> Outcome {
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..10 {
        let mut acc = [0.0; 2];
        let mut lat = [0.0; 2];
        for (i, alpha) in [0.0, 0.2].into_iter().enumerate() {
            let (child, l, _) = searched_child(rig, LossKnobs::new(alpha, 1.0, 0.0, 1.0).unwrap(), seed);
            let cfg = ChildTrainConfig { seed, ..ChildTrainConfig::desk() };
            acc[i] = train_childnet(&child, &rig.arch, &rig.train, &rig.test, &cfg).unwrap();
            lat[i] = l;
        }
        if lat[1] < lat[0] && (acc[1] - acc[0]).abs() <= 0.03 {
            wins += 1;
        }
        rows.push(format!("{seed}:{}/{}@{:.3}/{:.3}", lat[0], lat[1], acc[0], acc[1]));
    }
    outcome(wins >= 8, format!("{wins}/10 seeds (seed:lat0/lat.2@acc0/acc.2 {})", rows.join(" ")))
}

fn knob_monotonicity(rig: &Rig) -> Outcome {
    let knobs = [0.0, 0.25, 0.5, 1.0];
    let base = searched_child(rig, LossKnobs::new(0.0, 1.0, 0.0, 1.0).unwrap(), 0);
    let mut lats = vec![base.1];
    let mut eners = vec![base.2];
    for &w in &knobs[1..] {
        lats.push(searched_child(rig, LossKnobs::new(w, 1.0, 0.0, 1.0).unwrap(), 0).1);
        eners.push(searched_child(rig, LossKnobs::new(0.0, 1.0, w, 1.0).unwrap(), 0).2);
    }
    let rl = spearman(&knobs, &lats);
    let re = spearman(&knobs, &eners);
    outcome(
        rl <= 0.0 && re <= 0.0,
        format!("alpha sweep lat {lats:?} rho {rl:.3}; gamma sweep ener {eners:?} rho {re:.3}"),
    )
}

fn v_metric_fixture() -> Outcome {
    let k = LossKnobs::new(0.5, 1.5, 0.5, 0.5).unwrap();
    let (vl, ve) = v_metrics(&k, 3.5, 18.43).unwrap();
    let d = dominance(vl, ve);
    let pass = (vl - 3.27395).abs() <= 1e-4
        && (ve - 2.14651).abs() <= 1e-4
        && (d.ratio - 0.6557).abs() <= 1e-4
        && d.label == Dominance::Latency;
    outcome(pass, format!("vLAT {vl:.5} vENER {ve:.5} ratio {:.4} {}", d.ratio, d.label))
}

fn brute_force(rs: &[ModelRecord]) -> Vec<usize> {
    (0..rs.len())
        .filter(|&i| {
            let s = &rs[i];
            !rs.iter().any(|r| {
                r.accuracy >= s.accuracy
                    && r.latency <= s.latency
                    && r.energy <= s.energy
                    && (r.accuracy > s.accuracy || r.latency < s.latency || r.energy < s.energy)
            })
        })
        .map(|i| rs[i].model_id)
        .collect()
}

fn pareto() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mismatches = 0;
    for set in 0..100 {
        let n = rng.gen_range(1..=500);
        // Half the sets use a coarse grid so ties are common.
        let coarse = set % 2 == 0;
        let draw = |rng: &mut ChaCha8Rng| if coarse { rng.gen_range(0..6) as f64 } else { rng.gen_range(0.0..1.0) };
        let rs: Vec<ModelRecord> = (0..n)
            .map(|i| ModelRecord {
                model_id: i,
                knobs: LossKnobs::default(),
                accuracy: draw(&mut rng),
                latency: draw(&mut rng),
                energy: draw(&mut rng),
                vlat: 0.0,
                vener: 0.0,
                choices: Vec::new(),
            })
            .collect();
        let got: Vec<usize> = pareto_front(&rs).iter().map(|r| r.model_id).collect();
        if got != brute_force(&rs) {
            mismatches += 1;
        }
    }
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/table3.csv");
    let rows = read_records(&fixture).unwrap();
    let kept = pareto_front(&rows).len();
    outcome(
        mismatches == 0 && kept == 3 && rows.len() == 3,
        format!("{mismatches}/100 random sets differ from brute force; fixture keeps {kept}/3"),
    )
}

fn run_cli(dir: &Path, out: &str) -> bool {
    Command::new(env!("CARGO_BIN_EXE_hanna"))
        .args(["--config", "det.cfg", "--seed", "11", "--strict", "--out", out, "search"])
        .current_dir(dir)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("det.cfg"),
        "search.epochs=4\nsearch.warmup_epochs=1\nsearch.batch_size=32\ndata.samples=160\n",
    )
    .unwrap();
    if !(run_cli(dir.path(), "a") && run_cli(dir.path(), "b")) {
        return outcome(false, "search command failed");
    }
    let mut names: Vec<PathBuf> = fs::read_dir(dir.path().join("a")).unwrap().map(|e| e.unwrap().path()).collect();
    names.sort();
    let differing: Vec<String> = names
        .iter()
        .filter(|p| fs::read(p).ok() != fs::read(dir.path().join("b").join(p.file_name().unwrap())).ok())
        .map(|p| p.display().to_string())
        .collect();
    let snapshots = names.iter().filter(|p| p.to_string_lossy().contains("theta_epoch_")).count();
    outcome(
        differing.is_empty() && snapshots > 0,
        format!("{} files compared ({snapshots} theta snapshots); differing {differing:?}", names.len()),
    )
}

fn format_round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let arch = build_macro(ArchSource::Preset("desk"), 4).unwrap();
    let (lat, ener) = profile(&DeviceModel::default(), &arch).unwrap();
    let mut tables = vec![lat, ener];
    for _ in 0..20 {
        let rows = (0..rng.gen_range(1..8))
            .map(|_| {
                (0..NUM_CANDIDATES)
                    .map(|c| (c == 0 || rng.gen_bool(0.8)).then(|| rng.gen_range(0.0..1.0) * 10f64.powi(rng.gen_range(-9..3))))
                    .collect()
            })
            .collect();
        let metric = if rng.gen_bool(0.5) { Metric::Latency } else { Metric::Energy };
        tables.push(CostTable::new(metric, rows).unwrap());
    }
    let mut failures = 0;
    for (i, t) in tables.iter().enumerate() {
        let p = dir.path().join(format!("t{i}.txt"));
        t.save(&p).unwrap();
        let first = fs::read(&p).unwrap();
        CostTable::load(&p).unwrap().save(&p).unwrap();
        failures += usize::from(fs::read(&p).unwrap() != first);
    }
    let mut thetas = 0;
    for i in 0..20 {
        let mut theta = Theta::constant(&arch, 0.0);
        for (c, v) in theta.logits_mut().iter_mut().enumerate() {
            if v.is_finite() {
                *v = rng.gen_range(-30.0..30.0) / (1 + c % 7) as f64;
            }
        }
        let p = dir.path().join(format!("theta{i}.txt"));
        theta.save(&p, i, rng.gen_range(0.1..5.0)).unwrap();
        let first = fs::read(&p).unwrap();
        let (back, epoch, tau) = Theta::load(&p).unwrap();
        back.save(&p, epoch, tau).unwrap();
        failures += usize::from(fs::read(&p).unwrap() != first || back != theta);
        thetas += 1;
    }
    outcome(failures == 0, format!("{} tables, {thetas} theta files; {failures} not byte-identical", tables.len()))
}

fn main() {
    let rig = rig();
    type Check<'a> = (&'static str, Duration, Box<dyn Fn() -> Outcome + 'a>);
    let checks: Vec<Check> = vec![
        ("gradient suite", Duration::from_secs(120), Box::new(gradient_suite)),
        ("expected-cost linearity", Duration::from_secs(10), Box::new(linearity)),
        ("gumbel-max exactness", Duration::from_secs(30), Box::new(gumbel_max)),
        ("loss identity", Duration::MAX, Box::new(loss_identity)),
        ("search effectiveness", Duration::from_secs(15 * 60), Box::new(|| search_effectiveness(&rig))),
        ("knob monotonicity", Duration::MAX, Box::new(|| knob_monotonicity(&rig))),
        ("v-metrics fixture", Duration::MAX, Box::new(v_metric_fixture)),
        ("pareto oracle", Duration::MAX, Box::new(pareto)),
        ("determinism", Duration::MAX, Box::new(determinism)),
        ("format round-trips", Duration::MAX, Box::new(format_round_trips)),
    ];
    let mut failed = 0;
    for (name, budget, check) in checks {
        let start = Instant::now();
        let o = check();
        let took = start.elapsed();
        let pass = o.pass && took <= budget;
        failed += usize::from(!pass);
        let limit = if budget == Duration::MAX { String::new() } else { format!(", limit {}s", budget.as_secs()) };
        println!(
            "{} {name}: {} [{:.1}s{limit}]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64()
        );
    }
    println!("acceptance: {} of 10 criteria passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
