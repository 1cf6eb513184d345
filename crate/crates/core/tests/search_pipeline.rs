use hanna_core::autodiff::{Graph, Tensor};
use hanna_core::childnet::{evaluate, sample_childnet, train_childnet, ChildNet, ChildTrainConfig};
use hanna_core::costmodel::{profile, CostTable, DeviceModel, Metric};
use hanna_core::data::{stratified_split, Dataset, SyntheticSpec};
use hanna_core::network::{self, Network};
use hanna_core::oracle::{self, micro_supernet_gradient_check, MicroSpace};
use hanna_core::searchspace::{build_macro, ArchSource, NUM_CANDIDATES};
use hanna_core::supernet::{
    expected_cost, expected_cost_value, sample_gumbel, supernet_forward, total_loss, LossKnobs,
    Theta,
};
use hanna_core::trainer::{run_search, SearchConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn micro_supernet_gradients_match_finite_differences() {
    for seed in 0..10 {
        let err = micro_supernet_gradient_check(seed, 1e-6, 1e-3).unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn gumbel_mean_is_euler_mascheroni() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let draws = sample_gumbel(&mut rng, 1000, 1000);
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    assert!((mean - 0.577_215_664_9).abs() < 0.005, "{mean}");
    let mut again = ChaCha8Rng::seed_from_u64(42);
    assert_eq!(sample_gumbel(&mut again, 3, 3), draws[..9]);
}

#[test]
fn saturated_theta_reduces_mixture_to_one_block() {
    let arch = build_macro(ArchSource::Preset("desk:1"), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = Network::supernet(&arch, &mut rng).unwrap();
    let x = Tensor::from_fn(&[2, 3, 8, 8], |i| ((i * 7) % 13) as f64 / 13.0 - 0.5);
    let (lat, ener) = profile(&DeviceModel::default(), &arch).unwrap();
    for chosen in [0, 5, 8] {
        let mut theta = Theta::constant(&arch, 0.0);
        theta.row_mut(0)[chosen] = 1e6;
        let mut g = Graph::new();
        let vars = net.register(&mut g, false);
        let xv = g.leaf(&x);
        let t = theta.register(&mut g, false);
        let noise = vec![0.0; NUM_CANDIDATES];
        let out = supernet_forward(&mut g, &arch, &vars, xv, t, &noise, 1.0, (&lat, &ener)).unwrap();
        let mixed = g.value(out.logits).to_vec();

        let mut direct = vars.clone();
        direct.layers[0].retain(|(c, _)| *c == chosen);
        let d = network::forward(&mut g, &arch, &direct, xv, None).unwrap();
        assert_eq!(mixed, g.value(d), "column {chosen}");
        assert_eq!(g.scalar_value(out.lat), lat.get(0, chosen).unwrap());
    }
}

#[test]
fn desk_forward_shapes_and_positive_costs() {
    let arch = build_macro(ArchSource::Preset("desk"), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net = Network::supernet(&arch, &mut rng).unwrap();
    let (lat, ener) = profile(&DeviceModel::default(), &arch).unwrap();
    let theta = Theta::constant(&arch, 0.0);
    let mut g = Graph::new();
    let vars = net.register(&mut g, true);
    let x = g.leaf(&Tensor::full(&[4, 3, 8, 8], 0.1));
    let t = theta.register(&mut g, true);
    let noise = sample_gumbel(&mut rng, arch.num_tbs(), NUM_CANDIDATES);
    let out = supernet_forward(&mut g, &arch, &vars, x, t, &noise, 5.0, (&lat, &ener)).unwrap();
    assert_eq!(g.shape(out.logits), &[4, 4]);
    assert!(g.scalar_value(out.lat) > 0.0 && g.scalar_value(out.ener) > 0.0);
    let bad = g.leaf(&Tensor::zeros(&[4, 3, 6, 6]));
    assert!(supernet_forward(&mut g, &arch, &vars, bad, t, &noise, 5.0, (&lat, &ener)).is_err());
}

#[test]
fn expected_cost_equals_enumerated_expectation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let space = MicroSpace::random(&mut rng, 3, 3).unwrap();
        let theta = Theta::new(3, 3, (0..9).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let probs = oracle::architecture_probabilities(&theta, &space).unwrap();
        let all = oracle::enumerate(&space);
        assert_eq!(all.len(), 27);
        let exact: f64 = all.iter().zip(&probs).map(|(a, p)| p * a.lat).sum();
        let relaxed = expected_cost_value(&theta.probabilities(), &space.lat).unwrap();
        assert!((exact - relaxed).abs() < 1e-12);
    }
}

#[test]
fn expected_cost_examples_and_errors() {
    let t = CostTable::new(Metric::Latency, vec![vec![Some(2.0), Some(4.0)]]).unwrap();
    assert_eq!(expected_cost_value(&[0.5, 0.5], &t).unwrap(), 3.0);
    assert_eq!(expected_cost_value(&[0.0, 1.0], &t).unwrap(), 4.0);
    assert!(expected_cost_value(&[1.0], &t).is_err());
    let absent = CostTable::new(Metric::Latency, vec![vec![Some(2.0), None]]).unwrap();
    assert!(expected_cost_value(&[0.5, 0.5], &absent).is_err());
}

#[test]
fn loss_gradient_with_respect_to_latency() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let knobs = LossKnobs::new(
            rng.gen_range(0.0..2.0),
            rng.gen_range(0.1..3.0),
            rng.gen_range(0.0..2.0),
            rng.gen_range(0.1..3.0),
        )
        .unwrap();
        let (ce, lat, ener) = (rng.gen_range(0.0..3.0), rng.gen_range(0.01..10.0), rng.gen_range(0.01..10.0));
        let mut g = Graph::new();
        let c = g.leaf(&Tensor::new(&[1], vec![ce]).unwrap().with_grad());
        let l = g.leaf(&Tensor::new(&[1], vec![lat]).unwrap().with_grad());
        let e = g.leaf(&Tensor::new(&[1], vec![ener]).unwrap().with_grad());
        let (total, parts) = total_loss(&mut g, c, l, e, &knobs).unwrap();
        let want = ce + knobs.alpha * lat.powf(knobs.beta) + knobs.gamma * ener.powf(knobs.delta);
        assert!((parts.total - want).abs() <= 1e-12 * want.abs().max(1.0));
        g.backward(total).unwrap();
        let dl = g.grad(l).unwrap()[0];
        let analytic = knobs.alpha * knobs.beta * lat.powf(knobs.beta - 1.0);
        assert!((dl - analytic).abs() <= 1e-9 * analytic.abs().max(1.0));
        assert_eq!(g.grad(c).unwrap()[0], 1.0);
    }
}

#[test]
fn expected_cost_gradient_is_the_table() {
    let t = CostTable::new(Metric::Energy, vec![vec![Some(1.5), Some(0.25), Some(3.0)]]).unwrap();
    let mut g = Graph::new();
    let m = g.leaf(&Tensor::new(&[1, 3], vec![0.2, 0.3, 0.5]).unwrap().with_grad());
    let e = expected_cost(&mut g, m, &t).unwrap();
    g.backward(e).unwrap();
    assert_eq!(g.grad(m).unwrap(), &[1.5, 0.25, 3.0]);
}

fn small_search() -> SearchConfig {
    SearchConfig {
        epochs: 3,
        warmup_epochs: 1,
        batch_size: 32,
        ..SearchConfig::desk()
    }
}

#[test]
fn search_is_deterministic_and_logs_are_consistent() {
    let arch = build_macro(ArchSource::Preset("desk:2"), 4).unwrap();
    let (lat, ener) = profile(&DeviceModel::default(), &arch).unwrap();
    let mut ds = Dataset::synthetic(&SyntheticSpec { samples: 96, ..Default::default() }).unwrap();
    ds.standardize();
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let cfg = SearchConfig {
            log_dir: Some(dir.path().join(sub)),
            ..small_search()
        };
        run_search(&cfg, &arch, (&lat, &ener), &ds).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(a.theta, b.theta);
    for name in ["search_log.csv", "theta_epoch_0.txt", "theta_epoch_2.txt"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(name)).unwrap(),
            std::fs::read(dir.path().join("b").join(name)).unwrap()
        );
    }
    assert_eq!(a.logs.len(), 3);
    assert!(a.logs[0].theta.is_none() && a.logs[1].theta.is_some());
    let knobs = small_search().knobs;
    for log in &a.logs {
        for s in std::iter::once(&log.weights).chain(log.theta.as_ref()) {
            let want = s.ce + knobs.alpha * s.lat.powf(knobs.beta) + knobs.gamma * s.ener.powf(knobs.delta);
            assert!((s.total - want).abs() < 1e-9);
        }
    }
    let csv = std::fs::read_to_string(dir.path().join("a/search_log.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "epoch,phase,tau,ce,lat,ener,total,acc");
    assert_eq!(csv.lines().count(), 1 + 3 + 2);
    // Reloaded snapshot equals the returned theta.
    let (theta, epoch, _) = Theta::load(&dir.path().join("a/theta_epoch_2.txt")).unwrap();
    assert_eq!((theta, epoch), (a.theta, 2));
}

#[test]
fn search_rejects_mismatched_inputs() {
    let arch = build_macro(ArchSource::Preset("desk:2"), 4).unwrap();
    let other = build_macro(ArchSource::Preset("desk:3"), 4).unwrap();
    let (lat, ener) = profile(&DeviceModel::default(), &other).unwrap();
    let ds = Dataset::synthetic(&SyntheticSpec { samples: 32, ..Default::default() }).unwrap();
    assert!(run_search(&small_search(), &arch, (&lat, &ener), &ds).is_err());
    let (lat, ener) = profile(&DeviceModel::default(), &arch).unwrap();
    let three = Dataset::synthetic(&SyntheticSpec { samples: 30, classes: 3, ..Default::default() }).unwrap();
    assert!(run_search(&small_search(), &arch, (&lat, &ener), &three).is_err());
}

#[test]
fn diverging_search_reports_epoch_and_phase() {
    let arch = build_macro(ArchSource::Preset("desk:2"), 4).unwrap();
    let (lat, ener) = profile(&DeviceModel::default(), &arch).unwrap();
    let ds = Dataset::synthetic(&SyntheticSpec { samples: 64, ..Default::default() }).unwrap();
    let mut cfg = small_search();
    cfg.weight_opt.lr = 1e6;
    match run_search(&cfg, &arch, (&lat, &ener), &ds) {
        Err(hanna_core::Error::NonFinite { phase, .. }) => assert_eq!(phase, "weights"),
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

fn two_class_data() -> (Dataset, Dataset) {
    let mut all = Dataset::synthetic(&SyntheticSpec {
        samples: 256,
        classes: 2,
        noise: 0.5,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    all.standardize();
    stratified_split(&all, 0.5, 5).unwrap()
}

#[test]
fn child_learns_separable_data() {
    let arch = build_macro(ArchSource::Preset("desk"), 2).unwrap();
    let child = ChildNet {
        arch: "desk".into(),
        choices: vec![2, 0, 8, 6, 8, 1],
    };
    let (train, test) = two_class_data();
    let cfg = ChildTrainConfig::desk();
    let acc = train_childnet(&child, &arch, &train, &test, &cfg).unwrap();
    assert!(acc >= 0.95, "{acc}");
    assert_eq!(acc, train_childnet(&child, &arch, &train, &test, &cfg).unwrap());
}

#[test]
fn child_on_shuffled_labels_is_at_chance() {
    let arch = build_macro(ArchSource::Preset("desk"), 4).unwrap();
    let child = ChildNet {
        arch: "desk".into(),
        choices: vec![0; 6],
    };
    let mut all = Dataset::synthetic(&SyntheticSpec { samples: 512, ..Default::default() }).unwrap();
    all.standardize();
    let all = all.with_shuffled_labels(3);
    let (train, test) = stratified_split(&all, 0.5, 3).unwrap();
    let acc = train_childnet(&child, &arch, &train, &test, &ChildTrainConfig::desk()).unwrap();
    assert!((acc - 0.25).abs() <= 0.1, "{acc}");
}

#[test]
fn untrained_child_evaluates_within_range() {
    let arch = build_macro(ArchSource::Preset("desk:2"), 2).unwrap();
    let theta = Theta::constant(&arch, 0.0);
    let child = sample_childnet(&theta, &arch).unwrap();
    assert_eq!(child.choices, vec![0, 0]);
    let net = Network::child(&arch, &child.choices, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let (_, test) = two_class_data();
    let acc = evaluate(&net, &arch, &test, 16).unwrap();
    assert!((0.0..=1.0).contains(&acc));
}
