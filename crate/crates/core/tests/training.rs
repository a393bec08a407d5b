use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sliceout::nn::{Keep, ModelSpec};
use sliceout::slicing::{SchemeKind, SliceScheme};
use sliceout::trainer::{batch_tensor, train, Dataset, OptimizerConfig, Split, TrainConfig, Trainer};

fn toy_data(classes: usize, dim: usize, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..classes).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut split = |count: usize| {
        let mut s = Split::default();
        for i in 0..count {
            let c = i % classes;
            s.x.extend(centers[c].iter().map(|&m| m + 0.3 * rng.random_range(-1.0..1.0)));
            s.y.push(c);
        }
        s
    };
    let train = split(n);
    let test = split(n / 4);
    Dataset { dim, classes, train, test }
}

fn config(kind: SchemeKind, rate: f64, epochs: usize) -> TrainConfig {
    TrainConfig {
        model: ModelSpec::Mlp { hidden: vec![32, 32] },
        scheme: SliceScheme { kind, rate, ..SliceScheme::none() },
        optimizer: OptimizerConfig::default(),
        epochs,
        batch: 16,
        seed: 4,
        cutoff_fraction: None,
        precision: Default::default(),
    }
}

fn range(k: &Keep, m: usize) -> std::ops::Range<usize> {
    match k {
        Keep::All => 0..m,
        Keep::Slice(s) => s.start..s.start + s.width,
        Keep::Units(_) => panic!("slices only"),
    }
}

#[test]
fn untouched_parameters_stay_bit_identical() {
    let data = toy_data(5, 20, 80, 1);
    let dims = [20, 32, 32, 5];
    let spec = ModelSpec::Mlp { hidden: vec![32, 32] };
    let net = spec.build::<f64>(20, 5, 7, false).unwrap();
    let scheme = SliceScheme { kind: SchemeKind::SliceOut, rate: 0.5, ..SliceScheme::none() };
    let mut tr = Trainer::new(net, scheme, OptimizerConfig::default(), 3).unwrap();
    let before = tr.snapshot();

    // covered[layer] = (rows, cols) masks
    let mut covered: Vec<(Vec<bool>, Vec<bool>)> = dims.windows(2).map(|w| (vec![false; w[1] * w[0]], vec![false; w[1]])).collect();
    for step in 0..10 {
        let rows: Vec<usize> = (step * 8..step * 8 + 8).collect();
        let x = batch_tensor::<f64>(&data.train, data.dim, &rows).unwrap();
        let labels: Vec<usize> = rows.iter().map(|&r| data.train.y[r]).collect();
        let plans = tr.sample_plans(true).unwrap();
        tr.step_with_plans(&x, &labels, &plans).unwrap();
        for l in 0..3 {
            let (n, m) = (dims[l], dims[l + 1]);
            let out = if l < 2 { range(&plans[l].keep, m) } else { 0..m };
            let inp = if l == 0 { 0..n } else { range(&plans[l - 1].keep, n) };
            for r in out.clone() {
                covered[l].1[r] = true;
                for c in inp.clone() {
                    covered[l].0[r * n + c] = true;
                }
            }
        }
    }
    let after = tr.snapshot();
    let (mut untouched, mut moved) = (0, 0);
    for (b, a) in before.iter().zip(&after) {
        let l: usize = b.name[2..3].parse().unwrap();
        let mask = if b.name.ends_with("weight") { &covered[l].0 } else { &covered[l].1 };
        for (i, (&x0, &x1)) in b.values.iter().zip(&a.values).enumerate() {
            if mask[i] {
                moved += usize::from(x0 != x1);
            } else {
                untouched += 1;
                assert_eq!(x0.to_bits(), x1.to_bits(), "{} element {i} changed outside every slice", b.name);
            }
        }
    }
    assert!(untouched > 0 && moved > 0, "untouched {untouched} moved {moved}");
}

#[test]
fn zero_rate_sliceout_matches_plain_run() {
    let data = toy_data(4, 12, 96, 2);
    let plain = train(&config(SchemeKind::None, 0.0, 3), &data).unwrap();
    let sliced = train(&config(SchemeKind::SliceOut, 0.0, 3), &data).unwrap();
    assert_eq!(plain.params, sliced.params);
    for (a, b) in plain.epochs.iter().zip(&sliced.epochs) {
        assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
        assert_eq!(a.test_acc.to_bits(), b.test_acc.to_bits());
    }
}

#[test]
fn same_seed_same_run() {
    let data = toy_data(4, 12, 96, 2);
    let cfg = config(SchemeKind::SliceOut, 0.4, 3);
    let a = train(&cfg, &data).unwrap();
    let b = train(&cfg, &data).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.epochs.iter().map(|e| e.train_loss).collect::<Vec<_>>(), b.epochs.iter().map(|e| e.train_loss).collect::<Vec<_>>());
    let mut other = cfg.clone();
    other.seed = 5;
    assert_ne!(train(&other, &data).unwrap().params, a.params);
}

#[test]
fn cutoff_epochs_run_unsliced() {
    let data = toy_data(4, 12, 48, 3);
    let mut cfg = config(SchemeKind::SliceOut, 0.3, 20);
    cfg.cutoff_fraction = Some(0.1);
    let shapes: Vec<_> = cfg.model.build::<f64>(12, 4, 0, false).unwrap().store().iter().map(|p| p.value.shape().to_vec()).collect();
    let r = train(&cfg, &data).unwrap();
    for e in &r.epochs {
        assert_eq!(e.slice_samples == 0, e.epoch > 18, "epoch {}", e.epoch);
        assert_eq!(e.sliced, e.epoch <= 18);
    }
    let after: Vec<_> = r.params.iter().map(|p| p.shape.clone()).collect();
    assert_eq!(shapes, after);
}

#[test]
fn every_scheme_learns_a_toy_problem() {
    let data = toy_data(4, 12, 160, 5);
    for (kind, rate) in [
        (SchemeKind::None, 0.0),
        (SchemeKind::Standard, 0.3),
        (SchemeKind::Controlled, 0.3),
        (SchemeKind::SliceOut, 0.3),
    ] {
        let r = train(&config(kind, rate, 15), &data).unwrap();
        assert!(r.last().train_acc > 0.9, "{kind}: {}", r.last().train_acc);
    }
}

#[test]
fn other_models_train() {
    let mut data = toy_data(3, 16, 24, 6);
    data.test = Split::default();
    let models = [
        ModelSpec::Resblock { image: [1, 4, 4], channels: 4, blocks: 1, placement: Default::default(), delayed: false, batch_norm: true },
        ModelSpec::Attention { tokens: 4, d_model: 8, heads: 2, ffn: 16 },
    ];
    for model in models {
        for kind in [SchemeKind::Standard, SchemeKind::SliceOut] {
            let cfg = TrainConfig { model: model.clone(), ..config(kind, 0.25, 2) };
            let r = train(&cfg, &data).unwrap();
            assert!(r.last().train_loss.is_finite());
        }
    }
}
