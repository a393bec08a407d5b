//! One PASS/FAIL line per acceptance criterion. Run with `--nocapture` to
//! see the report.

use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sliceout::costmodel::{co2_savings, Co2Inputs, Co2Mode};
use sliceout::nn::{architecture_count, attention_sliceout, enumerate_distinct_masks, AttentionSliceConfig, Keep, ModelSpec, Mode};
use sliceout::slicing::{build_keep_profile, eligible_starts, keep_probability, Normalization, SchemeKind, SliceScheme, SliceSpec};
use sliceout::trainer::{self, batch_tensor, BenchConfig, BenchModel, OptimizerConfig, Precision, TrainConfig, Trainer};
use sliceout::verify::{check_first_moment, check_gradients, instrumented_layer, random_moment_configs, GRAD_TOL};
use sliceout::{Error, Graph, Tensor};
use sliceout_cli::data::gen_blobs;

type Outcome = Result<String, String>;

struct Report {
    results: Vec<(usize, bool)>,
}

impl Report {
    fn run(&mut self, id: usize, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) {
        let t = Instant::now();
        let r = f();
        let took = t.elapsed();
        let (mut ok, mut detail) = match r {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        if took > budget {
            ok = false;
            detail = format!("{detail}; over time budget {budget:?}");
        }
        println!("{} criterion {id} {name} ({:.2}s): {detail}", if ok { "PASS" } else { "FAIL" }, took.as_secs_f64());
        self.results.push((id, ok));
    }
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn moment_exactness() -> Outcome {
    let configs = random_moment_configs(24, 2024).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (net, x) in &configs {
        let r = check_first_moment(net, x, Normalization::Probabilistic, false).map_err(|e| e.to_string())?;
        worst = worst.max(r.first_moment_max_abs_dev);
    }
    ensure(worst < 1e-9, format!("max deviation {worst:e}"))?;
    Ok(format!("{} configs, max first-moment deviation {worst:.2e}", configs.len()))
}

fn keep_probability_oracle() -> Outcome {
    let mut cases = 0;
    for m in 1..=64 {
        for w in 1..=m {
            let starts = eligible_starts(m, w).map_err(|e| e.to_string())?;
            let total = starts.clone().count() as f64;
            let mut sum = 0.0;
            for j in 0..m {
                let p = keep_probability(j, m, w).map_err(|e| e.to_string())?;
                let counted = starts.clone().filter(|&s| s <= j && j < s + w).count() as f64 / total;
                ensure((p - counted).abs() < 1e-15, format!("m={m} w={w} j={j}: {p} vs {counted}"))?;
                sum += p;
            }
            ensure((sum - w as f64).abs() < 1e-12, format!("m={m} w={w}: sum {sum}"))?;
            cases += 1;
        }
    }
    let profile = build_keep_profile(10, 6).map_err(|e| e.to_string())?;
    let want = [0.2, 0.4, 0.6, 0.8, 1.0, 1.0, 0.8, 0.6, 0.4, 0.2];
    ensure(profile.probs.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12), format!("{:?}", profile.probs))?;
    ensure(eligible_starts(10, 6).unwrap().count() == 5, "(10, 6) should have 5 starts")?;
    Ok(format!("{cases} (m, w) pairs enumerated; (10, 6) profile matches"))
}

fn table_instrumentation() -> Outcome {
    let (b, n, m, p) = (128, 1024, 1024, 0.5);
    let s = instrumented_layer(SchemeKind::SliceOut, b, n, m, p, 1).map_err(|e| e.to_string())?;
    let c = instrumented_layer(SchemeKind::Controlled, b, n, m, p, 1).map_err(|e| e.to_string())?;
    ensure(s.multiply_ops == 33_554_432, format!("sliceout multiplies {}", s.multiply_ops))?;
    ensure(c.multiply_ops == 33_554_432, format!("controlled multiplies {}", c.multiply_ops))?;
    ensure(c.copy_elements == 262_144, format!("controlled copied {}", c.copy_elements))?;
    ensure(s.copy_elements == 0, format!("sliceout copied {}", s.copy_elements))?;
    for (b, n, m, p) in [(4, 10, 8, 0.4), (16, 64, 32, 0.3), (3, 7, 5, 0.25)] {
        let (wi, wo) = (sliceout::slicing::slice_width(n, p).unwrap(), sliceout::slicing::slice_width(m, p).unwrap());
        for k in [SchemeKind::SliceOut, SchemeKind::Controlled] {
            let r = instrumented_layer(k, b, n, m, p, 2).map_err(|e| e.to_string())?;
            ensure(r.multiply_ops == (b * wi * wo) as u64, format!("{k} ({b},{n},{m},{p}) multiplies {}", r.multiply_ops))?;
        }
    }
    Ok(format!("multiplies {}, controlled copy {}, sliceout copy {}", s.multiply_ops, c.copy_elements, s.copy_elements))
}

fn architecture_counting() -> Outcome {
    let mut checked = 0;
    for m in 1..=40 {
        for w in 1..=m {
            let got = enumerate_distinct_masks(1, None, m, Some(w)).map_err(|e| e.to_string())?;
            ensure(got == m - w + 1, format!("single m={m} w={w}: {got}"))?;
            ensure(architecture_count(None, Some((m, w))).unwrap() == (m - w + 1) as u64, "closed form")?;
            checked += 1;
        }
    }
    for n in 1..=9 {
        for m in 1..=9 {
            for w1 in 1..=n {
                for w2 in 1..=m {
                    let want = (n - w1 + 1) * (m - w2 + 1);
                    let got = enumerate_distinct_masks(n, Some(w1), m, Some(w2)).map_err(|e| e.to_string())?;
                    ensure(got == want, format!("double n={n} w1={w1} m={m} w2={w2}: {got} vs {want}"))?;
                    checked += 1;
                }
            }
        }
    }
    for (n, w1, m, w2) in [(100, 40, 100, 50), (60, 10, 150, 90)] {
        let want = (n - w1 + 1) * (m - w2 + 1);
        ensure(want <= 10_000, "product bound")?;
        let got = enumerate_distinct_masks(n, Some(w1), m, Some(w2)).map_err(|e| e.to_string())?;
        ensure(got == want, format!("double n={n} w1={w1} m={m} w2={w2}: {got} vs {want}"))?;
        checked += 1;
    }
    Ok(format!("{checked} configurations"))
}

fn gradient_correctness() -> Outcome {
    let r = check_gradients(5).map_err(|e| e.to_string())?;
    ensure(r.max() < GRAD_TOL, format!("{r:?}"))?;
    Ok(format!(
        "dense {:.1e}/{:.1e}, residual {:.1e}, attention {:.1e}",
        r.dense_unsliced, r.dense_sliced, r.residual_channel, r.attention
    ))
}

fn span(k: &Keep, m: usize) -> std::ops::Range<usize> {
    match k {
        Keep::Slice(s) => s.start..s.start + s.width,
        _ => 0..m,
    }
}

fn in_place_slicing() -> Outcome {
    let data = gen_blobs(5, 24, 40, 9, 1.0).map_err(|e| e.to_string())?;
    let dims = [24usize, 48, 48, 5];
    let net = ModelSpec::Mlp { hidden: vec![48, 48] }.build::<f64>(24, 5, 1, false).map_err(|e| e.to_string())?;
    let scheme = SliceScheme { kind: SchemeKind::SliceOut, rate: 0.5, ..SliceScheme::none() };
    let mut tr = Trainer::new(net, scheme, OptimizerConfig::default(), 1).map_err(|e| e.to_string())?;
    let before = tr.snapshot();
    let mut covered: Vec<(Vec<bool>, Vec<bool>)> = dims.windows(2).map(|w| (vec![false; w[0] * w[1]], vec![false; w[1]])).collect();
    for step in 0..10 {
        let rows: Vec<usize> = (step * 16..step * 16 + 16).collect();
        let x = batch_tensor::<f64>(&data.train, data.dim, &rows).map_err(|e| e.to_string())?;
        let labels: Vec<usize> = rows.iter().map(|&r| data.train.y[r]).collect();
        let plans = tr.sample_plans(true).map_err(|e| e.to_string())?;
        tr.step_with_plans(&x, &labels, &plans).map_err(|e| e.to_string())?;
        for l in 0..3 {
            let (n, m) = (dims[l], dims[l + 1]);
            let out = if l < 2 { span(&plans[l].keep, m) } else { 0..m };
            let inp = if l == 0 { 0..n } else { span(&plans[l - 1].keep, n) };
            for r in out {
                covered[l].1[r] = true;
                for c in inp.clone() {
                    covered[l].0[r * n + c] = true;
                }
            }
        }
    }
    let after = tr.snapshot();
    let mut untouched = 0;
    for (b, a) in before.iter().zip(&after) {
        let l: usize = b.name[2..3].parse().unwrap();
        let mask = if b.name.ends_with("weight") { &covered[l].0 } else { &covered[l].1 };
        for (i, (x0, x1)) in b.values.iter().zip(&a.values).enumerate() {
            if !mask[i] {
                untouched += 1;
                ensure(x0.to_bits() == x1.to_bits(), format!("{}[{i}] changed", b.name))?;
            }
        }
    }
    ensure(untouched > 0, "every element was covered; test is vacuous")?;
    Ok(format!("{untouched} never-sliced elements bit-identical after 10 steps"))
}

fn speed_memory_direction() -> Outcome {
    let cfg = BenchConfig { trials: 3, steps: 3, precision: Precision::F32, ..BenchConfig::new(BenchModel::Mlp, 2048, 256, 0.5) };
    let r = trainer::bench_compare(&cfg).map_err(|e| e.to_string())?;
    let s = r.row(SchemeKind::SliceOut).unwrap();
    let c = r.row(SchemeKind::Controlled).unwrap();
    let detail = format!(
        "sliceout time {:.1}% peak {:.1}%, controlled time {:.1}% (of standard)",
        s.rel_time_pct, s.rel_peak_pct, c.rel_time_pct
    );
    let mut misses = Vec::new();
    if s.rel_time_pct > 90.0 {
        misses.push("sliceout time above 90%");
    }
    if (s.rel_peak_pct - 73.0).abs() > 5.0 {
        misses.push("sliceout peak activations not within 73 +/- 5%");
    }
    if c.rel_time_pct < 105.0 {
        misses.push("controlled time below 105%");
    }
    if misses.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", misses.join(", ")))
    }
}

fn training_sanity() -> Outcome {
    let data = gen_blobs(10, 64, 250, 3, 1.0).map_err(|e| e.to_string())?;
    let cfg = |kind, rate| TrainConfig {
        model: ModelSpec::Mlp { hidden: vec![256, 256, 256] },
        scheme: SliceScheme { kind, rate, ..SliceScheme::none() },
        optimizer: OptimizerConfig::default(),
        epochs: 30,
        batch: 64,
        seed: 21,
        cutoff_fraction: None,
        precision: Precision::F64,
    };
    let mut accs = Vec::new();
    let mut none_run = None;
    for (kind, rate) in [(SchemeKind::None, 0.0), (SchemeKind::SliceOut, 0.3), (SchemeKind::Standard, 0.3)] {
        let r = trainer::train(&cfg(kind, rate), &data).map_err(|e| e.to_string())?;
        let acc = r.last().train_acc;
        ensure(acc >= 0.95, format!("{kind} p={rate} train accuracy {acc}"))?;
        accs.push(format!("{kind} {acc:.3}"));
        if kind == SchemeKind::None {
            none_run = Some(r);
        }
    }
    let zero = trainer::train(&cfg(SchemeKind::SliceOut, 0.0), &data).map_err(|e| e.to_string())?;
    let none_run = none_run.unwrap();
    ensure(zero.params == none_run.params, "p=0 sliceout parameters differ from scheme none")?;
    let losses = |r: &trainer::RunRecord| r.epochs.iter().map(|e| e.train_loss.to_bits()).collect::<Vec<_>>();
    ensure(losses(&zero) == losses(&none_run), "p=0 sliceout losses differ from scheme none")?;
    Ok(format!("train accuracy {}; p=0 run bit-identical", accs.join(", ")))
}

fn attention_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut rand_t = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::<f64>::from_vec((0..n).map(|_| rng.random_range(-2.0..2.0)).collect(), shape).unwrap()
    };
    let (t, heads, hd) = (6, 2, 8);
    let d = heads * hd;
    let mut worst = 0.0f64;
    let mut settings = 0;
    for w in 1..=hd {
        for start in 0..=hd - w {
            for mode in [Mode::Train, Mode::Eval] {
                let mut g = Graph::<f64>::new();
                let (q, k, v) = (g.input(rand_t(&[t, d])), g.input(rand_t(&[t, d])), g.input(rand_t(&[t, d])));
                let keep = Keep::Slice(SliceSpec::new(hd, w, start).unwrap());
                let cfg = AttentionSliceConfig { q: keep.clone(), k: keep.clone(), v: keep, ..AttentionSliceConfig::unsliced(d, heads, mode) };
                let out = attention_sliceout(&mut g, q, k, v, &cfg).map_err(|e| e.to_string())?;
                for wv in out.weights {
                    let a = g.value(wv).to_vec();
                    for row in a.chunks(t) {
                        worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                    }
                }
                settings += 1;
            }
        }
    }
    ensure(worst < 1e-12, format!("row sum off by {worst:e}"))?;
    let mut g = Graph::<f64>::new();
    let (q, k, v) = (g.input(rand_t(&[t, d])), g.input(rand_t(&[t, d])), g.input(rand_t(&[t, d])));
    let cfg = AttentionSliceConfig {
        q: Keep::Slice(SliceSpec::new(hd, 4, 0).unwrap()),
        k: Keep::Slice(SliceSpec::new(hd, 4, 2).unwrap()),
        ..AttentionSliceConfig::unsliced(d, heads, Mode::Train)
    };
    ensure(matches!(attention_sliceout(&mut g, q, k, v, &cfg), Err(Error::Alignment(_))), "Q/K mismatch accepted")?;
    Ok(format!("{settings} slice settings, max row-sum error {worst:.1e}; mismatch rejected"))
}

fn expected_width(m: usize, p: f64) -> usize {
    if p == 0.0 {
        m
    } else {
        ((m as f64 * (1.0 - p)).round() as usize).max(1)
    }
}

fn cost_estimator() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_sliceout");
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let kinds = [SchemeKind::None, SchemeKind::Standard, SchemeKind::Controlled, SchemeKind::SliceOut];
    for i in 0..10 {
        let kind = kinds[i % 4];
        let (b, n, m) = (rng.random_range(1..512usize), rng.random_range(1..4096usize), rng.random_range(1..4096usize));
        let p = (rng.random_range(0..19) as f64) * 0.05;
        let o = Command::new(bin)
            .args(["cost", "--scheme", &kind.to_string(), "--b", &b.to_string(), "--n", &n.to_string(), "--m", &m.to_string()])
            .args(["--p", &p.to_string(), "--json"])
            .output()
            .map_err(|e| e.to_string())?;
        ensure(o.status.success(), String::from_utf8_lossy(&o.stderr))?;
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).map_err(|e| e.to_string())?;
        let sliced = matches!(kind, SchemeKind::Controlled | SchemeKind::SliceOut) && p > 0.0;
        let (wi, wo) = if sliced { (expected_width(n, p), expected_width(m, p)) } else { (n, m) };
        let want_copy = if kind == SchemeKind::Controlled && p > 0.0 { wi * wo } else { 0 };
        let got = |k: &str| v[k].as_u64().unwrap_or(u64::MAX);
        let tuple = format!("{kind} b={b} n={n} m={m} p={p}");
        ensure(got("multiply_ops") == (b * wi * wo) as u64, format!("{tuple}: multiplies {}", got("multiply_ops")))?;
        ensure(got("extra_copy_elements") == want_copy as u64, format!("{tuple}: copy {}", got("extra_copy_elements")))?;
        ensure(got("activation_elements") == (b * wo) as u64, format!("{tuple}: activations {}", got("activation_elements")))?;
    }
    let fewer = co2_savings(Co2Mode::FewerMachines, &Co2Inputs { memory_gain: 0.23, pool: 4, ..Co2Inputs::default() });
    let plain = co2_savings(Co2Mode::PlainSpeedup, &Co2Inputs { speedup: 0.41, ..Co2Inputs::default() });
    ensure(fewer == Ok(0.25), format!("fewer machines {fewer:?}"))?;
    ensure(plain == Ok(0.41), format!("plain speedup {plain:?}"))?;
    Ok("10 random tuples match; CO2 0.25 and 0.41".into())
}

#[test]
fn acceptance() {
    let mut r = Report { results: Vec::new() };
    let s = Duration::from_secs;
    r.run(1, "moment exactness", s(10), moment_exactness);
    r.run(2, "keep-probability oracle", s(5), keep_probability_oracle);
    r.run(3, "cost instrumentation", s(30), table_instrumentation);
    r.run(4, "architecture counting", s(10), architecture_counting);
    r.run(5, "gradient correctness", s(60), gradient_correctness);
    r.run(6, "in-place slicing", s(60), in_place_slicing);
    r.run(7, "speed/memory direction", s(300), speed_memory_direction);
    r.run(8, "training sanity", s(120), training_sanity);
    r.run(9, "attention invariants", s(60), attention_invariants);
    r.run(10, "cost/CO2 estimator", s(60), cost_estimator);
    let failed: Vec<usize> = r.results.iter().filter(|(_, ok)| !ok).map(|(i, _)| *i).collect();
    println!("{} of {} criteria passed", r.results.len() - failed.len(), r.results.len());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
