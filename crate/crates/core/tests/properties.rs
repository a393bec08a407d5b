use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sliceout::costmodel::table1_costs;
use sliceout::nn::{attention_sliceout, patch_window, AttentionSliceConfig, Keep, Mode};
use sliceout::slicing::{
    build_keep_profile, eligible_starts, keep_probability, sample_slice, slice_width, SchemeKind, SliceSampler, SliceSpec,
};
use sliceout::{Error, Graph, Tensor};

fn enumerated(j: usize, m: usize, w: usize) -> f64 {
    let starts = eligible_starts(m, w).unwrap();
    let total = starts.clone().count();
    starts.filter(|&s| s <= j && j < s + w).count() as f64 / total as f64
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
}

#[test]
fn keep_probability_matches_enumeration_exhaustively() {
    for m in 1..=64 {
        for w in 1..=m {
            let mut sum = 0.0;
            for j in 0..m {
                let p = keep_probability(j, m, w).unwrap();
                assert!((p - enumerated(j, m, w)).abs() < 1e-15, "m={m} w={w} j={j}");
                assert_eq!(p, keep_probability(m - 1 - j, m, w).unwrap());
                sum += p;
            }
            assert!((sum - w as f64).abs() < 1e-9, "m={m} w={w} sum={sum}");
        }
    }
}

#[test]
fn keep_profile_ten_six() {
    let p = build_keep_profile(10, 6).unwrap();
    let want = [0.2, 0.4, 0.6, 0.8, 1.0, 1.0, 0.8, 0.6, 0.4, 0.2];
    for (a, b) in p.probs.iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn starts_are_uniform() {
    let (m, w, draws) = (12, 7, 60_000);
    let mut counts = vec![0usize; m - w + 1];
    let mut s = SliceSampler::new(17);
    for _ in 0..draws {
        counts[s.sample(m, w).unwrap().start] += 1;
    }
    let e = draws as f64 / counts.len() as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    // 5 degrees of freedom, 0.999 quantile
    assert!(chi2 < 20.52, "chi2 = {chi2}, counts {counts:?}");
}

#[test]
fn query_key_mismatch_is_alignment_error() {
    let mut g = Graph::<f64>::new();
    let q = g.input(random_tensor(&[3, 4], 1));
    let k = g.input(random_tensor(&[3, 4], 2));
    let v = g.input(random_tensor(&[3, 4], 3));
    let mut cfg = AttentionSliceConfig::unsliced(4, 1, Mode::Train);
    cfg.q = Keep::Slice(SliceSpec::new(4, 2, 0).unwrap());
    cfg.k = Keep::Slice(SliceSpec::new(4, 2, 1).unwrap());
    assert!(matches!(attention_sliceout(&mut g, q, k, v, &cfg), Err(Error::Alignment(_))));
}

#[test]
fn patch_window_examples() {
    assert_eq!(patch_window(28, 28, 0.0).unwrap(), (28, 28));
    assert_eq!(patch_window(28, 28, 0.75).unwrap(), (14, 14));
    assert_eq!(patch_window(3, 3, 0.99).unwrap(), (1, 1));
    assert!(patch_window(4, 4, 1.0).is_err());
}

proptest! {
    #[test]
    fn width_is_rounded_and_in_range(m in 1usize..5000, p in 0.0f64..0.999) {
        let w = slice_width(m, p).unwrap();
        prop_assert!(w >= 1 && w <= m);
        prop_assert!((w as f64 - m as f64 * (1.0 - p)).abs() <= 0.5 + 1e-9 || w == 1);
    }

    #[test]
    fn sampled_slices_fit(m in 1usize..300, frac in 0.0f64..1.0, seed in any::<u64>()) {
        let w = ((m as f64 * frac) as usize).clamp(1, m);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = sample_slice(&mut rng, m, w).unwrap();
        prop_assert_eq!(s.width, w);
        prop_assert!(s.end() <= m);
    }

    #[test]
    fn slices_are_zero_copy_views(rows in 1usize..12, cols in 1usize..12, a in 0usize..12, b in 1usize..12, seed in any::<u64>()) {
        let t = random_tensor(&[rows, cols], seed);
        let start = a % cols;
        let width = 1 + (b - 1) % (cols - start);
        let v = t.slice_view(1, start, width).unwrap();
        prop_assert!(v.shares_storage(&t));
        prop_assert_eq!(v.offset(), start);
        for r in 0..rows {
            for c in 0..width {
                prop_assert_eq!(v.get(&[r, c]).unwrap(), t.get(&[r, start + c]).unwrap());
            }
        }
        // writes through the view land in the parent
        v.set(&[0, 0], 42.0).unwrap();
        prop_assert_eq!(t.get(&[0, start]).unwrap(), 42.0);
    }

    #[test]
    fn out_of_range_slices_are_rejected(len in 1usize..50, start in 0usize..60, width in 1usize..60) {
        prop_assume!(start + width > len);
        let t = Tensor::<f64>::zeros(&[len]);
        let bounds_error = matches!(t.slice_view(0, start, width), Err(Error::Bounds { .. }));
        prop_assert!(bounds_error);
        prop_assert!(SliceSpec::new(len, width, start).is_err());
    }

    #[test]
    fn attention_rows_sum_to_one(t in 1usize..6, heads in 1usize..3, hd in 1usize..5, cut in 0usize..5, seed in any::<u64>()) {
        let d = heads * hd;
        let w = 1 + cut % hd;
        let start = (seed as usize) % (hd - w + 1);
        let mut g = Graph::<f64>::new();
        let q = g.input(random_tensor(&[t, d], seed));
        let k = g.input(random_tensor(&[t, d], seed ^ 1));
        let v = g.input(random_tensor(&[t, d], seed ^ 2));
        let mut cfg = AttentionSliceConfig::unsliced(d, heads, Mode::Train);
        let keep = Keep::Slice(SliceSpec::new(hd, w, start).unwrap());
        cfg.q = keep.clone();
        cfg.k = keep.clone();
        cfg.v = keep;
        let out = attention_sliceout(&mut g, q, k, v, &cfg).unwrap();
        prop_assert_eq!(g.shape(out.out), &[t, heads * w][..]);
        for wv in out.weights {
            let a = g.value(wv);
            for r in 0..t {
                let s: f64 = (0..t).map(|c| a.get(&[r, c]).unwrap()).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cost_model_invariants(b in 1usize..512, n in 1usize..2048, m in 1usize..2048, p in 0.0f64..0.95) {
        let base = table1_costs(SchemeKind::Standard, b, n, m, p).unwrap();
        let c = table1_costs(SchemeKind::Controlled, b, n, m, p).unwrap();
        let s = table1_costs(SchemeKind::SliceOut, b, n, m, p).unwrap();
        prop_assert_eq!(base.multiply_ops, (b * n * m) as u64);
        prop_assert_eq!(s.extra_copy_elements, 0);
        prop_assert_eq!(s.multiply_ops, c.multiply_ops);
        prop_assert!(s.multiply_ops <= base.multiply_ops);
        prop_assert_eq!(c.extra_copy_elements, (c.w_in * c.w_out) as u64);
        prop_assert_eq!(s.activation_elements, (b * s.w_out) as u64);
    }
}
