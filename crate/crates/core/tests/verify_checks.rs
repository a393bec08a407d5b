use sliceout::slicing::{slice_width, Normalization};
use sliceout::verify::{
    check_counts, check_first_moment, check_gradients, check_second_moment, CountsConfig, MomentNet,
};
use sliceout::Tensor;

fn eye(m: usize) -> Tensor<f64> {
    let mut v = vec![0.0; m * m];
    for i in 0..m {
        v[i * m + i] = 1.0;
    }
    Tensor::from_vec(v, &[m, m]).unwrap()
}

#[test]
fn identity_layer_first_moment_is_exact() {
    let net = MomentNet::from_weights(vec![eye(4)], vec![vec![0.0; 4]], &[2], false).unwrap();
    let r = check_first_moment(&net, &[1.0, 1.0, 1.0, 1.0], Normalization::Probabilistic, false).unwrap();
    assert!(r.first_moment_max_abs_dev < 1e-12, "{r:?}");
    assert_eq!(r.slice_count, 3);
}

#[test]
fn full_width_is_exact_for_both_normalizations() {
    let net = MomentNet::random(&[5, 6], &[6], false, 3).unwrap();
    let x = [0.3, -0.2, 0.9, 0.1, -1.0];
    for norm in [Normalization::Flow, Normalization::Probabilistic] {
        let r = check_first_moment(&net, &x, norm, false).unwrap();
        assert!(r.first_moment_max_abs_dev < 1e-12);
    }
}

#[test]
fn two_sliced_layers_with_relu() {
    let net = MomentNet::random(&[5, 8, 7], &[5, 4], true, 11).unwrap();
    let x = [0.5, -0.1, 0.2, 0.7, -0.4];
    let r = check_first_moment(&net, &x, Normalization::Probabilistic, false).unwrap();
    assert_eq!(r.slice_count, 4 * 4);
    assert!(r.first_moment_max_abs_dev < 1e-9, "{r:?}");
}

#[test]
fn flow_deviates_at_edges_but_conserves_throughput() {
    let net = MomentNet::random(&[6, 10], &[6], false, 5).unwrap();
    let x = [1.0; 6];
    let r = check_first_moment(&net, &x, Normalization::Flow, false).unwrap();
    assert!(r.first_moment_max_abs_dev > 1e-6);
    assert!(r.flow_conservation_error.unwrap() < 1e-9);
}

#[test]
fn injected_fault_is_detected() {
    let net = MomentNet::random(&[6, 10], &[6], false, 5).unwrap();
    let r = check_first_moment(&net, &[1.0; 6], Normalization::Probabilistic, true).unwrap();
    assert!(r.first_moment_max_abs_dev > 1e-3);
}

#[test]
fn second_moment_band() {
    let w = slice_width(16, 0.4).unwrap();
    assert_eq!(w, 10);
    let net = MomentNet::random(&[12, 16], &[w], false, 7).unwrap();
    let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
    let r = check_second_moment(&net, &x).unwrap();
    assert!(r.second_moment_band_max_rel_dev.unwrap() < 0.05, "{r:?}");
    assert!(r.second_moment_edge_max_rel_dev.is_some());

    let band_edge = MomentNet::random(&[4, 10], &[6], false, 1).unwrap();
    let r = check_second_moment(&band_edge, &[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert!(r.second_moment_band_max_rel_dev.unwrap() < 1e-12);

    let full = MomentNet::random(&[4, 6], &[6], false, 1).unwrap();
    let r = check_second_moment(&full, &[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert!(r.second_moment_band_max_rel_dev.unwrap() < 1e-12);
    assert!(r.second_moment_edge_max_rel_dev.is_none());
}

#[test]
fn gradients_through_sliced_layers() {
    let r = check_gradients(0).unwrap();
    assert!(r.dense_unsliced < 1e-6, "{r:?}");
    assert!(r.dense_sliced < 1e-6, "{r:?}");
    assert!(r.residual_channel < 1e-5, "{r:?}");
    assert!(r.attention < 1e-5, "{r:?}");
}

#[test]
fn counts_match_cost_model() {
    let checks = check_counts(&CountsConfig::default()).unwrap();
    for c in &checks {
        assert!(c.passed, "{c:?}");
    }
    let copied = checks.iter().find(|c| c.name == "controlled b=128 n=1024 m=1024 p=0.5 copied elements").unwrap();
    assert_eq!(copied.observed, 262_144);
}

#[test]
fn suites_pass_and_fault_fails() {
    use sliceout::verify::{run_suite, Suite};
    let all = run_suite(Suite::All, false, 0).unwrap();
    for c in &all.checks {
        println!("{:?} {} {}", c.passed, c.name, c.detail);
    }
    assert!(all.passed());
    let broken = run_suite(Suite::Moments, true, 0).unwrap();
    assert!(!broken.passed());
}
