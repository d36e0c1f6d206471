use qprsgd_demo::{convergence_demo, mixing_demo, quantizer_demo, ConvergenceRequest};

#[test]
fn same_seed_same_output() {
    let a = serde_json::to_string(&quantizer_demo(&[1.0, -2.0, 0.5], 3, 1000, 4).unwrap()).unwrap();
    let b = serde_json::to_string(&quantizer_demo(&[1.0, -2.0, 0.5], 3, 1000, 4).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn complete_graph_mixes_in_one_step() {
    let r = mixing_demo("complete", 6, 0.5, 3, 2).unwrap();
    assert!(r.rho.abs() < 1e-12);
    assert!(r.decay[1].deviation < 1e-12);
}

#[test]
fn gossip_baselines_are_charged_per_edge() {
    let mut req: ConvergenceRequest =
        serde_json::from_str(r#"{"algorithms": ["prsgd"], "rounds": 5, "dim": 10, "gamma": 0.05, "workers": 5}"#).unwrap();
    let ar = convergence_demo(&req).unwrap();
    req.gossip_baselines = true;
    let gossip = convergence_demo(&req).unwrap();
    // Ring all-reduce moves 2(M-1)/M of the vector per worker; a ring
    // gossip round sends the whole vector to two neighbours.
    assert_eq!(ar[0].cum_bits[0], 2 * 4 * 10 * 32);
    assert_eq!(gossip[0].cum_bits[0], 5 * 2 * 10 * 32);
}
