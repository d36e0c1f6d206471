use proptest::prelude::*;
use qprsgd::algorithms::{run, Algorithm, Environment, ObjectiveSpec, RunConfig, Simulation, Stepsize, TopologySpec};
use qprsgd::collectives::{quantized_ring_allreduce, split_segments};
use qprsgd::objectives::Batch;
use qprsgd::quant::{self, Compressor};
use qprsgd::rng::Seed;
use qprsgd::runner::{self, read_metrics, write_metrics, ArmSpec, ExperimentSpec};
use qprsgd::simnet::LinkModel;
use serde_json::Map;

fn cfg(algorithm: Algorithm) -> RunConfig {
    RunConfig {
        algorithm,
        paradigm: None,
        workers: 5,
        local_steps: 3,
        rounds: 25,
        quant_levels: 8,
        stepsize: Stepsize::Constant(0.03),
        topology: TopologySpec::Ring { self_weight: 0.4 },
        objective: ObjectiveSpec::Quadratic { dim: 12, samples_per_worker: 60, heterogeneity: 0.5 },
        batch: Batch::Minibatch(8),
        seed: 5,
        data_seed: None,
        link: LinkModel::default(),
        metrics_every: 1,
        stop: None,
    }
}

#[test]
fn metrics_survive_a_file_roundtrip() {
    let c = cfg(Algorithm::GQprsgd);
    let (result, _) = runner::run_single(&c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/out.csv");
    runner::write_atomic(&path, write_metrics(&result.metrics).as_bytes()).unwrap();
    let back = read_metrics(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(back, result.metrics);
}

#[test]
fn config_json_roundtrip_reproduces_the_run() {
    let c = cfg(Algorithm::ArQprsgd);
    let text = serde_json::to_string(&c).unwrap();
    let parsed: RunConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed, c);
    let a = run(&c, &Environment::prepare(&c).unwrap()).unwrap();
    let b = run(&parsed, &Environment::prepare(&parsed).unwrap()).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.final_average, b.final_average);
}

#[test]
fn quantized_arms_send_fewer_bits() {
    let mut arms = Vec::new();
    for a in ["prsgd", "ar-qprsgd"] {
        let mut overrides = Map::new();
        overrides.insert("algorithm".into(), a.into());
        arms.push(ArmSpec { name: a.into(), overrides });
    }
    let spec = ExperimentSpec {
        base: RunConfig {
            objective: ObjectiveSpec::Quadratic { dim: 64, samples_per_worker: 100, heterogeneity: 0.5 },
            ..cfg(Algorithm::Prsgd)
        },
        vary: vec!["algorithm".into()],
        arms,
        threshold: None,
        baseline: Some("prsgd".into()),
        shared_streams: true,
    };
    let (outcomes, summary) = runner::compare(&spec, None).unwrap();
    assert_eq!(outcomes[0].config.seed, outcomes[1].config.seed);
    let ratio = summary.arms[1].ratios.total_bits.unwrap();
    assert!(ratio < 0.5, "ratio {ratio}");
}

#[test]
fn gossip_replicas_track_owners_on_a_file_topology() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("graph.txt");
    std::fs::write(&path, "# path plus a chord\n0 1\n1 2\n2 3\n3 4\n0 2\n").unwrap();
    let c = RunConfig { topology: TopologySpec::File { path }, rounds: 40, ..cfg(Algorithm::GQprsgd) };
    let env = Environment::prepare(&c).unwrap();
    let mut sim = Simulation::new(&c, &env).unwrap();
    for _ in 0..c.rounds {
        sim.step().unwrap();
    }
    assert_eq!(sim.replica(0, 2).unwrap(), sim.params(2));
    assert_eq!(sim.replica(4, 3).unwrap(), sim.params(3));
    assert!(sim.replica(0, 4).is_none());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn codec_roundtrip_on_wire_blocks(
        v in prop::collection::vec(-1e3f64..1e3, 1..80),
        s in 1u32..64,
        seed in any::<u64>(),
    ) {
        let mut rng = Seed(seed).stream(qprsgd::rng::Purpose::Verify, &[0]);
        let block = quant::quantize(&v, s, &mut rng).unwrap().to_wire().unwrap();
        let bits = quant::encode_block(&block).unwrap();
        prop_assert_eq!(bits.len(), quant::encoded_len(&block));
        prop_assert_eq!(quant::decode_block(&bits, v.len(), s).unwrap(), block);
    }

    #[test]
    fn lossless_allreduce_sums_every_worker(
        workers in 1usize..7,
        extra in 0usize..9,
        seed in any::<u64>(),
    ) {
        let dim = workers + extra;
        let mut rng = Seed(seed).stream(qprsgd::rng::Purpose::Verify, &[1]);
        let updates: Vec<Vec<f64>> = (0..workers)
            .map(|_| (0..dim).map(|_| rand::Rng::random_range(&mut rng, -5.0..5.0)).collect())
            .collect();
        let plan = split_segments(dim, workers).unwrap();
        let out = quantized_ring_allreduce(&updates, Compressor::Lossless, &plan, Seed(seed), 0).unwrap();
        for i in 0..dim {
            let exact: f64 = updates.iter().map(|u| u[i]).sum();
            prop_assert!((out.sum[i] - exact).abs() <= 1e-12 * (1.0 + exact.abs()));
        }
        prop_assert_eq!(out.trace.hop_count(), 2 * workers.saturating_sub(1) * workers);
    }
}
