use drrs_core::config::{ScaleSpec, SimConfig};
use drrs_core::graph::JobSpec;
use drrs_core::harness::metrics::compute_metrics;
use drrs_core::harness::verify::{
    check_epoch_monotonicity, check_subscale_isolation, check_watermark_safety, equivalence_check,
};
use drrs_core::harness::workload::WorkloadConfig;
use drrs_core::protocol::ProtocolChoice;
use drrs_core::sim::run;
use proptest::prelude::*;

#[derive(Clone, Debug)]
struct Shape {
    keygroups: u32,
    sources: u32,
    from: u32,
    to: u32,
    zipf_s: f64,
    rate: u64,
    capacity: usize,
    seed: u64,
}

fn shape() -> impl Strategy<Value = Shape> {
    (
        prop::sample::select(vec![8u32, 16, 32]),
        1u32..=2,
        1u32..=3,
        1u32..=4,
        0.0f64..1.3,
        800u64..2500,
        prop::sample::select(vec![8usize, 32, 256]),
        any::<u64>(),
    )
        .prop_filter("parallelism must change", |s| s.2 != s.3)
        .prop_map(
            |(keygroups, sources, from, to, zipf_s, rate, capacity, seed)| Shape {
                keygroups,
                sources,
                from,
                to,
                zipf_s,
                rate,
                capacity,
                seed,
            },
        )
}

fn config(s: &Shape, protocol: ProtocolChoice) -> SimConfig {
    let workload = WorkloadConfig {
        rate: s.rate,
        duration: 1200,
        key_space: 300,
        zipf_s: s.zipf_s,
        payload_bytes: 128,
        seed: s.seed,
        marker_period: 25,
        watermark_interval: 60,
    };
    let mut job = JobSpec::three_operator(s.keygroups, s.sources, s.from);
    job.channel_capacity = s.capacity;
    job.seed = s.seed;
    let mut cfg = SimConfig::new("prop", job, workload);
    cfg.scale.push(ScaleSpec {
        operator: "agg".into(),
        to: s.to,
        at_tick: 500,
        protocol: None,
    });
    cfg.with_protocol(protocol)
}

fn authoritative() -> impl Strategy<Value = ProtocolChoice> {
    prop::sample::select(
        ProtocolChoice::ALL
            .into_iter()
            .filter(|p| p.is_authoritative())
            .collect::<Vec<_>>(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn scaled_runs_match_the_unscaled_run(s in shape(), p in authoritative()) {
        let cfg = config(&s, p);
        let reference = run(&cfg.without_scaling()).unwrap();
        let r = run(&cfg).unwrap();
        let verdict = equivalence_check(&r, &reference);
        prop_assert!(verdict.passed(), "{:?}", verdict.diffs);
    }

    #[test]
    fn runs_are_deterministic(s in shape(), p in authoritative()) {
        let cfg = config(&s, p);
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        prop_assert_eq!(a.trace.to_jsonl_bytes(), b.trace.to_jsonl_bytes());
        prop_assert_eq!(compute_metrics(&a).unwrap(), compute_metrics(&b).unwrap());
    }

    #[test]
    fn overheads_add_up(s in shape(), p in authoritative()) {
        let m = compute_metrics(&run(&config(&s, p)).unwrap()).unwrap();
        prop_assert!(m.identity_holds());
        prop_assert!(m.l_p >= 0 && m.l_s >= 0 && m.l_d >= 0);
    }

    #[test]
    fn records_and_markers_are_conserved(s in shape(), p in authoritative()) {
        let r = run(&config(&s, p)).unwrap();
        prop_assert_eq!(r.emitted_records, r.applied.len() as u64 + r.in_flight_records);
        prop_assert_eq!(r.markers_emitted, r.markers_received);
    }

    #[test]
    fn protocol_traces_are_well_formed(s in shape(), p in authoritative()) {
        let r = run(&config(&s, p)).unwrap();
        prop_assert!(check_watermark_safety(&r.trace).is_empty());
        prop_assert!(check_subscale_isolation(&r.trace).is_empty());
        prop_assert!(check_epoch_monotonicity(&r.trace).is_empty());
    }

    #[test]
    fn whole_group_protocols_move_each_keygroup_once(
        s in shape(),
        p in prop::sample::select(vec![ProtocolChoice::Drrs, ProtocolChoice::Fluid, ProtocolChoice::AllAtOnce]),
    ) {
        let m = compute_metrics(&run(&config(&s, p)).unwrap()).unwrap();
        prop_assert!(m.migrations_per_kg.values().all(|&n| n == 1));
    }
}
