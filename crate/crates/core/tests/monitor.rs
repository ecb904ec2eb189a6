use iterseg::monitor::{
    auc_above_floor, efficiency_report, sample_run, EfficiencyParams, Probe, ResourceTrace, BYTES_PER_GB,
};
use iterseg::Error;
use proptest::prelude::*;

fn cmd(args: &[&str]) -> Vec<String> {
    args.iter().map(|s| s.to_string()).collect()
}

#[test]
fn sleeping_command_is_sampled_until_exit() {
    let (status, trace) = sample_run(&cmd(&["sleep", "1"]), &Probe::ProcessRss, 0.2).unwrap();
    assert!(status.success());
    let s = trace.samples();
    assert!(s.len() >= 4, "{} samples", s.len());
    assert!(s.last().unwrap().t >= 1.0);
    assert!(s.windows(2).all(|w| w[1].t > w[0].t));
}

#[test]
fn zero_probe_gives_zero_memory() {
    let probe = Probe::Command(cmd(&["echo", "0"]));
    let (_, trace) = sample_run(&cmd(&["sleep", "0.3"]), &probe, 0.05).unwrap();
    assert!(trace.samples().len() >= 2);
    assert!(trace.samples().iter().all(|s| s.mem_bytes == 0));
}

#[test]
fn pid_is_substituted_into_probe() {
    // the probe reports the pid as a byte count
    let probe = Probe::Command(cmd(&["echo", "{pid}"]));
    let (_, trace) = sample_run(&cmd(&["sleep", "0.2"]), &probe, 0.05).unwrap();
    assert!(trace.samples()[0].mem_bytes > 0);
}

#[test]
fn missing_command_is_a_spawn_error() {
    let err = sample_run(&cmd(&["/nonexistent/iterseg-test-cmd"]), &Probe::ProcessRss, 0.1).unwrap_err();
    assert!(matches!(err, Error::Spawn { .. }), "{err}");
}

#[test]
fn auc_examples() {
    let flat = ResourceTrace::from_gb(&[(0.0, 6.0), (10.0, 6.0)], 1.0).unwrap();
    assert!((auc_above_floor(&flat, 4.0).unwrap() - 20.0).abs() < 1e-9);
    let low = ResourceTrace::from_gb(&[(0.0, 3.0), (7.5, 3.0)], 1.0).unwrap();
    assert_eq!(auc_above_floor(&low, 4.0).unwrap(), 0.0);
    let ramp = ResourceTrace::from_gb(&[(0.0, 4.0), (10.0, 6.0)], 1.0).unwrap();
    assert!((auc_above_floor(&ramp, 4.0).unwrap() - 10.0).abs() < 1e-9);
    // 2 -> 6 GB crosses the floor halfway: triangle of height 2 over 5 s
    let crossing = ResourceTrace::from_gb(&[(0.0, 2.0), (10.0, 6.0)], 1.0).unwrap();
    assert!((auc_above_floor(&crossing, 4.0).unwrap() - 5.0).abs() < 1e-9);
}

#[test]
fn runtime_tolerance() {
    let trace = ResourceTrace::from_gb(&[(0.0, 1.0), (1.0, 5.5), (2.0, 2.0)], 1.0).unwrap();
    let p = EfficiencyParams::default();
    assert_eq!(efficiency_report(&trace, 20.0, &p).runtime_over_tolerance_s, 5.0);
    let r = efficiency_report(&trace, 10.0, &p);
    assert_eq!(r.runtime_over_tolerance_s, 0.0);
    assert!((r.peak_mem_gb - 5.5).abs() < 1e-9);
}

fn trace_strategy() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.01f64..3.0, 0.0f64..10.0), 2..20).prop_map(|steps| {
        let mut t = 0.0;
        steps
            .into_iter()
            .map(|(dt, gb)| {
                t += dt;
                (t, gb)
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn auc_is_additive_over_splits(points in trace_strategy(), cut in 0usize..100) {
        let k = 1 + cut % (points.len() - 1);
        let whole = ResourceTrace::from_gb(&points, 1.0).unwrap();
        let left = ResourceTrace::from_gb(&points[..=k], 1.0).unwrap();
        let right = ResourceTrace::from_gb(&points[k..], 1.0).unwrap();
        let sum = if k == points.len() - 1 {
            auc_above_floor(&left, 4.0).unwrap()
        } else {
            auc_above_floor(&left, 4.0).unwrap() + auc_above_floor(&right, 4.0).unwrap()
        };
        prop_assert!((auc_above_floor(&whole, 4.0).unwrap() - sum).abs() < 1e-9);
    }

    #[test]
    fn auc_shrinks_as_floor_rises(points in trace_strategy(), a in 0.0f64..10.0, b in 0.0f64..10.0) {
        let trace = ResourceTrace::from_gb(&points, 1.0).unwrap();
        let (lo, hi) = (a.min(b), a.max(b));
        let (big, small) = (auc_above_floor(&trace, lo).unwrap(), auc_above_floor(&trace, hi).unwrap());
        prop_assert!(small >= 0.0);
        prop_assert!(big >= small - 1e-9);
    }

    #[test]
    fn auc_matches_fine_riemann_sum(points in trace_strategy()) {
        let trace = ResourceTrace::from_gb(&points, 1.0).unwrap();
        let gb: Vec<(f64, f64)> = trace.samples().iter().map(|s| (s.t, s.mem_bytes as f64 / BYTES_PER_GB)).collect();
        let mut sum = 0.0;
        for w in gb.windows(2) {
            let n = 2000;
            let dt = (w[1].0 - w[0].0) / n as f64;
            for i in 0..n {
                let f = (i as f64 + 0.5) / n as f64;
                let m = w[0].1 + f * (w[1].1 - w[0].1);
                sum += (m - 4.0).max(0.0) * dt;
            }
        }
        let auc = auc_above_floor(&trace, 4.0).unwrap();
        prop_assert!((auc - sum).abs() < 1e-4 * (1.0 + sum), "{auc} vs {sum}");
    }
}
