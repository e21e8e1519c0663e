use std::time::Instant;

use poiflow::config::Ablation;
use poiflow::gradcheck::{grad_check, DEFAULT_STEP};
use poiflow::hosts::HostKind;
use poiflow::model::TinyInstance;

const TOLERANCE: f64 = 1e-4;
const SEED: u64 = 1;

fn check(host: HostKind, ablation: Ablation) {
    let tiny = TinyInstance::new(host, ablation, SEED).unwrap();
    let start = Instant::now();
    let report = grad_check(&tiny.store, |tape, bound| tiny.loss(tape, bound), DEFAULT_STEP).unwrap();
    let coords: usize = report.iter().map(|r| r.coords).sum();
    let above: usize = report.iter().map(|r| r.above_guard).sum();
    let worst = report.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    println!(
        "{host:?} {}: {coords} coordinates ({above} above guard), worst {worst:.3e}, {:?}",
        ablation.label(),
        start.elapsed()
    );
    for r in &report {
        assert!(r.max_rel_error < TOLERANCE, "{} exceeds tolerance: {r:?}", r.name);
    }
}

#[test]
fn full_block_over_temporal_host() {
    check(HostKind::TemporalLinear, Ablation::FULL);
}

#[test]
fn shared_attention_without_refinement() {
    check(HostKind::GcnTemporal, Ablation::DA);
}

#[test]
fn generated_attention_without_refinement() {
    check(HostKind::TemporalLinear, Ablation::DA_PG);
}

#[test]
fn hosts_alone() {
    check(HostKind::TemporalLinear, Ablation::NONE);
    check(HostKind::GcnTemporal, Ablation::NONE);
}
