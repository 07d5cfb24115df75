use std::thread::available_parallelism;
use std::time::Instant;

use nalgebra::DVector;
use nnsd::inference::{run_chains, Hyperparams, RunSettings};
use nnsd::simulation::synthetic_geometry;

#[test]
fn two_chains_run_in_parallel() {
    let cores = available_parallelism().map(|n| n.get()).unwrap_or(1);
    if cores < 2 {
        eprintln!("skipped: {cores} core available");
        return;
    }
    let geometry = synthetic_geometry(30, 3).unwrap();
    let n = geometry.n();
    let y = DVector::from_fn(n, |i, _| 7.0 + 0.1 * (i as f64).sin());
    let domain = geometry.domain(y, DVector::from_element(n, 0.05)).unwrap();
    let settings = RunSettings {
        iterations: 400,
        burn_in: 200,
        seed: 8,
        ..RunSettings::default()
    };
    let hp = Hyperparams::default();
    run_chains(&domain, &hp, &settings, 1).unwrap();

    let t = Instant::now();
    run_chains(&domain, &hp, &settings, 1).unwrap();
    let one = t.elapsed().as_secs_f64();
    let t = Instant::now();
    run_chains(&domain, &hp, &settings, 2).unwrap();
    let two = t.elapsed().as_secs_f64();
    assert!(two < 1.7 * one, "one chain {one:.3}s, two chains {two:.3}s");
}
