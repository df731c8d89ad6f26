use std::sync::OnceLock;

use ndarray::{Array1, Array2};
use tfdl::field::GaussianOracle;
use tfdl::net::checkpoint::{write_checkpoint, CheckpointMeta};
use tfdl::teacher::{train_teacher, TeacherConfig, TeacherRun};
use tfdl::toydata::{generate_from, DatasetSpec};
use tfdl::{rng_from_seed, NetConfig, VelocityNet};

/// Irreducible flow-matching loss for standardised 2D Gaussian data with
/// unit noise: per dimension it is the integral of 1 / (1 + u^2) over the
/// unit interval in the odds ratio, which sums to pi over two dimensions.
const GAUSSIAN_FLOOR: f64 = std::f64::consts::PI;

fn trained() -> &'static TeacherRun {
    static RUN: OnceLock<TeacherRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let data = generate_from(&DatasetSpec::single_gaussian(0.5), 20_000, 1).unwrap();
        let net = VelocityNet::new(NetConfig { num_classes: 1, ..NetConfig::default() }, &mut rng_from_seed(2)).unwrap();
        train_teacher(net, &data, &TeacherConfig::default(), &mut rng_from_seed(3)).unwrap()
    })
}

#[test]
fn teacher_matches_the_gaussian_oracle() {
    let net = &trained().net;
    let grid: Vec<f64> = (0..5).map(|i| -1.0 + 0.5 * i as f64).collect();
    let x = Array2::from_shape_fn((25, 2), |(i, j)| if j == 0 { grid[i / 5] } else { grid[i % 5] });
    let (mut err, mut norm) = (0.0, 0.0);
    for k in 1..10 {
        let t = k as f64 / 10.0;
        let v = net.forward(x.view(), Array1::from_elem(25, t).view(), &[0; 25], Array1::zeros(25).view()).unwrap();
        let oracle = &x * GaussianOracle::coefficient(t);
        err += (&v - &oracle).mapv(|d| d * d).sum();
        norm += oracle.mapv(|d| d * d).sum();
    }
    let rel = (err / norm).sqrt();
    assert!(rel < 0.10, "relative L2 error {rel}");
}

#[test]
fn loss_excess_over_the_floor_shrinks_tenfold() {
    let curve = &trained().curve;
    let first = curve.first().unwrap().1 - GAUSSIAN_FLOOR;
    let last = curve.last().unwrap().1 - GAUSSIAN_FLOOR;
    assert!(first > 0.0);
    assert!(last < 0.1 * first, "excess {first} -> {last}");
}

#[test]
fn training_is_replay_deterministic() {
    let data = generate_from(&DatasetSpec::default(), 2000, 5).unwrap();
    let cfg = TeacherConfig { iters: 30, batch: 64, ..TeacherConfig::default() };
    let bytes = || {
        let net = VelocityNet::new(NetConfig { width: 32, token_dim: 8, ..NetConfig::default() }, &mut rng_from_seed(6)).unwrap();
        let run = train_teacher(net, &data, &cfg, &mut rng_from_seed(7)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&run.net, &CheckpointMeta::default(), &mut buf).unwrap();
        buf
    };
    assert_eq!(bytes(), bytes());
}
