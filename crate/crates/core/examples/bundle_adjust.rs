//! Pose-only, local and global adjustment of a perturbed synthetic graph.

use plslam::geometry::Twist;
use plslam::optimizer::{optimize, LmSettings, OptimizeMode};
use plslam::simworld::{generate_world, observation_graph, render_all, WorldConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let world = generate_world(&WorldConfig {
        seed: 5,
        duration: 1.0,
        pixel_noise_sigma: 0.5,
        ..WorldConfig::default()
    })
    .unwrap();
    let frames = render_all(&world);
    let truth = observation_graph(&world, &frames);

    // only the last four poses start off, so every mode can fix them
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut start = truth.clone();
    let n = start.poses.len();
    for v in start.poses.iter_mut().skip(n - 4) {
        let xi = Twist::from_fn(|i, _| if i < 3 { rng.random_range(-0.05..0.05) } else { rng.random_range(-0.01..0.01) });
        v.pose = v.pose.retract(&xi);
    }
    let modes = [
        ("pose-only", OptimizeMode::PoseOnly),
        ("local", OptimizeMode::LocalBa { window: (n - 4..n).collect() }),
        ("global", OptimizeMode::GlobalBa),
    ];
    for (name, mode) in modes {
        let mut g = start.clone();
        let rep = optimize(&mut g, &LmSettings::default(), &mode).unwrap();
        let worst = g
            .poses
            .iter()
            .zip(&truth.poses)
            .map(|(a, b)| (a.pose.center() - b.pose.center()).norm())
            .fold(0.0, f64::max);
        println!(
            "{name:>9}: cost {:.3e} -> {:.3e} in {} steps ({:?}), {} point / {} line outliers, worst camera offset {worst:.4} m",
            rep.initial_cost,
            rep.final_cost,
            rep.iterations,
            rep.termination,
            rep.point_outliers.len(),
            rep.line_outliers.len()
        );
    }
}
