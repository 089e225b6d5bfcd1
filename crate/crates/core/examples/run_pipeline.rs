//! Full tracking and mapping loop on a noisy circle, lines on and off.

use plslam::pipeline::{run_pipeline, PipelineConfig};
use plslam::simworld::{generate_world, WorldConfig};

fn main() {
    let world = generate_world(&WorldConfig {
        seed: 42,
        duration: 5.0,
        pixel_noise_sigma: 0.5,
        ..WorldConfig::default()
    })
    .unwrap();
    for use_lines in [true, false] {
        let cfg = PipelineConfig { use_lines, ..PipelineConfig::default() };
        let r = run_pipeline(&world, &cfg).unwrap();
        println!(
            "lines {use_lines:5}: ATE {:.4} m over {} frames, {} keyframes, map {} points / {} lines, {:.0} inliers per frame",
            r.ate,
            r.truth.len(),
            r.keyframes.len(),
            r.map_points,
            r.map_lines,
            r.mean_inliers
        );
    }
}
