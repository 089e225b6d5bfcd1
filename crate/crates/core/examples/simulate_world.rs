//! A synthetic stereo world: landmark counts, per-frame observations and the
//! zero-cost check at ground truth.

use plslam::line_merge::{merge_segments, MergeTolerances};
use plslam::optimizer::total_cost;
use plslam::simworld::{generate_world, observation_graph, render_all, TrajectoryKind, WorldConfig};

fn main() {
    for trajectory in [TrajectoryKind::Circle { radius: 10.0 }, TrajectoryKind::FigureEight { radius: 8.0 }] {
        let cfg = WorldConfig {
            seed: 9,
            trajectory,
            duration: 4.0,
            pixel_noise_sigma: 0.0,
            ..WorldConfig::default()
        };
        let world = generate_world(&cfg).unwrap();
        let frames = render_all(&world);
        let points: usize = frames.iter().map(|f| f.point_obs.len()).sum();
        let (pieces, merged) = frames.iter().fold((0, 0), |(p, m), f| {
            let (segs, _) = f.segments();
            (p + segs.len(), m + merge_segments(&segs, &MergeTolerances::default()).len())
        });
        println!(
            "{:?}: {} frames, {} points, {} lines; {:.1} point obs/frame; {pieces} line pieces merge to {merged}",
            cfg.trajectory,
            frames.len(),
            world.points.len(),
            world.lines.len(),
            points as f64 / frames.len() as f64
        );
        let noiseless = observation_graph(&world, &frames);
        println!("  cost at truth: {:.3e}", total_cost(&noiseless));
    }
}
