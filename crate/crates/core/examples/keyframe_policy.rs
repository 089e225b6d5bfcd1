//! Keyframe decisions on a scripted inlier track, with and without the
//! velocity gate.

use nalgebra::Vector3;
use plslam::keyframe::{KeyframePolicy, PolicyParams};

fn run(params: PolicyParams, speed: f64) -> usize {
    let mut policy = KeyframePolicy::new(params, 400, Vector3::zeros(), 0.0);
    let mut inliers = 400.0f64;
    for k in 1..=100 {
        let t = k as f64 * 0.1;
        // features drain quickly and recover after each keyframe
        inliers = if policy.log().last().is_some_and(|r| r.decision.insert) { 400.0 } else { inliers * 0.93 };
        policy.step(inliers as usize, Vector3::new(0.0, 0.0, speed * t), t).unwrap();
    }
    policy.insert_count()
}

fn main() {
    let gated = PolicyParams::default();
    let plain = PolicyParams { v_gate: None, ..PolicyParams::default() };
    for speed in [2.0, 5.0, 10.0, 20.0] {
        println!(
            "{speed:4.1} m/s: {:3} keyframes gated, {:3} without the gate",
            run(gated, speed),
            run(plain, speed)
        );
    }
}
