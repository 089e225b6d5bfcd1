//! ATE and RPE of a drifting estimate, before and after alignment.

use plslam::eval::{evaluate, format_tum, parse_trajectory, Trajectory};
use plslam::geometry::{se3_exp, Pose, Twist};

fn main() {
    let truth: Vec<(f64, Pose)> = (0..100)
        .map(|k| {
            let t = k as f64 * 0.1;
            (t, se3_exp(&Twist::new(2.0 * t.cos(), 0.1 * t, 2.0 * t.sin(), 0.0, 0.3 * t, 0.0)))
        })
        .collect();
    // constant offset, a small yaw and drift that grows with time
    let offset = se3_exp(&Twist::new(1.0, -0.5, 0.2, 0.0, 0.05, 0.0));
    let estimate: Vec<(f64, Pose)> = truth
        .iter()
        .map(|&(t, p)| (t, offset.compose(&se3_exp(&Twist::new(0.01 * t, 0.0, 0.0, 0.0, 0.0, 0.0))).compose(&p)))
        .collect();
    let gt = Trajectory::new(truth).unwrap();
    let est = Trajectory::new(estimate).unwrap();

    // round trip through the TUM text format
    let (est, format) = parse_trajectory(&format_tum(&est)).unwrap();
    println!("estimate read back as {format:?}, {} poses", est.len());

    for aligned in [false, true] {
        let r = evaluate(&est, &gt, aligned, 1, 0.02).unwrap();
        println!(
            "aligned {aligned:5}: ATE {:.4} m, RPE {:.5} m / {:.6} rad over {} pairs",
            r.ate_rmse, r.rpe_trans, r.rpe_rot, r.pairs
        );
    }
}
