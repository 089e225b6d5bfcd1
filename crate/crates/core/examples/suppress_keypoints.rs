//! Grid suppression on a burst of random keypoints.

use plslam::feature_grid::{compute_grid_spec, select_with_tolerance, ScoredKeypoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let (w, h) = (640u32, 480u32);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // clumped detections: most of them land in a few blobs
    let centers: Vec<(f64, f64)> = (0..6)
        .map(|_| (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)))
        .collect();
    let points: Vec<ScoredKeypoint> = (0..4000)
        .map(|i| {
            let (x, y) = if i % 4 == 0 {
                (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64))
            } else {
                let (cx, cy) = centers[i % centers.len()];
                (
                    (cx + rng.random_range(-40.0..40.0)).clamp(0.0, w as f64 - 1.0),
                    (cy + rng.random_range(-40.0..40.0)).clamp(0.0, h as f64 - 1.0),
                )
            };
            ScoredKeypoint::new(x, y, rng.random_range(0.0..100.0), 0)
        })
        .collect();

    for target in [200, 500, 1000] {
        let spec = compute_grid_spec(w, h, target).unwrap();
        let sel = select_with_tolerance(&points, &spec, 0.1);
        println!(
            "target {target:5}: cell {:6.2} px (closed form {:6.2}), radius {:5.2}, grid {}x{}, kept {} at quota {}",
            spec.cell,
            spec.cell_unclamped,
            spec.radius,
            spec.cols,
            spec.rows,
            sel.points.len(),
            sel.quota
        );
    }
}
