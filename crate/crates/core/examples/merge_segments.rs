//! Broken collinear segments merged back through Hough space.

use plslam::line_merge::{merge_segments_detailed, to_hough, MergeTolerances, Segment2D};

fn main() {
    // center-origin pixels: two lines split into pieces, plus a crossing one
    let segs = vec![
        Segment2D::new(-200.0, 50.0, -120.0, 60.0),
        Segment2D::new(-100.0, 62.5, -20.0, 72.5),
        Segment2D::new(0.0, 75.0, 90.0, 86.25),
        Segment2D::new(-50.0, -150.0, -40.0, -60.0),
        Segment2D::new(-37.0, -33.0, -30.0, 30.0),
        Segment2D::new(-100.0, -100.0, 100.0, 100.0),
    ];
    for (i, s) in segs.iter().enumerate() {
        let h = to_hough(s);
        println!("in  {i}: rho {:8.3} theta {:7.4}", h.rho, h.theta);
    }
    for m in merge_segments_detailed(&segs, &MergeTolerances::default()) {
        let s = m.segment;
        println!(
            "out {:?}: ({:.1}, {:.1}) -> ({:.1}, {:.1}), length {:.1}",
            m.members,
            s.x1,
            s.y1,
            s.x2,
            s.y2,
            s.length()
        );
    }
}
