//! Analytic point and line Jacobians against central differences, and the
//! entry-by-entry comparison with the literal closed forms.

use plslam::discrepancy::{audit_grid, audit_jacobians, format_report, ANALYTIC_NAMES};
use plslam::geometry::StereoCamera;

fn main() {
    let cam = StereoCamera::vga();
    let audit = audit_jacobians(1000, 2024, &cam);
    for (name, err) in ANALYTIC_NAMES.iter().zip(audit.analytic_max) {
        println!("{name:>24}: worst relative error {err:.2e}");
    }
    let grids = [audit_grid(640, 480, 1000).unwrap(), audit_grid(1241, 376, 2000).unwrap()];
    print!("{}", format_report(&audit, &grids));
}
