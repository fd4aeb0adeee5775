//! Verify every autodiff primitive (and the full scaled-down model) against
//! central finite differences.

use graspflow::check::gradient_check_suite;
use graspflow::Result;

fn main() -> Result<()> {
    let trials = 10;
    println!("running {trials} seeded trials per check\n");
    for (name, err) in gradient_check_suite(0, trials)? {
        let verdict = if err < 1e-4 { "ok" } else { "FAIL" };
        println!("{name:<24} max relative error {err:.3e}  {verdict}");
    }
    Ok(())
}
