use cowrate::channel::ChannelParams;
use cowrate::keyrate::optimize_intensity;
use cowrate::protocol::BlockConfig;

// Measure the eps = 0 cutoff as a function of the intensity search floor:
// at zero dark counts the viable-mu window narrows from below, so the
// floor is the design knob that ends the calibrated-device curve.
fn main() {
    let template = BlockConfig::pure(3, 1e-3).unwrap();
    for &floor in &[4e-4f64, 5e-4, 7e-4] {
        for &loss in &[21.5f64, 22.0, 22.5, 23.0, 23.5] {
            let params = ChannelParams::from_loss_db(loss, 0.0, 0.01, 0.005).unwrap();
            match optimize_intensity(&template, &params, (floor, 0.5), 1e-6) {
                Ok(s) => {
                    let p = s.point;
                    println!(
                        "floor={floor:.0e} loss={loss}: mu*={:.4e} rate={:.3e} ratio={:.5} gap={:.1e} allzero={}",
                        s.best_mu,
                        p.rate_per_pulse,
                        p.delta_max / p.gain,
                        p.solver_gap,
                        s.all_zero
                    );
                }
                Err(e) => println!("floor={floor:.0e} loss={loss}: FAILED {e}"),
            }
        }
        println!();
    }
}
