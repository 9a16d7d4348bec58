use cowrate::channel::{honest_squashed_state, observed_constraints, ChannelParams};
use cowrate::keyrate::max_phase_error_with;
use cowrate::keyrate::EstimationOptions;
use cowrate::protocol::{coherence_average_operator, BlockConfig};
use cowrate::sdp::reference::barrier_optimum;
use cowrate::sdp::{independent_constraints, SdpProblem};

// Does the certified ratio at fixed w = mu/eta genuinely degrade as mu
// shrinks, or is that an interior-point stall artifact? Cross-check the
// small-mu points at m = 2 against the barrier reference started from the
// honest channel state. eps = 1e-9 keeps that state strictly positive
// while being physically indistinguishable from eps = 0 here.
fn main() {
    let w = 0.05f64;
    for &mu in &[2e-3f64, 5e-4, 1e-4, 3e-5, 1e-5] {
        let eta: f64 = mu / w;
        let loss = -10.0 * eta.log10();
        let config = BlockConfig::pure(2, mu).unwrap();
        let params = ChannelParams::from_loss_db(loss, 1e-9, 0.01, 0.005).unwrap();

        let opts = EstimationOptions { sdp_tol: 1e-9, ..EstimationOptions::default() };
        let ipm = max_phase_error_with(&config, &params, &opts).unwrap();

        let set = observed_constraints(&config, &params).unwrap();
        let objective = coherence_average_operator(&config).unwrap().scale(-1.0 / set.gain);
        let problem = SdpProblem::new(objective, set.constraints, 1.0).unwrap();
        let reduced = independent_constraints(&problem).unwrap();
        let honest = honest_squashed_state(&config, &params).unwrap();
        let min_eig = honest.min_eigenvalue().unwrap();
        let reference = barrier_optimum(&reduced, &honest, 1e-11);
        match reference {
            Ok(value) => println!(
                "mu={mu:.0e} loss={loss:.2}: ipm_ratio={:.6} gap={:.1e} conv={} | ref_ratio={:.6} (interior mineig={min_eig:.1e})",
                ipm.ratio,
                ipm.solver_gap,
                ipm.converged,
                0.5 + value,
            ),
            Err(e) => println!(
                "mu={mu:.0e} loss={loss:.2}: ipm_ratio={:.6} gap={:.1e} conv={} | ref FAILED {e} (mineig={min_eig:.1e})",
                ipm.ratio, ipm.solver_gap, ipm.converged
            ),
        }
    }
}
