//! Single-solve probe: mode m eps loss mu [tol]
//! Pure mode also cross-checks against the barrier reference.
use cowrate::channel::{honest_squashed_state, observed_constraints, ChannelParams};
use cowrate::keyrate::{max_phase_error_with, EstimationOptions};
use cowrate::protocol::{coherence_average_operator, BlockConfig, PhaseMode};
use cowrate::sdp::reference::barrier_optimum;
use cowrate::sdp::{independent_constraints, SdpProblem};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args[1].clone();
    let m: usize = args[2].parse().unwrap();
    let eps: f64 = args[3].parse().unwrap();
    let loss: f64 = args[4].parse().unwrap();
    let mu: f64 = args[5].parse().unwrap();
    let tol: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(1e-8);

    let phase_mode = match mode.as_str() {
        "pure" => PhaseMode::Pure,
        "rand" => PhaseMode::Randomized { n_cut: 2 },
        other => panic!("unknown mode {other}"),
    };
    let config = BlockConfig::with_mode(m, mu, phase_mode).unwrap();
    let params = ChannelParams::from_loss_db(loss, eps, 0.01, 0.005).unwrap();

    let t0 = std::time::Instant::now();
    let opts = EstimationOptions { sdp_tol: tol, ..Default::default() };
    match max_phase_error_with(&config, &params, &opts) {
        Ok(b) => println!(
            "ratio={:.6} gap={:.2e} conv={} iters={} ncons={} [{:?}]",
            b.ratio,
            b.solver_gap,
            b.converged,
            b.iterations,
            b.constraint_count,
            t0.elapsed()
        ),
        Err(e) => println!("error: {e}"),
    }

    if mode == "pure" && std::env::var_os("PROBE_REF").is_some() {
        let set = observed_constraints(&config, &params).unwrap();
        let objective =
            coherence_average_operator(&config).unwrap().scale(-1.0 / set.gain);
        let problem = SdpProblem::new(objective, set.constraints, 1.0).unwrap();
        let reduced = independent_constraints(&problem).unwrap();
        let honest = honest_squashed_state(&config, &params).unwrap();
        let min_eig = honest.min_eigenvalue().unwrap();
        let t1 = std::time::Instant::now();
        match barrier_optimum(&reduced, &honest, 1e-11) {
            Ok(v) => println!(
                "ref_ratio={:.6} (interior mineig={min_eig:.1e}) [{:?}]",
                0.5 + v,
                t1.elapsed()
            ),
            Err(e) => println!("ref FAILED: {e} (mineig={min_eig:.1e})"),
        }
    }
}
