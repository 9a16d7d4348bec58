//! Scan probe: mode m eps lo hi step [floor]
use cowrate::channel::ChannelParams;
use cowrate::keyrate::optimize_intensity;
use cowrate::protocol::{BlockConfig, PhaseMode};

fn scan(m: usize, mode: PhaseMode, losses: &[f64], eps: f64, floor: f64) {
    let template = BlockConfig::with_mode(m, 1e-3, mode).unwrap();
    for &loss in losses {
        let params = ChannelParams::from_loss_db(loss, eps, 0.01, 0.005).unwrap();
        let t0 = std::time::Instant::now();
        match optimize_intensity(&template, &params, (floor, 0.5), 1e-6) {
            Ok(s) => {
                let p = s.point;
                println!(
                    "m={m} {mode:?} eps={eps:.0e} loss={loss}: mu*={:.4e} rate={:.4e} ratio={:.5} ebar={:.5} gap={:.1e} conv={} allzero={} [{}s]",
                    s.best_mu,
                    p.rate_per_pulse,
                    p.delta_max / p.gain,
                    p.e_bar,
                    p.solver_gap,
                    p.converged,
                    s.all_zero,
                    t0.elapsed().as_secs()
                );
            }
            Err(e) => println!("m={m} {mode:?} eps={eps:.0e} loss={loss}: FAILED {e}"),
        }
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = match args[1].as_str() {
        "pure" => PhaseMode::Pure,
        "rand" => PhaseMode::Randomized { n_cut: 2 },
        other => panic!("unknown mode {other}"),
    };
    let m: usize = args[2].parse().unwrap();
    let eps: f64 = args[3].parse().unwrap();
    let lo: f64 = args[4].parse().unwrap();
    let hi: f64 = args[5].parse().unwrap();
    let step: f64 = args[6].parse().unwrap();
    let floor: f64 = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(1e-4);

    let mut losses = Vec::new();
    let mut x = lo;
    while x <= hi + 1e-9 {
        losses.push(x);
        x += step;
    }
    scan(m, mode, &losses, eps, floor);
}
