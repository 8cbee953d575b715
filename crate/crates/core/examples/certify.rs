//! Certifies the reference instance and random tiny instances.
//!
//! Usage: `certify [n_random] [seed]`

use panelrl::oracle::certify;
use panelrl::pareto::SweepGrid;

fn main() -> panelrl::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).map_or(20, |s| s.parse().unwrap());
    let seed: u64 = args.get(2).map_or(7, |s| s.parse().unwrap());
    let t0 = std::time::Instant::now();
    let cert = certify(n, seed, &SweepGrid::default(), 1)?;
    for c in &cert.containment {
        println!(
            "{:<10} violations {} margin {:+.2e} eps {:.4} eps_det {:.4} at {:.2}",
            c.instance, c.violations, c.worst_dominance_margin, c.eps_grid, c.eps_deterministic, c.worst_budget
        );
    }
    for a in &cert.am {
        println!("{:<10} am violations {} gap {:.1e}", a.instance, a.violations, a.max_envelope_gap);
    }
    println!(
        "total violations {} max eps {:.4} det {:.4} in {:.2}s",
        cert.total_violations,
        cert.max_eps_grid,
        cert.max_eps_deterministic,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}
