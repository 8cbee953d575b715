//! End-to-end run on the cheap-informative synthetic task.
//!
//! Usage: `synthetic_e2e [seed] [lambda] [rho]`

use std::sync::Arc;
use std::time::Instant;

use panelrl::classifier::Classifier;
use panelrl::dataset::{generate_synthetic, split, SplitSpec, Standardizer, SyntheticSpec};
use panelrl::encoder::{augmented_samples, pretrain, EmConfig, Encoder};
use panelrl::env::{EnvConfig, ResetMode, ShapingParams};
use panelrl::trainer::{evaluate, run_sm_ddpo, SmDdpoConfig};

fn main() -> panelrl::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map_or(0, |s| s.parse().unwrap());
    let lambda: f64 = args.get(2).map_or(2.0, |s| s.parse().unwrap());
    let rho: f64 = args.get(3).map_or(-0.3, |s| s.parse().unwrap());
    let t0 = Instant::now();
    let (recs, scheme) = generate_synthetic(&SyntheticSpec::cheap_informative(20_000, 0.1), seed)?;
    let mut parts = split(&recs, &SplitSpec { seed, ..Default::default() })?;
    let std = Standardizer::fit([&parts.encoder_train[..], &parts.rl_train[..]])?;
    for p in parts.parts_mut() {
        std.apply(p);
    }
    let em = EmConfig { iterations: 100, ..Default::default() };
    let mut enc = Encoder::new(scheme.d(), em, seed)?;
    let samples = augmented_samples(&parts.encoder_train, &scheme, 4, seed)?;
    pretrain(&mut enc, &samples, seed)?;
    eprintln!("encoder {:.1}s", t0.elapsed().as_secs_f64());
    let env_cfg = EnvConfig::new(scheme, ShapingParams::new(lambda, rho)?, ResetMode::Train);
    let cfg = SmDdpoConfig::desk();
    let clf = Classifier::new(4, cfg.classifier.hidden, seed)?;
    let enc = Arc::new(enc);
    let out = run_sm_ddpo(
        enc,
        clf,
        None,
        Arc::new(parts.rl_train.clone()),
        Arc::new(parts.rl_val.clone()),
        &env_cfg,
        &cfg,
        seed,
    )?;
    for r in &out.log {
        eprintln!("{r:?}");
    }
    let rep = evaluate(&out.policy, &out.embedder, Arc::new(parts.test.clone()), &env_cfg)?;
    println!(
        "seed {seed} f1 {:.4} cost {:.2} rates {:?} time {:.1}s",
        rep.f1(),
        rep.tally.mean_cost,
        rep.panel_rates,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}
