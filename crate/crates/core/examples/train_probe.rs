use std::io::Write;
use std::time::Instant;

use rmapf_core::env::EnvConfig;
use rmapf_core::pool::SerialPool;
use rmapf_core::ppo::PpoConfig;
use rmapf_core::robust::train_baseline;

fn main() {
    let iters: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let seed: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let env = EnvConfig::default();
    let ppo = PpoConfig::default();
    let t0 = Instant::now();
    let mut log = std::fs::File::create(format!("/tmp/probe_{seed}.log")).unwrap();
    let result = train_baseline(&env, &ppo, iters, seed, &SerialPool, |l| {
        let line = format!(
            "iter {} success {:.3} ent {:.3} rent {:.3} vloss {:.4} rec {} t {:.1}s",
            l.iter,
            l.clean_success,
            l.entropy,
            l.rollout_entropy,
            l.value_loss,
            l.records,
            t0.elapsed().as_secs_f64()
        );
        writeln!(log, "{line}").unwrap();
        if l.iter % 10 == 0 {
            println!("{line}");
        }
    })
    .unwrap();
    println!("best success {:.3} at iter {}", result.best_metric, result.best_iter);
}
