use std::time::Instant;

use rmapf_core::attacks::AttackSpec;
use rmapf_core::env::EnvConfig;
use rmapf_core::eval::{run_cell, EvalConfig};
use rmapf_core::pool::SerialPool;
use rmapf_core::ppo::PpoConfig;
use rmapf_core::robust::train_baseline;

fn main() {
    let iters: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(120);
    let env = EnvConfig::default();
    let ppo = PpoConfig::default();
    let t0 = Instant::now();
    let result = train_baseline(&env, &ppo, iters, 1, &SerialPool, |l| {
        if l.iter % 20 == 0 {
            println!("iter {} success {:.3}", l.iter, l.clean_success);
        }
    })
    .unwrap();
    println!(
        "trained {:.0}s best {:.3} at iter {}",
        t0.elapsed().as_secs_f64(),
        result.best_metric,
        result.best_iter
    );
    let params = result.best;
    let eval_cfg = EvalConfig::default();
    let pool = SerialPool;

    let t1 = Instant::now();
    let clean = run_cell(&params, &AttackSpec::none(), 21, 0, &env, &eval_cfg, &pool);
    println!("clean (argmax, 30 eps): {:.3}  [{:.0}s]", clean.mean, t1.elapsed().as_secs_f64());
    for spec in [
        AttackSpec::fgsm(0.10),
        AttackSpec::fgsm(0.20),
        AttackSpec::fgsm(0.30),
        AttackSpec::pgd(0.20, 10, 1),
        AttackSpec::pgd(0.30, 10, 1),
        AttackSpec::gaussian(0.20),
        AttackSpec::salt_pepper(0.15),
        AttackSpec::channel_dropout(0.20),
    ] {
        let t2 = Instant::now();
        let cell = run_cell(&params, &spec, 3, 0, &env, &eval_cfg, &pool);
        println!("{}: {:.3}  [{:.0}s]", cell.label, cell.mean, t2.elapsed().as_secs_f64());
    }
    std::fs::write("/tmp/fragility_done", "done").unwrap();
}
