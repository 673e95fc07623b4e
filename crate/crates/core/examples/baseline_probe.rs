use rmapf_core::attacks::AttackSpec;
use rmapf_core::env::EnvConfig;
use rmapf_core::eval::{run_cell, EvalConfig};
use rmapf_core::net::encode_checkpoint;
use rmapf_core::pool::SerialPool;
use rmapf_core::ppo::PpoConfig;
use rmapf_core::robust::{train, AdvConfig, Selector, TrainerConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let eps_batch: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(32);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1);
    let val_eps: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(64);
    let env = EnvConfig::default();
    let ppo = PpoConfig { episodes_per_batch: eps_batch, ..PpoConfig::default() };
    let cfg = TrainerConfig {
        env,
        ppo,
        adv: AdvConfig { eval_period: 8, eval_episodes: val_eps, ..AdvConfig::disabled() },
        macer: None,
        selector: Selector::CleanSuccess,
        total_iters: iters,
        env_step_budget: None,
        seed,
    };
    let t0 = std::time::Instant::now();
    let r = train(&cfg, rmapf_core::net::init_params(seed), None, &SerialPool, |l| {
        if let Some(s) = l.score {
            if l.iter % 40 == 7 {
                println!("iter {} val {:.3} [{:.0}s]", l.iter, s, t0.elapsed().as_secs_f64());
            }
        }
    })
    .unwrap();
    println!("selected iter {} val {:.3} [{:.0}s]", r.best_iter, r.best_metric, t0.elapsed().as_secs_f64());
    let eval_cfg = EvalConfig::default();
    for (name, p) in [("best", &r.best), ("last", &r.last)] {
        let clean = run_cell(p, &AttackSpec::none(), 21, 0, &env, &eval_cfg, &SerialPool);
        println!("{name}: report-clean {:.3}", clean.mean);
    }
    std::fs::write(
        format!("/tmp/base_{eps_batch}_{seed}.ckpt"),
        encode_checkpoint(&r.best),
    )
    .unwrap();
}
