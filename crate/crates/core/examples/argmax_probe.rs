use rmapf_core::attacks::AttackSpec;
use rmapf_core::env::EnvConfig;
use rmapf_core::eval::{run_cell, EvalConfig};
use rmapf_core::pool::SerialPool;
use rmapf_core::ppo::PpoConfig;
use rmapf_core::robust::{train, AdvConfig, Selector, TrainerConfig};

fn main() {
    let iters: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let seed: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let cfg = TrainerConfig {
        env: EnvConfig::default(),
        ppo: PpoConfig::default(),
        adv: AdvConfig { eval_period: 8, eval_episodes: 16, ..AdvConfig::disabled() },
        macer: None,
        selector: Selector::CleanSuccess,
        total_iters: iters,
        env_step_budget: None,
        seed,
    };
    let result = train(&cfg, rmapf_core::net::init_params(seed), None, &SerialPool, |l| {
        if let Some(s) = l.score {
            println!("iter {} rollout {:.3} val-argmax {:.3}", l.iter, l.clean_success, s);
        }
    })
    .unwrap();
    println!("selected iter {} with val {:.3}", result.best_iter, result.best_metric);
    let env = EnvConfig::default();
    let eval_cfg = EvalConfig::default();
    let clean = run_cell(&result.best, &AttackSpec::none(), 21, 0, &env, &eval_cfg, &SerialPool);
    let fgsm = run_cell(&result.best, &AttackSpec::fgsm(0.2), 3, 0, &env, &eval_cfg, &SerialPool);
    let pgd = run_cell(&result.best, &AttackSpec::pgd(0.2, 10, 1), 8, 0, &env, &eval_cfg, &SerialPool);
    println!(
        "report-pool: clean {:.3} fgsm@0.2 {:.3} pgd@0.2 {:.3}",
        clean.mean, fgsm.mean, pgd.mean
    );
}
