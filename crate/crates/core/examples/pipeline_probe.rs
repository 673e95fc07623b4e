use std::time::Instant;

use rmapf_core::attacks::AttackSpec;
use rmapf_core::env::EnvConfig;
use rmapf_core::eval::{run_cell, EvalConfig};
use rmapf_core::net::{encode_checkpoint, NetParams};
use rmapf_core::pool::SerialPool;
use rmapf_core::ppo::PpoConfig;
use rmapf_core::robust::{
    finetune_macer, train, AdvConfig, MacerConfig, Selector, TrainerConfig,
};

fn key_cells(name: &str, params: &NetParams, env: &EnvConfig, eval_cfg: &EvalConfig) {
    let pool = SerialPool;
    let mut line = format!("{name}:");
    for (label, spec, n_adv) in [
        ("clean", AttackSpec::none(), 21usize),
        ("fgsm.2", AttackSpec::fgsm(0.2), 3),
        ("fgsm.3", AttackSpec::fgsm(0.3), 4),
        ("pgd.2", AttackSpec::pgd(0.2, 10, 1), 8),
        ("pgd.3", AttackSpec::pgd(0.3, 10, 1), 9),
        ("sp.15", AttackSpec::salt_pepper(0.15), 17),
    ] {
        let cell = run_cell(params, &spec, n_adv, 0, env, eval_cfg, &pool);
        line += &format!("  {label} {:.3}", cell.mean);
    }
    println!("{line}");
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let baseline_iters: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let advppo_iters: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(100);
    let macer_budget: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(6000);
    let seed: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1);

    let env = EnvConfig::default();
    let ppo = PpoConfig::default();
    let eval_cfg = EvalConfig::default();
    let pool = SerialPool;

    // Stage 1: baseline.
    let t0 = Instant::now();
    let cfg = TrainerConfig {
        env,
        ppo,
        adv: AdvConfig { eval_period: 8, eval_episodes: 32, ..AdvConfig::disabled() },
        macer: None,
        selector: Selector::CleanSuccess,
        total_iters: baseline_iters,
        env_step_budget: None,
        seed,
    };
    let base = train(&cfg, rmapf_core::net::init_params(seed), None, &pool, |_| {}).unwrap();
    println!(
        "baseline: {:.0}s, selected iter {} val {:.3}",
        t0.elapsed().as_secs_f64(),
        base.best_iter,
        base.best_metric
    );
    std::fs::write("/tmp/pipe_baseline.ckpt", encode_checkpoint(&base.best)).unwrap();
    key_cells("baseline", &base.best, &env, &eval_cfg);

    // Stage 2: adversarial PPO.
    let t1 = Instant::now();
    let adv = AdvConfig { total_iters: advppo_iters, ..AdvConfig::default() };
    let cfg = TrainerConfig {
        env,
        ppo,
        adv,
        macer: None,
        selector: Selector::RobustScore,
        total_iters: advppo_iters,
        env_step_budget: None,
        seed: seed + 1,
    };
    let mut min_ent = f32::INFINITY;
    let advppo = train(&cfg, base.best.clone(), Some(&base.best), &pool, |l| {
        min_ent = min_ent.min(l.entropy);
        if l.iter % 10 == 0 {
            println!(
                "  adv iter {} clean {:.3} kappa {:.2} sa {:.4} tr {:.4} score {:?} [{:.0}s]",
                l.iter, l.clean_success, l.kappa, l.sa_kl, l.trades, l.score,
                t1.elapsed().as_secs_f64()
            );
        }
    })
    .unwrap();
    println!(
        "advppo: {:.0}s, selected iter {} score {:.3}, min entropy {:.3}",
        t1.elapsed().as_secs_f64(),
        advppo.best_iter,
        advppo.best_metric,
        min_ent
    );
    std::fs::write("/tmp/pipe_advppo.ckpt", encode_checkpoint(&advppo.best)).unwrap();
    key_cells("advppo", &advppo.best, &env, &eval_cfg);

    // Stage 3: hinge fine-tune (lambda 0.05 and 0.30).
    for lambda in [0.05f32, 0.30] {
        let t2 = Instant::now();
        let macer = MacerConfig { lambda, env_step_budget: macer_budget, ..MacerConfig::default() };
        let mut min_ent = f32::INFINITY;
        let ft = finetune_macer(
            &advppo.best,
            &base.best,
            &env,
            &ppo,
            &AdvConfig { total_iters: advppo_iters, ..AdvConfig::default() },
            &macer,
            seed + 2,
            &pool,
            |l| {
                min_ent = min_ent.min(l.entropy);
                if l.iter % 10 == 0 {
                    println!(
                        "  macer({lambda}) iter {} clean {:.3} hinge {:.4} ent {:.3} score {:?}",
                        l.iter, l.clean_success, l.macer_hinge, l.entropy, l.score
                    );
                }
            },
        )
        .unwrap();
        println!(
            "macer(lambda={lambda}): {:.0}s, selected iter {} score {:.3}, min entropy {:.3}",
            t2.elapsed().as_secs_f64(),
            ft.best_iter,
            ft.best_metric,
            min_ent
        );
        if lambda < 0.1 {
            std::fs::write("/tmp/pipe_macer.ckpt", encode_checkpoint(&ft.best)).unwrap();
            key_cells("macer", &ft.best, &env, &eval_cfg);
        }
    }
    println!("total {:.0}s", t0.elapsed().as_secs_f64());
}
