//! Deterministic attacked evaluation: the fixed attack grid, Table-style
//! aggregation, multi-restart PGD checks, paired bootstrap, and
//! storyboard capture.
//!
//! Episode `k` of attack cell `n_adv` always runs on environment seed
//! `seed_base + 13 k + 7 n_adv`, so different policies are compared on
//! identical worlds; the attacker differentiates through the evaluated
//! policy itself and agents act by argmax. Cells and episodes are
//! independent jobs merged in fixed order, which keeps reports
//! bit-identical across worker counts.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackSpec};
use crate::env::{self, Action, EnvConfig};
use crate::net::{self, NetParams};
use crate::pool::{self, JobPool};
use crate::rng;

/// Evaluation-grid configuration. The default grid covers
/// 5 FGSM + 5 PGD + 4 Gaussian + 4 salt-and-pepper + 3 dropout cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub episodes_per_cell: usize,
    pub seed_base: u64,
    pub fgsm_eps: Vec<f32>,
    pub pgd_eps: Vec<f32>,
    pub pgd_steps: u32,
    pub gauss_sigmas: Vec<f32>,
    pub sp_rates: Vec<f32>,
    pub dropout_rates: Vec<f32>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes_per_cell: 30,
            seed_base: 50_000,
            fgsm_eps: alloc::vec![0.05, 0.10, 0.15, 0.20, 0.30],
            pgd_eps: alloc::vec![0.05, 0.10, 0.15, 0.20, 0.30],
            pgd_steps: 10,
            gauss_sigmas: alloc::vec![0.05, 0.10, 0.15, 0.20],
            sp_rates: alloc::vec![0.02, 0.05, 0.10, 0.15],
            dropout_rates: alloc::vec![0.05, 0.10, 0.20],
        }
    }
}

impl EvalConfig {
    /// The attacked cells in fixed order: FGSM by ascending budget, then
    /// PGD, Gaussian, salt-and-pepper, channel dropout. The cell index
    /// in this list is `n_adv` of the episode seed formula.
    pub fn grid(&self) -> Vec<AttackSpec> {
        let mut cells = Vec::new();
        for &e in &self.fgsm_eps {
            cells.push(AttackSpec::fgsm(e));
        }
        for &e in &self.pgd_eps {
            cells.push(AttackSpec::pgd(e, self.pgd_steps, 1));
        }
        for &s in &self.gauss_sigmas {
            cells.push(AttackSpec::gaussian(s));
        }
        for &r in &self.sp_rates {
            cells.push(AttackSpec::salt_pepper(r));
        }
        for &r in &self.dropout_rates {
            cells.push(AttackSpec::channel_dropout(r));
        }
        cells
    }

    /// Environment seed for episode `k` of cell `n_adv`.
    pub fn episode_seed(&self, k: usize, n_adv: usize) -> u64 {
        self.seed_base + 13 * k as u64 + 7 * n_adv as u64
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("cell vectors must align: {0} vs {1}")]
    CellMismatch(usize, usize),
    #[error("budget {0} is not a PGD grid cell")]
    UnknownPgdBudget(f32),
}

/// One evaluated attack setting.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalCell {
    pub label: String,
    pub spec: AttackSpec,
    /// Success fraction of each episode, in episode order.
    pub episode_success: Vec<f32>,
    pub mean: f64,
}

/// Reproducibility metadata recorded by the caller.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ReportMeta {
    pub checkpoint_hash: String,
    pub config_hash: String,
    pub tool_version: String,
}

/// Full grid report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub clean: EvalCell,
    pub cells: Vec<EvalCell>,
    pub mean_adv: f64,
    pub worst_adv: f64,
    pub worst_cell: usize,
    pub worst_label: String,
    pub certified_mean_radius: Option<f64>,
    pub metadata: ReportMeta,
}

/// Runs one attacked episode with argmax actions and returns the final
/// success fraction. The attack source network is the evaluated policy.
pub fn run_attacked_episode(
    params: &NetParams,
    spec: &AttackSpec,
    env_cfg: &EnvConfig,
    instance_seed: u64,
    attack_seed: u64,
) -> f32 {
    let mut state = env::generate_instance(instance_seed, env_cfg)
        .expect("evaluation instance generation failed");
    let mut attack_rng = rng::stream_from_seed(attack_seed);
    while !state.is_terminal() {
        let n = state.agents.len();
        let mut actions = alloc::vec![Action::Wait; n];
        for i in 0..n {
            if state.agents[i].reached {
                continue;
            }
            let clean = env::observe(&state, i);
            let attacked = attacks::apply(spec, params, &clean, &mut attack_rng);
            let (out, _) = net::forward(params, &attacked);
            actions[i] = Action::from_index(out.greedy());
        }
        state.step(&actions).expect("non-terminal episode");
    }
    state.success_rate().expect("terminal episode")
}

/// Evaluates one attack cell over its fixed per-episode seed pool.
/// `restart` shifts the attack stream (episode seed + 1000 * restart)
/// without touching the worlds.
pub fn run_cell(
    params: &NetParams,
    spec: &AttackSpec,
    n_adv: usize,
    restart: u64,
    env_cfg: &EnvConfig,
    eval_cfg: &EvalConfig,
    pool: &dyn JobPool,
) -> EvalCell {
    let episodes = eval_cfg.episodes_per_cell;
    let success = pool::run_jobs(pool, episodes, |k| {
        let seed = eval_cfg.episode_seed(k, n_adv);
        run_attacked_episode(params, spec, env_cfg, seed, seed + 1000 * restart)
    });
    let mean = success.iter().map(|&s| s as f64).sum::<f64>() / episodes.max(1) as f64;
    EvalCell { label: spec.label(), spec: *spec, episode_success: success, mean }
}

/// Runs the full grid (all attacked cells plus one clean cell) and
/// aggregates the Table-style metrics.
pub fn run_grid(
    params: &NetParams,
    env_cfg: &EnvConfig,
    eval_cfg: &EvalConfig,
    pool: &dyn JobPool,
) -> EvalReport {
    let grid = eval_cfg.grid();
    let clean_idx = grid.len();
    let clean = run_cell(params, &AttackSpec::none(), clean_idx, 0, env_cfg, eval_cfg, pool);
    let cells: Vec<EvalCell> = grid
        .iter()
        .enumerate()
        .map(|(n_adv, spec)| run_cell(params, spec, n_adv, 0, env_cfg, eval_cfg, pool))
        .collect();

    let mean_adv = cells.iter().map(|c| c.mean).sum::<f64>() / cells.len().max(1) as f64;
    let mut worst_cell = 0usize;
    for (i, c) in cells.iter().enumerate() {
        if c.mean < cells[worst_cell].mean {
            worst_cell = i;
        }
    }
    let (worst_adv, worst_label) = if cells.is_empty() {
        (0.0, String::new())
    } else {
        (cells[worst_cell].mean, cells[worst_cell].label.clone())
    };
    EvalReport {
        clean,
        cells,
        mean_adv,
        worst_adv,
        worst_cell,
        worst_label,
        certified_mean_radius: None,
        metadata: ReportMeta::default(),
    }
}

/// Worst-of-restarts PGD result for one budget.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PgdRestartCell {
    pub eps: f32,
    /// Mean success of the full cell under each restart's attack stream.
    pub restart_means: Vec<f64>,
    /// Minimum over restarts.
    pub worst: f64,
}

/// Re-runs the PGD grid cells with `restarts` independent attack
/// initializations per episode and reports the minimum cell success.
pub fn multi_restart_pgd(
    params: &NetParams,
    eps_list: &[f32],
    restarts: usize,
    env_cfg: &EnvConfig,
    eval_cfg: &EvalConfig,
    pool: &dyn JobPool,
) -> Result<Vec<PgdRestartCell>, EvalError> {
    let mut out = Vec::new();
    for &eps in eps_list {
        let pos = eval_cfg
            .pgd_eps
            .iter()
            .position(|&e| e == eps)
            .ok_or(EvalError::UnknownPgdBudget(eps))?;
        let n_adv = eval_cfg.fgsm_eps.len() + pos;
        let spec = AttackSpec::pgd(eps, eval_cfg.pgd_steps, 1);
        let mut restart_means = Vec::with_capacity(restarts);
        for r in 0..restarts.max(1) {
            let cell = run_cell(params, &spec, n_adv, r as u64, env_cfg, eval_cfg, pool);
            restart_means.push(cell.mean);
        }
        let worst = restart_means.iter().cloned().fold(f64::INFINITY, f64::min);
        out.push(PgdRestartCell { eps, restart_means, worst });
    }
    Ok(out)
}

/// Paired bootstrap summary over aligned cell vectors.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub mean_gap: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub resamples: usize,
}

/// Paired bootstrap of `mean(a - b)` over cells: resamples cell indices
/// with replacement and reports the 2.5/97.5 empirical percentiles.
pub fn paired_bootstrap(
    a: &[f64],
    b: &[f64],
    resamples: usize,
    seed: u64,
) -> Result<BootstrapSummary, EvalError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(EvalError::CellMismatch(a.len(), b.len()));
    }
    let n = a.len();
    let diffs: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x - y).collect();
    let mean_gap = diffs.iter().sum::<f64>() / n as f64;

    let mut rng = rng::stream(&[rng::tag::BOOTSTRAP, seed]);
    let mut gaps: Vec<f64> = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut acc = 0.0f64;
        for _ in 0..n {
            let idx = (rng::unit_f32(&mut rng) as f64 * n as f64) as usize % n;
            acc += diffs[idx];
        }
        gaps.push(acc / n as f64);
    }
    gaps.sort_by(|x, y| x.partial_cmp(y).expect("finite gaps"));
    Ok(BootstrapSummary {
        mean_gap,
        ci_lo: percentile(&gaps, 0.025),
        ci_hi: percentile(&gaps, 0.975),
        resamples,
    })
}

/// Linear-interpolation percentile of a sorted slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// One step of a storyboard strip: positions before the move, the
/// clean-argmax and attacked actions of every agent, and flip flags.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StoryStep {
    pub t: usize,
    pub positions: Vec<[usize; 2]>,
    pub clean_actions: Vec<usize>,
    pub attacked_actions: Vec<usize>,
    pub flips: Vec<bool>,
    pub reached: Vec<bool>,
}

/// Storyboard of one policy on one instance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolicyStrip {
    pub label: String,
    pub success: f32,
    pub flip_count: usize,
    pub steps: Vec<StoryStep>,
    pub final_positions: Vec<[usize; 2]>,
    pub final_reached: Vec<bool>,
}

/// Side-by-side storyboard document.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StoryboardDoc {
    pub instance_seed: u64,
    pub attack: AttackSpec,
    pub instance: env::InstanceDoc,
    pub policies: Vec<PolicyStrip>,
}

/// Replays the identical instance under the same attack for each policy
/// and records per-step clean vs attacked actions.
pub fn storyboard_capture(
    policies: &[(String, &NetParams)],
    instance_seed: u64,
    spec: &AttackSpec,
    env_cfg: &EnvConfig,
) -> StoryboardDoc {
    let template = env::generate_instance(instance_seed, env_cfg)
        .expect("storyboard instance generation failed");
    let mut strips = Vec::new();
    for (label, params) in policies {
        let mut state = template.clone();
        let mut attack_rng = rng::stream_from_seed(instance_seed);
        let mut steps = Vec::new();
        let mut flip_count = 0usize;
        while !state.is_terminal() {
            let n = state.agents.len();
            let mut actions = alloc::vec![Action::Wait; n];
            let mut step = StoryStep {
                t: state.t,
                positions: state.agents.iter().map(|a| [a.pos.0, a.pos.1]).collect(),
                clean_actions: alloc::vec![0; n],
                attacked_actions: alloc::vec![0; n],
                flips: alloc::vec![false; n],
                reached: state.agents.iter().map(|a| a.reached).collect(),
            };
            for i in 0..n {
                if state.agents[i].reached {
                    continue;
                }
                let clean = env::observe(&state, i);
                let clean_action = net::forward(params, &clean).0.greedy();
                let attacked_obs = attacks::apply(spec, params, &clean, &mut attack_rng);
                let attacked_action = net::forward(params, &attacked_obs).0.greedy();
                step.clean_actions[i] = clean_action;
                step.attacked_actions[i] = attacked_action;
                step.flips[i] = clean_action != attacked_action;
                if step.flips[i] {
                    flip_count += 1;
                }
                actions[i] = Action::from_index(attacked_action);
            }
            steps.push(step);
            state.step(&actions).expect("non-terminal episode");
        }
        strips.push(PolicyStrip {
            label: label.clone(),
            success: state.success_rate().expect("terminal"),
            flip_count,
            steps,
            final_positions: state.agents.iter().map(|a| [a.pos.0, a.pos.1]).collect(),
            final_reached: state.agents.iter().map(|a| a.reached).collect(),
        });
    }
    StoryboardDoc {
        instance_seed,
        attack: *spec,
        instance: template.to_doc(),
        policies: strips,
    }
}
