//! Run configuration: one JSON document covering the environment, all
//! training stages, certification, and the evaluation grid. Every field
//! can be overridden on the command line with `--set key=value` using
//! dotted paths (`--set adv.alpha_adv=0.4`).

use serde::{Deserialize, Serialize};

use rmapf_core::cert::CertConfig;
use rmapf_core::env::EnvConfig;
use rmapf_core::eval::EvalConfig;
use rmapf_core::ppo::PpoConfig;
use rmapf_core::robust::{AdvConfig, MacerConfig};

use crate::{AppError, AppResult};

/// Environment block of the config file.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct EnvBlock {
    #[serde(rename = "L")]
    pub side: usize,
    pub rho: f64,
    #[serde(rename = "N")]
    pub num_agents: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    /// Observation radius; the backbone is built for r = 2.
    pub r: usize,
}

impl Default for EnvBlock {
    fn default() -> Self {
        EnvBlock { side: 8, rho: 0.1, num_agents: 4, horizon: 64, r: 2 }
    }
}

impl EnvBlock {
    pub fn to_core(self) -> EnvConfig {
        EnvConfig {
            side: self.side,
            density: self.rho,
            num_agents: self.num_agents,
            horizon: self.horizon,
        }
    }
}

/// The resolved run configuration.
#[derive(Clone, Debug, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub env: EnvBlock,
    pub ppo: PpoConfig,
    pub adv: AdvConfig,
    pub macer: MacerConfig,
    pub cert: CertConfig,
    pub eval: EvalConfig,
    pub seed: u64,
    /// Outer iterations for the plain PPO baseline stage.
    pub baseline_iters: usize,
}

impl RunConfig {
    pub fn paper_defaults() -> RunConfig {
        RunConfig {
            env: EnvBlock::default(),
            ppo: PpoConfig::default(),
            adv: AdvConfig::default(),
            macer: MacerConfig::default(),
            cert: CertConfig::default(),
            eval: EvalConfig::default(),
            seed: 1,
            baseline_iters: 600,
        }
    }

    pub fn validate(&self) -> AppResult<()> {
        let e = |m: &str| Err(AppError::validation(m));
        if self.env.r != 2 {
            return e("env.r: the fixed backbone expects an observation radius of 2");
        }
        if self.env.side < 4 {
            return e("env.L: grid side must be at least 4");
        }
        if !(0.0..0.5).contains(&self.env.rho) {
            return e("env.rho: obstacle density must lie in [0, 0.5)");
        }
        if self.env.num_agents < 1 {
            return e("env.N: need at least one agent");
        }
        if self.env.horizon < 1 {
            return e("env.T: horizon must be positive");
        }
        let free = self.env.side * self.env.side
            - (self.env.rho * (self.env.side * self.env.side) as f64) as usize;
        if free < 2 * self.env.num_agents {
            return e("env: not enough free cells for distinct starts and goals");
        }
        if !(0.0 < self.ppo.discount && self.ppo.discount <= 1.0) {
            return e("ppo.discount: must lie in (0, 1]");
        }
        if !(0.0 < self.ppo.gae_lambda && self.ppo.gae_lambda <= 1.0) {
            return e("ppo.gae_lambda: must lie in (0, 1]");
        }
        if self.ppo.clip <= 0.0 {
            return e("ppo.clip: must be positive");
        }
        if self.ppo.epochs == 0 || self.ppo.minibatches == 0 || self.ppo.episodes_per_batch == 0 {
            return e("ppo: epochs, minibatches, and episodes_per_batch must be positive");
        }
        if !(0.0..=1.0).contains(&self.adv.alpha_adv) {
            return e("adv.alpha_adv: must lie in [0, 1]");
        }
        if self.adv.warmup_frac + self.adv.ramp_frac > 1.0 + 1e-9 {
            return e("adv: warmup_frac + ramp_frac must not exceed 1");
        }
        if self.adv.eps_train > 1.0 || self.adv.eps_smooth > 1.0 {
            return e("adv: training radii must not exceed 1");
        }
        if self.macer.lambda < 0.0 {
            return e("macer.lambda: must be nonnegative");
        }
        if self.macer.gamma_margin <= 0.0 {
            return e("macer.gamma_margin: must be positive");
        }
        if self.macer.samples < 2 {
            return e("macer.samples: need at least 2 Gaussian samples");
        }
        if self.macer.sigma <= 0.0 {
            return e("macer.sigma: must be positive");
        }
        if !(0.0..=1.0).contains(&self.macer.alpha_adv) {
            return e("macer.alpha_adv: must lie in [0, 1]");
        }
        self.cert
            .validate()
            .map_err(|err| AppError::validation(format!("cert: {err}")))?;
        if self.eval.episodes_per_cell == 0 {
            return e("eval.episodes_per_cell: must be positive");
        }
        if self.eval.pgd_steps == 0 {
            return e("eval.pgd_steps: must be positive");
        }
        Ok(())
    }

    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }

    pub fn hash(&self) -> String {
        format!("{:016x}", rmapf_core::net::fnv1a(self.to_canonical_json().as_bytes()))
    }
}

/// Loads a config file (or the defaults) and applies `--set` overrides.
pub fn resolve(
    config_path: Option<&std::path::Path>,
    sets: &[String],
    seed: Option<u64>,
) -> AppResult<RunConfig> {
    let mut value = match config_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                AppError::validation(format!("cannot read config {}: {e}", p.display()))
            })?;
            serde_json::from_str::<serde_json::Value>(&text)
                .map_err(|e| AppError::validation(format!("config is not valid JSON: {e}")))?
        }
        None => serde_json::to_value(RunConfig::paper_defaults())
            .expect("default config serializes"),
    };

    for set in sets {
        let (path, raw) = set
            .split_once('=')
            .ok_or_else(|| AppError::validation(format!("--set needs key=value, got `{set}`")))?;
        apply_set(&mut value, path, raw)?;
    }

    let mut cfg: RunConfig = serde_json::from_value(value)
        .map_err(|e| AppError::validation(format!("config field error: {e}")))?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_set(root: &mut serde_json::Value, path: &str, raw: &str) -> AppResult<()> {
    let mut cursor = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cursor
            .as_object_mut()
            .ok_or_else(|| AppError::validation(format!("`{path}`: `{part}` is not an object")))?;
        if i + 1 == parts.len() {
            let parsed: serde_json::Value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        cursor = obj
            .get_mut(*part)
            .ok_or_else(|| AppError::validation(format!("unknown config section `{part}`")))?;
    }
    Ok(())
}
