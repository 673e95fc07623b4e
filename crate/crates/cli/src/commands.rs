//! Subcommand implementations: each mode writes its artifacts plus a
//! reproducibility manifest into the output directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use rmapf_core::attacks::{AttackKind, AttackSpec};
use rmapf_core::cert;
use rmapf_core::eval::{self, EvalReport};
use rmapf_core::net::NetParams;
use rmapf_core::pool::JobPool;
use rmapf_core::robust::{self, IterLog};

use crate::config::RunConfig;
use crate::io::{self, JsonlWriter, Manifest};
use crate::svg;
use crate::{AppError, AppResult};

pub struct Ctx<'a> {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub pool: &'a dyn JobPool,
    pub jobs: usize,
    pub quiet: bool,
}

impl Ctx<'_> {
    fn manifest(&self, mode: &str) -> Manifest {
        Manifest::new(mode, &self.cfg, self.cfg.seed, self.jobs)
    }

    fn progress(&self, line: &str) {
        if !self.quiet {
            eprintln!("{line}");
        }
    }
}

fn train_progress(ctx: &Ctx<'_>, log: &IterLog) {
    if log.iter % 10 == 0 || log.score.is_some() {
        ctx.progress(&format!(
            "iter {:>4}  clean {:.3}  entropy {:.3}  kappa {:.2}  score {}",
            log.iter,
            log.clean_success,
            log.entropy,
            log.kappa,
            log.score.map_or("-".to_string(), |s| format!("{s:.3}")),
        ));
    }
}

pub fn train_baseline(ctx: &Ctx<'_>) -> AppResult<()> {
    let started = Instant::now();
    io::ensure_dir(&ctx.out)?;
    let mut log = JsonlWriter::create(&ctx.out.join("train_log.jsonl"))?;
    let result = robust::train_baseline(
        &ctx.cfg.env.to_core(),
        &ctx.cfg.ppo,
        ctx.cfg.baseline_iters,
        ctx.cfg.seed,
        ctx.pool,
        |l| {
            log.write(l);
            train_progress(ctx, l);
        },
    )
    .map_err(|e| AppError::runtime(format!("training failed: {e}")))?;

    let ckpt = ctx.out.join("baseline.ckpt");
    io::save_checkpoint(&result.best, &ckpt)?;
    let last = ctx.out.join("baseline_last.ckpt");
    io::save_checkpoint(&result.last, &last)?;
    ctx.progress(&format!(
        "baseline: best clean rollout success {:.3} at iter {}",
        result.best_metric, result.best_iter
    ));

    let mut manifest = ctx.manifest("train-baseline");
    manifest.add_output("baseline.ckpt", &ckpt)?;
    manifest.add_output("baseline_last.ckpt", &last)?;
    manifest.add_output("train_log.jsonl", &ctx.out.join("train_log.jsonl"))?;
    manifest.wall_time_secs = started.elapsed().as_secs_f64();
    manifest.write(&ctx.out)?;
    Ok(())
}

pub fn train_advppo(ctx: &Ctx<'_>, baseline: &Path) -> AppResult<()> {
    let started = Instant::now();
    io::ensure_dir(&ctx.out)?;
    let base = io::load_checkpoint(baseline)?;
    let mut log = JsonlWriter::create(&ctx.out.join("train_log.jsonl"))?;
    let result = robust::train_advppo(
        &base,
        &ctx.cfg.env.to_core(),
        &ctx.cfg.ppo,
        &ctx.cfg.adv,
        ctx.cfg.seed,
        ctx.pool,
        |l| {
            log.write(l);
            train_progress(ctx, l);
        },
    )
    .map_err(|e| AppError::runtime(format!("training failed: {e}")))?;

    let ckpt = ctx.out.join("advppo.ckpt");
    io::save_checkpoint(&result.best, &ckpt)?;
    ctx.progress(&format!(
        "adv-ppo: best robust score {:.3} at iter {}",
        result.best_metric, result.best_iter
    ));

    let mut manifest = ctx.manifest("train-advppo");
    manifest.add_input("baseline.ckpt", baseline)?;
    manifest.add_output("advppo.ckpt", &ckpt)?;
    manifest.add_output("train_log.jsonl", &ctx.out.join("train_log.jsonl"))?;
    manifest.wall_time_secs = started.elapsed().as_secs_f64();
    manifest.write(&ctx.out)?;
    Ok(())
}

pub fn finetune_macer(ctx: &Ctx<'_>, checkpoint: &Path, baseline: &Path) -> AppResult<()> {
    let started = Instant::now();
    io::ensure_dir(&ctx.out)?;
    let start = io::load_checkpoint(checkpoint)?;
    let base = io::load_checkpoint(baseline)?;
    let mut log = JsonlWriter::create(&ctx.out.join("train_log.jsonl"))?;
    let result = robust::finetune_macer(
        &start,
        &base,
        &ctx.cfg.env.to_core(),
        &ctx.cfg.ppo,
        &ctx.cfg.adv,
        &ctx.cfg.macer,
        ctx.cfg.seed,
        ctx.pool,
        |l| {
            log.write(l);
            train_progress(ctx, l);
        },
    )
    .map_err(|e| AppError::runtime(format!("fine-tune failed: {e}")))?;

    let ckpt = ctx.out.join("macer.ckpt");
    io::save_checkpoint(&result.best, &ckpt)?;
    ctx.progress(&format!(
        "macer fine-tune: best robust score {:.3} at iter {}",
        result.best_metric, result.best_iter
    ));

    let mut manifest = ctx.manifest("finetune-macer");
    manifest.add_input("start.ckpt", checkpoint)?;
    manifest.add_input("baseline.ckpt", baseline)?;
    manifest.add_output("macer.ckpt", &ckpt)?;
    manifest.add_output("train_log.jsonl", &ctx.out.join("train_log.jsonl"))?;
    manifest.wall_time_secs = started.elapsed().as_secs_f64();
    manifest.write(&ctx.out)?;
    Ok(())
}

fn attach_metadata(report: &mut EvalReport, ctx: &Ctx<'_>, checkpoint: &Path) -> AppResult<()> {
    report.metadata.checkpoint_hash = io::file_hash(checkpoint)?;
    report.metadata.config_hash = ctx.cfg.hash();
    report.metadata.tool_version = env!("CARGO_PKG_VERSION").to_string();
    Ok(())
}

pub fn eval_grid(ctx: &Ctx<'_>, checkpoint: &Path) -> AppResult<()> {
    let started = Instant::now();
    io::ensure_dir(&ctx.out)?;
    let params = io::load_checkpoint(checkpoint)?;
    let mut report = eval::run_grid(&params, &ctx.cfg.env.to_core(), &ctx.cfg.eval, ctx.pool);
    attach_metadata(&mut report, ctx, checkpoint)?;
    ctx.progress(&format!(
        "clean {:.3}  mean-adv {:.3}  worst-adv {:.3} ({})",
        report.clean.mean, report.mean_adv, report.worst_adv, report.worst_label
    ));

    let json_path = ctx.out.join("report.json");
    io::write_json(&report, &json_path)?;
    let csv_path = ctx.out.join("report.csv");
    std::fs::write(&csv_path, io::report_csv(&report))
        .map_err(|e| AppError::runtime(format!("cannot write report.csv: {e}")))?;

    let mut manifest = ctx.manifest("eval-grid");
    manifest.add_input("checkpoint", checkpoint)?;
    manifest.add_output("report.json", &json_path)?;
    manifest.add_output("report.csv", &csv_path)?;
    manifest.wall_time_secs = started.elapsed().as_secs_f64();
    manifest.write(&ctx.out)?;
    Ok(())
}

pub fn eval_pgd5(ctx: &Ctx<'_>, checkpoint: &Path, eps: &[f32], restarts: usize) -> AppResult<()> {
    let started = Instant::now();
    io::ensure_dir(&ctx.out)?;
    let params = io::load_checkpoint(checkpoint)?;
    let cells = eval::multi_restart_pgd(
        &params,
        eps,
        restarts,
        &ctx.cfg.env.to_core(),
        &ctx.cfg.eval,
        ctx.pool,
    )
    .map_err(|e| AppError::validation(format!("{e}")))?;
    for c in &cells {
        ctx.progress(&format!("pgd-{restarts} @ eps {:.2}: worst {:.3}", c.eps, c.worst));
    }

    let json_path = ctx.out.join("pgd5.json");
    io::write_json(&cells, &json_path)?;
    let csv_path = ctx.out.join("pgd5.csv");
    std::fs::write(&csv_path, io::pgd5_csv(&cells))
        .map_err(|e| AppError::runtime(format!("cannot write pgd5.csv: {e}")))?;

    let mut manifest = ctx.manifest("eval-pgd5");
    manifest.add_input("checkpoint", checkpoint)?;
    manifest.add_output("pgd5.json", &json_path)?;
    manifest.add_output("pgd5.csv", &csv_path)?;
    manifest.wall_time_secs = started.elapsed().as_secs_f64();
    manifest.write(&ctx.out)?;
    Ok(())
}

pub fn certify(ctx: &Ctx<'_>, checkpoint: &Path) -> AppResult<()> {
    let started = Instant::now();
    io::ensure_dir(&ctx.out)?;
    let params = io::load_checkpoint(checkpoint)?;
    let report = cert::radius_pool(
        &params,
        &ctx.cfg.env.to_core(),
        &ctx.cfg.cert,
        ctx.cfg.seed,
        ctx.pool,
    )
    .map_err(|e| AppError::runtime(format!("certification failed: {e}")))?;
    ctx.progress(&format!(
        "certified mean radius {:.4} (abstain {:.1}%)",
        report.mean_radius,
        100.0 * report.abstain_fraction
    ));

    let json_path = ctx.out.join("cert.json");
    io::write_json(&report, &json_path)?;
    let mut manifest = ctx.manifest("certify");
    manifest.add_input("checkpoint", checkpoint)?;
    manifest.add_output("cert.json", &json_path)?;
    manifest.wall_time_secs = started.elapsed().as_secs_f64();
    manifest.write(&ctx.out)?;
    Ok(())
}

pub fn storyboard(
    ctx: &Ctx<'_>,
    checkpoints: &[PathBuf],
    instance_seed: u64,
    kind: AttackKind,
    eps: f32,
) -> AppResult<()> {
    let started = Instant::now();
    io::ensure_dir(&ctx.out)?;
    let mut params: Vec<(String, NetParams)> = Vec::new();
    for path in checkpoints {
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "policy".to_string());
        params.push((label, io::load_checkpoint(path)?));
    }
    let spec = match kind {
        AttackKind::None => AttackSpec::none(),
        AttackKind::Fgsm => AttackSpec::fgsm(eps),
        AttackKind::Pgd => AttackSpec::pgd(eps, ctx.cfg.eval.pgd_steps, 1),
        AttackKind::Gaussian => AttackSpec::gaussian(eps),
        AttackKind::SaltPepper => AttackSpec::salt_pepper(eps),
        AttackKind::ChannelDropout => AttackSpec::channel_dropout(eps),
    };
    let refs: Vec<(String, &NetParams)> =
        params.iter().map(|(l, p)| (l.clone(), p)).collect();
    let doc = eval::storyboard_capture(&refs, instance_seed, &spec, &ctx.cfg.env.to_core());
    for strip in &doc.policies {
        ctx.progress(&format!(
            "{}: success {:.2}, {} flipped actions",
            strip.label, strip.success, strip.flip_count
        ));
    }

    let json_path = ctx.out.join("storyboard.json");
    io::write_json(&doc, &json_path)?;
    let mut manifest = ctx.manifest("storyboard");
    for (i, path) in checkpoints.iter().enumerate() {
        manifest.add_input(&format!("checkpoint_{i}"), path)?;
    }
    manifest.add_output("storyboard.json", &json_path)?;
    for strip in &doc.policies {
        let svg_path = ctx.out.join(format!("storyboard_{}.svg", strip.label));
        std::fs::write(&svg_path, svg::storyboard_svg(&doc.instance, strip))
            .map_err(|e| AppError::runtime(format!("cannot write SVG: {e}")))?;
        manifest.add_output(&format!("storyboard_{}.svg", strip.label), &svg_path)?;
    }
    manifest.wall_time_secs = started.elapsed().as_secs_f64();
    manifest.write(&ctx.out)?;
    Ok(())
}

/// Cross-seed aggregate of one metric: mean and sample standard
/// deviation (ddof = 1).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
}

pub fn aggregate(values: &[f64]) -> MetricSummary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        let ss = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        (ss / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MetricSummary { mean, std }
}

/// Cross-seed report summary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedSummary {
    pub inputs: Vec<String>,
    pub clean: MetricSummary,
    pub mean_adv: MetricSummary,
    pub worst_adv: MetricSummary,
    pub per_seed_clean: Vec<f64>,
    pub per_seed_mean_adv: Vec<f64>,
    pub per_seed_worst_adv: Vec<f64>,
}

pub fn report(ctx: &Ctx<'_>, inputs: &[PathBuf]) -> AppResult<()> {
    let started = Instant::now();
    io::ensure_dir(&ctx.out)?;
    if inputs.is_empty() {
        return Err(AppError::validation("report needs at least one input report"));
    }
    let reports: Vec<EvalReport> =
        inputs.iter().map(|p| io::read_json::<EvalReport>(p)).collect::<AppResult<_>>()?;
    let clean: Vec<f64> = reports.iter().map(|r| r.clean.mean).collect();
    let mean_adv: Vec<f64> = reports.iter().map(|r| r.mean_adv).collect();
    let worst_adv: Vec<f64> = reports.iter().map(|r| r.worst_adv).collect();
    let summary = SeedSummary {
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        clean: aggregate(&clean),
        mean_adv: aggregate(&mean_adv),
        worst_adv: aggregate(&worst_adv),
        per_seed_clean: clean,
        per_seed_mean_adv: mean_adv,
        per_seed_worst_adv: worst_adv,
    };
    ctx.progress(&format!(
        "clean {:.3} +- {:.3} | mean-adv {:.3} +- {:.3} | worst-adv {:.3} +- {:.3}",
        summary.clean.mean,
        summary.clean.std,
        summary.mean_adv.mean,
        summary.mean_adv.std,
        summary.worst_adv.mean,
        summary.worst_adv.std
    ));

    let json_path = ctx.out.join("summary.json");
    io::write_json(&summary, &json_path)?;
    let mut manifest = ctx.manifest("report");
    for (i, p) in inputs.iter().enumerate() {
        manifest.add_input(&format!("report_{i}"), p)?;
    }
    manifest.add_output("summary.json", &json_path)?;
    manifest.wall_time_secs = started.elapsed().as_secs_f64();
    manifest.write(&ctx.out)?;
    Ok(())
}

/// Bootstrap comparison of two grid reports.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompareSummary {
    pub report_a: String,
    pub report_b: String,
    pub gap: eval::BootstrapSummary,
    pub clean_a: f64,
    pub clean_b: f64,
}

pub fn compare(ctx: &Ctx<'_>, report_a: &Path, report_b: &Path) -> AppResult<()> {
    let started = Instant::now();
    io::ensure_dir(&ctx.out)?;
    let a: EvalReport = io::read_json(report_a)?;
    let b: EvalReport = io::read_json(report_b)?;
    if a.cells.len() != b.cells.len()
        || a.cells.iter().zip(b.cells.iter()).any(|(x, y)| x.label != y.label)
    {
        return Err(AppError::validation("reports use different attack grids"));
    }
    let cells_a: Vec<f64> = a.cells.iter().map(|c| c.mean).collect();
    let cells_b: Vec<f64> = b.cells.iter().map(|c| c.mean).collect();
    let gap = eval::paired_bootstrap(&cells_a, &cells_b, 10_000, ctx.cfg.seed)
        .map_err(|e| AppError::runtime(format!("{e}")))?;
    println!(
        "mean adversarial gap (A - B): {:+.4} pp, 95% CI [{:+.4}, {:+.4}]",
        100.0 * gap.mean_gap,
        100.0 * gap.ci_lo,
        100.0 * gap.ci_hi
    );

    let summary = CompareSummary {
        report_a: report_a.display().to_string(),
        report_b: report_b.display().to_string(),
        gap,
        clean_a: a.clean.mean,
        clean_b: b.clean.mean,
    };
    let json_path = ctx.out.join("compare.json");
    io::write_json(&summary, &json_path)?;
    let mut manifest = ctx.manifest("compare");
    manifest.add_input("report_a", report_a)?;
    manifest.add_input("report_b", report_b)?;
    manifest.add_output("compare.json", &json_path)?;
    manifest.wall_time_secs = started.elapsed().as_secs_f64();
    manifest.write(&ctx.out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_uses_sample_std() {
        // Hand check on three known vectors: mean 2, ddof=1 std 1.
        let s = aggregate(&[1.0, 2.0, 3.0]);
        assert!((s.mean - 2.0).abs() < 1e-12);
        assert!((s.std - 1.0).abs() < 1e-12);
        let single = aggregate(&[0.7]);
        assert_eq!(single.std, 0.0);
    }
}
