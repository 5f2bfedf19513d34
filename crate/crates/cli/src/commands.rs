//! Implementations of the `rbo` verbs.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rbo_core::digest::sha256_hex;
use rbo_core::evalharness::{ablation_table, evaluate, report_files, Arm, ArmResult, EvalConfig, MetricReport};
use rbo_core::kv::KvFile;
use rbo_core::pipeline::{run_log_csv, train_with, LogRow, ModelParams, TrainConfig, TrainOutput, SEED_ENV};
use rbo_core::synthdata::{export_sequence, gen_sequence, import_sequence, Sequence, SequenceSpec};
use rbo_core::Error;

use crate::exit::{CliError, CliResult, ExitCode};
use crate::gradsuite;
use crate::manifest::{create_dir, read_text, write_file, RunManifest};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const RUN_LOG_FILE: &str = "runlog.csv";
pub const DIVERGENCE_FILE: &str = "divergence.txt";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.csv";

/// Seed precedence: command line, then the environment, then the config.
fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(raw) => raw
            .trim()
            .parse()
            .map(Some)
            .map_err(|e| CliError::usage(format!("cannot parse {SEED_ENV}=`{raw}`: {e}"))),
        Err(_) => Ok(None),
    }
}

fn resolve_seed(cli: Option<u64>) -> CliResult<Option<u64>> {
    Ok(match cli {
        Some(s) => Some(s),
        None => env_seed()?,
    })
}

fn load_train_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::parse(&read_text(p, "config")?)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = resolve_seed(seed)? {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_eval_config(path: Option<&Path>) -> CliResult<EvalConfig> {
    Ok(match path {
        Some(p) => EvalConfig::parse(&read_text(p, "evaluation config")?)?,
        None => EvalConfig::default(),
    })
}

pub fn cmd_synth(config: Option<&Path>, out: &Path, seed: Option<u64>) -> CliResult {
    let mut spec = match config {
        Some(p) => SequenceSpec::from_kv(&KvFile::parse(&read_text(p, "sequence spec")?)?)?,
        None => SequenceSpec::default(),
    };
    if let Some(s) = resolve_seed(seed)? {
        spec.seed = s;
    }
    let seq = gen_sequence(&spec)?;
    create_dir(out)?;
    export_sequence(&seq, out)?;
    let digest = seq.digest();
    RunManifest::new("synth", config, Some(spec.seed), out, spec.to_kv(), &[digest.as_bytes()]).write()?;
    println!("wrote {} frames to {} (digest {digest})", seq.len(), out.display());
    Ok(())
}

/// Trains `cfg` into `out`. On divergence the partial run log and a
/// snapshot of the failure are written before returning exit code 4.
pub fn train_into(cfg: &TrainConfig, config_path: Option<&Path>, out: &Path, label: &str) -> CliResult<TrainOutput> {
    create_dir(out)?;
    let text = cfg.to_kv();
    RunManifest::new("train", config_path, Some(cfg.seed), out, text, &[]).write()?;
    let mut rows: Vec<LogRow> = Vec::new();
    let result = train_with(cfg, |row| {
        rows.push(*row);
        if row.iteration % 50 == 0 || row.iteration + 1 == cfg.iterations {
            eprintln!(
                "[{label}] iter {:>5} total {:.4} cls {:.4} loc {:.4} rank_cls {:.4} rank_iou {:.4} margin {:.4}",
                row.iteration, row.loss.total, row.loss.cls, row.loss.loc, row.loss.rank_cls, row.loss.rank_iou, row.margin
            );
        }
    });
    write_file(&out.join(RUN_LOG_FILE), run_log_csv(&rows))?;
    match result {
        Ok(output) => {
            output.params.save(&out.join(CHECKPOINT_FILE))?;
            Ok(output)
        }
        Err(Error::Divergence { iteration, reason }) => {
            let mut snap = format!("iteration = {iteration}\nreason = {reason}\nseed = {}\n", cfg.seed);
            if let Some(last) = rows.last() {
                snap.push_str(&format!(
                    "last_finite_iteration = {}\nlast_total = {}\nlast_grad_norm = {}\n",
                    last.iteration, last.loss.total, last.grad_norm
                ));
            }
            write_file(&out.join(DIVERGENCE_FILE), snap)?;
            Err(CliError::new(
                ExitCode::Divergence,
                format!("[{label}] training diverged at iteration {iteration}: {reason}"),
            ))
        }
        Err(e) => Err(e.into()),
    }
}

pub fn cmd_train(config: Option<&Path>, out: &Path, seed: Option<u64>) -> CliResult {
    let cfg = load_train_config(config, seed)?;
    let output = train_into(&cfg, config, out, "train")?;
    println!(
        "trained {} iterations, {} weights, checkpoint {}",
        output.log.len(),
        output.params.num_weights(),
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn write_report(report: &MetricReport, out: &Path) -> CliResult {
    for (name, body) in report_files(report)? {
        write_file(&out.join(name), body)?;
    }
    Ok(())
}

pub fn cmd_eval(checkpoint: &Path, sequences: &[PathBuf], config: Option<&Path>, out: &Path) -> CliResult {
    CliError::require(checkpoint, "checkpoint")?;
    let ckpt_bytes = std::fs::read(checkpoint).map_err(|e| CliError::io(checkpoint, e))?;
    let model = ModelParams::from_bytes(&ckpt_bytes, checkpoint)?;
    let ecfg = load_eval_config(config)?;
    let seqs: Vec<Sequence> = if sequences.is_empty() {
        ecfg.sequences()?
    } else {
        sequences
            .iter()
            .map(|d| {
                CliError::require(d, "sequence directory")?;
                Ok(import_sequence(d)?)
            })
            .collect::<CliResult<_>>()?
    };
    let digests: Vec<String> = seqs.iter().map(Sequence::digest).collect();
    let mut inputs: Vec<&[u8]> = vec![&ckpt_bytes];
    inputs.extend(digests.iter().map(|d| d.as_bytes()));
    create_dir(out)?;
    RunManifest::new("eval", config, None, out, ecfg.to_kv(), &inputs).write()?;
    let report = evaluate(&model, &seqs, &ecfg.track_options(), &ecfg.diag_options())?;
    write_report(&report, out)?;
    let m = &report.aggregate;
    println!(
        "success_auc {:.4} dp20 {:.4} rank_consistency {:.4} over {} sequences",
        m.success_auc,
        m.dp20,
        m.rank_consistency,
        seqs.len()
    );
    Ok(())
}

pub fn cmd_gradcheck(out: Option<&Path>, seed: Option<u64>) -> CliResult {
    let seed = resolve_seed(seed)?.unwrap_or(0);
    let results = gradsuite::run(seed)?;
    let mut csv = String::from("op,points,max_error,tolerance,passed\n");
    for r in &results {
        println!(
            "{:<20} points {:>3} max error {:.3e} tolerance {:.0e} {}",
            r.op,
            r.points,
            r.max_error,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        );
        csv.push_str(&format!("{},{},{},{},{}\n", r.op, r.points, r.max_error, r.tolerance, r.passed()));
    }
    if let Some(out) = out {
        create_dir(out)?;
        write_file(&out.join(GRADCHECK_FILE), csv)?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.op).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::new(
            ExitCode::Verification,
            format!("gradient check failed for: {}", failed.join(", ")),
        ))
    }
}

/// Parses a comma-separated arm list; empty means every arm.
pub fn parse_arms(spec: Option<&str>) -> CliResult<Vec<Arm>> {
    let Some(spec) = spec else {
        return Ok(Arm::ALL.to_vec());
    };
    let mut arms = Vec::new();
    for name in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let arm = Arm::parse(name).ok_or_else(|| CliError::usage(format!("unknown arm `{name}`")))?;
        if arms.contains(&arm) {
            return Err(CliError::usage(format!("arm `{name}` listed twice")));
        }
        arms.push(arm);
    }
    if arms.is_empty() {
        return Err(CliError::usage("--arms lists no arms"));
    }
    Ok(arms)
}

/// Resolves per-arm configs. One config is expanded to every requested arm
/// by its loss flags; several configs are matched to arms by their flags.
pub fn arm_configs(configs: &[PathBuf], arms: &[Arm], seed: Option<u64>) -> CliResult<Vec<(Arm, TrainConfig, Option<PathBuf>)>> {
    let seed = resolve_seed(seed)?;
    let mut resolved = Vec::new();
    if configs.len() <= 1 {
        let path = configs.first().map(PathBuf::as_path);
        let base = load_train_config(path, seed)?;
        for &arm in arms {
            let flags = rbo_core::pipeline::LossFlags {
                two_stage_ce: base.flags.two_stage_ce,
                ..arm.flags()
            };
            resolved.push((arm, TrainConfig { flags, ..base.clone() }, path.map(Path::to_path_buf)));
        }
    } else {
        for p in configs {
            let cfg = load_train_config(Some(p), seed)?;
            let arm = Arm::from_flags(&cfg.flags)
                .ok_or_else(|| CliError::usage(format!("{}: loss flags match no arm", p.display())))?;
            if resolved.iter().any(|(a, ..)| *a == arm) {
                return Err(CliError::usage(format!("arm `{}` configured twice", arm.name())));
            }
            if arms.contains(&arm) {
                resolved.push((arm, cfg, Some(p.clone())));
            }
        }
        for arm in arms {
            if !resolved.iter().any(|(a, ..)| a == arm) {
                return Err(CliError::usage(format!("missing arm `{}`", arm.name())));
            }
        }
        resolved.sort_by_key(|(a, ..)| *a);
    }
    let first_seed = resolved[0].1.seed;
    if resolved.iter().any(|(_, c, _)| c.seed != first_seed) {
        return Err(CliError::usage("arms must share one seed"));
    }
    Ok(resolved)
}

fn tail_mean(log: &[LogRow], f: impl Fn(&LogRow) -> f64) -> f64 {
    let k = (log.len() / 10).max(1).min(log.len());
    if k == 0 {
        return 0.0;
    }
    log[log.len() - k..].iter().map(f).sum::<f64>() / k as f64
}

/// One finished arm plus the wall time its training took.
#[derive(Debug, Clone)]
pub struct ArmRun {
    pub result: ArmResult,
    pub train_time: Duration,
}

fn run_arm(
    arm: Arm,
    cfg: &TrainConfig,
    config_path: Option<&Path>,
    seqs: &[Sequence],
    ecfg: &EvalConfig,
    out: &Path,
) -> CliResult<ArmRun> {
    let dir = out.join(arm.name());
    let start = Instant::now();
    let output = train_into(cfg, config_path, &dir, arm.name())?;
    let train_time = start.elapsed();
    let report = evaluate(&output.params, seqs, &ecfg.track_options(), &ecfg.diag_options())?;
    write_report(&report, &dir)?;
    let result = ArmResult {
        arm,
        seed: cfg.seed,
        config_digest: sha256_hex(cfg.to_kv().as_bytes()),
        flags: cfg.flags,
        final_rank_cls: tail_mean(&output.log, |r| r.loss.rank_cls),
        final_rank_iou: tail_mean(&output.log, |r| r.loss.rank_iou),
        metrics: report.aggregate,
    };
    Ok(ArmRun { result, train_time })
}

/// Trains and evaluates every arm on the same held-out sequences. Arms are
/// spread over one worker per available core; each arm is deterministic, so
/// results do not depend on scheduling.
pub fn cmd_ablation(
    configs: &[PathBuf],
    eval_config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    arms: Option<&str>,
) -> CliResult<Vec<ArmRun>> {
    let arms = parse_arms(arms)?;
    let plan = arm_configs(configs, &arms, seed)?;
    let ecfg = load_eval_config(eval_config)?;
    let seqs = ecfg.sequences()?;
    create_dir(out)?;
    let mut echo = ecfg.to_kv();
    for (arm, cfg, _) in &plan {
        echo.push_str(&format!("arm.{} = {}\n", arm.name(), sha256_hex(cfg.to_kv().as_bytes())));
    }
    RunManifest::new("ablation", configs.first().map(PathBuf::as_path), Some(plan[0].1.seed), out, echo, &[]).write()?;

    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(plan.len());
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<CliResult<ArmRun>>>> = plan.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some((arm, cfg, path)) = plan.get(k) else { break };
                let r = run_arm(*arm, cfg, path.as_deref(), &seqs, &ecfg, out);
                *slots[k].lock().unwrap_or_else(|e| e.into_inner()) = Some(r);
            });
        }
    });
    let runs = slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .unwrap_or_else(|e| e.into_inner())
                .unwrap_or_else(|| Err(CliError::new(ExitCode::Internal, "arm worker stopped early")))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let results: Vec<ArmResult> = runs.iter().map(|r| r.result.clone()).collect();
    let table = ablation_table(&results, &arms)?;
    write_file(&out.join(ABLATION_FILE), &table)?;
    print!("{table}");
    for r in &runs {
        eprintln!("[{}] trained in {:.1} s", r.result.arm.name(), r.train_time.as_secs_f64());
    }
    Ok(runs)
}
