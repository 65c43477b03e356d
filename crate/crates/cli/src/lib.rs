//! Command-line harness: training runs, gradient checks and the diagnostic
//! suite, with exit status 0 on success, 1 on usage or configuration errors
//! and 2 on numeric failures.

pub mod metrics;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use omninft_core::diagnostics::{
    ablate_kv, diagnose_conflict, perturbed_policy, profile_gradients, run_gradcheck,
    ConflictReport, ConflictRow,
};
use omninft_core::model::{load_checkpoint, save_checkpoint, Direction, GradNormTable};
use omninft_core::{CoreError, DualStreamPolicy, ModeRegistry, ModelConfig, RunConfig};

use crate::metrics::{read_metrics, write_table, MetricsWriter};

/// Weight perturbation applied to a fresh initialisation when a diagnostic
/// runs without a checkpoint. The reference init zeroes the output layer, so
/// its gradients would be degenerate.
pub const UNTRAINED_PERTURBATION: f64 = 0.1;

#[derive(Debug, Parser)]
#[command(name = "omninft", version, about = "Dual-stream audio-video NFT lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy; writes metrics.jsonl, checkpoints and the resolved config to --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides train.seed and sampler.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Training mode (overrides train.mode).
        #[arg(long)]
        mode: Option<String>,
    },
    /// Finite-difference check of the loss gradient and the surgery contract on a miniature model.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Fraction of rollouts whose video and audio advantages disagree in sign.
    DiagnoseConflict {
        /// Live mode: sample groups from a policy under this config.
        #[arg(long, conflicts_with = "dump", required_unless_present = "dump")]
        config: Option<PathBuf>,
        /// Offline mode: CSV with columns group,prompt,rollout,a_v,a_a.
        #[arg(long)]
        dump: Option<PathBuf>,
        #[arg(long, default_value_t = 175)]
        groups: usize,
        /// Injection strength (overrides rewards.conflict_epsilon).
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the (A_v, A_a) scatter table here as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Mean sync reward with cross-attention blocked on block ranges.
    AblateKv {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        direction: Direction,
        /// Block range: none, all, shallow, deep, N or A-B. Repeatable.
        #[arg(long = "range", required = true)]
        ranges: Vec<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Per-layer gradient norms of one batch with surgery off and on.
    ProfileGradients {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Convert a metrics file to a table.
    Export {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// csv (comma) or text (tab separated).
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
}

/// A check that ran to completion but failed.
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

/// Exit status for an error: 2 for numeric failures, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err.chain().any(|e| {
        e.is::<NumericFailure>()
            || matches!(
                e.downcast_ref::<CoreError>(),
                Some(CoreError::NonFinite { .. })
            )
    });
    if numeric {
        2
    } else {
        1
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut config =
        RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))?;
    if let Some(seed) = seed {
        config.train.seed = seed;
        config.sampler.seed = seed;
    }
    Ok(config)
}

/// The checkpoint if given, else a perturbed initialisation seeded by `train.seed`.
fn load_policy(config: &RunConfig, checkpoint: Option<&Path>) -> Result<DualStreamPolicy> {
    match checkpoint {
        Some(path) => {
            let policy = load_checkpoint(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            if policy.config() != &config.model {
                bail!(
                    "checkpoint {} does not match the [model] section",
                    path.display()
                );
            }
            Ok(policy)
        }
        None => Ok(perturbed_policy(
            &config.model,
            config.train.seed,
            UNTRAINED_PERTURBATION,
        )?),
    }
}

fn print_json<T: serde::Serialize>(out: &mut dyn Write, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

/// Parses one `--range` value into block indices for `direction`.
pub fn parse_range(spec: &str, model: &ModelConfig, direction: Direction) -> Result<Vec<usize>> {
    // A2V blocks live in the video stream, V2A in the audio stream.
    let count = match direction {
        Direction::A2V => model.blocks_video,
        Direction::V2A => model.blocks_audio,
    };
    let boundary = model.shallow_boundary.min(count);
    let blocks: Vec<usize> = match spec.trim() {
        "none" => Vec::new(),
        "all" => (0..count).collect(),
        "shallow" => (0..boundary).collect(),
        "deep" => (boundary..count).collect(),
        other => {
            let parse = |s: &str| -> Result<usize> {
                s.trim()
                    .parse()
                    .with_context(|| format!("invalid block range `{other}`"))
            };
            match other.split_once('-') {
                Some((a, b)) => {
                    let (a, b) = (parse(a)?, parse(b)?);
                    if a > b {
                        bail!("invalid block range `{other}`: start exceeds end");
                    }
                    (a..=b).collect()
                }
                None => vec![parse(other)?],
            }
        }
    };
    if let Some(&b) = blocks.iter().find(|&&b| b >= count) {
        bail!("block {b} in range `{spec}` is out of range (the {direction:?} direction has {count} blocks)");
    }
    Ok(blocks)
}

fn blocks_label(blocks: &[usize]) -> String {
    if blocks.is_empty() {
        "none".into()
    } else {
        blocks
            .iter()
            .map(|b| b.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn write_norm_table(out: &mut dyn Write, off: &GradNormTable, on: &GradNormTable) -> Result<()> {
    writeln!(
        out,
        "{:<6} {:>5} {:<15} {:>14} {:>14}",
        "stream", "block", "path", "surgery_off", "surgery_on"
    )?;
    for e in &off.entries {
        let on_norm = on.get(e.stream, e.block, e.path).unwrap_or(f64::NAN);
        let block = e.block.map_or("-".to_string(), |b| b.to_string());
        writeln!(
            out,
            "{:<6} {:>5} {:<15} {:>14.6e} {:>14.6e}",
            e.stream.as_str(),
            block,
            e.path.as_str(),
            e.norm,
            on_norm
        )?;
    }
    writeln!(
        out,
        "{:<28} {:>14.6e} {:>14.6e}",
        "total", off.total, on.total
    )?;
    Ok(())
}

fn read_conflict_dump(path: &Path) -> Result<Vec<ConflictRow>> {
    let mut reader =
        csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let rows = reader
        .deserialize()
        .collect::<Result<Vec<ConflictRow>, _>>()
        .with_context(|| format!("reading {}", path.display()))?;
    Ok(rows)
}

fn write_conflict_rows(path: &Path, rows: &[ConflictRow]) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs one command, writing its report to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let registry = ModeRegistry::builtin();
    match cli.command {
        Command::Train {
            config,
            out: dir,
            seed,
            mode,
        } => {
            let mut config = load_config(&config, seed)?;
            if let Some(mode) = mode {
                config.train.mode = mode;
            }
            let mode = registry.get(&config.train.mode)?;
            config.train.mode = mode.name().to_string();
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            fs::write(dir.join("config.toml"), config.to_toml())?;
            let mut writer = MetricsWriter::create(&dir.join("metrics.jsonl"))?;
            let outcome = omninft_core::trainer::train(&config, mode, |record| {
                log::debug!(
                    "iteration {}: R_v {:.4} R_a {:.4} R_av {:.4} loss {:.4e}",
                    record.iteration,
                    record.reward_video.mean,
                    record.reward_audio.mean,
                    record.reward_sync.mean,
                    record.loss_total
                );
                Ok(writer.append(record)?)
            })?;
            save_checkpoint(&outcome.state.policy, &dir.join("policy.ckpt"))?;
            save_checkpoint(&outcome.state.old_policy, &dir.join("old_policy.ckpt"))?;
            writeln!(
                out,
                "trained {} iterations in mode {}; outputs in {}",
                outcome.metrics.len(),
                mode.name(),
                dir.display()
            )?;
        }
        Command::Gradcheck {
            config,
            seed,
            format,
        } => {
            let config = match config {
                Some(path) => load_config(&path, None)?,
                None => RunConfig::default(),
            };
            let summary = run_gradcheck(&config, seed.unwrap_or(config.train.seed))?;
            if format == Format::Json {
                print_json(out, &summary)?;
            } else {
                let m = &summary.model;
                writeln!(
                    out,
                    "model: {}+{} blocks, d={}, N_v={}, N_a={}, L={}, alpha_s={}",
                    m.blocks_video,
                    m.blocks_audio,
                    m.d_model,
                    m.n_video_tokens,
                    m.n_audio_tokens,
                    m.shallow_boundary,
                    m.detach_ratio
                )?;
                for r in &summary.finite_difference {
                    writeln!(
                        out,
                        "surgery {:<3}: max rel. error {:.3e} over {} coordinates (worst: {})",
                        if r.surgery { "on" } else { "off" },
                        r.max_rel_error,
                        r.coordinates,
                        r.worst_param
                    )?;
                }
                writeln!(
                    out,
                    "beta = 0: max |grad| = {:e}",
                    summary.beta_zero_max_grad
                )?;
                let p = &summary.probe;
                writeln!(
                    out,
                    "surgery probe alpha {}: KV-path deviation from (1 - alpha) scaling {:.3e}, forward diff {:e}",
                    p.alpha, p.max_deviation, p.forward_max_abs_diff
                )?;
                let p = &summary.probe_full_detach;
                writeln!(
                    out,
                    "surgery probe alpha 1: KV-path gradient norm {:e}",
                    p.kv_norm_on
                )?;
                writeln!(out, "{}", if summary.passed() { "PASS" } else { "FAIL" })?;
            }
            if !summary.passed() {
                return Err(NumericFailure(format!(
                    "gradcheck failed (tolerance {:e})",
                    summary.tolerance
                ))
                .into());
            }
        }
        Command::DiagnoseConflict {
            config,
            dump,
            groups,
            epsilon,
            checkpoint,
            seed,
            out: scatter,
            format,
        } => {
            let report = match (dump, config) {
                (Some(dump), _) => ConflictReport::from_rows(read_conflict_dump(&dump)?)?,
                (None, Some(path)) => {
                    let config = load_config(&path, seed)?;
                    let policy = load_policy(&config, checkpoint.as_deref())?;
                    let specs = config.prompt_specs()?;
                    let epsilon = epsilon.unwrap_or(config.rewards.conflict_epsilon);
                    diagnose_conflict(&policy, &specs, &config, groups, epsilon)?
                }
                (None, None) => bail!("diagnose-conflict needs --config or --dump"),
            };
            if let Some(path) = &scatter {
                write_conflict_rows(path, &report.rows)?;
            }
            match format {
                Format::Json => print_json(out, &report)?,
                Format::Csv => {
                    let mut w = csv::Writer::from_writer(&mut *out);
                    for r in &report.rows {
                        w.serialize(r)?;
                    }
                    w.flush()?;
                }
                Format::Text => {
                    writeln!(out, "samples: {}", report.rows.len())?;
                    writeln!(out, "conflict rate: {:.4}", report.rate)?;
                }
            }
        }
        Command::AblateKv {
            config,
            direction,
            ranges,
            checkpoint,
            seed,
            format,
        } => {
            let config = load_config(&config, seed)?;
            let policy = load_policy(&config, checkpoint.as_deref())?;
            let specs = config.prompt_specs()?;
            let ranges = ranges
                .iter()
                .map(|r| parse_range(r, &config.model, direction))
                .collect::<Result<Vec<_>>>()?;
            let report = ablate_kv(
                &policy,
                &specs,
                &config.sampler,
                config.train.group_size,
                direction,
                &ranges,
            )?;
            match format {
                Format::Json => print_json(out, &report)?,
                Format::Csv => {
                    writeln!(out, "direction,blocks,mean_sync,delta,invariance")?;
                    for r in &report.rows {
                        let inv = r.invariance.map_or(String::new(), |b| b.to_string());
                        writeln!(
                            out,
                            "{},\"{}\",{},{},{}",
                            direction_str(r.direction),
                            blocks_label(&r.blocks),
                            r.mean_sync,
                            r.delta,
                            inv
                        )?;
                    }
                }
                Format::Text => {
                    writeln!(out, "baseline mean sync: {:.6}", report.baseline_sync)?;
                    writeln!(
                        out,
                        "{:<4} {:<12} {:>12} {:>12}  invariance",
                        "dir", "blocks", "mean_sync", "delta"
                    )?;
                    for r in &report.rows {
                        let inv = r.invariance.map_or("-".to_string(), |b| {
                            if b {
                                "exact".into()
                            } else {
                                "BROKEN".into()
                            }
                        });
                        writeln!(
                            out,
                            "{:<4} {:<12} {:>12.6} {:>12.6}  {}",
                            direction_str(r.direction),
                            blocks_label(&r.blocks),
                            r.mean_sync,
                            r.delta,
                            inv
                        )?;
                    }
                }
            }
            if report.rows.iter().any(|r| r.invariance == Some(false)) {
                return Err(NumericFailure("blocking invariance check failed".into()).into());
            }
        }
        Command::ProfileGradients {
            config,
            checkpoint,
            mode,
            seed,
            format,
        } => {
            let mut config = load_config(&config, seed)?;
            if let Some(mode) = mode {
                config.train.mode = mode;
            }
            let mode = registry.get(&config.train.mode)?;
            let policy = load_policy(&config, checkpoint.as_deref())?;
            let profile = profile_gradients(&config, mode, &policy)?;
            match format {
                Format::Json => print_json(out, &profile)?,
                Format::Csv => {
                    writeln!(out, "stream,block,path,surgery_off,surgery_on")?;
                    for e in &profile.surgery_off.entries {
                        let on = profile
                            .surgery_on
                            .get(e.stream, e.block, e.path)
                            .unwrap_or(f64::NAN);
                        let block = e.block.map_or(String::new(), |b| b.to_string());
                        writeln!(
                            out,
                            "{},{},{},{},{}",
                            e.stream.as_str(),
                            block,
                            e.path.as_str(),
                            e.norm,
                            on
                        )?;
                    }
                }
                Format::Text => {
                    write_norm_table(out, &profile.surgery_off, &profile.surgery_on)?;
                    for (l, ratio) in &profile.shallow_kv_ratio {
                        writeln!(
                            out,
                            "shallow audio KV path, block {l}: on/off = {ratio:.6} (1 - alpha_s = {:.6})",
                            1.0 - profile.alpha_s
                        )?;
                    }
                }
            }
        }
        Command::Export {
            input,
            out: path,
            format,
        } => {
            let records = read_metrics(&input)?;
            let delimiter = match format {
                Format::Csv => b',',
                Format::Text => b'\t',
                Format::Json => bail!("export writes csv or text tables"),
            };
            let file =
                fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            write_table(&records, std::io::BufWriter::new(file), delimiter)?;
            writeln!(
                out,
                "exported {} records to {}",
                records.len(),
                path.display()
            )?;
        }
    }
    Ok(())
}

fn direction_str(d: Direction) -> &'static str {
    match d {
        Direction::A2V => "a2v",
        Direction::V2A => "v2a",
    }
}
