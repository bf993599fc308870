//! The `egspo` command line.
//!
//! Exit codes: 0 success, 2 usage or config error, 3 training aborted (or a
//! failed self-test), 4 bad input data.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use egspo_core::audit::{audit_direction, entropy_report, DirectionAudit, EntropySummary};
use egspo_core::trainer::{route_batch, Event, NullClock};
use egspo_core::{tasks, DetRng, GateConfig, GateDecision, RunRecord, TrainConfig, Trainer, Trajectory, Variant};
use log::{info, warn};
use serde::Serialize;

use crate::clock::StdClock;
use crate::harness::{self, CellResult};
use crate::persistence::checkpoint::{self, Checkpoint};
use crate::persistence::runlog::{self, RunLogWriter};
use crate::persistence::{self, config as config_file, dataset, dump, export, FormatError};
use crate::selftest;

/// Environment variable holding the log filter (`error` … `trace`).
pub const LOG_ENV: &str = "EGSPO_LOG";

/// ρ values of the ablation grid.
pub const ABLATION_RHOS: [f64; 3] = [0.05, 0.10, 0.20];
pub const ABLATION_SEEDS: u64 = 5;
pub const ABLATION_HEADER: [&str; 6] = ["variant", "rho", "seed", "final_acc", "direction_fraction", "overhead"];

#[derive(Debug, Parser)]
#[command(
    name = "egspo",
    version,
    about = "Entropy-gated selective policy optimization on a synthetic addition task"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run Stage 1 and every Stage-2/3 round; write the RunLog, checkpoints and a summary.
    Train(TrainArgs),
    /// Sweep variant × ρ × seed and tabulate final accuracies.
    Ablate(AblateArgs),
    /// Recompute routing and the direction audit offline from a rollout dump.
    Audit(AuditArgs),
    /// Turn a run directory's RunLog into CSV tables.
    Export(ExportArgs),
    /// Quick built-in checks of gradients, gating and persistence.
    Selftest(SelftestArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML config; the built-in reference config when omitted.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// FULL_EGSPO, UNIFORM_PPO, NO_ADV_LOW_BRANCH or RANDOM_SELECTION.
    #[arg(long, value_name = "NAME")]
    pub variant: Option<Variant>,
    /// Overrides the HIGH-branch fraction ρ.
    #[arg(long, value_name = "F")]
    pub rho: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Continue from a checkpoint written by an earlier run of the same config.
    #[arg(long, value_name = "PATH")]
    pub resume: Option<PathBuf>,
    /// Write every round's scored trajectories to rollouts.jsonl.
    #[arg(long)]
    pub dump_rollouts: bool,
    /// Write the expert, rollout and holdout instances to dataset.jsonl.
    #[arg(long)]
    pub dump_dataset: bool,
    /// Record wall-clock phase times (makes the RunLog machine dependent).
    #[arg(long)]
    pub wall_clock: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Seeds 0..N (ignored when --seed is given).
    #[arg(long, value_name = "N", default_value_t = ABLATION_SEEDS)]
    pub seeds: u64,
    /// Timing repetitions per cell for the overhead column; 0 skips it.
    #[arg(long, value_name = "N", default_value_t = 7)]
    pub overhead_reps: usize,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Rollout dump (JSONL) written by `train --dump-rollouts`.
    #[arg(long, value_name = "PATH")]
    pub dump: PathBuf,
    /// Directory for audit.json.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Checkpoint whose policy is used to time gated against plain updates.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Run directory containing runlog.jsonl.
    #[arg(value_name = "RUN_DIR")]
    pub run_dir: PathBuf,
    /// Where the CSV files go; defaults to RUN_DIR.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Scratch directory for the persistence checks; a temporary one when omitted.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(#[source] FormatError),
    #[error("invalid config: {0}")]
    InvalidConfig(#[source] egspo_core::Error),
    #[error("training aborted: {source}{}", checkpoint.as_ref().map(|p| format!(" (state saved to {})", p.display())).unwrap_or_default())]
    Aborted {
        #[source]
        source: egspo_core::Error,
        checkpoint: Option<PathBuf>,
    },
    #[error("cannot write output: {0}")]
    Output(#[source] FormatError),
    #[error("{0}")]
    Data(#[source] FormatError),
    #[error("self-test failed: {0}")]
    Selftest(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::InvalidConfig(_) => 2,
            CliError::Aborted { .. } | CliError::Output(_) | CliError::Selftest(_) => 3,
            CliError::Data(_) => 4,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Audit(a) => cmd_audit(&a),
        Command::Export(a) => cmd_export(&a),
        Command::Selftest(a) => cmd_selftest(&a),
    }
}

/// Reads the config (or the reference config) and applies overrides.
pub fn load_config(common: &CommonArgs) -> CliResult<TrainConfig> {
    let mut config = match &common.config {
        Some(path) => {
            if !path.exists() {
                return Err(CliError::Usage(format!(
                    "config file {} does not exist",
                    path.display()
                )));
            }
            config_file::read(path).map_err(CliError::Config)?
        }
        None => TrainConfig::reference(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(v) = common.variant {
        config.gate.variant = v;
    }
    if let Some(rho) = common.rho {
        config.gate.rho = rho;
    }
    config.validate().map_err(CliError::InvalidConfig)?;
    Ok(config)
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("summaries always serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| {
        CliError::Output(FormatError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

/// File names inside a run directory.
pub mod files {
    pub const CONFIG: &str = "config.toml";
    pub const RUNLOG: &str = "runlog.jsonl";
    pub const ROLLOUTS: &str = "rollouts.jsonl";
    pub const DATASET: &str = "dataset.jsonl";
    pub const STAGE1_CKPT: &str = "stage1.ckpt";
    pub const LATEST_CKPT: &str = "latest.ckpt";
    pub const FINAL_CKPT: &str = "final.ckpt";
    pub const ABORT_CKPT: &str = "abort.ckpt";
    pub const SUMMARY: &str = "summary.json";
    pub const ABLATION: &str = "ablation.csv";
    pub const ABLATION_SUMMARY: &str = "ablation_summary.csv";
    pub const AUDIT: &str = "audit.json";
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    config_hash: String,
    seed: u64,
    variant: Variant,
    rho: f64,
    records: usize,
    rounds: usize,
    stage1_holdout_acc: Option<f64>,
    final_holdout_acc: f64,
    direction: DirectionAudit,
}

fn snapshot<C: egspo_core::Clock>(t: &Trainer<C>) -> Checkpoint {
    Checkpoint {
        vocab: t.policy().vocab,
        model: t.config().model,
        state: t.state(),
    }
}

/// Drops RunLog lines at or after `next_step`, so a resumed run does not repeat them.
fn truncate_runlog(path: &Path, next_step: u64) -> CliResult<()> {
    let lines = match runlog::read(path) {
        Ok(lines) => lines,
        Err(FormatError::Io { .. }) => Vec::new(),
        Err(e) => return Err(CliError::Data(e)),
    };
    let mut w = RunLogWriter::create(path).map_err(CliError::Output)?;
    for l in lines.iter().filter(|l| l.record.step < next_step) {
        w.write(l).map_err(CliError::Output)?;
    }
    w.flush().map_err(CliError::Output)
}

/// Streams records to the RunLog and keeps what the summary needs.
struct Collector {
    log: RunLogWriter,
    records: usize,
    stage1_acc: Option<f64>,
    final_acc: Option<f64>,
    direction: DirectionAudit,
    err: Option<FormatError>,
}

impl Collector {
    fn push(&mut self, r: RunRecord) {
        match &r.event {
            Event::Stage1(s) => self.stage1_acc = Some(s.holdout_acc),
            Event::Stage3(s) => self.direction = self.direction.merge(s.direction),
            Event::Probe(p) => self.final_acc = Some(p.holdout_acc),
            Event::Rollout(_) => {}
        }
        self.records += 1;
        if self.err.is_none() {
            if let Err(e) = self.log.write_record(&r) {
                self.err = Some(e);
            }
        }
    }

    /// Surfaces a deferred write error and flushes what was written.
    fn check(&mut self) -> CliResult<()> {
        if let Some(e) = self.err.take() {
            return Err(CliError::Output(e));
        }
        self.log.flush().map_err(CliError::Output)
    }
}

fn append(path: &Path, text: &str) -> CliResult<()> {
    use std::io::Write;
    fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(|source| {
            CliError::Output(FormatError::Io {
                path: path.to_path_buf(),
                source,
            })
        })
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let mut config = load_config(&args.common)?;
    if args.wall_clock {
        config.log_wall_clock = true;
    }
    ensure_dir(&args.out)?;
    let out = &args.out;
    config_file::write(&out.join(files::CONFIG), &config).map_err(CliError::Output)?;

    let runlog_path = out.join(files::RUNLOG);
    let mut trainer = match &args.resume {
        Some(path) => {
            let ckpt = checkpoint::load(path).map_err(CliError::Data)?;
            if ckpt.model != config.model {
                return Err(CliError::Usage(
                    "checkpoint architecture does not match the config".into(),
                ));
            }
            let t =
                Trainer::from_state(config.clone(), &ckpt.state, StdClock::new()).map_err(CliError::InvalidConfig)?;
            truncate_runlog(&runlog_path, ckpt.state.step)?;
            info!(
                "resuming at step {} (round {})",
                ckpt.state.step, ckpt.state.rounds_done
            );
            t
        }
        None => {
            RunLogWriter::create(&runlog_path).map_err(CliError::Output)?;
            Trainer::new(config.clone(), StdClock::new()).map_err(CliError::InvalidConfig)?
        }
    };
    if args.dump_dataset {
        dataset::write(&out.join(files::DATASET), trainer.data()).map_err(CliError::Output)?;
    }
    let log = RunLogWriter::append(&runlog_path).map_err(CliError::Output)?;
    let dump_path = out.join(files::ROLLOUTS);
    if args.dump_rollouts && args.resume.is_none() {
        persistence::write_atomic(&dump_path, b"").map_err(CliError::Output)?;
    }

    let mut col = Collector {
        log,
        records: 0,
        stage1_acc: None,
        final_acc: None,
        direction: DirectionAudit::default(),
        err: None,
    };
    let abort = |t: &Trainer<StdClock>, source: egspo_core::Error| {
        let path = out.join(files::ABORT_CKPT);
        let saved = checkpoint::save(&path, &snapshot(t)).is_ok();
        CliError::Aborted {
            source,
            checkpoint: saved.then_some(path),
        }
    };

    if !trainer.stage1_done() {
        info!(
            "stage 1: {} epochs on {} demonstrations",
            config.stage1.epochs,
            trainer.data().expert.len()
        );
        if let Err(e) = trainer.run_stage1(&mut |r| col.push(r)) {
            return Err(abort(&trainer, e));
        }
        col.check()?;
        checkpoint::save(&out.join(files::STAGE1_CKPT), &snapshot(&trainer)).map_err(CliError::Output)?;
    }
    while !trainer.is_finished() {
        let round = trainer.rounds_done();
        let groups = match trainer.run_round(&mut |r| col.push(r)) {
            Ok(g) => g,
            Err(e) => return Err(abort(&trainer, e)),
        };
        col.check()?;
        if args.dump_rollouts {
            append(&dump_path, &dump::to_string(&dump::records(round, &groups)))?;
        }
        checkpoint::save(&out.join(files::LATEST_CKPT), &snapshot(&trainer)).map_err(CliError::Output)?;
        info!("round {round} done");
    }
    col.check()?;
    let Collector {
        records,
        stage1_acc,
        final_acc,
        direction,
        ..
    } = col;
    checkpoint::save(&out.join(files::FINAL_CKPT), &snapshot(&trainer)).map_err(CliError::Output)?;
    let final_holdout_acc = match final_acc {
        Some(a) => a,
        None => trainer.holdout_accuracy().map_err(|e| CliError::Aborted {
            source: e,
            checkpoint: None,
        })?,
    };
    write_json(
        &out.join(files::SUMMARY),
        &TrainSummary {
            config_hash: trainer.config_hash().to_string(),
            seed: config.seed,
            variant: config.gate.variant,
            rho: config.gate.rho,
            records,
            rounds: trainer.rounds_done(),
            stage1_holdout_acc: stage1_acc,
            final_holdout_acc,
            direction,
        },
    )?;
    info!("final held-out accuracy {final_holdout_acc:.4}");
    Ok(())
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Output(FormatError::schema("csv", None, format!("{}: {e}", path.display())))
}

pub fn cmd_ablate(args: &AblateArgs) -> CliResult<()> {
    let base_config = load_config(&args.common)?;
    ensure_dir(&args.out)?;
    let variants: Vec<Variant> = match args.common.variant {
        Some(v) => vec![v],
        None => Variant::ALL.to_vec(),
    };
    let rhos: Vec<f64> = match args.common.rho {
        Some(r) => vec![r],
        None => ABLATION_RHOS.to_vec(),
    };
    let seeds: Vec<u64> = match args.common.seed {
        Some(s) => vec![s],
        None => (0..args.seeds).collect(),
    };

    let path = args.out.join(files::ABLATION);
    let mut table = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    table.write_record(ABLATION_HEADER).map_err(csv_err(&path))?;
    let mut cells: Vec<CellResult> = Vec::new();
    let mut failed: Vec<(Variant, f64)> = Vec::new();
    let clock = StdClock::new();

    for &seed in &seeds {
        let config = TrainConfig {
            seed,
            ..base_config.clone()
        };
        let mut base = Trainer::new(config, NullClock).map_err(CliError::InvalidConfig)?;
        let stage1 = base.run_stage1(&mut |_| {});
        for &variant in &variants {
            for &rho in &rhos {
                let gate = GateConfig {
                    variant,
                    rho,
                    ..base_config.gate
                };
                let result = stage1
                    .clone()
                    .and_then(|()| harness::run_cell(&base, gate, NullClock, &clock, args.overhead_reps, &mut |_| {}));
                let row = match result {
                    Ok(cell) => {
                        info!("{variant} rho={rho} seed={seed}: acc {:.4}", cell.final_acc);
                        let row = [
                            variant.name().to_string(),
                            rho.to_string(),
                            seed.to_string(),
                            cell.final_acc.to_string(),
                            cell.direction.fraction.map(|f| f.to_string()).unwrap_or_default(),
                            cell.overhead
                                .as_ref()
                                .map(|o| o.overhead_fraction.to_string())
                                .unwrap_or_default(),
                        ];
                        cells.push(cell);
                        row
                    }
                    Err(e) => {
                        warn!("{variant} rho={rho} seed={seed} failed: {e}");
                        failed.push((variant, rho));
                        [
                            variant.name().to_string(),
                            rho.to_string(),
                            seed.to_string(),
                            "failed".to_string(),
                            String::new(),
                            String::new(),
                        ]
                    }
                };
                table.write_record(&row).map_err(csv_err(&path))?;
                table.flush().map_err(|e| csv_err(&path)(e.into()))?;
            }
        }
    }

    let spath = args.out.join(files::ABLATION_SUMMARY);
    let mut summary = csv::Writer::from_path(&spath).map_err(csv_err(&spath))?;
    summary
        .write_record([
            "variant",
            "rho",
            "runs",
            "failed",
            "mean_final_acc",
            "std_final_acc",
            "mean_direction_fraction",
            "mean_overhead",
        ])
        .map_err(csv_err(&spath))?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for row in harness::summarize(&cells, &failed) {
        summary
            .write_record([
                row.variant.name().to_string(),
                row.rho.to_string(),
                row.runs.to_string(),
                row.failed.to_string(),
                row.mean_acc.to_string(),
                row.std_acc.to_string(),
                opt(row.mean_direction_fraction),
                opt(row.mean_overhead),
            ])
            .map_err(csv_err(&spath))?;
    }
    summary.flush().map_err(|e| csv_err(&spath)(e.into()))?;
    if !failed.is_empty() {
        warn!("{} of {} cells failed", failed.len(), failed.len() + cells.len());
    }
    Ok(())
}

/// Offline audit output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub variant: Variant,
    pub rho: f64,
    pub n_trajectories: usize,
    pub n_tokens: usize,
    pub direction: DirectionAudit,
    pub fraction_correct_direction: Option<f64>,
    /// Share of audited LOW tokens with `A < 0` reported at scale, for comparison.
    pub reference_fraction: f64,
    pub overhead_fraction: Option<f64>,
    pub entropy_summary: EntropySummary,
}

pub const REFERENCE_DIRECTION_FRACTION: f64 = 0.978;

/// Routes dumped trajectories under `gate` and audits them at the snapshot.
pub fn audit_trajectories(
    trajs: &[Trajectory],
    gate: &GateConfig,
    include_eos: bool,
    seed: u64,
) -> egspo_core::Result<AuditReport> {
    let refs: Vec<&Trajectory> = trajs.iter().collect();
    let mut rng = DetRng::new(seed, 13);
    let routed = route_batch(&refs, gate, include_eos, &mut rng)?;
    let seqs = harness::snapshot_sequences(&routed);
    let direction = audit_direction(&seqs, gate)?;
    let ents: Vec<&[f64]> = routed.iter().map(|r| &r.trajectory.entropy[..r.len]).collect();
    let decisions: Vec<GateDecision> = routed.iter().map(|r| r.decision.clone()).collect();
    Ok(AuditReport {
        variant: gate.variant,
        rho: gate.rho,
        n_trajectories: trajs.len(),
        n_tokens: routed.iter().map(|r| r.len).sum(),
        direction,
        fraction_correct_direction: direction.fraction,
        reference_fraction: REFERENCE_DIRECTION_FRACTION,
        overhead_fraction: None,
        entropy_summary: entropy_report(&ents, &decisions)?,
    })
}

pub fn cmd_audit(args: &AuditArgs) -> CliResult<()> {
    let config = load_config(&args.common)?;
    let records = dump::read(&args.dump, tasks::VOCAB_SIZE).map_err(|e| match e {
        FormatError::Io { .. } => CliError::Usage(e.to_string()),
        e => CliError::Data(e),
    })?;
    let trajs: Vec<Trajectory> = records.iter().map(|r| r.to_trajectory()).collect();
    let include_eos = config.stage2.include_eos;
    let mut report = audit_trajectories(&trajs, &config.gate, include_eos, config.seed)
        .map_err(|e| CliError::Data(FormatError::schema("rollout dump", None, e.to_string())))?;
    if let Some(path) = &args.checkpoint {
        let ckpt = checkpoint::load(path).map_err(CliError::Data)?;
        let params =
            egspo_core::PolicyParams::from_flat(ckpt.model, ckpt.state.params).map_err(CliError::InvalidConfig)?;
        let policy = egspo_core::Policy::new(ckpt.vocab, params).map_err(CliError::InvalidConfig)?;
        let refs: Vec<&Trajectory> = trajs.iter().collect();
        let o =
            harness::gate_overhead(&StdClock::new(), &policy, &refs, &config.gate, include_eos, 7).map_err(|e| {
                CliError::Aborted {
                    source: e,
                    checkpoint: None,
                }
            })?;
        for w in &o.warnings {
            warn!("{w}");
        }
        report.overhead_fraction = Some(o.overhead_fraction);
    }
    ensure_dir(&args.out)?;
    write_json(&args.out.join(files::AUDIT), &report)?;
    match report.fraction_correct_direction {
        Some(f) => info!(
            "{}: {} low-entropy tokens with A < 0, fraction correct {f}",
            report.variant, report.direction.n_low_tokens_neg_adv
        ),
        None => info!("{}: no low-entropy tokens with A < 0", report.variant),
    }
    Ok(())
}

pub fn cmd_export(args: &ExportArgs) -> CliResult<()> {
    let path = args.run_dir.join(files::RUNLOG);
    if !path.is_file() {
        return Err(CliError::Usage(format!("no RunLog at {}", path.display())));
    }
    let lines = runlog::read(&path).map_err(CliError::Data)?;
    let out = args.out.as_deref().unwrap_or(&args.run_dir);
    ensure_dir(out)?;
    let names = export::write_all(out, &lines).map_err(CliError::Output)?;
    info!("wrote {} from {} records", names.join(", "), lines.len());
    Ok(())
}

pub fn cmd_selftest(args: &SelftestArgs) -> CliResult<()> {
    let results = selftest::run_all(args.out.as_deref());
    let mut failures = Vec::new();
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        if !r.passed {
            failures.push(r.name);
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Selftest(failures.join(", ")))
    }
}
