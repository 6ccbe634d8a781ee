use clap::{Parser, Subcommand, ValueEnum};
use slotset_cli::batch::{read_batch, to_csv};
use slotset_cli::commands::{self, EvalRow, MbcReport, ModelSpec, SweepAxis};
use slotset_cli::session::write_atomic;
use slotset_cli::{CliError, ModelFile, Result, SessionFile, SessionLock};
use slotset_core::training::HistoryRow;
use slotset_core::{AggMode, EncoderKind};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "slotset", version, about = "Mini-batch consistent set encoding from the command line")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Sum,
    Mean,
    Max,
    Min,
}

impl From<Mode> for AggMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Sum => AggMode::Sum,
            Mode::Mean => AggMode::Mean,
            Mode::Max => AggMode::Max,
            Mode::Min => AggMode::Min,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Sse,
    Deepsets,
    #[value(name = "softmax_pool")]
    SoftmaxPool,
}

impl From<Kind> for EncoderKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Sse => EncoderKind::Sse,
            Kind::Deepsets => EncoderKind::DeepSets,
            Kind::SoftmaxPool => EncoderKind::SoftmaxPool,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Mode,
    Slots,
}

#[derive(Subcommand)]
enum Command {
    /// Write a freshly initialized model file.
    NewModel {
        #[arg(long, value_enum)]
        kind: Kind,
        /// Element dimension.
        #[arg(long)]
        d: usize,
        #[arg(long)]
        out: PathBuf,
        /// Slots (or softmax queries) in the first layer.
        #[arg(long, default_value_t = 4)]
        k: usize,
        /// Slot dimension.
        #[arg(long, default_value_t = 16)]
        h: usize,
        /// Width between layers.
        #[arg(long, default_value_t = 8)]
        hidden: usize,
        /// Output width; defaults to the element dimension.
        #[arg(long)]
        out_dim: Option<usize>,
        #[arg(long, default_value_t = 2)]
        depth: usize,
        #[arg(long, value_enum, default_value = "mean")]
        mode: Mode,
        #[arg(long)]
        deterministic_slots: bool,
        #[arg(long)]
        no_bias: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Start a streaming session: draw slots and write an empty aggregate.
    Init {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        session: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Aggregation for the raw set; defaults to the model's.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Merge one or more CSV batches into a session.
    Ingest {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        session: PathBuf,
        #[arg(required = true)]
        batches: Vec<PathBuf>,
    },
    /// Print the encoding of everything ingested so far.
    Finalize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check that partitioned encodings of a data file match the single pass.
    VerifyMbc {
        #[arg(long)]
        model: PathBuf,
        data: PathBuf,
        #[arg(long, default_value_t = 100)]
        partitions: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Discrepancy against the single pass as batches shrink. Without a
    /// model, compares fresh slot set and softmax pooling encoders.
    DemoInconsistency {
        #[arg(long)]
        model: Option<PathBuf>,
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on the model's centroid task; writes the loss history as CSV.
    Train {
        #[arg(long)]
        model: PathBuf,
        /// Where to write the trained model; defaults to overwriting `--model`.
        #[arg(long)]
        save: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare reverse-mode gradients with central differences.
    Gradcheck {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Held-out loss by set size, single pass and partitioned side by side.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one variant per value of an ablation axis.
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "mode")]
        axis: Axis,
        /// Slot counts for `--axis slots`.
        #[arg(long, value_delimiter = ',', default_value = "1,4,16")]
        values: Vec<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit(out: Option<&Path>, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(|e| CliError::io("<stdout>", e)),
    }
}

fn history_csv(history: &[HistoryRow]) -> Vec<String> {
    std::iter::once(HistoryRow::CSV_HEADER.to_string()).chain(history.iter().map(HistoryRow::to_csv)).collect()
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::NewModel {
            kind,
            d,
            out,
            k,
            h,
            hidden,
            out_dim,
            depth,
            mode,
            deterministic_slots,
            no_bias,
            seed,
        } => {
            let spec = ModelSpec {
                kind: kind.into(),
                d,
                k,
                h,
                hidden,
                out: out_dim.unwrap_or(d),
                depth,
                mode: mode.into(),
                random_slots: !deterministic_slots,
                bias: !no_bias,
                seed,
            };
            spec.build()?.save(&out)?;
        }
        Command::Init { model, session, seed, mode } => {
            let model = ModelFile::load(&model)?;
            let _lock = SessionLock::acquire(&session)?;
            commands::init_session(&model, seed, mode.map(Into::into))?.save(&session)?;
        }
        Command::Ingest { model, session, batches } => {
            let model = ModelFile::load(&model)?;
            let _lock = SessionLock::acquire(&session)?;
            let mut state = SessionFile::load(&session)?;
            for path in &batches {
                let batch = read_batch(path, Some(model.encoder.input_dim()))?;
                state = commands::ingest(&model, &state, &batch)?;
                state.save(&session)?;
            }
        }
        Command::Finalize { model, session, out } => {
            let model = ModelFile::load(&model)?;
            let state = SessionFile::load(&session)?;
            let enc = commands::finalize(&model, &state)?;
            let flat = enc.reshape(1, enc.len())?;
            emit(out.as_deref(), &[to_csv(&flat).trim_end().to_string()])?;
        }
        Command::VerifyMbc {
            model,
            data,
            partitions,
            seed,
            tolerance,
            out,
        } => {
            let model = ModelFile::load(&model)?;
            let x = read_batch(&data, Some(model.encoder.input_dim()))?;
            let report = commands::verify_mbc(&model.encoder, &x, partitions, seed, tolerance)?;
            emit(out.as_deref(), &[MbcReport::CSV_HEADER.to_string(), report.to_csv()])?;
            if !report.passed() {
                eprintln!("mini-batch consistency violated: max relative discrepancy {:e} > {:e}", report.max_discrepancy, report.tolerance);
                return Ok(ExitCode::from(1));
            }
        }
        Command::DemoInconsistency { model, data, seed, out } => {
            let x = read_batch(&data, None)?;
            let encoders = match model {
                Some(p) => {
                    let m = ModelFile::load(&p)?;
                    vec![(m.encoder.kind().to_string(), m.encoder)]
                }
                None => [EncoderKind::Sse, EncoderKind::SoftmaxPool]
                    .into_iter()
                    .map(|kind| {
                        let spec = ModelSpec { seed, ..ModelSpec::new(kind, x.cols()) };
                        Ok((kind.to_string(), spec.build()?.encoder))
                    })
                    .collect::<Result<Vec<_>>>()?,
            };
            emit(out.as_deref(), &commands::demo_inconsistency(&encoders, &x, seed)?)?;
        }
        Command::Train {
            model,
            save,
            out,
            steps,
            lr,
            seed,
        } => {
            let mut m = ModelFile::load(&model)?;
            let mut section = m.train.unwrap_or_else(|| slotset_cli::TrainSection::defaults(m.encoder.input_dim()));
            if let Some(s) = steps {
                section.config.steps = s;
            }
            if let Some(l) = lr {
                section.config.adam.lr = l;
            }
            if let Some(s) = seed {
                section.config.seed = s;
            }
            m.train = Some(section);
            let history = commands::train(&mut m)?;
            m.save(save.as_deref().unwrap_or(&model))?;
            emit(out.as_deref(), &history_csv(&history))?;
        }
        Command::Gradcheck {
            model,
            seed,
            step,
            tolerance,
            out,
        } => {
            let m = ModelFile::load(&model)?;
            let report = commands::gradcheck(&m, seed, step, tolerance)?;
            let mut lines = vec![
                "parameters,excluded,max_relative_error,tolerance,result".to_string(),
                format!(
                    "{},{},{:.6e},{:e},{}",
                    report.coordinates.len(),
                    report.excluded().len(),
                    report.max_rel_error(),
                    tolerance,
                    if report.passed() { "pass" } else { "fail" }
                ),
                String::new(),
                "parameter,analytic,numeric,relative_error,non_differentiable".to_string(),
            ];
            for c in report.worst(10).into_iter().chain(report.excluded()) {
                lines.push(format!("{},{:.17e},{:.17e},{:.6e},{}", c.name, c.analytic, c.numeric, c.rel_error, c.non_differentiable));
            }
            emit(out.as_deref(), &lines)?;
            if !report.passed() {
                eprintln!("gradient check failed: max relative error {:e} > {tolerance:e}", report.max_rel_error());
                return Ok(ExitCode::from(1));
            }
        }
        Command::Eval { model, out } => {
            let m = ModelFile::load(&model)?;
            let rows = commands::eval(&m)?;
            let lines: Vec<String> = std::iter::once(EvalRow::CSV_HEADER.to_string()).chain(rows.iter().map(EvalRow::to_csv)).collect();
            emit(out.as_deref(), &lines)?;
        }
        Command::Sweep { model, axis, values, steps, out } => {
            let mut m = ModelFile::load(&model)?;
            if let Some(s) = steps {
                let mut section = m.train.unwrap_or_else(|| slotset_cli::TrainSection::defaults(m.encoder.input_dim()));
                section.config.steps = s;
                m.train = Some(section);
            }
            let axis = match axis {
                Axis::Mode => SweepAxis::Mode,
                Axis::Slots => SweepAxis::Slots,
            };
            emit(out.as_deref(), &commands::sweep(&m, axis, &values)?)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
