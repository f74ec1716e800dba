//! Command-line front end: decode scenario suites, generate new ones.
//!
//! Decoding fans utterances out over a worker pool (bounded by the
//! `STITCHDEC_THREADS` environment variable) and reassembles results in
//! suite order, so reports are identical no matter how the work was split.
//! The metrics report lands at `--out`; per-utterance transcripts land next
//! to it with a `.transcripts.json` suffix. Stdout carries one summary line.
//!
//! Exit codes: 0 success, 1 usage, 2 bad input, 3 internal contract
//! violation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::beam_search::{decode, SearchConfig, SearchMode};
use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, UtteranceMetrics};
use crate::scenario::{generate, GenerateConfig, ScenarioFile};
use crate::scorer::{SyntheticScorer, TokenId};

pub const EXIT_SUCCESS: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

#[derive(Parser)]
#[command(
    name = "stitchdec",
    version,
    about = "Streaming blockwise beam-search decoder with stitch repairs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode every scenario in a suite and write metrics plus transcripts.
    Run(RunArgs),
    /// Generate a synthetic scenario suite.
    Generate(GenerateArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Rabs,
    Run,
    Back,
    Bsdec,
    Batch,
}

impl From<ModeArg> for SearchMode {
    fn from(mode: ModeArg) -> Self {
        match mode {
            ModeArg::Rabs => SearchMode::Rabs,
            ModeArg::Run => SearchMode::RunOnly,
            ModeArg::Back => SearchMode::BackOnly,
            ModeArg::Bsdec => SearchMode::BsdecRepeat,
            ModeArg::Batch => SearchMode::Batch,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

#[derive(Args)]
struct RunArgs {
    /// Scenario suite to decode.
    #[arg(long, value_name = "PATH")]
    scenarios: PathBuf,

    /// Search mode.
    #[arg(long, value_enum, default_value = "rabs")]
    mode: ModeArg,

    /// Beam width.
    #[arg(long, default_value_t = 10)]
    beam: usize,

    /// Endpoint threshold: advance the block when fewer tokens than this
    /// are expected beyond the attention focus.
    #[arg(long, default_value_t = 1.0)]
    nu: f64,

    /// Back-jump threshold on the backward attention mass.
    #[arg(long, default_value_t = 0.5)]
    upsilon: f64,

    /// CTC share of the combined score, in [0, 1].
    #[arg(long, default_value_t = 0.4)]
    ctc_weight: f64,

    /// Maximum committed decode steps per utterance.
    #[arg(long, default_value_t = 200)]
    max_len: usize,

    /// Simulated cost of one decode step.
    #[arg(long, default_value_t = 10.0)]
    step_cost_ms: f64,

    /// Extra seed folded into every scenario's noise seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Metrics report path; transcripts go next to it.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,

    /// Report format.
    #[arg(long, value_enum, default_value = "json")]
    format: FormatArg,

    /// Report wall-clock compute for the real-time factor instead of the
    /// simulated per-step cost.
    #[arg(long)]
    wall_clock: bool,
}

#[derive(Args)]
struct GenerateArgs {
    /// Number of scenarios.
    #[arg(long, default_value_t = 100)]
    count: usize,

    /// Total vocabulary entries including blank, sos and eos.
    #[arg(long, default_value_t = 19)]
    vocab_size: usize,

    /// Fewest content tokens per utterance.
    #[arg(long, default_value_t = 3)]
    min_tokens: usize,

    /// Most content tokens per utterance.
    #[arg(long, default_value_t = 8)]
    max_tokens: usize,

    /// Probability that a scenario carries one misalignment event.
    #[arg(long, default_value_t = 0.0)]
    misalignment_rate: f64,

    /// Probability that a token repeats its predecessor.
    #[arg(long, default_value_t = 0.0)]
    repeat_rate: f64,

    /// Master seed; the same seed always yields the same suite.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Encoder frames per block.
    #[arg(long, default_value_t = 8)]
    frames_per_block: usize,

    /// Milliseconds of audio per encoder frame.
    #[arg(long, default_value_t = 40.0)]
    frame_shift_ms: f64,

    /// Suite output path.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

/// Best hypothesis of one utterance, written alongside the metrics report.
#[derive(Serialize)]
struct Transcript {
    name: String,
    tokens: Vec<TokenId>,
    text: String,
    attn_score: f64,
    ctc_score: f64,
    combined_score: f64,
    finished: bool,
    matched: bool,
    truncated: bool,
}

/// Parses argv and runs the tool, returning the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_SUCCESS,
                _ => EXIT_USAGE,
            };
            let _ = err.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Run(args) => run_suite(args),
        Command::Generate(args) => generate_suite(args),
    };
    match result {
        Ok(()) => EXIT_SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code_for(&err)
        }
    }
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::InvalidScenario(_)
        | Error::InvalidConfig(_)
        | Error::InvalidSchedule(_)
        | Error::InvalidMetrics(_)
        | Error::Io(_) => EXIT_INPUT,
        _ => EXIT_INTERNAL,
    }
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(raw) = std::env::var_os("STITCHDEC_THREADS") {
        let text = raw.to_string_lossy();
        let workers: usize = text.parse().ok().filter(|&n| n >= 1).ok_or_else(|| {
            Error::InvalidConfig(format!("STITCHDEC_THREADS={text:?} is not a positive integer"))
        })?;
        builder = builder.num_threads(workers);
    }
    builder.build().map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))
}

fn write_output(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn transcripts_path(out: &Path) -> PathBuf {
    match out.file_stem().and_then(|s| s.to_str()) {
        Some(stem) => out.with_file_name(format!("{stem}.transcripts.json")),
        None => out.with_file_name("transcripts.json"),
    }
}

fn run_suite(args: &RunArgs) -> Result<()> {
    let mode = SearchMode::from(args.mode);
    let config = SearchConfig {
        beam_width: args.beam,
        nu: args.nu,
        upsilon: args.upsilon,
        max_len: args.max_len,
        ctc_weight: args.ctc_weight,
        mode,
        repeat_ngram: 1,
    };
    config.validate()?;
    let file = ScenarioFile::load(&args.scenarios)?;
    let pool = thread_pool()?;

    let started = Instant::now();
    let results: Vec<(UtteranceMetrics, Transcript)> = pool.install(|| {
        file.scenarios
            .par_iter()
            .map(|record| {
                let schedule = file.schedule(record)?;
                let scorer = SyntheticScorer::new(
                    record.scenario.clone(),
                    file.vocabulary.clone(),
                    &schedule,
                    args.seed,
                )?;
                let outcome = decode(&scorer, &schedule, &config, args.step_cost_ms)?;
                let matched = outcome.matches(&record.scenario.reference_tokens);
                let row = UtteranceMetrics::from_timeline(
                    record.name.clone(),
                    &outcome.timeline,
                    matched,
                    outcome.truncated,
                );
                let best = &outcome.best;
                let transcript = Transcript {
                    name: record.name.clone(),
                    tokens: best.emitted().to_vec(),
                    text: file.vocabulary.text(best.emitted()),
                    attn_score: best.attn_score(),
                    ctc_score: best.ctc_score(),
                    combined_score: best.combined(),
                    finished: best.finished(),
                    matched,
                    truncated: outcome.truncated,
                };
                Ok((row, transcript))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let wall_ms = args.wall_clock.then(|| started.elapsed().as_secs_f64() * 1000.0);

    let (rows, mut transcripts): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let report = MetricsReport::build(mode.name(), args.step_cost_ms, rows, wall_ms)?;
    let body = match args.format {
        FormatArg::Json => report.to_json(),
        FormatArg::Csv => report.to_csv()?,
    };
    write_output(&args.out, &body)?;

    transcripts.sort_by(|a, b| a.name.cmp(&b.name));
    let mut transcript_body = serde_json::to_string_pretty(&transcripts)
        .map_err(|e| Error::Io(format!("transcript serialization: {e}")))?;
    transcript_body.push('\n');
    write_output(&transcripts_path(&args.out), &transcript_body)?;

    println!("{}", summary_line(&report));
    Ok(())
}

fn summary_line(report: &MetricsReport) -> String {
    let s = &report.summary;
    let fmt_ms = |v: Option<f64>| match v {
        Some(ms) => format!("{ms:.1}"),
        None => "n/a".into(),
    };
    format!(
        "mode={} utterances={} matched={} truncated={} ep50_ms={} ep90_ms={} rtf={:.4} avg_last_steps={:.2} discards={} clock={}",
        report.mode,
        s.utterance_count,
        s.matched_count,
        s.truncated_count,
        fmt_ms(s.ep50_ms),
        fmt_ms(s.ep90_ms),
        s.rtf,
        s.avg_last_steps,
        s.discard_count,
        report.clock,
    )
}

fn generate_suite(args: &GenerateArgs) -> Result<()> {
    let config = GenerateConfig {
        count: args.count,
        vocab_size: args.vocab_size,
        min_tokens: args.min_tokens,
        max_tokens: args.max_tokens,
        misalignment_rate: args.misalignment_rate,
        repeat_rate: args.repeat_rate,
        seed: args.seed,
        frames_per_block: args.frames_per_block,
        frame_shift_ms: args.frame_shift_ms,
    };
    let file = generate(&config)?;
    file.save(&args.out)?;
    println!(
        "wrote {} scenarios to {} (seed {})",
        file.scenarios.len(),
        args.out.display(),
        args.seed
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transcript_path_sits_next_to_the_report() {
        assert_eq!(
            transcripts_path(Path::new("/tmp/report.json")),
            Path::new("/tmp/report.transcripts.json")
        );
        assert_eq!(
            transcripts_path(Path::new("out/metrics.csv")),
            Path::new("out/metrics.transcripts.json")
        );
        assert_eq!(transcripts_path(Path::new("report")), Path::new("report.transcripts.json"));
    }

    #[test]
    fn cli_arguments_parse_with_documented_defaults() {
        let cli = Cli::try_parse_from([
            "stitchdec",
            "run",
            "--scenarios",
            "suite.json",
            "--out",
            "report.json",
        ])
        .unwrap();
        match cli.command {
            Command::Run(args) => {
                assert_eq!(args.beam, 10);
                assert_eq!(args.nu, 1.0);
                assert_eq!(args.upsilon, 0.5);
                assert_eq!(args.ctc_weight, 0.4);
                assert_eq!(args.max_len, 200);
                assert_eq!(args.step_cost_ms, 10.0);
                assert!(matches!(args.mode, ModeArg::Rabs));
                assert!(matches!(args.format, FormatArg::Json));
            }
            _ => panic!("expected run"),
        }
    }

    #[test]
    fn unknown_mode_is_a_usage_error() {
        assert!(Cli::try_parse_from([
            "stitchdec",
            "run",
            "--scenarios",
            "s.json",
            "--out",
            "r.json",
            "--mode",
            "hybrid",
        ])
        .is_err());
    }

    #[test]
    fn input_errors_map_to_exit_code_two() {
        assert_eq!(exit_code_for(&Error::InvalidScenario("x".into())), EXIT_INPUT);
        assert_eq!(exit_code_for(&Error::Io("x".into())), EXIT_INPUT);
        assert_eq!(exit_code_for(&Error::ScorerContract("x".into())), EXIT_INTERNAL);
        assert_eq!(exit_code_for(&Error::LengthMismatch { expected: 1, got: 2 }), EXIT_INTERNAL);
    }
}
