//! `kdpool` command line: gen, match, stats, manifest, train, gradcheck.
//!
//! Every output file is written to a temporary sibling and renamed into
//! place only after it is complete.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use tempfile::NamedTempFile;

use crate::corpus::{StopList, UtteranceRecord, DEFAULT_STATES_PER_PHONE};
use crate::distill::{self, StudentModel, TrainConfig};
use crate::index::{ConstraintLevel, MarginMode, PoolIndex};
use crate::io as fmt;
use crate::matcher::{match_corpus, MatchReport};
use crate::sim::{gen_corpus, synth_teacher, SimConfig};
use crate::targets::{
    build_manifest, extract_soft_targets, without_pool_views, FrameTable, ManifestSources, SoftLabelTable,
    DEFAULT_TOP_K,
};

/// Output names written by `gen` into its directory.
pub const ORIG_ALIGN: &str = "orig.align.jsonl";
pub const ORIG_FRAMES: &str = "orig.frames.jsonl";
pub const ORIG_SOFT: &str = "orig.soft.jsonl";
pub const POOL_ALIGN: &str = "pool.align.jsonl";
pub const POOL_FRAMES: &str = "pool.frames.jsonl";
pub const POOL_SOFT: &str = "pool.soft.jsonl";
pub const EVAL_FRAMES: &str = "eval.frames.jsonl";
pub const SIM_CONFIG: &str = "sim.json";

#[derive(Debug, Parser)]
#[command(name = "kdpool", version, about = "Duration-matched privileged soft targets for distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Constraint {
    Word,
    Phone,
    State,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Default,
    /// Degraded, label-noisy originals against a clean pool.
    Mismatch,
    /// One-frame twin perturbations.
    Jittered,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic original corpus, pool, features, and teacher soft labels.
    Gen(GenArgs),
    /// Select a duration-matched pool word for every original word.
    Match(MatchArgs),
    /// Matching ratios, as `level<TAB>matched<TAB>total<TAB>ratio` rows.
    Stats(StatsArgs),
    /// Assemble per-frame training examples with original and pool views.
    Manifest(ManifestArgs),
    /// Train a student on a manifest; writes the model and a loss trace.
    Train(TrainArgs),
    /// Compare analytic and numeric gradients of the distillation loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, clap::Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    pub top_k: usize,
    /// Starting parameters; `--config` and the flags below override it.
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    pub preset: Preset,
    /// JSON file with simulation parameters; command-line values override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub original_size: Option<usize>,
    #[arg(long)]
    pub pool_size: Option<usize>,
    #[arg(long)]
    pub lexicon_size: Option<usize>,
    #[arg(long)]
    pub duration_correlation: Option<f64>,
    #[arg(long)]
    pub twin_jitter: Option<f64>,
    #[arg(long)]
    pub eval_size: Option<usize>,
}

#[derive(Debug, clap::Args)]
pub struct PairArgs {
    #[arg(long)]
    pub orig: PathBuf,
    #[arg(long)]
    pub pool: PathBuf,
    /// One word per line; defaults to `<sil>` and `<sp>`.
    #[arg(long)]
    pub stop_list: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_STATES_PER_PHONE)]
    pub states_per_phone: usize,
}

#[derive(Debug, clap::Args)]
pub struct MatchArgs {
    #[command(flatten)]
    pub pair: PairArgs,
    #[arg(long, value_enum)]
    pub constraint: Constraint,
    /// Allowed normalized per-phone L1 distance; only valid with `--constraint phone`.
    #[arg(long, default_value_t = 0.0)]
    pub phone_margin: f64,
    /// Bound every phone's difference by the margin instead of the mean.
    #[arg(long)]
    pub margin_cap: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub orig: Option<PathBuf>,
    #[arg(long)]
    pub pool: Option<PathBuf>,
    #[arg(long)]
    pub stop_list: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_STATES_PER_PHONE)]
    pub states_per_phone: usize,
    /// Margin of the phone-margin row.
    #[arg(long, default_value_t = 2.0)]
    pub phone_margin: f64,
    /// Report these match files instead of matching `--orig` against `--pool`.
    #[arg(long, conflicts_with_all = ["orig", "pool"])]
    pub matches: Vec<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct ManifestArgs {
    #[command(flatten)]
    pub pair: PairArgs,
    #[arg(long)]
    pub matches: PathBuf,
    #[arg(long)]
    pub orig_frames: PathBuf,
    #[arg(long)]
    pub orig_soft: PathBuf,
    #[arg(long)]
    pub pool_soft: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    pub top_k: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    pub top_k: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [32, 32])]
    pub hidden: Vec<usize>,
    #[arg(long)]
    pub num_labels: Option<usize>,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.5)]
    pub hard_label_prob: f64,
    /// Drop pool views and train on the original view only.
    #[arg(long)]
    pub no_pool: bool,
    /// Labeled frames to evaluate after each epoch.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long)]
    pub out_model: PathBuf,
    #[arg(long)]
    pub out_trace: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Manifest examples in the checked batch.
    #[arg(long, default_value_t = 8)]
    pub examples: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

/// Parses `args` and runs; returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if let Err(e) = check_usage(&cli) {
        let _ = e.print();
        return e.exit_code();
    }
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

/// Flag combinations clap cannot express on its own.
pub fn check_usage(cli: &Cli) -> std::result::Result<(), clap::Error> {
    let usage = |msg: &str| Err(Cli::command().error(clap::error::ErrorKind::ArgumentConflict, msg));
    match &cli.command {
        Command::Match(a) => {
            if !(a.phone_margin >= 0.0 && a.phone_margin.is_finite()) {
                return usage("--phone-margin must be a finite value >= 0");
            }
            if a.phone_margin > 0.0 && a.constraint != Constraint::Phone {
                return usage("--phone-margin is only valid with --constraint phone");
            }
            if a.margin_cap && a.constraint != Constraint::Phone {
                return usage("--margin-cap is only valid with --constraint phone");
            }
        }
        Command::Stats(a) => {
            if !(a.phone_margin >= 0.0 && a.phone_margin.is_finite()) {
                return usage("--phone-margin must be a finite value >= 0");
            }
            if a.matches.is_empty() && (a.orig.is_none() || a.pool.is_none()) {
                return usage("stats needs --orig and --pool, or --matches");
            }
        }
        Command::Train(a) if !(0.0..=1.0).contains(&a.hard_label_prob) => {
            return usage("--hard-label-prob must lie in [0, 1]");
        }
        _ => {}
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::Match(a) => match_cmd(a),
        Command::Stats(a) => stats(a, &mut std::io::stdout().lock()),
        Command::Manifest(a) => manifest(a),
        Command::Train(a) => train(a),
        Command::Gradcheck(a) => gradcheck(a, &mut std::io::stdout().lock()),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(BufReader::new(f))
}

/// Writes through `fill` into a temporary file next to `path`, then renames it.
fn write_atomic<F>(path: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<&mut NamedTempFile>) -> Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = NamedTempFile::new_in(dir).with_context(|| format!("cannot create temporary file in {}", dir.display()))?;
    {
        let mut w = BufWriter::new(&mut tmp);
        fill(&mut w).with_context(|| format!("writing {}", path.display()))?;
        w.flush().with_context(|| format!("writing {}", path.display()))?;
    }
    tmp.persist(path)
        .with_context(|| format!("cannot rename into {}", path.display()))?;
    Ok(())
}

fn read_alignments(path: &Path, spp: usize) -> Result<Vec<UtteranceRecord>> {
    fmt::parse_alignments(open(path)?, spp).with_context(|| format!("in {}", path.display()))
}

fn read_stop_list(path: Option<&Path>) -> Result<StopList> {
    match path {
        None => Ok(StopList::silences()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            Ok(StopList::parse(&text))
        }
    }
}

fn level_of(constraint: Constraint, margin: f64, cap: bool) -> Result<ConstraintLevel> {
    Ok(match constraint {
        Constraint::Word => ConstraintLevel::WordExact,
        Constraint::State => ConstraintLevel::StateExact,
        Constraint::Phone if margin > 0.0 || cap => {
            let mode = if cap { MarginMode::PerPhoneCap } else { MarginMode::Average };
            ConstraintLevel::phone_margin_with(margin, mode)?
        }
        Constraint::Phone => ConstraintLevel::PhoneExact,
    })
}

fn gen(a: GenArgs) -> Result<()> {
    let mut cfg: SimConfig = match &a.config {
        Some(p) => serde_json::from_reader(open(p)?).with_context(|| format!("in {}", p.display()))?,
        None => match a.preset {
            Preset::Default => SimConfig::default(),
            Preset::Mismatch => SimConfig::mismatch_task(a.seed),
            Preset::Jittered => SimConfig::jittered_twins(a.seed),
        },
    };
    cfg.seed = a.seed;
    if let Some(v) = a.original_size {
        cfg.original_size = v;
    }
    if let Some(v) = a.pool_size {
        cfg.pool_size = v;
    }
    if let Some(v) = a.lexicon_size {
        cfg.lexicon_size = v;
    }
    if let Some(v) = a.duration_correlation {
        cfg.duration_correlation = v;
    }
    if let Some(v) = a.twin_jitter {
        cfg.twin_jitter = v;
    }
    if let Some(v) = a.eval_size {
        cfg.eval_size = v;
    }
    let corpus = gen_corpus(&cfg)?;
    let teacher = synth_teacher(&cfg);
    let soft = |frames: &FrameTable| -> Result<SoftLabelTable> {
        frames
            .par_iter()
            .map(|(id, f)| Ok((id.clone(), extract_soft_targets(&teacher, &f.feats, a.top_k)?)))
            .collect()
    };
    let orig_soft = soft(&corpus.original_frames)?;
    let pool_soft = soft(&corpus.pool_frames)?;

    std::fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let spp = cfg.states_per_phone;
    let out = |name: &str| a.out.join(name);
    write_atomic(&out(SIM_CONFIG), |w| {
        serde_json::to_writer_pretty(&mut *w, &cfg)?;
        writeln!(w)?;
        Ok(())
    })?;
    write_atomic(&out(ORIG_ALIGN), |w| Ok(fmt::write_alignments(w, &corpus.originals, spp)?))?;
    write_atomic(&out(POOL_ALIGN), |w| Ok(fmt::write_alignments(w, &corpus.pool, spp)?))?;
    write_atomic(&out(ORIG_FRAMES), |w| Ok(fmt::write_frames(w, &corpus.original_frames)?))?;
    write_atomic(&out(POOL_FRAMES), |w| Ok(fmt::write_frames(w, &corpus.pool_frames)?))?;
    write_atomic(&out(ORIG_SOFT), |w| Ok(fmt::write_soft_labels(w, &orig_soft)?))?;
    write_atomic(&out(POOL_SOFT), |w| Ok(fmt::write_soft_labels(w, &pool_soft)?))?;
    write_atomic(&out(EVAL_FRAMES), |w| Ok(fmt::write_labeled_frames(w, &corpus.eval_frames)?))?;
    Ok(())
}

fn load_index(pair: &PairArgs) -> Result<(Vec<UtteranceRecord>, PoolIndex)> {
    let originals = read_alignments(&pair.orig, pair.states_per_phone)?;
    let pool = read_alignments(&pair.pool, pair.states_per_phone)?;
    let stop_list = read_stop_list(pair.stop_list.as_deref())?;
    let idx = PoolIndex::build(pool, stop_list, pair.states_per_phone)
        .with_context(|| format!("indexing {}", pair.pool.display()))?;
    Ok((originals, idx))
}

fn match_cmd(a: MatchArgs) -> Result<()> {
    let level = level_of(a.constraint, a.phone_margin, a.margin_cap)?;
    let (originals, idx) = load_index(&a.pair)?;
    let report = match_corpus(&originals, &idx, level);
    write_atomic(&a.out, |w| Ok(fmt::write_matches(w, &report)?))
}

fn stats_row<W: Write>(out: &mut W, report: &MatchReport) -> Result<()> {
    writeln!(
        out,
        "{}\t{}\t{}\t{:.6}",
        report.level,
        report.matched_count,
        report.total_count,
        report.matching_ratio()
    )?;
    Ok(())
}

pub fn stats<W: Write>(a: StatsArgs, out: &mut W) -> Result<()> {
    if !a.matches.is_empty() {
        for p in &a.matches {
            let report = fmt::parse_matches(open(p)?).with_context(|| format!("in {}", p.display()))?;
            stats_row(out, &report)?;
        }
        return Ok(());
    }
    let (Some(orig), Some(pool)) = (a.orig, a.pool) else {
        bail!("stats needs --orig and --pool, or --matches");
    };
    let pair = PairArgs {
        orig,
        pool,
        stop_list: a.stop_list,
        states_per_phone: a.states_per_phone,
    };
    let (originals, idx) = load_index(&pair)?;
    for level in [
        ConstraintLevel::WordExact,
        ConstraintLevel::phone_margin(a.phone_margin)?,
        ConstraintLevel::PhoneExact,
        ConstraintLevel::StateExact,
    ] {
        stats_row(out, &match_corpus(&originals, &idx, level))?;
    }
    Ok(())
}

fn manifest(a: ManifestArgs) -> Result<()> {
    let spp = a.pair.states_per_phone;
    let originals = read_alignments(&a.pair.orig, spp)?;
    let pool = read_alignments(&a.pair.pool, spp)?;
    let stop_list = read_stop_list(a.pair.stop_list.as_deref())?;
    let in_file = |p: &Path| format!("in {}", p.display());
    let original_frames = fmt::parse_frames(open(&a.orig_frames)?, &originals).with_context(|| in_file(&a.orig_frames))?;
    let original_soft =
        fmt::parse_soft_labels(open(&a.orig_soft)?, &originals, a.top_k).with_context(|| in_file(&a.orig_soft))?;
    let pool_soft = fmt::parse_soft_labels(open(&a.pool_soft)?, &pool, a.top_k).with_context(|| in_file(&a.pool_soft))?;
    let matches = fmt::parse_matches(open(&a.matches)?).with_context(|| in_file(&a.matches))?;
    let src = ManifestSources {
        originals: &originals,
        original_frames: &original_frames,
        original_soft: &original_soft,
        pool: &pool,
        pool_soft: &pool_soft,
        stop_list: &stop_list,
    };
    let examples = build_manifest(&src, &matches)?;
    write_atomic(&a.out, |w| Ok(fmt::write_manifest(w, &examples)?))
}

fn read_manifest(m: &ModelArgs) -> Result<Vec<crate::targets::TrainingExample>> {
    fmt::parse_manifest(open(&m.manifest)?, m.top_k).with_context(|| format!("in {}", m.manifest.display()))
}

fn train(a: TrainArgs) -> Result<()> {
    let mut examples = read_manifest(&a.model)?;
    if a.no_pool {
        examples = without_pool_views(&examples);
    }
    let eval = match &a.eval {
        Some(p) => Some(fmt::parse_labeled_frames(open(p)?).with_context(|| format!("in {}", p.display()))?),
        None => None,
    };
    let cfg = TrainConfig {
        seed: a.model.seed,
        epochs: a.epochs,
        learning_rate: a.learning_rate,
        batch_size: a.batch_size,
        hard_label_prob: a.hard_label_prob,
        hidden: a.model.hidden.clone(),
        num_labels: a.model.num_labels,
    };
    let outcome = distill::train_student(&examples, &cfg, eval.as_deref())?;
    write_atomic(&a.out_model, |w| Ok(fmt::write_model(w, &outcome.model)?))?;
    write_atomic(&a.out_trace, |w| Ok(fmt::write_trace(w, &outcome.trace)?))
}

pub fn gradcheck<W: Write>(a: GradcheckArgs, out: &mut W) -> Result<()> {
    let examples = read_manifest(&a.model)?;
    let batch = &examples[..a.examples.min(examples.len())];
    let Some(first) = batch.first() else {
        bail!("empty manifest {}", a.model.manifest.display());
    };
    let labels = a.model.num_labels.unwrap_or_else(|| {
        batch
            .iter()
            .flat_map(|ex| std::iter::once(ex.hard).chain(ex.views.iter().flat_map(|v| v.dist.entries().iter().map(|e| e.0))))
            .max()
            .map_or(1, |m| m as usize + 1)
    });
    let mut sizes = vec![first.feat.len()];
    sizes.extend(&a.model.hidden);
    sizes.push(labels);
    let model = StudentModel::new(sizes, a.model.seed)?;
    let err = distill::grad_check(&model, batch, a.epsilon)?;
    writeln!(out, "max_relative_error\t{err:.3e}")?;
    if !(err < a.tolerance) {
        bail!("gradient check failed: {err:.3e} >= tolerance {:.3e}", a.tolerance);
    }
    Ok(())
}
