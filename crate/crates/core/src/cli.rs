//! The `comer` command line: corpus generation, training, evaluation,
//! refinement heatmaps and the four-way coverage ablation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::attention::{export_refinement, refinement_row};
use crate::config::RunConfig;
use crate::data::{generate, load_dataset, save_dataset, DatasetStats, GlyphAtlas, Image, Sample, Vocab};
use crate::decoder::CoverageMode;
use crate::error::{Error, Result};
use crate::metrics::{default_max_len, evaluate, predictions_tsv, EvalReport, SearchMode};
use crate::model::Model;
use crate::rng::derive_seed;
use crate::search::{greedy, Direction, ModelSearcher};
use crate::tensor::{Graph, Precision, Scalar, Sgd};
use crate::train::{restore_training, train, TrainReport};

#[derive(Debug, Parser)]
#[command(name = "comer", version, about = "Coverage-refined transformer recognizer for rendered expressions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic corpus of PGM images and a label file.
    Gen(GenArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Export refinement-term heatmaps for one image.
    Visualize(VisualizeArgs),
    /// Train and score every coverage mode over several seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// INI run configuration; the toy preset when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr=0.05`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::toy(),
        };
        for o in &self.overrides {
            cfg.set_override(o)?;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of samples.
    #[arg(long)]
    pub n: Option<usize>,
    /// Replace an existing corpus.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// none | self | cross | fusion
    #[arg(long)]
    pub coverage: Option<String>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from `<out>/last.ckpt` when it exists.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to `config.ini` beside the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub beam: Option<usize>,
    /// joint | l2r
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Directory for `report.json` and `predictions.tsv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Binary PGM input.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Training corpus.
    #[arg(long)]
    pub data: PathBuf,
    /// Test corpus; 200 fresh samples from the config when omitted.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn parse_coverage(s: &str) -> Result<CoverageMode> {
    s.parse()
}

fn parse_search_mode(s: &str) -> Result<SearchMode> {
    match s {
        "joint" => Ok(SearchMode::Joint),
        "l2r" => Ok(SearchMode::L2R),
        _ => Err(Error::Usage(format!("unknown search mode {s:?} (valid: joint, l2r)"))),
    }
}

fn corpus(cfg: &RunConfig, seed: u64, n: usize) -> Result<Vec<Sample>> {
    let vocab = Vocab::default();
    let atlas = GlyphAtlas::builtin(&vocab)?;
    generate(&vocab, &atlas, &cfg.grammar, &cfg.render, seed, n)
}

fn is_nonempty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Writes a corpus and returns its statistics.
pub fn gen(cfg: &RunConfig, out: &Path, force: bool) -> Result<DatasetStats> {
    if is_nonempty_dir(out) {
        if !force {
            return Err(Error::Usage(format!("{} exists and is not empty; pass --force to replace it", out.display())));
        }
        let images = out.join("images");
        if images.is_dir() {
            fs::remove_dir_all(&images)?;
        }
        for f in ["labels.tsv", "stats.json"] {
            if out.join(f).exists() {
                fs::remove_file(out.join(f))?;
            }
        }
    }
    let samples = corpus(cfg, cfg.dataset_seed, cfg.dataset_size)?;
    save_dataset(out, &samples, &Vocab::default())?;
    let stats = DatasetStats::of(&samples);
    fs::write(out.join("stats.json"), serde_json::to_string_pretty(&stats)? + "\n")?;
    Ok(stats)
}

fn cmd_gen(o: &mut String, a: &GenArgs) -> Result<()> {
    let mut cfg = a.config.resolve()?;
    if let Some(s) = a.seed {
        cfg.dataset_seed = s;
    }
    if let Some(n) = a.n {
        cfg.dataset_size = n;
    }
    let stats = gen(&cfg, &a.out, a.force)?;
    let _ = writeln!(o, "{}", serde_json::to_string(&stats)?);
    let _ = writeln!(o, "samples {}  length>=15 {}", stats.size, stats.long);
    for (len, &c) in stats.histogram.iter().enumerate().filter(|(_, &c)| c > 0) {
        let _ = writeln!(o, "  len {len:>3}  {c}");
    }
    Ok(())
}

fn train_in<T: Scalar>(cfg: &RunConfig, samples: &[Sample], out: &Path, resume: bool) -> Result<TrainReport> {
    let mut model: Model<T> = Model::new(cfg.model, cfg.train.seed)?;
    let mut sgd = Sgd::new(cfg.train.sgd(), &model.store);
    let last = out.join("last.ckpt");
    let (start, best) = if resume && last.exists() { restore_training(&mut model, &mut sgd, &last)? } else { (0, 0.0) };
    train(&mut model, &mut sgd, samples, &cfg.train, Some(out), start, best)
}

/// Trains one model into `out`, which receives `config.ini`, `metrics.jsonl`,
/// `last.ckpt` and `best.ckpt`.
pub fn train_run(cfg: &RunConfig, samples: &[Sample], out: &Path, resume: bool) -> Result<TrainReport> {
    let mut cfg = cfg.clone();
    if cfg.search.max_len.is_none() {
        cfg.search.max_len = Some(default_max_len(samples));
    }
    fs::create_dir_all(out)?;
    if resume && out.join("last.ckpt").exists() {
        let prior = RunConfig::from_file(&out.join("config.ini"))?;
        if prior.model != cfg.model {
            return Err(Error::Usage(format!("{} holds a run with a different model configuration", out.display())));
        }
    }
    fs::write(out.join("config.ini"), cfg.to_ini())?;
    match cfg.train.precision {
        Precision::Single => train_in::<f32>(&cfg, samples, out, resume),
        Precision::Double => train_in::<f64>(&cfg, samples, out, resume),
    }
}

fn cmd_train(o: &mut String, a: &TrainArgs) -> Result<()> {
    let mut cfg = a.config.resolve()?;
    if let Some(c) = &a.coverage {
        cfg.set_override(&format!("model.coverage={}", parse_coverage(c)?))?;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    let samples = load_dataset(&a.data, &Vocab::default())?;
    let report = train_run(&cfg, &samples, &a.out, a.resume)?;
    for e in &report.epochs {
        let _ = writeln!(o, "epoch {:>3}  loss {:.4}  val exprate {:.4}  {:.1}s", e.epoch, e.train_loss, e.val_exprate, e.seconds);
    }
    let _ = writeln!(o, "best epoch {} (val exprate {:.4}); checkpoints in {}", report.best_epoch, report.best_val, a.out.display());
    Ok(())
}

/// Finds the run configuration that produced `checkpoint`.
pub fn checkpoint_config(checkpoint: &Path, explicit: Option<&Path>) -> Result<RunConfig> {
    match explicit {
        Some(p) => RunConfig::from_file(p),
        None => {
            let side = checkpoint.parent().unwrap_or(Path::new(".")).join("config.ini");
            if side.exists() {
                RunConfig::from_file(&side)
            } else {
                Err(Error::Usage(format!("no config.ini beside {}; pass --config", checkpoint.display())))
            }
        }
    }
}

/// Everything an evaluation produces.
#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub predictions_tsv: String,
}

fn eval_in<T: Scalar>(cfg: &RunConfig, checkpoint: &Path, samples: &[Sample], beam: usize, max_len: usize, mode: SearchMode) -> Result<EvalOutput> {
    let model: Model<T> = Model::load(cfg.model, checkpoint)?;
    let (report, preds) = evaluate(&model, samples, beam, max_len, mode)?;
    Ok(EvalOutput { report, predictions_tsv: predictions_tsv(&preds, &Vocab::default())? })
}

pub fn eval_run(cfg: &RunConfig, checkpoint: &Path, samples: &[Sample], beam: usize) -> Result<EvalOutput> {
    let max_len = cfg.search.max_len.unwrap_or_else(|| default_max_len(samples));
    match cfg.train.precision {
        Precision::Single => eval_in::<f32>(cfg, checkpoint, samples, beam, max_len, cfg.search.mode),
        Precision::Double => eval_in::<f64>(cfg, checkpoint, samples, beam, max_len, cfg.search.mode),
    }
}

fn cmd_eval(o: &mut String, a: &EvalArgs) -> Result<()> {
    let mut cfg = checkpoint_config(&a.checkpoint, a.config.as_deref())?;
    if let Some(m) = &a.mode {
        cfg.search.mode = parse_search_mode(m)?;
    }
    if a.max_len.is_some() {
        cfg.search.max_len = a.max_len;
    }
    let beam = a.beam.unwrap_or(cfg.search.beam);
    if beam == 0 {
        return Err(Error::Usage("beam must be at least 1".into()));
    }
    let samples = load_dataset(&a.data, &Vocab::default())?;
    let out = eval_run(&cfg, &a.checkpoint, &samples, beam)?;
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), out.report.to_json() + "\n")?;
        fs::write(dir.join("predictions.tsv"), &out.predictions_tsv)?;
    }
    let _ = writeln!(o, "{}", out.report.to_json());
    o.push_str(&out.report.table());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepComparison {
    pub step: usize,
    pub attended_cells: usize,
    pub attended_mean: f64,
    pub unattended_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSummary {
    /// 1-based decoder layer.
    pub layer: usize,
    /// Steps where both cell groups are non-empty.
    pub compared_steps: usize,
    /// Compared steps where attended cells carry the larger mean refinement.
    pub attended_higher: usize,
    pub majority: bool,
    pub steps: Vec<StepComparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VisualSummary {
    pub tokens: Vec<String>,
    pub steps: usize,
    pub h_o: usize,
    pub w_o: usize,
    pub threshold: f64,
    pub layers: Vec<LayerSummary>,
}

/// Cumulative attention above which a cell counts as already parsed.
pub const ATTENDED_THRESHOLD: f64 = 0.5;

fn visualize_in<T: Scalar>(cfg: &RunConfig, checkpoint: &Path, image: &Image, out: &Path, max_len: usize) -> Result<VisualSummary> {
    let model: Model<T> = Model::load(cfg.model, checkpoint)?;
    let grid = model.encode_image(image)?;
    let (h_o, w_o) = (grid.h_o, grid.w_o);
    let searcher = ModelSearcher::new(&model, grid.clone());
    let hyp = greedy(&searcher, Direction::L2R, max_len)?;
    let mut emitted = hyp.payload().to_vec();
    if hyp.finished {
        emitted.push(crate::data::EOS);
    }
    let mut input = vec![Direction::L2R.start_token()];
    input.extend_from_slice(&emitted[..emitted.len().saturating_sub(1)]);
    let mut g = Graph::eval();
    let attached = grid.attach(&mut g);
    let (_, coverage) = model.decode_parallel(&mut g, &attached, &input, 1)?;
    let steps = input.len();
    let cells = h_o * w_o;
    let heads = model.config.decoder.heads;
    let vocab = Vocab::default();
    let tokens: Vec<String> = emitted.iter().map(|&t| vocab.token(t).map(str::to_string)).collect::<Result<_>>()?;

    let mut layers = Vec::new();
    for (i, lc) in coverage.layers.iter().enumerate() {
        let Some(trace) = lc.arm else { continue };
        let j = i + 1;
        let r = g.tensor(trace.refinement);
        let refined = g.value(lc.refined);
        let mut cum = vec![0.0f64; cells];
        let mut summary = LayerSummary { layer: j, compared_steps: 0, attended_higher: 0, majority: false, steps: Vec::new() };
        for t in 0..steps {
            let row = refinement_row(&r, 0, t);
            export_refinement(&out.join(format!("step{t}")), t, j, &row, h_o, w_o, heads)?;
            let mean_r: Vec<f64> = (0..cells).map(|l| row[l * heads..(l + 1) * heads].iter().sum::<f64>() / heads as f64).collect();
            let (mut att, mut un) = ((0.0, 0usize), (0.0, 0usize));
            for l in 0..cells {
                let slot = if cum[l] > ATTENDED_THRESHOLD { &mut att } else { &mut un };
                slot.0 += mean_r[l];
                slot.1 += 1;
            }
            let mean = |(s, n): (f64, usize)| if n == 0 { 0.0 } else { s / n as f64 };
            if att.1 > 0 && un.1 > 0 {
                summary.compared_steps += 1;
                if mean(att) > mean(un) {
                    summary.attended_higher += 1;
                }
            }
            summary.steps.push(StepComparison { step: t, attended_cells: att.1, attended_mean: mean(att), unattended_mean: mean(un) });
            for k in 0..heads {
                let base = (k * steps + t) * cells;
                for l in 0..cells {
                    cum[l] += refined[base + l].as_f64() / heads as f64;
                }
            }
        }
        summary.majority = 2 * summary.attended_higher > summary.compared_steps;
        layers.push(summary);
    }
    let summary = VisualSummary { tokens, steps, h_o, w_o, threshold: ATTENDED_THRESHOLD, layers };
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

/// Greedy-decodes `image` and writes one `step{t}` directory of heatmaps per
/// emitted token (the end token included when decoding finished) plus
/// `summary.json`.
pub fn visualize(cfg: &RunConfig, checkpoint: &Path, image: &Image, out: &Path, max_len: Option<usize>) -> Result<VisualSummary> {
    if cfg.model.decoder.coverage == CoverageMode::None {
        return Err(Error::Usage("coverage mode none has no refinement term to visualize".into()));
    }
    let max_len = max_len.or(cfg.search.max_len).unwrap_or(64);
    fs::create_dir_all(out)?;
    match cfg.train.precision {
        Precision::Single => visualize_in::<f32>(cfg, checkpoint, image, out, max_len),
        Precision::Double => visualize_in::<f64>(cfg, checkpoint, image, out, max_len),
    }
}

pub fn read_image(path: &Path) -> Result<Image> {
    let (w, h, bytes) = crate::pgm::read(path).map_err(|e| match e {
        Error::Io(io) => Error::Usage(format!("cannot read {}: {io}", path.display())),
        e => e,
    })?;
    Image::from_bytes(h, w, &bytes)
}

fn cmd_visualize(o: &mut String, a: &VisualizeArgs) -> Result<()> {
    let cfg = checkpoint_config(&a.checkpoint, a.config.as_deref())?;
    let image = read_image(&a.image)?;
    let s = visualize(&cfg, &a.checkpoint, &image, &a.out, a.max_len)?;
    let _ = writeln!(o, "decoded: {}", s.tokens.join(" "));
    for l in &s.layers {
        let _ = writeln!(o, "layer {}: attended cells carry larger refinement in {}/{} steps", l.layer, l.attended_higher, l.compared_steps);
    }
    let _ = writeln!(o, "{} step directories in {}", s.steps, a.out.display());
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub mode: CoverageMode,
    pub seed: u64,
    pub exprate: f64,
    pub long_exprate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub mode: CoverageMode,
    pub exprate: f64,
    pub long_exprate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub cells: Vec<AblationCell>,
    pub rows: Vec<AblationRow>,
}

fn delta(v: f64, base: f64) -> String {
    format!("({:+.2})", 100.0 * (v - base))
}

impl AblationTable {
    pub fn from_cells(cells: Vec<AblationCell>) -> Self {
        let rows = CoverageMode::ALL
            .iter()
            .map(|&mode| {
                let mine: Vec<_> = cells.iter().filter(|c| c.mode == mode).collect();
                let n = mine.len().max(1) as f64;
                AblationRow { mode, exprate: mine.iter().map(|c| c.exprate).sum::<f64>() / n, long_exprate: mine.iter().map(|c| c.long_exprate).sum::<f64>() / n }
            })
            .collect();
        AblationTable { cells, rows }
    }

    pub fn row(&self, mode: CoverageMode) -> &AblationRow {
        self.rows.iter().find(|r| r.mode == mode).expect("every mode has a row")
    }

    /// Percentages with the change against the `none` row in parentheses.
    pub fn to_tsv(&self) -> String {
        let base = self.row(CoverageMode::None).clone();
        let mut s = String::from("mode\texprate\tdelta_vs_none\tlong_exprate\tlong_delta_vs_none\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{:.2}\t{}\t{:.2}\t{}", r.mode, 100.0 * r.exprate, delta(r.exprate, base.exprate), 100.0 * r.long_exprate, delta(r.long_exprate, base.long_exprate));
        }
        s
    }

    pub fn cells_tsv(&self) -> String {
        let mut s = String::from("mode\tseed\texprate\tlong_exprate\n");
        for c in &self.cells {
            let _ = writeln!(s, "{}\t{}\t{:.4}\t{:.4}", c.mode, c.seed, c.exprate, c.long_exprate);
        }
        s
    }

    pub fn pretty(&self) -> String {
        let base = self.row(CoverageMode::None).clone();
        let mut s = format!("{:<8} {:>18} {:>18}\n", "mode", "ExpRate %", "len>=15 %");
        for r in &self.rows {
            let cell = |v: f64, b: f64| if r.mode == CoverageMode::None { format!("{:.2}", 100.0 * v) } else { format!("{:.2} {}", 100.0 * v, delta(v, b)) };
            let _ = writeln!(s, "{:<8} {:>18} {:>18}", r.mode.to_string(), cell(r.exprate, base.exprate), cell(r.long_exprate, base.long_exprate));
        }
        s
    }
}

/// Trains and scores every coverage mode for seeds `base..base+seeds`, each
/// cell in `out/<mode>_seed<s>`. Writes `ablation.tsv` and `cells.tsv`.
pub fn ablate(cfg: &RunConfig, train_set: &[Sample], test_set: &[Sample], seeds: usize, out: &Path) -> Result<AblationTable> {
    if seeds == 0 {
        return Err(Error::Usage("need at least one seed".into()));
    }
    let mut cells = Vec::new();
    for mode in CoverageMode::ALL {
        for s in 0..seeds as u64 {
            let mut c = cfg.clone();
            c.set_override(&format!("model.coverage={mode}"))?;
            c.train.seed = cfg.train.seed + s;
            let dir = out.join(format!("{mode}_seed{}", c.train.seed));
            if dir.exists() {
                fs::remove_dir_all(&dir)?;
            }
            train_run(&c, train_set, &dir, false)?;
            let c = RunConfig::from_file(&dir.join("config.ini"))?;
            let report = eval_run(&c, &dir.join("best.ckpt"), test_set, cfg.ablate_beam)?.report;
            cells.push(AblationCell { mode, seed: c.train.seed, exprate: report.exprate, long_exprate: report.long_exprate });
        }
    }
    let table = AblationTable::from_cells(cells);
    fs::write(out.join("ablation.tsv"), table.to_tsv())?;
    fs::write(out.join("cells.tsv"), table.cells_tsv())?;
    Ok(table)
}

/// 200 held-out samples drawn from a seed distinct from the training corpus.
pub fn default_test_set(cfg: &RunConfig) -> Result<Vec<Sample>> {
    corpus(cfg, derive_seed(cfg.dataset_seed, "test"), 200)
}

fn cmd_ablate(o: &mut String, a: &AblateArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let vocab = Vocab::default();
    let train_set = load_dataset(&a.data, &vocab)?;
    let test_set = match &a.test {
        Some(p) => load_dataset(p, &vocab)?,
        None => default_test_set(&cfg)?,
    };
    fs::create_dir_all(&a.out)?;
    let table = ablate(&cfg, &train_set, &test_set, a.seeds, &a.out)?;
    o.push_str(&table.pretty());
    let _ = writeln!(o, "written {}", a.out.join("ablation.tsv").display());
    Ok(())
}

/// Runs one command and returns what it prints.
pub fn run(cli: &Cli) -> Result<String> {
    let mut o = String::new();
    match &cli.command {
        Command::Gen(a) => cmd_gen(&mut o, a),
        Command::Train(a) => cmd_train(&mut o, a),
        Command::Eval(a) => cmd_eval(&mut o, a),
        Command::Visualize(a) => cmd_visualize(&mut o, a),
        Command::Ablate(a) => cmd_ablate(&mut o, a),
    }?;
    Ok(o)
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("COMER_THREADS") {
        let n: usize = v.parse().map_err(|_| Error::Usage(format!("COMER_THREADS={v:?} is not a thread count")))?;
        // A pool that already exists keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
/// Failures print one `kind: message` line on stderr.
pub fn main_with<I: IntoIterator<Item = String>>(args: I) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return 0;
            }
            let text = e.to_string();
            let head = text.split("\n\n").next().unwrap_or("");
            let first = head.split_whitespace().collect::<Vec<_>>().join(" ");
            let first = first.trim_start_matches("error: ");
            eprintln!("usage: {first}");
            return 2;
        }
    };
    match configure_threads().and_then(|_| run(&cli)) {
        Ok(text) => {
            // A closed pipe (`comer gen | head`) is not a failure.
            let _ = std::io::Write::write_all(&mut std::io::stdout().lock(), text.as_bytes());
            0
        }
        Err(e) => {
            eprintln!("{}: {}", e.kind(), e.to_string().replace('\n', " "));
            1
        }
    }
}
