//! Command-line front end: `synth`, `train`, `track` and `eval`.
//!
//! Every command reads one run configuration (TOML, see the README) plus
//! `--set key=value` overrides on dotted paths such as `train.epochs=10`.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::contrastive::{train_ram, TrainConfig, TrainOutcome};
use crate::data::{
    boxes_by_frame, generate_scenario, load_model, read_mot, restrict_frames, save_model,
    write_detections, write_loss_csv, write_mot, ScenarioSpec,
};
use crate::error::{Error, Result};
use crate::evaluation::{clear_mot, MetricsReport, DEFAULT_IOU_GATE};
use crate::geometry::FrameSize;
use crate::ram::RamKind;
use crate::tracking::{track_sequence, TrackerConfig};

/// Everything a command may need, loaded from one file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Frame extent used for box normalization, scenario bounds and tracking.
    pub frame: FrameSize,
    /// `auto` (follow the model file), `none`, `tram`, `sram` or `stram`.
    pub ram_kind: String,
    pub scenario: ScenarioSpec,
    pub train: TrainConfig,
    pub tracker: TrackerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            frame: FrameSize::default(),
            ram_kind: "auto".into(),
            scenario: ScenarioSpec::default(),
            train: TrainConfig::default(),
            tracker: TrackerConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set_path(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::invalid("override", format!("{assignment:?} is not key=value")))?;
    let key = key.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut table = root;
    for p in parents {
        table = match table.get_mut(*p) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(Error::invalid("override", format!("unknown key {key:?}"))),
        };
    }
    if !table.contains_key(*last) {
        return Err(Error::invalid("override", format!("unknown key {key:?}")));
    }
    table.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Defaults, then the file, then each override in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(RunConfig::default())
            .map_err(|e| Error::Invariant(format!("default config does not serialize: {e}")))?;
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file: toml::Table = toml::from_str(&text).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
                reason: e.message().to_string(),
            })?;
            merge(&mut table, file);
        }
        for o in overrides {
            set_path(&mut table, o)?;
        }
        let mut cfg = RunConfig::deserialize(table).map_err(|e| Error::invalid("config", e.message().to_string()))?;
        cfg.scenario.frame = cfg.frame;
        cfg.tracker.frame = cfg.frame;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        FrameSize::new(self.frame.width, self.frame.height)?;
        self.ram_choice()?;
        self.scenario.validate()?;
        self.train.validate()?;
        self.tracker.validate()
    }

    /// `Ok(None)` for `auto`, `Ok(Some(None))` for `none`.
    pub fn ram_choice(&self) -> Result<Option<Option<RamKind>>> {
        match self.ram_kind.to_ascii_lowercase().as_str() {
            "auto" => Ok(None),
            "none" => Ok(Some(None)),
            other => Ok(Some(Some(other.parse()?))),
        }
    }

    /// TOML of the defaults.
    pub fn default_toml() -> String {
        toml::to_string_pretty(&RunConfig::default()).expect("defaults serialize")
    }
}

/// Inclusive frame interval, written `A:B`, `A:` or `:B`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameRange {
    pub first: Option<usize>,
    pub last: Option<usize>,
}

impl FrameRange {
    pub fn new(first: usize, last: usize) -> Self {
        FrameRange { first: Some(first), last: Some(last) }
    }

    fn resolve(range: Option<FrameRange>, available: Option<(usize, usize)>) -> Option<(usize, usize)> {
        let (lo, hi) = available?;
        let r = range.unwrap_or(FrameRange { first: None, last: None });
        let (a, b) = (r.first.unwrap_or(lo), r.last.unwrap_or(hi));
        (a <= b).then_some((a, b))
    }
}

impl FromStr for FrameRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid("frame range", format!("{s:?} (expected A:B, A: or :B)"));
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        let num = |t: &str| -> Result<Option<usize>> {
            match t.trim() {
                "" => Ok(None),
                t => t.parse::<usize>().ok().filter(|&v| v >= 1).map(Some).ok_or_else(bad),
            }
        };
        let r = FrameRange { first: num(a)?, last: num(b)? };
        if let (Some(x), Some(y)) = (r.first, r.last) {
            if x > y {
                return Err(bad());
            }
        }
        Ok(r)
    }
}

impl fmt::Display for FrameRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let part = |v: Option<usize>| v.map(|v| v.to_string()).unwrap_or_default();
        write!(f, "{}:{}", part(self.first), part(self.last))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthSummary {
    pub gt_boxes: usize,
    pub detections: usize,
}

/// Writes `gt.txt` and `det.txt` for the configured scenario.
pub fn cmd_synth(cfg: &RunConfig, out_dir: &Path) -> Result<SynthSummary> {
    let sc = generate_scenario(&cfg.scenario)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_mot(&sc.gt, out_dir.join("gt.txt"))?;
    write_detections(&sc.detections, out_dir.join("det.txt"))?;
    Ok(SynthSummary {
        gt_boxes: sc.gt.iter().map(|t| t.points.len()).sum(),
        detections: sc.detections.iter().map(|f| f.detections.len()).sum(),
    })
}

/// Trains on the trajectory rows of `data`: ground truth for supervised
/// training, or a previous tracking result for the unsupervised variant.
pub fn cmd_train(
    cfg: &RunConfig,
    data: &Path,
    kind: RamKind,
    range: Option<FrameRange>,
    model_out: &Path,
    loss_csv: &Path,
) -> Result<TrainOutcome> {
    let mot = read_mot(data)?;
    if mot.trajectories.is_empty() {
        return Err(Error::invalid("training data", format!("{} has no trajectory rows", data.display())));
    }
    let available = {
        let frames = mot.trajectories.iter().flat_map(|t| t.points.iter().map(|p| p.0));
        frames.clone().min().zip(frames.max())
    };
    let (first, last) = FrameRange::resolve(range, available)
        .ok_or_else(|| Error::invalid("frame range", "selects no frames"))?;
    let frames = boxes_by_frame(&mot.trajectories, first, last);
    let out = train_ram(&frames, kind, &cfg.train, cfg.frame)?;
    save_model(model_out, &out.model, cfg.train.seed, Some(&cfg.train))?;
    write_loss_csv(&out.history, loss_csv)?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackSummary {
    pub tracks: usize,
    pub frames: usize,
    pub elapsed: Duration,
}

pub fn cmd_track(
    cfg: &RunConfig,
    det: &Path,
    model: Option<&Path>,
    range: Option<FrameRange>,
    out: &Path,
) -> Result<TrackSummary> {
    let mot = read_mot(det)?;
    let saved = model.map(load_model).transpose()?;
    match (cfg.ram_choice()?, &saved) {
        (Some(None), Some(_)) => {
            return Err(Error::invalid("ram_kind", "\"none\" given together with a model file"));
        }
        (Some(Some(kind)), None) => {
            return Err(Error::invalid("ram_kind", format!("{kind} requires a model file")));
        }
        (Some(Some(kind)), Some(s)) if s.model.kind != kind => {
            return Err(Error::invalid(
                "ram_kind",
                format!("config says {kind}, model file holds {}", s.model.kind),
            ));
        }
        _ => {}
    }
    if let Some(s) = &saved {
        if s.model.input_dim() != 4 {
            return Err(Error::dims("model input", 4, s.model.input_dim()));
        }
    }
    let frames = match FrameRange::resolve(range, mot.frame_range()) {
        Some((a, b)) => mot.detection_frames(a, b),
        None => Vec::new(),
    };
    let start = Instant::now();
    let trajectories = track_sequence(&frames, &cfg.tracker, saved.as_ref().map(|s| &s.model))?;
    let elapsed = start.elapsed();
    write_mot(&trajectories, out)?;
    Ok(TrackSummary { tracks: trajectories.len(), frames: frames.len(), elapsed })
}

pub fn cmd_eval(
    gt: &Path,
    results: &Path,
    range: Option<FrameRange>,
    iou_gate: f64,
    csv: Option<&Path>,
) -> Result<MetricsReport> {
    if !(0.0..=1.0).contains(&iou_gate) {
        return Err(Error::invalid("iou gate", iou_gate.to_string()));
    }
    let g = read_mot(gt)?;
    let h = read_mot(results)?;
    let (gt_t, hyp_t) = match range {
        Some(r) => {
            let (a, b) = (r.first.unwrap_or(1), r.last.unwrap_or(usize::MAX));
            (restrict_frames(&g.trajectories, a, b), restrict_frames(&h.trajectories, a, b))
        }
        None => (g.trajectories, h.trajectories),
    };
    let report = clear_mot(&gt_t, &hyp_t, iou_gate);
    if let Some(path) = csv {
        fs::write(path, report.to_csv()).map_err(|e| Error::io(path, e))?;
    }
    Ok(report)
}

#[derive(Debug, Parser)]
#[command(name = "ratrack", version, about = "Alignment-assisted tracking-by-detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one field, e.g. `--set train.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

fn parse_kind(s: &str) -> Result<RamKind> {
    s.parse()
}

fn parse_range(s: &str) -> Result<FrameRange> {
    s.parse()
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scenario as MOT gt and detection files.
    Synth {
        #[arg(long)]
        seed: u64,
        /// Output directory for gt.txt and det.txt.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train an alignment module on trajectory rows of a MOT file.
    Train {
        #[arg(long)]
        seed: u64,
        /// Ground truth, or the output of an earlier tracking run.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_kind, default_value = "stram")]
        kind: RamKind,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch losses; defaults to the model path with `.loss.csv`.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        #[arg(long, value_parser = parse_range)]
        frames: Option<FrameRange>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Track detections, optionally with a trained model.
    Track {
        #[arg(long)]
        det: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_range)]
        frames: Option<FrameRange>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// CLEAR MOT and identity metrics of a result file against ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, value_parser = parse_range)]
        frames: Option<FrameRange>,
        #[arg(long, default_value_t = DEFAULT_IOU_GATE)]
        iou_gate: f64,
    },
    /// Print the default configuration as TOML.
    Config,
}

fn load(cfg: &ConfigArgs, seed: Option<(&str, u64)>) -> Result<RunConfig> {
    let mut overrides = cfg.overrides.clone();
    if let Some((key, seed)) = seed {
        overrides.push(format!("{key}={seed}"));
    }
    RunConfig::load(cfg.config.as_deref(), &overrides)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { seed, out, cfg } => {
            let cfg = load(&cfg, Some(("scenario.seed", seed)))?;
            let s = cmd_synth(&cfg, &out)?;
            println!("wrote {} ({} gt boxes, {} detections)", out.display(), s.gt_boxes, s.detections);
        }
        Command::Train { seed, data, kind, out, loss_csv, frames, cfg } => {
            let cfg = load(&cfg, Some(("train.seed", seed)))?;
            let loss_csv = loss_csv.unwrap_or_else(|| out.with_extension("loss.csv"));
            let res = cmd_train(&cfg, &data, kind, frames, &out, &loss_csv)?;
            match (res.history.first(), res.history.last()) {
                (Some(first), Some(last)) => println!(
                    "epoch {}: L_T {:.6} L_S {:.6} L_ST {:.6} (first epoch L_ST {:.6})",
                    last.epoch, last.l_t, last.l_s, last.l_st, first.l_st
                ),
                _ => println!("no epochs run; saved initialization"),
            }
            println!("model {} losses {}", out.display(), loss_csv.display());
        }
        Command::Track { det, model, out, frames, cfg } => {
            let cfg = load(&cfg, None)?;
            let s = cmd_track(&cfg, &det, model.as_deref(), frames, &out)?;
            println!(
                "{} tracks over {} frames in {:.3}s -> {}",
                s.tracks,
                s.frames,
                s.elapsed.as_secs_f64(),
                out.display()
            );
        }
        Command::Eval { gt, results, csv, frames, iou_gate } => {
            let r = cmd_eval(&gt, &results, frames, iou_gate, csv.as_deref())?;
            print!("{}", r.to_table());
        }
        Command::Config => print!("{}", RunConfig::default_toml()),
    }
    Ok(())
}

/// Parses arguments, runs the command, and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
