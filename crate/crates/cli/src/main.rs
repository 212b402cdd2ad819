//! `odet`: command-line front end for the detection toolkit.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 usage error, 3 parse error,
//! 4 numeric or domain error.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use odet_core::eval::{mean_ap, Detection, GroundTruth};
use odet_core::formats::{
    parse_dota, parse_points, parse_predictions, scene_from_dota, scene_to_dota, write_predictions, PredShape,
    PredictionRecord,
};
use odet_core::geom::{convex_hull, min_area_rect, PairAreas, Point2, PointSet};
use odet_core::loss::{giou_loss, total_loss, ClassLogits, LossWeights, Prediction, Target};
use odet_core::matching::{empirical_cdf, hungarian, matched_ious, matching_cost, reassign_labels, Assignment};
use odet_core::querymodel::{
    detect, ground_truth, load_checkpoint, save_checkpoint, train_toy, QuerySchedule, StepRecord, TrainConfig,
};
use odet_core::synth::{class_name, generate_scenes, Scene, SynthConfig};
use serde::Deserialize;

#[derive(Debug)]
enum CliError {
    Io(String),
    Parse(String),
    Domain(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Parse(_) => 3,
            CliError::Domain(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Io(m) | CliError::Parse(m) | CliError::Domain(m) => f.write_str(m),
        }
    }
}

impl From<odet_core::ParseError> for CliError {
    fn from(e: odet_core::ParseError) -> Self {
        CliError::Parse(e.to_string())
    }
}

fn domain(e: impl std::fmt::Display) -> CliError {
    CliError::Domain(e.to_string())
}

type Res<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "odet", version, about = "Points-based oriented object detection toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Convex hull of a point list (`x y` per line, `-` for stdin).
    Hull { points: PathBuf },
    /// GIoU loss between the hulls of two point lists.
    Giou { a: PathBuf, b: PathBuf },
    /// Minimum-area rectangle around a point list.
    Minrect { points: PathBuf },
    /// Hungarian matching, label re-assignment and loss breakdown for one scene.
    Match(MatchArgs),
    /// CDF of matched-pair hull IoUs for one scene.
    Cdf(PairArgs),
    /// Per-layer query counts of a schedule.
    Schedule {
        n_first: usize,
        n_last: usize,
        rho: f64,
        layers: usize,
    },
    /// Write synthetic scenes as annotation files.
    Synth(SynthArgs),
    /// Train a decoder from a TOML config.
    Train {
        config: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines training log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run a checkpoint over annotation files and write predictions.
    Predict(PredictArgs),
    /// Per-class AP and mAP of predictions against annotations.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        /// Annotation file or directory of them.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
    },
}

#[derive(Args)]
struct PairArgs {
    #[arg(long)]
    pred: PathBuf,
    /// Annotation file; its stem is the scene id predictions must carry.
    #[arg(long)]
    gt: PathBuf,
    /// Scene id to select from the predictions instead of the file stem.
    #[arg(long)]
    scene: Option<String>,
    /// Image side; the center distance is divided by its diagonal.
    #[arg(long, default_value_t = 256.0)]
    size: f64,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 2.0)]
    lambda_cls: f64,
    #[arg(long, default_value_t = 5.0)]
    lambda_l1: f64,
    #[arg(long, default_value_t = 2.0)]
    lambda_iou: f64,
}

#[derive(Args)]
struct MatchArgs {
    #[command(flatten)]
    pair: PairArgs,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    scenes: usize,
    #[arg(long, default_value_t = 1)]
    min_objects: usize,
    #[arg(long, default_value_t = 8)]
    max_objects: usize,
    #[arg(long, default_value_t = 256.0)]
    size: f64,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Output directory, one file per scene.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Annotation file or directory; only the scene ids and size are used.
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long, default_value_t = 20)]
    n_last: usize,
    #[arg(long, default_value_t = 0.6)]
    rho: f64,
    /// Write each query's points instead of its fitted box.
    #[arg(long)]
    points: bool,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Floats print in Rust's shortest round-trip form.
fn f(v: f64) -> String {
    format!("{v:?}")
}

fn read_text(path: &Path) -> Res<String> {
    if path.as_os_str() == "-" {
        let mut s = String::new();
        io::stdin()
            .read_to_string(&mut s)
            .map_err(|e| CliError::Io(format!("stdin: {e}")))?;
        return Ok(s);
    }
    fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Res<()> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn read_points(path: &Path) -> Res<Vec<Point2>> {
    Ok(parse_points(&read_text(path)?, &path.display().to_string())?)
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

fn load_scene(path: &Path, size: f64) -> Res<Scene> {
    let recs = parse_dota(&read_text(path)?, &path.display().to_string())?;
    Ok(scene_from_dota(&stem(path), size, &recs)?)
}

/// One scene from a file, or every `*.txt` in a directory by name.
fn load_scenes(path: &Path, size: f64) -> Res<Vec<Scene>> {
    if !path.is_dir() {
        return Ok(vec![load_scene(path, size)?]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    files.iter().map(|p| load_scene(p, size)).collect()
}

fn cmd_hull(path: &Path) -> Res<String> {
    let pts = read_points(path)?;
    if pts.is_empty() {
        return Err(CliError::Domain("no points".into()));
    }
    let hull = convex_hull(&pts);
    if hull.is_degenerate() {
        eprintln!("warning: degenerate hull (collinear or coincident points)");
    }
    let mut s = String::new();
    for v in hull.vertices() {
        let _ = writeln!(s, "{} {}", f(v.x), f(v.y));
    }
    Ok(s)
}

fn cmd_giou(a: &Path, b: &Path) -> Res<String> {
    let (pa, pb) = (read_points(a)?, read_points(b)?);
    let (sa, sb) = (PointSet::new(pa).map_err(domain)?, PointSet::new(pb).map_err(domain)?);
    let t = giou_loss(sa.points(), sb.points());
    let areas = PairAreas::of(&convex_hull(sa.points()), &convex_hull(sb.points()));
    let mut s = String::new();
    let _ = writeln!(s, "loss {}", f(t.loss));
    let _ = writeln!(s, "iou {}", f(areas.iou()));
    let _ = writeln!(s, "intersection {}", f(t.intersection));
    let _ = writeln!(s, "union {}", f(t.union));
    let _ = writeln!(s, "enclosing {}", f(t.enclosing));
    Ok(s)
}

fn cmd_minrect(path: &Path) -> Res<String> {
    let fit = min_area_rect(&read_points(path)?).map_err(domain)?;
    if fit.degenerate {
        eprintln!("warning: degenerate hull, zero-area rectangle");
    }
    let r = fit.rect;
    Ok(format!("{} {} {} {} {}\n", f(r.cx), f(r.cy), f(r.w), f(r.h), f(r.theta)))
}

/// Probability given to the classes a prediction record does not name.
const OTHER_CLASS_PROB: f64 = 1e-6;

fn logit(p: f64) -> f64 {
    let p = p.clamp(OTHER_CLASS_PROB, 1.0 - OTHER_CLASS_PROB);
    (p / (1.0 - p)).ln()
}

struct PairInput {
    preds: Vec<Prediction>,
    targets: Vec<Target>,
    diag: f64,
    weights: LossWeights,
}

fn pair_input(a: &PairArgs) -> Res<PairInput> {
    let recs = parse_predictions(&read_text(&a.pred)?, &a.pred.display().to_string())?;
    let scene = load_scene(&a.gt, a.size)?;
    let id = a.scene.clone().unwrap_or_else(|| scene.id.clone());
    let mut preds = Vec::new();
    for r in recs.iter().filter(|r| r.scene == id) {
        if r.class >= a.classes {
            return Err(CliError::Domain(format!("class {} with --classes {}", r.class, a.classes)));
        }
        let logits = (0..a.classes)
            .map(|c| logit(if c == r.class { r.score } else { OTHER_CLASS_PROB }))
            .collect();
        preds.push(Prediction {
            logits: ClassLogits::new(logits).map_err(domain)?,
            points: PointSet::new(r.points()).map_err(domain)?,
        });
    }
    let weights = LossWeights {
        lambda_cls: a.lambda_cls,
        lambda_l1: a.lambda_l1,
        lambda_iou: a.lambda_iou,
        ..LossWeights::default()
    };
    weights.validate().map_err(domain)?;
    if let Some(o) = scene.objects.iter().find(|o| o.class >= a.classes) {
        return Err(CliError::Domain(format!("ground-truth class {} with --classes {}", o.class, a.classes)));
    }
    Ok(PairInput {
        preds,
        targets: scene.targets(),
        diag: scene.diag(),
        weights,
    })
}

fn match_pairs(p: &PairInput) -> Res<Vec<(usize, usize)>> {
    if p.targets.is_empty() || p.preds.is_empty() {
        return Ok(Vec::new());
    }
    Ok(hungarian(&matching_cost(&p.preds, &p.targets, &p.weights, p.diag).map_err(domain)?))
}

fn label(l: Option<usize>) -> String {
    l.map_or_else(|| "none".into(), class_name)
}

fn cmd_match(a: &MatchArgs) -> Res<String> {
    let p = pair_input(&a.pair)?;
    let pairs = match_pairs(&p)?;
    let pts: Vec<PointSet> = p.preds.iter().map(|q| q.points.clone()).collect();
    let asg: Assignment = reassign_labels(&pts, &pairs, &p.targets, a.tau);
    let ious = matched_ious(&pts, &pairs, &p.targets);
    let b = total_loss(&p.preds, &asg, &p.targets, &p.weights, p.diag).map_err(domain)?;
    let mut s = String::new();
    let _ = writeln!(s, "queries {}", p.preds.len());
    let _ = writeln!(s, "targets {}", p.targets.len());
    for (&(q, t), iou) in pairs.iter().zip(&ious) {
        let _ = writeln!(s, "pair {q} {t} iou {} label {}", f(*iou), label(asg.labels[q]));
    }
    let _ = writeln!(s, "n_pos {}", b.n_pos);
    let _ = writeln!(s, "cls {}", f(b.cls));
    let _ = writeln!(s, "l1 {}", f(b.l1));
    let _ = writeln!(s, "giou {}", f(b.iou));
    let _ = writeln!(s, "total {}", f(b.total));
    Ok(s)
}

fn cmd_cdf(a: &PairArgs) -> Res<String> {
    let p = pair_input(a)?;
    let pairs = match_pairs(&p)?;
    let pts: Vec<PointSet> = p.preds.iter().map(|q| q.points.clone()).collect();
    let mut s = String::from("iou cdf\n");
    for (x, y) in empirical_cdf(matched_ious(&pts, &pairs, &p.targets)) {
        let _ = writeln!(s, "{} {}", f(x), f(y));
    }
    Ok(s)
}

fn cmd_schedule(n_first: usize, n_last: usize, rho: f64, layers: usize) -> Res<String> {
    let s = QuerySchedule {
        n_first,
        n_last,
        rho,
        layers,
    };
    s.validate().map_err(domain)?;
    let c: Vec<String> = s.counts().iter().map(usize::to_string).collect();
    Ok(format!("{}\n", c.join(" ")))
}

fn cmd_synth(a: &SynthArgs) -> Res<String> {
    let cfg = SynthConfig {
        seed: a.seed,
        scenes: a.scenes,
        min_objects: a.min_objects,
        max_objects: a.max_objects,
        size: a.size,
        classes: a.classes,
        ..SynthConfig::default()
    };
    let scenes = generate_scenes(&cfg).map_err(CliError::Domain)?;
    fs::create_dir_all(&a.out).map_err(|e| CliError::Io(format!("{}: {e}", a.out.display())))?;
    let mut objects = 0;
    for s in &scenes {
        write_text(&a.out.join(format!("{}.txt", s.id)), &scene_to_dota(s))?;
        objects += s.objects.len();
    }
    Ok(format!("{} scenes, {} objects\n", scenes.len(), objects))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    #[serde(default)]
    train: TrainConfig,
    data: DataSource,
}

/// Training scenes: a directory of annotation files or a synthetic set.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DataSource {
    dir: Option<PathBuf>,
    synth: Option<SynthConfig>,
}

fn cmd_train(config: &Path, out: &Path, log: Option<&Path>) -> Res<String> {
    let text = read_text(config)?;
    let file: TrainFile = toml::from_str(&text).map_err(|e| CliError::Parse(format!("{}: {e}", config.display())))?;
    let cfg = file.train;
    let scenes = match (&file.data.dir, &file.data.synth) {
        (Some(dir), None) => {
            // Relative paths are taken from the config's directory.
            let dir = config.parent().map_or_else(|| dir.clone(), |p| p.join(dir));
            load_scenes(&dir, cfg.model.image_size)?
        }
        (None, Some(s)) => generate_scenes(s).map_err(CliError::Domain)?,
        _ => return Err(CliError::Parse(format!("{}: [data] needs exactly one of dir, synth", config.display()))),
    };
    let mut log_out = match log {
        Some(p) => Some(io::BufWriter::new(
            fs::File::create(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?,
        )),
        None => None,
    };
    let mut io_err = None;
    let on_step = |r: &StepRecord| {
        if let Some(w) = log_out.as_mut() {
            let line = serde_json::to_string(r).expect("log records serialize");
            if let Err(e) = writeln!(w, "{line}") {
                io_err.get_or_insert(e);
            }
        }
    };
    let outcome = train_toy(&scenes, &cfg, on_step).map_err(domain)?;
    if let Some(w) = log_out.as_mut() {
        w.flush().map_err(|e| CliError::Io(e.to_string()))?;
    }
    if let Some(e) = io_err {
        return Err(CliError::Io(format!("training log: {e}")));
    }
    save_checkpoint(&outcome.model, out).map_err(|e| CliError::Io(e.to_string()))?;
    let last = outcome.log.last().map_or_else(|| "no steps".into(), |r| format!("final loss {}", f(r.loss)));
    Ok(format!("trained {} steps on {} scenes, {last}\n", outcome.log.len(), scenes.len()))
}

fn cmd_predict(a: &PredictArgs) -> Res<String> {
    let model = load_checkpoint(&a.checkpoint).map_err(|e| match e {
        odet_core::CheckpointError::Io(e) => CliError::Io(format!("{}: {e}", a.checkpoint.display())),
        other => CliError::Parse(format!("{}: {other}", a.checkpoint.display())),
    })?;
    let cfg = model.config();
    let sched = QuerySchedule {
        n_first: cfg.queries,
        n_last: a.n_last,
        rho: a.rho,
        layers: cfg.layers,
    };
    let scenes = load_scenes(&a.scenes, cfg.image_size)?;
    let mut recs = Vec::new();
    for s in &scenes {
        if a.points {
            let prepared = odet_core::querymodel::PreparedScene::new(s, cfg);
            let out = model.forward(&prepared.memory, &sched).map_err(domain)?;
            let last = out.layers.last().expect("at least one layer");
            for (q, pts) in last.point_lists().into_iter().enumerate() {
                for (class, &z) in last.logits.row(q).iter().enumerate() {
                    recs.push(PredictionRecord {
                        scene: s.id.clone(),
                        class,
                        score: 1.0 / (1.0 + (-z).exp()),
                        shape: PredShape::Points(pts.clone()),
                    });
                }
            }
        } else {
            for d in detect(&model, s, &sched).map_err(domain)? {
                recs.push(PredictionRecord {
                    scene: d.scene,
                    class: d.class,
                    score: d.score,
                    shape: PredShape::Box(d.rect),
                });
            }
        }
    }
    let text = write_predictions(&recs);
    match &a.out {
        Some(p) => {
            write_text(p, &text)?;
            Ok(format!("{} predictions for {} scenes\n", recs.len(), scenes.len()))
        }
        None => Ok(text),
    }
}

fn cmd_eval(pred: &Path, gt: &Path, iou: f64) -> Res<String> {
    if !(0.0..=1.0).contains(&iou) {
        return Err(CliError::Domain(format!("IoU threshold {iou} outside [0, 1]")));
    }
    let recs = parse_predictions(&read_text(pred)?, &pred.display().to_string())?;
    // Evaluation only needs ids and boxes; the image size is irrelevant.
    let scenes = load_scenes(gt, 1.0)?;
    let dets: Vec<Detection> = recs.iter().filter_map(PredictionRecord::to_detection).collect();
    let gts: Vec<GroundTruth> = scenes.iter().flat_map(ground_truth).collect();
    let report = mean_ap(&dets, &gts, iou).map_err(domain)?;
    let mut s = String::from("class ap positives detections true_positives\n");
    for c in &report.per_class {
        let ap = c.ap.map_or_else(|| "n/a".into(), f);
        let _ = writeln!(s, "{} {ap} {} {} {}", class_name(c.class), c.positives, c.detections, c.true_positives);
    }
    let _ = writeln!(s, "mAP {}", f(report.map));
    Ok(s)
}

fn run(cli: Cli) -> Res<String> {
    match cli.cmd {
        Cmd::Hull { points } => cmd_hull(&points),
        Cmd::Giou { a, b } => cmd_giou(&a, &b),
        Cmd::Minrect { points } => cmd_minrect(&points),
        Cmd::Match(a) => cmd_match(&a),
        Cmd::Cdf(a) => cmd_cdf(&a),
        Cmd::Schedule {
            n_first,
            n_last,
            rho,
            layers,
        } => cmd_schedule(n_first, n_last, rho, layers),
        Cmd::Synth(a) => cmd_synth(&a),
        Cmd::Train { config, out, log } => cmd_train(&config, &out, log.as_deref()),
        Cmd::Predict(a) => cmd_predict(&a),
        Cmd::Eval { pred, gt, iou } => cmd_eval(&pred, &gt, iou),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
