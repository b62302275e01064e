//! The `pyrabox` executable.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pyrabox_core::anchors::label_pyramid;
use pyrabox_core::eval::evaluate;
use pyrabox_core::gradcheck::{gradcheck, standard_cases, EPS, TOLERANCE};
use pyrabox_core::network::Network;
use pyrabox_core::sampling::{data_anchor_sample, letterbox, sample_report, SampleRecord};
use pyrabox_core::synthetic::{synthetic_dataset, SyntheticConfig};
use pyrabox_core::train::{detect, evaluate_records, train_on_records, InferConfig, TrainState};
use pyrabox_core::BoxPx;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checks;
use crate::config::CliConfig;
use crate::dataset::load_records;
use crate::error::{AppError, AppResult};
use crate::formats::annotations::{load_annotations, write_annotations, Annotation};
use crate::formats::model::{load_model, save_model};
use crate::formats::ppm::{load_ppm, write_ppm};
use crate::formats::{
    format_anchors_jsonl, format_detections, format_eval_csv, format_histogram_csv, parse_detections, DetectionLine,
};

#[derive(Debug, Parser)]
#[command(name = "pyrabox", version, about = "Single-shot face detector with context anchors", after_help = CliConfig::defaults_table())]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write every anchor of the configured grid as JSON lines.
    Anchors {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label annotated images and report positives per level and layer.
    Label {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// JSON summary of the label statistics.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw data-anchor-sampling crops and face-size histograms.
    Sample {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        /// Crops written as images; the histogram covers all `n` draws.
        #[arg(long, default_value_t = 16)]
        max_crops: usize,
    },
    /// Train with SGD and save the parameters.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: OptDataArgs,
        /// Train on this many generated images instead of files.
        #[arg(long, conflicts_with_all = ["annotations", "images_root"])]
        synthetic: Option<usize>,
        /// Generated held-out images scored after training (with `--synthetic`).
        #[arg(long, default_value_t = 100)]
        holdout: usize,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Stop after this many steps instead of the end of the schedule.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, default_value_t = 50)]
        log_every: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect faces and write a detections file.
    Infer {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        score_threshold: f64,
        #[arg(long, default_value_t = 0.3)]
        nms_threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a detections file against annotations.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// Precision/recall CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Consecutive seeds to run from `--seed`.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Run the invariant suite and print a pass/fail table.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Full,
    Toy,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON config; keys override the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Full)]
    pub preset: Preset,
}

impl ConfigArgs {
    pub fn resolve(&self) -> AppResult<CliConfig> {
        let base = match self.preset {
            Preset::Full => CliConfig::default(),
            Preset::Toy => CliConfig::toy(),
        };
        match &self.config {
            Some(p) => CliConfig::load_over(&base, p),
            None => Ok(base),
        }
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    /// Directory the annotation paths are relative to.
    #[arg(long, default_value = ".")]
    pub images_root: PathBuf,
}

#[derive(Debug, Args)]
pub struct OptDataArgs {
    #[arg(long, required_unless_present = "synthetic")]
    pub annotations: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub images_root: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors go to standard error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            eprintln!("error: {}", msg.lines().next().unwrap_or("").trim_start_matches("error: "));
            return 1;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> AppResult<()> {
    fs::write(path, bytes).map_err(|e| AppError::io(path, e))
}

fn network(cfg: &CliConfig) -> AppResult<Network> {
    Ok(Network::new(cfg.network()?)?)
}

pub fn execute(command: Command) -> AppResult<()> {
    match command {
        Command::Anchors { config, out } => {
            let cfg = config.resolve()?.network()?;
            let grid = cfg.anchor_grid()?;
            write_file(&out, format_anchors_jsonl(&grid))?;
            println!("{} anchors over {} layers", grid.len(), grid.layers.len());
            Ok(())
        }
        Command::Label { config, data, out } => label(&config.resolve()?, &data, out.as_deref()),
        Command::Sample { config, data, n, seed, out_dir, max_crops } => {
            sample(&config.resolve()?, &data, n, seed, &out_dir, max_crops)
        }
        Command::Train { config, data, synthetic, holdout, seed, steps, log_every, out } => {
            let mut cfg = config.resolve()?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            train(&cfg, &data, synthetic, holdout, steps, log_every, &out)
        }
        Command::Infer { config, data, model, score_threshold, nms_threshold, out } => {
            let infer = InferConfig { score_threshold, nms_threshold, ..InferConfig::default() };
            run_infer(&config.resolve()?, &data, &model, &infer, &out)
        }
        Command::Eval { detections, annotations, iou, out } => run_eval(&detections, &annotations, iou, out.as_deref()),
        Command::Gradcheck { seed, seeds } => run_gradcheck(seed, seeds),
        Command::Selftest { seed } => {
            let results = checks::standard_suite(seed);
            print!("{}", checks::format_table(&results));
            let failed: Vec<&str> = results.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(AppError::Numeric(format!("selftest failed: {}", failed.join(", "))))
            }
        }
    }
}

#[derive(Serialize)]
struct LevelSummary {
    k: usize,
    positives: usize,
    positives_per_layer: Vec<usize>,
    ignored: usize,
    faces_matched: usize,
}

#[derive(Serialize)]
struct LabelSummary {
    images: usize,
    faces: usize,
    anchors_per_image: usize,
    levels: Vec<LevelSummary>,
}

fn label(cfg: &CliConfig, data: &DataArgs, out: Option<&Path>) -> AppResult<()> {
    let net_cfg = cfg.network()?;
    let grid = net_cfg.anchor_grid()?;
    let records = load_records(&data.annotations, &data.images_root)?;
    let levels = net_cfg.pyramid.levels();
    let mut summary = LabelSummary {
        images: records.len(),
        faces: 0,
        anchors_per_image: grid.len(),
        levels: (0..levels)
            .map(|k| LevelSummary { k, positives: 0, positives_per_layer: vec![0; grid.layers.len()], ignored: 0, faces_matched: 0 })
            .collect(),
    };
    for rec in &records {
        let (crop, _) = letterbox(rec, net_cfg.input_size);
        summary.faces += crop.faces.len();
        let set = label_pyramid(&grid, &crop.faces, &net_cfg.pyramid)?;
        for (s, lv) in summary.levels.iter_mut().zip(&set.levels) {
            s.positives += lv.positives();
            for (acc, c) in s.positives_per_layer.iter_mut().zip(lv.positives_per_layer(&grid)) {
                *acc += c;
            }
            s.ignored += lv.ignore.iter().filter(|&&i| i).count();
            let mut matched: Vec<usize> = lv.matched_face.iter().flatten().copied().collect();
            matched.sort_unstable();
            matched.dedup();
            s.faces_matched += matched.len();
        }
    }
    println!("level  positives  per layer");
    for s in &summary.levels {
        println!("{:<5}  {:<9}  {:?}", s.k, s.positives, s.positives_per_layer);
    }
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    match out {
        Some(p) => write_file(p, json + "\n"),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn sample(cfg: &CliConfig, data: &DataArgs, n: usize, seed: u64, out_dir: &Path, max_crops: usize) -> AppResult<()> {
    let input = cfg.network()?.input_size;
    let records: Vec<SampleRecord> =
        load_records(&data.annotations, &data.images_root)?.into_iter().filter(|r| !r.faces.is_empty()).collect();
    if records.is_empty() {
        return Err(AppError::Data(format!("{}: no image has a face to sample", data.annotations.display())));
    }
    fs::create_dir_all(out_dir).map_err(|e| AppError::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws = Vec::with_capacity(n);
    let mut written = Vec::new();
    for i in 0..n {
        let rec = &records[rng.gen_range(0..records.len())];
        let crop = data_anchor_sample(rec, &mut rng, input)?;
        draws.extend(crop.provenance);
        if i < max_crops {
            let name = format!("crop_{i:05}.ppm");
            write_ppm(&out_dir.join(&name), &crop.image)?;
            written.push(Annotation { path: name, faces: crop.faces });
        }
    }
    let report = sample_report(&draws)?;
    write_annotations(&out_dir.join("annotations.txt"), &written)?;
    write_file(&out_dir.join("histogram.csv"), format_histogram_csv(&report))?;
    println!(
        "{n} draws: mean face {:.1} -> {:.1} px, below 64 px {:.3} -> {:.3}; {} crops written",
        report.mean_pre,
        report.mean_post,
        report.small_mass_pre,
        report.small_mass_post,
        written.len()
    );
    Ok(())
}

fn train(
    cfg: &CliConfig,
    data: &OptDataArgs,
    synthetic: Option<usize>,
    holdout: usize,
    steps: Option<u64>,
    log_every: u64,
    out: &Path,
) -> AppResult<()> {
    let net = network(cfg)?;
    let tcfg = cfg.train()?;
    let grid = net.config.anchor_grid()?;
    let syn = SyntheticConfig { image_size: net.config.input_size, ..SyntheticConfig::default() };
    let (records, held_out) = match (synthetic, &data.annotations) {
        (Some(count), _) => (synthetic_dataset(tcfg.seed, count, &syn), synthetic_dataset(tcfg.seed ^ 0xA11CE, holdout, &syn)),
        (None, Some(ann)) => (load_records(ann, &data.images_root)?, Vec::new()),
        (None, None) => return Err(AppError::Usage("train needs --annotations or --synthetic".into())),
    };
    let total = steps.unwrap_or_else(|| tcfg.total_steps());
    let mut state = TrainState::new(&net, tcfg.seed);
    let start = Instant::now();
    let mut stdout = std::io::stdout();
    for _ in 0..total {
        let r = train_on_records(&net, &grid, &mut state, &tcfg, &records)?;
        if log_every > 0 && (r.step + 1) % log_every == 0 {
            let parts: Vec<String> = r.levels.iter().map(|l| format!("k{} {:.4}/{:.4}", l.k, l.cls_loss, l.reg_loss)).collect();
            let _ = writeln!(stdout, "step {:>6}  lr {:.1e}  loss {:.4}  [{}]", r.step + 1, r.lr, r.loss, parts.join("  "));
        }
    }
    save_model(out, &state.params)?;
    println!("trained {total} steps in {:.1}s, saved {}", start.elapsed().as_secs_f64(), out.display());
    if !held_out.is_empty() {
        let ev = evaluate_records(&net, &grid, &state.params, &held_out, &InferConfig::default(), 0.5)?;
        println!(
            "held-out AP@0.5 {:.4} (small {:.4}, medium {:.4}, large {:.4}) on {} images",
            ev.ap,
            ev.ap_small,
            ev.ap_medium,
            ev.ap_large,
            held_out.len()
        );
    }
    Ok(())
}

fn run_infer(cfg: &CliConfig, data: &DataArgs, model: &Path, infer: &InferConfig, out: &Path) -> AppResult<()> {
    let net = network(cfg)?;
    let grid = net.config.anchor_grid()?;
    let params = load_model(model)?;
    net.check_params(&params).map_err(|e| AppError::Data(format!("{}: {e}", model.display())))?;
    let mut lines = Vec::new();
    for a in load_annotations(&data.annotations)? {
        let image = load_ppm(&data.images_root.join(&a.path))?;
        for det in detect(&net, &grid, &params, &image, infer)? {
            lines.push(DetectionLine { path: a.path.clone(), det });
        }
    }
    write_file(out, format_detections(&lines))?;
    println!("{} detections", lines.len());
    Ok(())
}

fn run_eval(detections: &Path, annotations: &Path, iou: f64, out: Option<&Path>) -> AppResult<()> {
    let text = fs::read_to_string(detections).map_err(|e| AppError::io(detections, e))?;
    let lines = parse_detections(&text).map_err(|e| AppError::format(detections, e))?;
    let blocks = load_annotations(annotations)?;
    let gts: Vec<Vec<BoxPx>> = blocks.iter().map(|b| b.faces.clone()).collect();
    let mut dets = vec![Vec::new(); blocks.len()];
    for l in lines {
        let i = blocks
            .iter()
            .position(|b| b.path == l.path)
            .ok_or_else(|| AppError::Data(format!("{}: {} is not in the annotations", detections.display(), l.path)))?;
        dets[i].push(l.det);
    }
    let report = evaluate(&dets, &gts, iou)?;
    if let Some(p) = out {
        write_file(p, format_eval_csv(&report))?;
    }
    println!(
        "AP@{iou} {:.4} (small {:.4}, medium {:.4}, large {:.4}); {} detections, {} faces",
        report.ap, report.ap_small, report.ap_medium, report.ap_large, report.num_det, report.num_gt
    );
    Ok(())
}

fn run_gradcheck(seed: u64, seeds: u64) -> AppResult<()> {
    let mut failed = Vec::new();
    println!("{:<20} {:>6} {:>12}", "case", "seed", "max rel err");
    for s in seed..seed + seeds.max(1) {
        for case in standard_cases(s)? {
            let r = gradcheck(&case, EPS)?;
            let flag = if r.passed(TOLERANCE) { "" } else { "  FAIL" };
            println!("{:<20} {:>6} {:>12.3e}{flag}", r.case, s, r.max_rel_err());
            if !r.passed(TOLERANCE) {
                failed.push(format!("{} (seed {s})", r.case));
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(AppError::Numeric(format!("gradient check above {TOLERANCE:e}: {}", failed.join(", "))))
    }
}
