//! `crowdloc` command-line tool.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crowdloc::calibration::CalibrationOptions;
use crowdloc::cropping::CropParams;
use crowdloc::formats::{
    digest_bytes, read_json, write_json, AnnotationFile, Provenance, ReconstructionFile, SceneFile, TruthFile,
};
use crowdloc::merging::MergeConfig;
use crowdloc::metrics::{EvaluationOptions, EvaluationReport};
use crowdloc::pipeline::{
    calibrate_stage, crop_stage, emit_ablation_curves, evaluate_stage, localize_stage, merge_stage, resolve_workers,
    run_pipeline, AblationRow, AblationSpec, CropConfig, CropMode, SceneConfig, WORKERS_ENV,
};
use crowdloc::simulate::{generate, render_annotations, RenderNoise, SceneSpec};
use crowdloc::{Error, Result};

#[derive(Parser)]
#[command(name = "crowdloc", version, about = "3D crowd localization from 2D annotations of one large-scene image")]
struct Cli {
    /// Worker threads for per-person work; results do not depend on it.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,

    /// Log intermediate parameters to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene: annotations plus ground truth.
    Simulate(SimulateArgs),
    /// Compute the patch grid from crop parameters.
    Crop(CropArgs),
    /// Estimate focal length and ground plane from standing people.
    Calibrate(CalibrateArgs),
    /// Lift torso and HVIP pixels to 3D for every patch detection.
    Localize(LocalizeArgs),
    /// Remove duplicate detections across overlapping patches.
    Merge(MergeArgs),
    /// Score a reconstruction against ground truth.
    Evaluate(EvaluateArgs),
    /// Run crop, calibrate, localize, merge (and evaluate) in one go.
    Pipeline(PipelineArgs),
    /// Calibration error versus number of people in view.
    Ablation(AblationArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scene parameters (JSON); defaults are used when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Override the seed from the scene parameters.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_annotations: PathBuf,
    #[arg(long)]
    out_truth: PathBuf,
}

#[derive(Args)]
struct CropArgs {
    /// Crop parameters, or a scene config whose `crop.params` holds them.
    #[arg(long, required_unless_present = "annotations", conflicts_with = "annotations")]
    params: Option<PathBuf>,
    /// Estimate the parameters from the annotated boxes instead.
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Constant block size instead of the adaptive layout.
    #[arg(long, value_name = "N")]
    uniform: Option<u32>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    annotations: PathBuf,
    /// Ankle-to-shoulder-midpoint length of a standing person, meters.
    #[arg(long, default_value_t = CalibrationOptions::default().height_prior)]
    height_prior: f64,
    /// Keypoint confidence threshold for standing-person selection.
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    /// Scene config providing further calibration options.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LocalizeArgs {
    /// Calibrated scene written by `calibrate`.
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    /// Patch grid written by `crop`.
    #[arg(long)]
    patches: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = MergeConfig::default().match_radius_factor)]
    radius_factor: f64,
    /// Match on 3D torso positions instead of pixels.
    #[arg(long)]
    use_3d: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Reconstruction to score.
    #[arg(long)]
    est: PathBuf,
    /// Truth file written by `simulate`.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Matching gate as a fraction of the true torso-to-HVIP length.
    #[arg(long, default_value_t = EvaluationOptions::default().gate_factor)]
    gate_factor: f64,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    annotations: PathBuf,
    /// Scene config (JSON); defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ground truth; adds report.json when given.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Directory receiving patches, scene, reconstruction, report and log files.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AblationArgs {
    /// Sweep parameters (JSON); defaults are used when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Override the number of seeds per count.
    #[arg(long)]
    seeds: Option<u64>,
    /// Output table; `.csv` gives CSV, anything else JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct Stamped<'a, T> {
    provenance: Provenance,
    #[serde(flatten)]
    body: &'a T,
}

/// Digest of the raw bytes of every input file plus the stage options.
fn inputs_digest(paths: &[&Path], options: &impl Serialize) -> Result<String> {
    let mut bytes = serde_json::to_vec(options).expect("serializable");
    for path in paths {
        let content = std::fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        bytes.extend(digest_bytes(&content).into_bytes());
    }
    Ok(digest_bytes(&bytes))
}

fn read_annotations(path: &Path) -> Result<AnnotationFile> {
    let ann: AnnotationFile = read_json(path)?;
    ann.validate()?;
    Ok(ann)
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let mut spec: SceneSpec = match &args.spec {
        Some(path) => read_json(path)?,
        None => SceneSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let scene = generate(&spec)?;
    let ann = render_annotations(&scene, &RenderNoise::from_spec(&spec))?;
    write_json(&args.out_annotations, &ann)?;
    write_json(&args.out_truth, &scene.truth()?)?;
    println!("simulated {} people (seed {}) → {}", ann.people.len(), spec.seed, args.out_annotations.display());
    Ok(())
}

fn load_crop_params(path: &Path) -> Result<CropParams> {
    let value: serde_json::Value = read_json(path)?;
    let direct = serde_json::from_value::<CropParams>(value.clone());
    match direct {
        Ok(p) => Ok(p),
        Err(_) => {
            let config: SceneConfig = serde_json::from_value(value)
                .map_err(|source| Error::Parse { path: path.to_path_buf(), source })?;
            config
                .crop
                .params
                .ok_or_else(|| Error::Config(format!("{} holds neither crop parameters nor crop.params", path.display())))
        }
    }
}

fn crop(args: &CropArgs) -> Result<()> {
    let (config, ann, input) = match (&args.params, &args.annotations) {
        (Some(path), _) => {
            let params = load_crop_params(path)?;
            let config = CropConfig { mode: CropMode::Manual, params: Some(params), uniform_block: args.uniform };
            let ann = AnnotationFile {
                schema_version: crowdloc::formats::SCHEMA_VERSION,
                image_width: params.image_width,
                image_height: params.image_height,
                joint_names: vec![],
                people: vec![],
                provenance: None,
            };
            (config, ann, path)
        }
        (None, Some(path)) => {
            let config = CropConfig { mode: CropMode::Auto, params: None, uniform_block: args.uniform };
            (config, read_annotations(path)?, path)
        }
        (None, None) => return Err(Error::Config("either --params or --annotations is required".into())),
    };
    let digest = inputs_digest(&[input], &config)?;
    let patches = crop_stage(&ann, &config, &digest)?;
    write_json(&args.out, &patches)?;
    println!("{} patches → {}", patches.patches.len(), args.out.display());
    Ok(())
}

fn calibrate(args: &CalibrateArgs) -> Result<()> {
    let mut options = match &args.config {
        Some(path) => read_json::<SceneConfig>(path)?.calibration,
        None => CalibrationOptions::default(),
    };
    options.height_prior = args.height_prior;
    let ann = read_annotations(&args.annotations)?;
    let digest = inputs_digest(&[&args.annotations], &(&options, args.tau))?;
    let scene = calibrate_stage(&ann, &options, args.tau, &digest)?;
    write_json(&args.out, &scene)?;
    println!(
        "f = {:.2} px, N = [{:.6}, {:.6}, {:.6}], D = {:.4} m, residual {:.3e}, {} of {} observations used",
        scene.camera.f,
        scene.ground.normal().x,
        scene.ground.normal().y,
        scene.ground.normal().z,
        scene.ground.offset(),
        scene.residual,
        scene.observations_used,
        scene.observations_selected
    );
    for w in &scene.warnings {
        eprintln!("warning: {w:?}");
    }
    Ok(())
}

fn localize(args: &LocalizeArgs, workers: usize) -> Result<()> {
    let scene: SceneFile = read_json(&args.scene)?;
    let ann = read_annotations(&args.annotations)?;
    let patches = read_json(&args.patches)?;
    let digest = inputs_digest(&[&args.scene, &args.annotations, &args.patches], &())?;
    let (reconstruction, failed) = localize_stage(&scene, &ann, &patches, workers, &digest)?;
    write_json(&args.out, &reconstruction)?;
    println!("{} detections, {failed} people not located → {}", reconstruction.people.len(), args.out.display());
    Ok(())
}

fn merge(args: &MergeArgs) -> Result<()> {
    let config = MergeConfig { match_radius_factor: args.radius_factor, use_3d: args.use_3d };
    config.validate()?;
    let input: ReconstructionFile = read_json(&args.input)?;
    let digest = inputs_digest(&[&args.input], &config)?;
    let merged = merge_stage(&input, &config, &digest)?;
    write_json(&args.out, &merged)?;
    println!("{} → {} people → {}", input.people.len(), merged.people.len(), args.out.display());
    Ok(())
}

fn report_table(report: &EvaluationReport) -> String {
    let mut lines = vec![
        format!("{:<10} {:>12} {:>8} {:>8}", "metric", "value", "pairs", "skipped"),
        format!("{:-<41}", ""),
    ];
    for (name, score, scale) in [("PPDS", report.ppds, 100.0), ("PA-PPDS", report.pa_ppds, 100.0), ("PCOD", report.pcod, 1.0)] {
        match score {
            Some(s) => lines.push(format!("{name:<10} {:>12.4} {:>8} {:>8}", s.value * scale, s.pairs, s.skipped)),
            None => lines.push(format!("{name:<10} {:>12} {:>8} {:>8}", "undefined", "-", "-")),
        }
    }
    match report.oks {
        Some(v) => lines.push(format!("{:<10} {:>12.4} {:>8} {:>8}", "OKS", v, report.oks_people, "-")),
        None => lines.push(format!("{:<10} {:>12} {:>8} {:>8}", "OKS", "undefined", "-", "-")),
    }
    lines.push(format!(
        "matched {} of {} true people; {} estimates unmatched (percent scale for PPDS, PA-PPDS, PCOD)",
        report.matched,
        report.truth,
        report.unmatched_estimates.len()
    ));
    lines.join("\n")
}

fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let options = EvaluationOptions { gate_factor: args.gate_factor };
    let est: ReconstructionFile = read_json(&args.est)?;
    let truth: TruthFile = read_json(&args.gt)?;
    let digest = inputs_digest(&[&args.est, &args.gt], &options)?;
    let report = evaluate_stage(&est, &truth, &options);
    write_json(&args.out, &Stamped { provenance: Provenance::new(digest), body: &report })?;
    println!("{}", report_table(&report));
    Ok(())
}

fn pipeline(args: &PipelineArgs, workers: usize) -> Result<()> {
    let config: SceneConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => SceneConfig::default(),
    };
    let ann: AnnotationFile = read_json(&args.annotations)?;
    let truth: Option<TruthFile> = args.truth.as_deref().map(read_json).transpose()?;
    let out = run_pipeline(&config, &ann, truth.as_ref(), workers)?;
    let dir = &args.out_dir;
    write_json(&dir.join("patches.json"), &out.patches)?;
    write_json(&dir.join("scene.json"), &out.scene)?;
    write_json(&dir.join("reconstruction.json"), &out.reconstruction)?;
    let provenance = out.reconstruction.provenance.clone().expect("pipeline stamps provenance");
    write_json(&dir.join("log.json"), &Stamped { provenance: provenance.clone(), body: &out.log })?;
    println!("{} people → {}", out.reconstruction.people.len(), dir.join("reconstruction.json").display());
    if let Some(report) = &out.report {
        write_json(&dir.join("report.json"), &Stamped { provenance, body: report })?;
        println!("{}", report_table(report));
    }
    Ok(())
}

#[derive(Serialize)]
struct AblationTable<'a> {
    spec: &'a AblationSpec,
    rows: &'a [AblationRow],
}

fn write_ablation_csv(path: &Path, provenance: &Provenance, rows: &[AblationRow]) -> Result<()> {
    let io = |source: std::io::Error| Error::Io { path: path.to_path_buf(), source };
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(["count", "normal_cosine_distance", "focal_rmse_px", "runs", "failures"])
        .map_err(|e| io(e.into()))?;
    let cell = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.9e}"));
    for r in rows {
        writer
            .write_record([
                r.count.to_string(),
                cell(r.normal_cosine_distance),
                cell(r.focal_rmse),
                r.runs.to_string(),
                r.failures.to_string(),
            ])
            .map_err(|e| io(e.into()))?;
    }
    let body = writer.into_inner().map_err(|e| io(e.into_error()))?;
    let mut text = format!("# {} {} config_digest={}\n", provenance.tool, provenance.version, provenance.config_digest);
    text.push_str(&String::from_utf8(body).expect("utf-8 csv"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    std::fs::write(path, text).map_err(io)
}

fn ablation(args: &AblationArgs, workers: usize) -> Result<()> {
    let mut spec: AblationSpec = match &args.spec {
        Some(path) => read_json(path)?,
        None => AblationSpec::default(),
    };
    if let Some(seeds) = args.seeds {
        spec.seeds = seeds;
    }
    let rows = emit_ablation_curves(&spec, workers)?;
    let provenance = Provenance::new(crowdloc::formats::digest_of(&spec));
    if args.out.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        write_ablation_csv(&args.out, &provenance, &rows)?;
    } else {
        write_json(&args.out, &Stamped { provenance, body: &AblationTable { spec: &spec, rows: &rows } })?;
    }
    println!("{:>5} {:>14} {:>12}", "count", "1 - cos", "focal RMSE");
    for r in &rows {
        let cos = r.normal_cosine_distance.map_or("-".into(), |v| format!("{v:.3e}"));
        let f = r.focal_rmse.map_or("-".into(), |v| format!("{v:.1}"));
        println!("{:>5} {cos:>14} {f:>12}", r.count);
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let workers = || resolve_workers(cli.workers);
    match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Crop(a) => crop(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Localize(a) => localize(a, workers()?),
        Command::Merge(a) => merge(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Pipeline(a) => pipeline(a, workers()?),
        Command::Ablation(a) => ablation(a, workers()?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // usage errors share the configuration exit code
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Config(ref m) if m.contains(WORKERS_ENV)) {
                eprintln!("hint: unset {WORKERS_ENV} or pass --workers");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
