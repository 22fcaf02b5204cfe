//! `speedtrack` command line: generate synthetic scenarios, train the noise
//! network, run the tracker, evaluate, and reproduce the speed diagnostics.
//!
//! Every value-style option falls back through config file, `SPEEDTRACK_*`
//! environment variables, and the library defaults (flag > env > file >
//! default). Each run writes `run_manifest.json` next to its outputs. Exit
//! codes: 0 success, 1 runtime failure, 2 usage error.

mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use config::ConfigBag;
use manifest::RunManifest;
use speedtrack::formats::{
    build_eval_frames, perturb_speed, read_bundle, read_results_jsonl, write_bundle,
    write_results, PerturbMode, ResultFormat, ResultRow, SequenceBundle,
};
use speedtrack::metrics::{
    buckets_around, default_alphas, evaluate, merge_bucket_stats, speed_bucket_analysis,
    BucketStats, EvalReport,
};
use speedtrack::msnet::{MsNetConfig, MsNetParams};
use speedtrack::synth::generate;
use speedtrack::track::{run_sequence, FixedNoise, MsNetNoise, SpeedSource, TrackerConfig};
use speedtrack::train::train;

#[derive(Parser)]
#[command(name = "speedtrack", version, about = "Speed-adaptive Kalman multi-object tracking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct CommonOpts {
    /// Key-value config file (key = value lines, # comments)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic ego-motion scenario bundles
    Synth(SynthCmd),
    /// Train the noise network on a manifest of sequence bundles
    Train(TrainCmd),
    /// Track every bundle with the learned filter or the fixed baseline
    Track(TrackCmd),
    /// Evaluate tracking results against bundle ground truth
    Eval(EvalCmd),
    /// Per-speed-bucket matched-IoU and ID-switch diagnostics
    SpeedAnalysis(SpeedAnalysisCmd),
    /// Write a copy of a bundle with Gaussian-perturbed ego speeds
    PerturbSpeed(PerturbCmd),
}

#[derive(Args)]
struct SynthCmd {
    #[command(flatten)]
    common: CommonOpts,
    /// Output directory (one subdirectory per scenario)
    #[arg(long)]
    out: PathBuf,
    /// Number of scenarios; seeds run seed..seed+count [default: 1]
    #[arg(long)]
    count: Option<usize>,
    /// Base seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Scenario id prefix [default: synth]
    #[arg(long)]
    id_prefix: Option<String>,
    /// Constant ego speed in km/h [default: 0]
    #[arg(long, conflicts_with = "profile")]
    speed: Option<f64>,
    /// Piecewise profile "kmh x frames" segments, e.g. "0x15,20x15,60x30"
    #[arg(long)]
    profile: Option<String>,
    /// Box dimensionality: 2 or 3 [default: 2]
    #[arg(long)]
    dims: Option<usize>,
    /// Frames per scenario [default: 60]
    #[arg(long)]
    frames: Option<usize>,
    /// Objects per scenario [default: 8]
    #[arg(long)]
    objects: Option<usize>,
}

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    common: CommonOpts,
    /// Text file listing bundle directories (one per line)
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory (checkpoint.msn, metrics.jsonl, train_report.json)
    #[arg(long)]
    out: PathBuf,
    /// RNG seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Epochs [default: 100]
    #[arg(long)]
    epochs: Option<usize>,
    /// Initial learning rate [default: 0.005]
    #[arg(long)]
    lr: Option<f64>,
    /// Sequences per optimizer step [default: 4]
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct TrackCmd {
    #[command(flatten)]
    common: CommonOpts,
    /// Bundle directory (repeatable)
    #[arg(long = "bundle")]
    bundles: Vec<PathBuf>,
    /// Directory whose immediate subdirectories are bundles
    #[arg(long)]
    bundles_root: Option<PathBuf>,
    /// Network checkpoint (required unless --fixed-kf)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Run the constant-noise baseline instead of the learned filter
    #[arg(long)]
    fixed_kf: bool,
    /// Output directory (<sequence id>.jsonl per bundle)
    #[arg(long)]
    out: PathBuf,
    /// Also emit KITTI-format text rows
    #[arg(long)]
    kitti: bool,
    /// Worker threads for per-sequence parallelism [default: 1]
    #[arg(long)]
    jobs: Option<usize>,
    /// Hits needed to confirm a track [default: 2]
    #[arg(long)]
    confirm_hits: Option<u32>,
}

#[derive(Args)]
struct EvalCmd {
    #[command(flatten)]
    common: CommonOpts,
    /// Directory of <sequence id>.jsonl result files
    #[arg(long)]
    results: PathBuf,
    /// Directory whose immediate subdirectories are bundles
    #[arg(long)]
    bundles_root: PathBuf,
    /// Output directory (report.json, report.txt)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SpeedAnalysisCmd {
    #[command(flatten)]
    common: CommonOpts,
    /// Directory of <sequence id>.jsonl result files
    #[arg(long)]
    results: PathBuf,
    /// Directory whose immediate subdirectories are bundles
    #[arg(long)]
    bundles_root: PathBuf,
    /// Output directory (speed_buckets.csv)
    #[arg(long)]
    out: PathBuf,
    /// Bucket centers in km/h [default: 0,20,40,60]
    #[arg(long)]
    centers: Option<String>,
    /// Bucket half-width in km/h [default: 5]
    #[arg(long)]
    halfwidth: Option<f64>,
}

#[derive(Args)]
struct PerturbCmd {
    #[command(flatten)]
    common: CommonOpts,
    /// Source bundle directory
    #[arg(long)]
    bundle: PathBuf,
    /// Destination bundle directory
    #[arg(long)]
    out: PathBuf,
    /// Relative noise level (the robustness protocol uses 0.05/0.10/0.20)
    #[arg(long, conflicts_with = "pure")]
    sigma: Option<f64>,
    /// Pure-noise mode: v * N(0,1)
    #[arg(long)]
    pure: bool,
    /// RNG seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(cmd) => cmd_synth(cmd),
        Command::Train(cmd) => cmd_train(cmd),
        Command::Track(cmd) => cmd_track(cmd),
        Command::Eval(cmd) => cmd_eval(cmd),
        Command::SpeedAnalysis(cmd) => cmd_speed_analysis(cmd),
        Command::PerturbSpeed(cmd) => cmd_perturb(cmd),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn resolve_bag(common: &CommonOpts) -> Result<ConfigBag> {
    let mut bag = ConfigBag::defaults();
    if let Some(path) = &common.config {
        bag.load_file(path)?;
    }
    bag.apply_env();
    Ok(bag)
}

fn parse_profile(spec: &str) -> Result<Vec<f64>> {
    let mut profile = Vec::new();
    for seg in spec.split(',') {
        let (v, n) = seg
            .trim()
            .split_once('x')
            .with_context(|| format!("profile segment '{seg}' is not 'kmh x frames'"))?;
        let v: f64 = v.trim().parse().with_context(|| format!("bad speed in '{seg}'"))?;
        let n: usize = n.trim().parse().with_context(|| format!("bad frame count in '{seg}'"))?;
        profile.extend(std::iter::repeat(v).take(n));
    }
    if profile.is_empty() {
        bail!("profile '{spec}' is empty");
    }
    Ok(profile)
}

fn cmd_synth(cmd: SynthCmd) -> Result<()> {
    let mut bag = resolve_bag(&cmd.common)?;
    bag.set_flag("frames", &cmd.frames);
    bag.set_flag("objects", &cmd.objects);
    let mut manifest = RunManifest::new("synth").seed(cmd.seed.unwrap_or(0));
    let count = cmd.count.unwrap_or(1);
    let seed0 = cmd.seed.unwrap_or(0);
    let dims = cmd.dims.unwrap_or(2);
    let prefix = cmd.id_prefix.clone().unwrap_or_else(|| "synth".into());

    for i in 0..count {
        let seed = seed0 + i as u64;
        let id = format!("{prefix}_{seed:04}");
        let mut scen = bag.scenario_config(id.clone(), seed, dims)?;
        scen.speed_profile = match (&cmd.profile, cmd.speed) {
            (Some(spec), _) => {
                let p = parse_profile(spec)?;
                scen.frames = p.len();
                p
            }
            (None, v) => vec![v.unwrap_or(0.0); scen.frames],
        };
        let bundle = generate(&scen)?;
        let dir = cmd.out.join(&id);
        write_bundle(&bundle, &dir)?;
        manifest.output(&dir);
    }
    manifest.write(&cmd.out, bag.snapshot())?;
    Ok(())
}

fn read_training_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading training manifest {}", path.display()))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut dirs = Vec::new();
    for raw in text.lines() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let p = PathBuf::from(line);
        dirs.push(if p.is_absolute() { p } else { base.join(p) });
    }
    if dirs.is_empty() {
        bail!("training manifest {} lists no sequences", path.display());
    }
    Ok(dirs)
}

fn cmd_train(cmd: TrainCmd) -> Result<()> {
    let mut bag = resolve_bag(&cmd.common)?;
    bag.set_flag("total_epochs", &cmd.epochs);
    bag.set_flag("lr0", &cmd.lr);
    bag.set_flag("batch_size", &cmd.batch_size);
    let seed = cmd.seed.unwrap_or(0);
    let mut manifest = RunManifest::new("train").seed(seed);
    manifest.input(&cmd.manifest);

    let dirs = read_training_manifest(&cmd.manifest)?;
    let mut bundles = Vec::new();
    for dir in &dirs {
        bundles.push(read_bundle(dir).with_context(|| format!("loading bundle {}", dir.display()))?);
    }
    let dims = bundles[0].dims;
    if bundles.iter().any(|b| b.dims != dims) {
        bail!("training bundles mix 2D and 3D sequences");
    }
    let net_cfg = if dims == 3 { MsNetConfig::default_3d() } else { MsNetConfig::default_2d() };
    let tcfg = bag.train_config(seed)?;
    let out = train(&bundles, &net_cfg, &tcfg).map_err(anyhow::Error::from)?;

    std::fs::create_dir_all(&cmd.out)?;
    let ckpt = cmd.out.join("checkpoint.msn");
    out.params.save(&ckpt)?;
    manifest.output(&ckpt);

    let metrics_path = cmd.out.join("metrics.jsonl");
    let mut lines = String::new();
    for row in &out.curve {
        lines.push_str(&serde_json::to_string(row)?);
        lines.push('\n');
    }
    std::fs::write(&metrics_path, lines)?;
    manifest.output(&metrics_path);

    let report = serde_json::json!({
        "sequences": bundles.iter().map(|b| b.id.clone()).collect::<Vec<_>>(),
        "epochs": out.curve.len(),
        "final_loss": out.curve.last().map(|m| m.loss),
        "final_alpha": out.weights.alpha(),
        "final_beta": out.weights.beta(),
        "param_count": out.params.len(),
    });
    let report_path = cmd.out.join("train_report.json");
    let mut bytes = serde_json::to_vec_pretty(&report)?;
    bytes.push(b'\n');
    std::fs::write(&report_path, bytes)?;
    manifest.output(&report_path);

    manifest.write(&cmd.out, bag.snapshot())?;
    Ok(())
}

/// Bundles sorted by id from explicit dirs plus a root of subdirectories.
fn collect_bundles(explicit: &[PathBuf], root: &Option<PathBuf>) -> Result<Vec<SequenceBundle>> {
    let mut dirs: Vec<PathBuf> = explicit.to_vec();
    if let Some(root) = root {
        let mut subdirs: Vec<PathBuf> = std::fs::read_dir(root)
            .with_context(|| format!("reading {}", root.display()))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.join("meta.json").is_file())
            .collect();
        subdirs.sort();
        dirs.extend(subdirs);
    }
    if dirs.is_empty() {
        bail!("no bundles given (use --bundle or --bundles-root)");
    }
    let mut bundles = Vec::new();
    for dir in &dirs {
        bundles.push(read_bundle(dir).with_context(|| format!("loading bundle {}", dir.display()))?);
    }
    bundles.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(bundles)
}

enum Noise {
    Fixed(FixedNoise),
    Learned(MsNetParams),
}

fn track_one(bundle: &SequenceBundle, cfg: &TrackerConfig, noise: &Noise) -> Result<Vec<ResultRow>> {
    let rows = match noise {
        Noise::Fixed(fx) => run_sequence(bundle, cfg, fx.clone(), SpeedSource::File)?,
        Noise::Learned(params) => {
            let provider = MsNetNoise::new(params.clone(), bundle.dims)?;
            run_sequence(bundle, cfg, provider, SpeedSource::File)?
        }
    };
    Ok(rows)
}

fn cmd_track(cmd: TrackCmd) -> Result<()> {
    let mut bag = resolve_bag(&cmd.common)?;
    bag.set_flag("confirm_hits", &cmd.confirm_hits);
    let mut manifest = RunManifest::new("track");

    let bundles = collect_bundles(&cmd.bundles, &cmd.bundles_root)?;
    let dims = bundles[0].dims;
    if bundles.iter().any(|b| b.dims != dims) {
        bail!("bundles mix 2D and 3D sequences");
    }
    let cfg = bag.tracker_config(dims)?;
    let noise = if cmd.fixed_kf {
        Noise::Fixed(bag.fixed_noise()?)
    } else {
        let ckpt = cmd
            .checkpoint
            .as_ref()
            .context("--checkpoint is required unless --fixed-kf is set")?;
        manifest.input(ckpt);
        Noise::Learned(MsNetParams::load(ckpt)?)
    };

    let jobs = cmd.jobs.unwrap_or(1).max(1);
    let results: Vec<Result<Vec<ResultRow>>> = if jobs == 1 {
        bundles.iter().map(|b| track_one(b, &cfg, &noise)).collect()
    } else {
        let slots: Vec<Mutex<Option<Result<Vec<ResultRow>>>>> =
            bundles.iter().map(|_| Mutex::new(None)).collect();
        let next = std::sync::atomic::AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..jobs.min(bundles.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= bundles.len() {
                        break;
                    }
                    let out = track_one(&bundles[i], &cfg, &noise);
                    *slots[i].lock().unwrap() = Some(out);
                });
            }
        });
        slots.into_iter().map(|s| s.into_inner().unwrap().unwrap()).collect()
    };

    std::fs::create_dir_all(&cmd.out)?;
    for (bundle, rows) in bundles.iter().zip(results) {
        let rows = rows.with_context(|| format!("tracking {}", bundle.id))?;
        let path = cmd.out.join(format!("{}.jsonl", bundle.id));
        write_results(&rows, &path, ResultFormat::Jsonl)?;
        manifest.output(&path);
        if cmd.kitti {
            let path = cmd.out.join(format!("{}.txt", bundle.id));
            write_results(&rows, &path, ResultFormat::Kitti)?;
            manifest.output(&path);
        }
    }
    manifest.write(&cmd.out, bag.snapshot())?;
    Ok(())
}

fn load_results_for(bundles: &[SequenceBundle], results_dir: &Path) -> Result<Vec<Vec<ResultRow>>> {
    bundles
        .iter()
        .map(|b| {
            let path = results_dir.join(format!("{}.jsonl", b.id));
            read_results_jsonl(&path)
                .with_context(|| format!("reading results {}", path.display()))
                .map_err(anyhow::Error::from)
        })
        .collect()
}

fn report_row(id: &str, r: &EvalReport) -> String {
    format!(
        "{:<16}{:>8.3}{:>8.3}{:>8.3}{:>8.3}{:>8.3}{:>8.3}{:>8.3}{:>8.3}{:>8.3}{:>7}\n",
        id, r.hota, r.deta, r.assa, r.det_re, r.det_pr, r.ass_re, r.ass_pr, r.loca, r.mota, r.idsw
    )
}

fn render_report_table(rows: &[(String, EvalReport)], mean: &EvalReport) -> String {
    let mut out = format!(
        "{:<16}{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}{:>7}\n",
        "sequence", "HOTA", "DetA", "AssA", "DetRe", "DetPr", "AssRe", "AssPr", "LocA", "MOTA", "IDSW"
    );
    for (id, r) in rows {
        out.push_str(&report_row(id, r));
    }
    out.push_str(&report_row("mean", mean));
    out
}

fn mean_report(reports: &[(String, EvalReport)]) -> EvalReport {
    let n = reports.len().max(1) as f64;
    let mut mean = EvalReport {
        hota: 0.0,
        deta: 0.0,
        assa: 0.0,
        det_re: 0.0,
        det_pr: 0.0,
        ass_re: 0.0,
        ass_pr: 0.0,
        loca: 0.0,
        mota: 0.0,
        idsw: 0,
        vacuous: false,
    };
    for (_, r) in reports {
        mean.hota += r.hota / n;
        mean.deta += r.deta / n;
        mean.assa += r.assa / n;
        mean.det_re += r.det_re / n;
        mean.det_pr += r.det_pr / n;
        mean.ass_re += r.ass_re / n;
        mean.ass_pr += r.ass_pr / n;
        mean.loca += r.loca / n;
        mean.mota += r.mota / n;
        mean.idsw += r.idsw;
    }
    mean
}

fn cmd_eval(cmd: EvalCmd) -> Result<()> {
    let bag = resolve_bag(&cmd.common)?;
    let mut manifest = RunManifest::new("eval");
    manifest.input(&cmd.results);
    let bundles = collect_bundles(&[], &Some(cmd.bundles_root.clone()))?;
    let per_seq_rows = load_results_for(&bundles, &cmd.results)?;

    let mut reports = Vec::new();
    for (bundle, rows) in bundles.iter().zip(&per_seq_rows) {
        let frames = build_eval_frames(bundle, rows)?;
        let report = evaluate(&frames, &default_alphas())?;
        reports.push((bundle.id.clone(), report));
    }
    let mean = mean_report(&reports);

    std::fs::create_dir_all(&cmd.out)?;
    let json_path = cmd.out.join("report.json");
    let doc = serde_json::json!({
        "sequences": reports
            .iter()
            .map(|(id, r)| (id.clone(), serde_json::to_value(r).unwrap()))
            .collect::<std::collections::BTreeMap<_, _>>(),
        "mean": &mean,
    });
    let mut bytes = serde_json::to_vec_pretty(&doc)?;
    bytes.push(b'\n');
    std::fs::write(&json_path, bytes)?;
    manifest.output(&json_path);

    let txt_path = cmd.out.join("report.txt");
    std::fs::write(&txt_path, render_report_table(&reports, &mean))?;
    manifest.output(&txt_path);

    manifest.write(&cmd.out, bag.snapshot())?;
    Ok(())
}

fn bucket_csv(stats: &[BucketStats]) -> String {
    let mut out = String::from("bucket_lo,bucket_hi,frames,matches,mean_iou,idsw,idsw_rate\n");
    for s in stats {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.bucket.lo,
            s.bucket.hi,
            s.frames,
            s.matches,
            s.mean_iou.map(|v| format!("{v:.6}")).unwrap_or_default(),
            s.idsw,
            s.idsw_rate.map(|v| format!("{v:.6}")).unwrap_or_default(),
        ));
    }
    out
}

fn cmd_speed_analysis(cmd: SpeedAnalysisCmd) -> Result<()> {
    let bag = resolve_bag(&cmd.common)?;
    let mut manifest = RunManifest::new("speed-analysis");
    manifest.input(&cmd.results);
    let centers: Vec<f64> = match &cmd.centers {
        Some(spec) => spec
            .split(',')
            .map(|s| s.trim().parse::<f64>().with_context(|| format!("bad center '{s}'")))
            .collect::<Result<_>>()?,
        None => vec![0.0, 20.0, 40.0, 60.0],
    };
    let buckets = buckets_around(&centers, cmd.halfwidth.unwrap_or(5.0));

    let bundles = collect_bundles(&[], &Some(cmd.bundles_root.clone()))?;
    let per_seq_rows = load_results_for(&bundles, &cmd.results)?;
    let mut per_seq_stats = Vec::new();
    for (bundle, rows) in bundles.iter().zip(&per_seq_rows) {
        let frames = build_eval_frames(bundle, rows)?;
        per_seq_stats.push(speed_bucket_analysis(&frames, &buckets)?);
    }
    let merged = merge_bucket_stats(&per_seq_stats)?;

    std::fs::create_dir_all(&cmd.out)?;
    let csv_path = cmd.out.join("speed_buckets.csv");
    std::fs::write(&csv_path, bucket_csv(&merged))?;
    manifest.output(&csv_path);
    manifest.write(&cmd.out, bag.snapshot())?;
    Ok(())
}

fn cmd_perturb(cmd: PerturbCmd) -> Result<()> {
    let bag = resolve_bag(&cmd.common)?;
    let mut manifest = RunManifest::new("perturb-speed").seed(cmd.seed.unwrap_or(0));
    manifest.input(&cmd.bundle);
    let mode = if cmd.pure {
        PerturbMode::PureNoise
    } else {
        let sigma = cmd.sigma.context("either --sigma or --pure is required")?;
        PerturbMode::Relative(sigma)
    };
    let mut bundle = read_bundle(&cmd.bundle)?;
    bundle.speeds = perturb_speed(&bundle.speeds, mode, cmd.seed.unwrap_or(0))?;
    write_bundle(&bundle, &cmd.out)?;
    manifest.output(&cmd.out);
    manifest.write(&cmd.out, bag.snapshot())?;
    Ok(())
}
