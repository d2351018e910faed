mod config;
mod error;
mod selftest;
mod synth;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use naicl_core::attention::{bam_bench, BamConfig, BenchSettings};
use naicl_core::loss_metrics::{dice, psnr};
use naicl_core::pipeline::{builtin_models, builtin_modes, InferenceRequest, TaskKind};
use naicl_core::schedule::{plan_tiles, ScaleSchedule, DEFAULT_OVERLAP};
use naicl_core::unet::{seeded_weights, WeightStore};
use naicl_core::volume::{load_mv3d, save_mv3d, Shape3};
use naicl_core::Error;
use serde::Serialize;
use serde_json::{json, Value};

use config::{ContextManifest, ManifestEntry, RunConfig};
use error::{at_path, CliError, CliResult};
use synth::{generate_synthetic, SyntheticKind, SyntheticSpec};

#[derive(Parser)]
#[command(name = "naicl", version, about = "Coarse-to-fine in-context inference for 3D volumes")]
struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the step ladder and tile counts for a volume shape.
    Schedule {
        /// H,W,D or a single edge for a cube.
        #[arg(long, value_parser = parse_shape)]
        shape: Shape3,
        #[arg(long, default_value_t = 128)]
        patch_edge: usize,
        #[arg(long, default_value_t = DEFAULT_OVERLAP)]
        overlap: f64,
    },
    /// Run whole-volume inference.
    Infer(InferArgs),
    /// Score a prediction against a reference.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, value_enum)]
        metric: Metric,
        /// Signal peak for PSNR.
        #[arg(long, default_value_t = 1.0)]
        peak: f64,
    },
    /// Time blockwise against voxel-level attention.
    BamBench {
        #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
        edges: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        blocks_per_axis: usize,
        #[arg(long, default_value_t = 12)]
        proj_width: usize,
        #[arg(long, default_value_t = 4)]
        channels: usize,
        #[arg(long, default_value_t = 1)]
        sources: usize,
        #[arg(long, default_value_t = 200)]
        min_time_ms: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the invariant suite; exits 4 on any failure.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum)]
        inject_fault: Option<selftest::Fault>,
    },
    /// Write synthetic volumes, context sets or seeded weights.
    #[command(subcommand)]
    Gen(GenCommand),
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    context_manifest: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: Option<Task>,
    #[arg(long)]
    overlap: Option<f64>,
    /// Single-scale sliding window without autoregressive context.
    #[arg(long)]
    no_naicl: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Use the identity model instead of a network.
    #[arg(long)]
    stub: bool,
    #[arg(long)]
    patch_edge: Option<usize>,
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    blocks_per_axis: Option<usize>,
    #[arg(long)]
    proj_width: Option<usize>,
    /// JSON run configuration; its keys override flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum GenCommand {
    /// One (image, label-or-clean) pair.
    Volume {
        #[command(flatten)]
        synth: SynthArgs,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        label: PathBuf,
    },
    /// `count` pairs plus a manifest.json in `dir`.
    Context {
        #[command(flatten)]
        synth: SynthArgs,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long)]
        dir: PathBuf,
    },
    /// Seeded uniform weights for a run configuration.
    Weights {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(long, value_parser = parse_shape)]
    shape: Shape3,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long, default_value_t = 0.05)]
    rho: f64,
}

impl SynthArgs {
    fn spec(&self, seed_offset: u64) -> SyntheticSpec {
        let kind = match self.kind {
            Kind::SphereSeg => SyntheticKind::SphereSeg { radius: self.radius },
            Kind::Ramp => SyntheticKind::Ramp,
            Kind::GaussianNoise => SyntheticKind::GaussianNoise { sigma: self.sigma },
            Kind::SaltPepper => SyntheticKind::SaltPepper { rho: self.rho },
            Kind::BiasField => SyntheticKind::BiasField,
        };
        SyntheticSpec { shape: self.shape, kind, seed: self.seed.wrapping_add(seed_offset) }
    }
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Kind {
    SphereSeg,
    Ramp,
    GaussianNoise,
    SaltPepper,
    BiasField,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Seg,
    Reg,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Dice,
    Psnr,
}

fn parse_shape(s: &str) -> Result<Shape3, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let shape = match parts.as_slice() {
        [e] => Shape3::cube(*e),
        [h, w, d] => Shape3::new(*h, *w, *d),
        _ => return Err("expected H,W,D or a single edge".into()),
    };
    shape.map_err(|e| e.to_string())
}

fn print_json(v: &impl Serialize) {
    use std::io::Write;
    let text = serde_json::to_string_pretty(v).expect("serializable");
    // A closed reader (e.g. `| head`) is not an error.
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn write_json(path: &Path, v: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(v).expect("serializable");
    at_path(path, std::fs::write(path, text + "\n").map_err(Error::from))
}

fn schedule(shape: Shape3, patch_edge: usize, overlap: f64) -> CliResult<()> {
    let s = ScaleSchedule::new(shape, patch_edge)?;
    let tiles = s
        .all_dims()
        .iter()
        .map(|&d| plan_tiles(d, patch_edge, overlap).map(|p| p.len()))
        .collect::<Result<Vec<_>, _>>()?;
    let dims: Vec<[usize; 3]> = s.all_dims().iter().map(Shape3::as_array).collect();
    print_json(&json!({ "T": s.steps(), "dims": dims, "tiles_per_step": tiles }));
    Ok(())
}

fn mask_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.mask.mv3d"))
}

fn run_config(a: &InferArgs) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = a.$field { cfg.$field = v; })* };
    }
    set!(patch_edge, stages, base_channels, blocks_per_axis, proj_width);
    if let Some(o) = a.overlap {
        cfg.overlap_fraction = o;
    }
    if let Some(t) = a.task {
        cfg.task_kind = match t {
            Task::Seg => TaskKind::Segmentation,
            Task::Reg => TaskKind::Regression,
        };
    }
    cfg.na_icl_enabled = !a.no_naicl;
    cfg.stub_mode = a.stub;
    cfg.paths.target = a.target.clone();
    cfg.paths.context_manifest = a.context_manifest.clone();
    cfg.paths.weights = a.weights.clone();
    cfg.paths.out = a.out.clone();
    cfg.paths.trace = a.trace.clone();
    if let Some(p) = &a.config {
        cfg = cfg.overlay_file(p)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn infer(a: &InferArgs) -> CliResult<()> {
    let cfg = run_config(a)?;
    let need = |p: &Option<PathBuf>, what: &str| p.clone().ok_or_else(|| CliError::Usage(format!("missing {what}")));
    let target_path = need(&cfg.paths.target, "--target")?;
    let manifest_path = need(&cfg.paths.context_manifest, "--context-manifest")?;

    let unet = cfg.unet();
    let (model_name, weights) = if cfg.stub_mode {
        ("identity", None)
    } else {
        let path = cfg.paths.weights.as_ref().ok_or_else(|| Error::Config("weights: no weight file given".into()))?;
        ("unet", Some(Arc::new(at_path(path, WeightStore::load(path))?)))
    };
    let model = builtin_models().get(model_name)?.build(&unet, weights)?;

    let target = at_path(&target_path, load_mv3d(&target_path))?;
    let context = ContextManifest::load(&manifest_path)?;
    let mut req = InferenceRequest::new(target, context, cfg.task_kind);
    req.overlap_fraction = cfg.overlap_fraction;
    req.na_icl_enabled = cfg.na_icl_enabled;
    let mode = if cfg.na_icl_enabled { "naicl" } else { "sliding-window" };
    let out = builtin_modes().get(mode)?.run(&req, model.as_ref())?;

    let mut summary = json!({
        "mode": out.trace.mode,
        "model": out.trace.model,
        "steps": out.trace.steps.iter().map(|s| json!({"t": s.t, "dims": s.dims, "tiles": s.tiles})).collect::<Vec<_>>(),
    });
    if let Some(p) = &cfg.paths.out {
        at_path(p, save_mv3d(&out.prediction, p))?;
        summary["out"] = json!(p);
        if let Some(mask) = &out.mask {
            let mp = mask_path(p);
            at_path(&mp, save_mv3d(mask, &mp))?;
            summary["mask"] = json!(mp);
        }
    }
    if let Some(p) = &cfg.paths.trace {
        write_json(p, &out.trace)?;
    }
    print_json(&summary);
    Ok(())
}

fn eval(pred: &Path, reference: &Path, metric: Metric, peak: f64) -> CliResult<()> {
    let p = at_path(pred, load_mv3d(pred))?;
    let r = at_path(reference, load_mv3d(reference))?;
    let report = match metric {
        Metric::Dice => json!({ "dice": dice(&p, &r)? }),
        Metric::Psnr => {
            let db = psnr(&p, &r, peak)?;
            json!({ "psnr": if db.is_infinite() { Value::from("inf") } else { Value::from(db) } })
        }
    };
    print_json(&report);
    Ok(())
}

fn gen(cmd: &GenCommand) -> CliResult<()> {
    match cmd {
        GenCommand::Volume { synth, image, label } => {
            let (img, lab) = generate_synthetic(&synth.spec(0));
            at_path(image, save_mv3d(&img, image))?;
            at_path(label, save_mv3d(&lab, label))?;
            print_json(&json!({ "image": image, "label": label }));
        }
        GenCommand::Context { synth, count, dir } => {
            if *count == 0 {
                return Err(CliError::Usage("--count must be at least 1".into()));
            }
            at_path(dir, std::fs::create_dir_all(dir).map_err(Error::from))?;
            let mut pairs = Vec::with_capacity(*count);
            for i in 0..*count {
                let (img, lab) = generate_synthetic(&synth.spec(i as u64 + 1));
                let entry = ManifestEntry {
                    image: PathBuf::from(format!("pair{i}_image.mv3d")),
                    label: PathBuf::from(format!("pair{i}_label.mv3d")),
                };
                let (ip, lp) = (dir.join(&entry.image), dir.join(&entry.label));
                at_path(&ip, save_mv3d(&img, &ip))?;
                at_path(&lp, save_mv3d(&lab, &lp))?;
                pairs.push(entry);
            }
            let manifest = dir.join("manifest.json");
            write_json(&manifest, &ContextManifest { pairs })?;
            print_json(&json!({ "manifest": manifest, "pairs": count }));
        }
        GenCommand::Weights { config, seed, out } => {
            let mut cfg = RunConfig { seed: *seed, ..RunConfig::default() };
            if let Some(p) = config {
                cfg = cfg.overlay_file(p)?;
            }
            cfg.validate()?;
            let w = seeded_weights(&cfg.unet(), cfg.seed);
            at_path(out, w.save(out))?;
            print_json(&json!({ "out": out, "tensors": w.len() }));
        }
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::Schedule { shape, patch_edge, overlap } => schedule(shape, patch_edge, overlap),
        Command::Infer(a) => infer(&a),
        Command::Eval { pred, reference, metric, peak } => eval(&pred, &reference, metric, peak),
        Command::BamBench { edges, blocks_per_axis, proj_width, channels, sources, min_time_ms, seed } => {
            let settings = BenchSettings {
                edges,
                cfg: BamConfig::new(blocks_per_axis, proj_width, channels)?,
                sources,
                min_time: Duration::from_millis(min_time_ms),
                seed,
            };
            print_json(&bam_bench(&settings)?);
            Ok(())
        }
        Command::Selftest { seed, inject_fault } => {
            let report = selftest::run(seed, inject_fault);
            print_json(&report);
            if report.pass {
                Ok(())
            } else {
                let failed: Vec<&str> = report.suites.iter().filter(|s| !s.pass).map(|s| s.name).collect();
                Err(CliError::Invariant(failed.join(", ")))
            }
        }
        Command::Gen(g) => gen(&g),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
