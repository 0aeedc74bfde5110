use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use boundseg::boundary::{annotate_boundary_gt, bpm_forward, save_boundary, BoundaryField, BoundaryRule};
use boundseg::config::RunConfig;
use boundseg::encode::{MaskOverride, Network};
use boundseg::geoconv::{kernel_response_field, save_field};
use boundseg::knn::knn_index;
use boundseg::scene::{generate_scene, SceneSpec};
use boundseg::train::{
    evaluate, grad_check, load_checkpoint, prepare_dataset, save_checkpoint, train_loop, EvalOptions, EvalReport,
    Perturbation, TrainState,
};
use boundseg::{load_cloud, save_cloud, PointCloud};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Boundary-aware point-cloud segmentation.
#[derive(Parser)]
#[command(name = "boundseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate labeled synthetic room scenes as .pts files plus a manifest.
    Gen(GenArgs),
    /// Train from a config file; writes checkpoints and a metrics log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on labeled scenes.
    Eval(EvalArgs),
    /// Write ground-truth (from labels) or predicted (from a checkpoint) boundaries.
    Boundary(BoundaryArgs),
    /// Write the response of one learnt geometric kernel at every point.
    KernelField(KernelFieldArgs),
    /// Check analytic gradients of a tiny network against finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Number of scenes.
    #[arg(long)]
    scenes: usize,
    /// Seed of the first scene; scene i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of semantic classes (2 to 5).
    #[arg(long, default_value_t = 5)]
    classes: usize,
    /// Points per scene.
    #[arg(long, default_value_t = 2048)]
    points: usize,
    /// Room extent in meters, x,y,z.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [4.0, 4.0, 2.5])]
    extent: Vec<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration.
    config: PathBuf,
    /// `key=value` overrides, e.g. `train.epochs=5` or `mask=off`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ForceMask {
    Off,
    On,
    Augmented,
}

#[derive(Args)]
struct RuleArgs {
    /// Neighbors used by the ground-truth boundary rule.
    #[arg(long, default_value_t = BoundaryRule::default().k)]
    rule_k: usize,
    /// A point is a boundary point when more than this fraction of its
    /// neighbors carry another label.
    #[arg(long, default_value_t = BoundaryRule::default().ratio)]
    rule_ratio: f64,
}

impl RuleArgs {
    fn rule(&self) -> anyhow::Result<BoundaryRule> {
        let rule = BoundaryRule {
            k: self.rule_k,
            ratio: self.rule_ratio,
        };
        rule.validate().map_err(usage)?;
        Ok(rule)
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file.
    checkpoint: PathBuf,
    /// A labeled .pts file or a directory of them.
    data: PathBuf,
    /// Flip this fraction of binarized boundary predictions before masking.
    #[arg(long, value_name = "F", conflicts_with = "perturb_exchange")]
    perturb_flip: Option<f64>,
    /// Swap this fraction of predicted boundary points with a neighbor.
    #[arg(long, value_name = "F")]
    perturb_exchange: Option<f64>,
    /// Override the mask mode of boundary-using layers.
    #[arg(long, value_enum)]
    force_mask: Option<ForceMask>,
    /// Seed for the perturbations.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    rule: RuleArgs,
}

#[derive(Args)]
struct BoundaryArgs {
    /// Input .pts file.
    cloud: PathBuf,
    /// Output .bnd file.
    #[arg(long)]
    out: PathBuf,
    /// Predict with this checkpoint instead of annotating from labels.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Also write the soft scores (prediction mode) as a .fld file.
    #[arg(long, requires = "checkpoint")]
    field: Option<PathBuf>,
    #[command(flatten)]
    rule: RuleArgs,
}

#[derive(Args)]
struct KernelFieldArgs {
    /// Checkpoint file.
    checkpoint: PathBuf,
    /// Input .pts file.
    cloud: PathBuf,
    /// Encoder layer index.
    #[arg(long)]
    layer: usize,
    /// Kernel index within the layer.
    #[arg(long)]
    kernel: usize,
    /// Output .fld file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Seed of the random scene.
    #[arg(long, default_value_t = 21)]
    seed: u64,
    /// Number of classes.
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Points in the scene (at most 64).
    #[arg(long, default_value_t = 64)]
    points: usize,
    /// Relative tolerance per entry.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

/// An error caused by the invocation rather than the work; exits with 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(e: impl fmt::Display) -> anyhow::Error {
    UsageError(e.to_string()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Boundary(a) => cmd_boundary(&a),
        Command::KernelField(a) => cmd_kernel_field(&a),
        Command::GradCheck(a) => cmd_grad_check(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let is_usage = e.downcast_ref::<UsageError>().is_some()
                || matches!(e.downcast_ref::<boundseg::Error>(), Some(boundseg::Error::Config(_)));
            ExitCode::from(if is_usage { 2 } else { 1 })
        }
    }
}

fn cmd_gen(a: &GenArgs) -> anyhow::Result<()> {
    if a.scenes == 0 {
        bail!(usage("--scenes must be at least 1"));
    }
    let extent = [a.extent[0], a.extent[1], a.extent[2]];
    let specs = (0..a.scenes as u64)
        .map(|i| SceneSpec::random(a.seed + i, a.classes, a.points, extent))
        .collect::<Result<Vec<_>, _>>()
        .map_err(usage)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut manifest = String::from("file\tseed\tclasses\tpoints\n");
    for spec in &specs {
        let cloud = generate_scene(spec)?;
        let name = format!("scene_{:06}.pts", spec.seed);
        save_cloud(&cloud, a.out.join(&name))?;
        manifest.push_str(&format!("{name}\t{}\t{}\t{}\n", spec.seed, a.classes, cloud.len()));
    }
    let path = a.out.join("manifest.tsv");
    fs::write(&path, manifest).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {} scenes to {}", specs.len(), a.out.display());
    Ok(())
}

/// A single .pts file, or every .pts file of a directory in name order.
fn load_scenes(path: &Path) -> anyhow::Result<Vec<PointCloud>> {
    let files = if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        files.retain(|p| p.extension().is_some_and(|e| e == "pts"));
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        bail!("no .pts files in {}", path.display());
    }
    Ok(files.iter().map(load_cloud).collect::<Result<_, _>>()?)
}

fn cmd_train(a: &TrainArgs) -> anyhow::Result<()> {
    let cfg = RunConfig::load(&a.config, &a.overrides)?;
    let prepare = |dir: &Path| -> anyhow::Result<_> {
        let clouds = load_scenes(dir)?;
        if let Some(c) = clouds.iter().find(|c| c.num_classes() != cfg.arch.num_classes) {
            bail!(
                "scenes in {} have {} classes, the config has {}",
                dir.display(),
                c.num_classes(),
                cfg.arch.num_classes
            );
        }
        Ok(prepare_dataset(&clouds, &cfg.arch, &cfg.rule)?)
    };
    let train = prepare(&cfg.paths.train_dir)?;
    let val = cfg.paths.val_dir.as_deref().map(prepare).transpose()?;
    let out = &cfg.paths.out_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let net = Network::new(cfg.arch.clone(), cfg.w1, cfg.w2)?;
    let mut state = TrainState::new(net, &cfg.train)?;
    let eval_opts = EvalOptions {
        mask: cfg.train.mask,
        ..Default::default()
    };
    let mut log = String::new();
    let log_path = out.join("metrics.log");
    let mut best = f64::NEG_INFINITY;
    train_loop(&train, &mut state, &cfg.train, |s, m| {
        log.push_str(&m.log_line());
        log.push('\n');
        fs::write(&log_path, &log).map_err(|e| boundseg::Error::Io {
            path: log_path.clone(),
            source: e,
        })?;
        let score = match &val {
            Some(v) => evaluate(v, &s.net, &eval_opts)?.miou,
            None => m.train_miou,
        };
        println!("{}\tselection_miou {score:.6}", m.log_line());
        if score > best {
            best = score;
            save_checkpoint(s, out.join("best.ckpt"))?;
        }
        Ok(())
    })?;
    save_checkpoint(&state, out.join("final.ckpt"))?;
    println!("best selection mIoU {best:.6}; checkpoints in {}", out.display());
    Ok(())
}

fn print_report(r: &EvalReport) {
    println!("miou\t{:.6}", r.miou);
    println!("accuracy\t{:.6}", r.accuracy);
    for (c, iou) in r.class_iou.iter().enumerate() {
        match iou {
            Some(v) => println!("iou_class_{c}\t{v:.6}"),
            None => println!("iou_class_{c}\tabsent"),
        }
    }
    println!("boundary_precision\t{:.6}", r.boundary.precision());
    println!("boundary_recall\t{:.6}", r.boundary.recall());
    println!("boundary_f1\t{:.6}", r.boundary.f1());
    match r.band_accuracy {
        Some(v) => println!("band_accuracy\t{v:.6}"),
        None => println!("band_accuracy\tundefined"),
    }
}

fn fraction(flag: &str, f: f64) -> anyhow::Result<f64> {
    if !(0.0..=1.0).contains(&f) {
        bail!(usage(format!("{flag} must lie in [0, 1], got {f}")));
    }
    Ok(f)
}

fn cmd_eval(a: &EvalArgs) -> anyhow::Result<()> {
    let rule = a.rule.rule()?;
    let perturbation = match (a.perturb_flip, a.perturb_exchange) {
        (Some(f), _) => Perturbation::Flip(fraction("--perturb-flip", f)?),
        (_, Some(f)) => Perturbation::Exchange(fraction("--perturb-exchange", f)?),
        _ => Perturbation::None,
    };
    let mask = match a.force_mask {
        None => MaskOverride::AsConfigured,
        Some(ForceMask::Off) => MaskOverride::Off,
        Some(ForceMask::On) => MaskOverride::On,
        Some(ForceMask::Augmented) => MaskOverride::Augmented,
    };
    let state = load_checkpoint(&a.checkpoint)?;
    let clouds = load_scenes(&a.data)?;
    let dataset = prepare_dataset(&clouds, &state.net.arch, &rule)?;
    let report = evaluate(
        &dataset,
        &state.net,
        &EvalOptions {
            mask,
            perturbation,
            seed: a.seed,
        },
    )?;
    print_report(&report);
    Ok(())
}

fn cmd_boundary(a: &BoundaryArgs) -> anyhow::Result<()> {
    let cloud = load_cloud(&a.cloud)?;
    let field = match &a.checkpoint {
        None => {
            let rule = a.rule.rule()?;
            let idx = knn_index(&cloud, rule.k)?;
            annotate_boundary_gt(&cloud, &idx, &rule)?
        }
        Some(ckpt) => {
            let state = load_checkpoint(ckpt)?;
            let idx = knn_index(&cloud, state.net.arch.bpm_k)?;
            let soft = bpm_forward(&cloud, &idx, &state.net.bpm)?;
            if let Some(path) = &a.field {
                save_field(soft.soft().expect("prediction is soft"), path)?;
            }
            BoundaryField::from_hard(soft.binarized())?
        }
    };
    save_boundary(&field, &a.out)?;
    println!(
        "{} of {} points on the boundary; wrote {}",
        field.boundary_count(),
        field.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_kernel_field(a: &KernelFieldArgs) -> anyhow::Result<()> {
    let state = load_checkpoint(&a.checkpoint)?;
    let layers = state.net.encoder.len();
    let layer = state
        .net
        .encoder
        .get(a.layer)
        .ok_or_else(|| usage(format!("--layer {} out of range: {layers} encoder layers", a.layer)))?;
    let bank = layer
        .kernels
        .as_ref()
        .ok_or_else(|| usage(format!("encoder layer {} has no geometric kernels", a.layer)))?;
    if a.kernel >= bank.channels() {
        bail!(usage(format!(
            "--kernel {} out of range: layer {} has {} kernels",
            a.kernel,
            a.layer,
            bank.channels()
        )));
    }
    let kernel = bank.kernel(a.kernel)?;
    let cloud = load_cloud(&a.cloud)?;
    let values = kernel_response_field(&cloud, &kernel)?;
    save_field(&values, &a.out)?;
    println!("wrote {} responses to {}", values.len(), a.out.display());
    Ok(())
}

fn cmd_grad_check(a: &GradCheckArgs) -> anyhow::Result<()> {
    let spec = SceneSpec::random(a.seed, a.classes, a.points, [1.5, 1.5, 1.0]).map_err(usage)?;
    let cloud = generate_scene(&spec)?;
    let cfg = RunConfig::parse(
        &format!("[arch]\npreset = \"tiny\"\nnum_classes = {}\n", a.classes),
        &[],
        Path::new("."),
    )?;
    let net = Network::new(cfg.arch, cfg.w1, cfg.w2)?;
    let report = grad_check(&net, &cloud, &cfg.rule, a.tolerance).map_err(|e| match e {
        boundseg::Error::Argument(m) => usage(m),
        other => other.into(),
    })?;
    println!("{report}");
    if !report.passed() {
        bail!("gradient check failed for {}", report.failed_blocks().join(", "));
    }
    Ok(())
}
