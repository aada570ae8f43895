//! `snad`: train, run and evaluate the anomaly-detection head on feature files.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data or protocol
//! error, 4 numerical check failure, 1 internal error.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use snad_core::bench::{run_bench, BenchConfig};
use snad_core::dataset::{evaluate, load_split, post_process_for, CategoryMetrics};
use snad_core::gradcheck::{run_gradcheck, GradcheckOptions};
use snad_core::inference::{infer_batch, PostProcess};
use snad_core::io::{
    atomic_write, read_checkpoint, read_feature_file, read_manifest, write_anomaly_map, write_checkpoint,
    Checkpoint, MapFormat, Split,
};
use snad_core::model::{AdaptorVariant, Model, NoiseConfig};
use snad_core::pipeline::{extract_local_features, HierarchyStack, PipelineConfig};
use snad_core::synth::{generate, write_dataset, SynthConfig};
use snad_core::training::{train, EpochRecord, LossKind, TrainConfig};
use snad_core::Error;

#[derive(Parser)]
#[command(name = "snad", version, about = "Feature-space anomaly detection: train, infer, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the normal samples of a manifest and write a checkpoint.
    Train(TrainArgs),
    /// Write anomaly maps and image scores for feature files.
    Infer(InferArgs),
    /// Image AUROC, pixel AUROC and best F1 per category.
    Eval(EvalArgs),
    /// Time the inference stages on a random feature map.
    Bench(BenchArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic feature dataset with known anomalies.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss CSV; defaults to `<out>.loss.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 0.015)]
    sigma: f32,
    #[arg(long, default_value_t = 3)]
    patch_size: usize,
    #[arg(long, value_delimiter = ',', default_value = "2,3")]
    levels: Vec<u16>,
    #[arg(long, default_value = "linear", value_parser = parse_adaptor)]
    adaptor: AdaptorVariant,
    #[arg(long, default_value = "trunc_l1", value_parser = parse_loss)]
    loss: LossKind,
    #[arg(long, default_value_t = 160)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    lr_adaptor: f32,
    #[arg(long, default_value_t = 2e-4)]
    lr_disc: f32,
    #[arg(long, default_value_t = 1e-5)]
    weight_decay: f32,
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    th_pos: f32,
    #[arg(long, default_value_t = -0.5, allow_negative_numbers = true)]
    th_neg: f32,
    /// Discriminator hidden width; defaults to the feature width.
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Score the samples of this manifest.
    #[arg(long, conflicts_with = "features", required_unless_present = "features")]
    manifest: Option<PathBuf>,
    /// Score a single feature file.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = ["train", "test", "all"])]
    split: String,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value = "both", value_parser = parse_map_format)]
    map_format: MapFormat,
    #[arg(long, default_value_t = 4.0)]
    smooth_sigma: f64,
    /// Take the image score from the smoothed map.
    #[arg(long)]
    score_after_smoothing: bool,
    /// Map size; defaults to the manifest image size, or the feature grid
    /// for a single file.
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    out_size: Option<Vec<usize>>,
}

#[derive(Args)]
struct EvalArgs {
    /// Repeat together with --manifest, once per category.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long, required = true)]
    manifest: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4.0)]
    smooth_sigma: f64,
    #[arg(long)]
    score_after_smoothing: bool,
    /// Also write the rows as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Benchmark a trained model; otherwise a fresh model of the given width.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, num_args = 3, value_names = ["H0", "W0", "C"], default_values_t = [28, 28, 1536])]
    shape: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    iters: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    /// Output map size; defaults to 8x the feature grid.
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    out_size: Option<Vec<usize>>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Upper bounds for channels, hidden width and batch size.
    #[arg(long, num_args = 3, value_names = ["C", "HD", "BATCH"], default_values_t = [8, 8, 16])]
    dims: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 24)]
    configs: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, hide = true)]
    corrupt_gradient: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 200)]
    n_train: usize,
    #[arg(long, default_value_t = 100)]
    n_test: usize,
    #[arg(long, num_args = 2, value_names = ["H0", "W0"], default_values_t = [16, 16])]
    grid: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    channels: usize,
    #[arg(long, default_value_t = 0.5)]
    defect_rate: f64,
    #[arg(long, default_value_t = 1.0)]
    shift: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    latent_dim: usize,
}

fn parse_adaptor(s: &str) -> Result<AdaptorVariant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_map_format(s: &str) -> Result<MapFormat, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Failure with its exit code.
enum Failure {
    Core(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CmdResult = Result<(), Failure>;

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) | Error::InvalidArgument(_) | Error::MissingLevel(_) => 2,
        Error::Internal(_) => 1,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(4)
        }
    }
}

fn sibling_with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String, Error> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Internal(e.to_string()))
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let pipeline = PipelineConfig {
        patch_size: a.patch_size,
        selected_levels: a.levels.clone(),
    };
    pipeline.validate()?;
    let config = TrainConfig {
        th_pos: a.th_pos,
        th_neg: a.th_neg,
        lr_adaptor: a.lr_adaptor,
        lr_discriminator: a.lr_disc,
        weight_decay: a.weight_decay,
        epochs: a.epochs,
        batch_size: a.batch,
        noise: NoiseConfig {
            mean: 0.0,
            sigma: a.sigma,
            seed: a.seed,
        },
        loss_kind: a.loss,
        seed: a.seed,
    };
    config.validate()?;
    if a.hidden == Some(0) {
        return Err(Error::Config("hidden width must be positive".into()).into());
    }

    let manifest = read_manifest(&a.manifest)?;
    let train_set: Vec<HierarchyStack> = load_split(&manifest, Split::Train)?
        .into_iter()
        .map(|(_, s)| s)
        .collect();
    let first = train_set
        .first()
        .ok_or_else(|| Error::Validation("manifest has no training samples".into()))?;
    let channels = extract_local_features(first, &pipeline)?.channels();
    let hidden = a.hidden.unwrap_or(channels);

    eprintln!(
        "train: {} samples, C={channels}, Hd={hidden}, adaptor={}, pipeline={}, config={}",
        train_set.len(),
        a.adaptor.name(),
        serde_json::to_string(&pipeline).unwrap_or_default(),
        serde_json::to_string(&config).unwrap_or_default()
    );
    let model = Model::new(pipeline, a.adaptor, channels, hidden, a.seed)?;
    let quiet = a.quiet;
    let mut progress = |r: &EpochRecord| {
        if !quiet {
            eprintln!("epoch {:>4}  loss {:.6}  {:.0} ms", r.epoch + 1, r.mean_loss, r.wall_ms);
        }
    };
    let trained = train(&train_set, model, &config, &mut progress)?;

    let mut csv = String::from("epoch,mean_loss\n");
    for r in &trained.trace {
        let _ = writeln!(csv, "{},{}", r.epoch + 1, r.mean_loss);
    }
    let loss_path = a.loss_csv.unwrap_or_else(|| sibling_with_suffix(&a.out, ".loss.csv"));
    write_checkpoint(
        &Checkpoint {
            model: trained.model,
            train_config: Some(config),
        },
        &a.out,
    )?;
    atomic_write(&loss_path, csv.as_bytes())?;
    eprintln!("wrote {} and {}", a.out.display(), loss_path.display());
    Ok(())
}

/// File-system safe stem for a sample id.
fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn post_process(size: [usize; 2], sigma: f64, after: bool) -> PostProcess {
    let mut p = PostProcess::new(size[0], size[1]);
    p.sigma = sigma;
    p.score_after_smoothing = after;
    p
}

/// Sample id, label if known, and its features.
type Item = (String, Option<u8>, HierarchyStack);

fn cmd_infer(a: InferArgs) -> CmdResult {
    let ck = read_checkpoint(&a.checkpoint)?;
    let model = &ck.model;
    if a.smooth_sigma.is_nan() || a.smooth_sigma <= 0.0 {
        return Err(Error::Config("--smooth-sigma must be positive".into()).into());
    }
    let (items, default_size): (Vec<Item>, [usize; 2]) = match (&a.manifest, &a.features) {
        (Some(m), _) => {
            let manifest = read_manifest(m)?;
            let splits: &[Split] = match a.split.as_str() {
                "train" => &[Split::Train],
                "test" => &[Split::Test],
                _ => &[Split::Train, Split::Test],
            };
            let mut items = Vec::new();
            for &s in splits {
                for (sample, stack) in load_split(&manifest, s)? {
                    items.push((sample.id.clone(), Some(sample.label), stack));
                }
            }
            (items, manifest.image_size)
        }
        (None, Some(f)) => {
            let stack = read_feature_file(f)?;
            let local = extract_local_features(&stack, &model.pipeline)?;
            let id = f
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "sample".into());
            (vec![(id, None, stack)], [local.height(), local.width()])
        }
        (None, None) => return Err(Error::Config("give --manifest or --features".into()).into()),
    };
    let size = match &a.out_size {
        Some(v) => [v[0], v[1]],
        None => default_size,
    };
    let post = post_process(size, a.smooth_sigma, a.score_after_smoothing);

    let mut stems = HashSet::new();
    for (id, _, _) in &items {
        if !stems.insert(file_stem(id)) {
            return Err(Error::Validation(format!("sample ids collide on file name {:?}", file_stem(id))).into());
        }
    }
    let stacks: Vec<HierarchyStack> = items.iter().map(|(_, _, s)| s.clone()).collect();
    let results = infer_batch(model, &stacks, &model.pipeline, &post).map_err(|e| match e {
        Error::Sample { index, source, .. } => Error::Sample {
            index,
            id: items[index].0.clone(),
            source,
        },
        other => other,
    })?;

    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::Io {
        path: a.out_dir.clone(),
        source: e,
    })?;
    let mut csv = String::from("id,label,image_score\n");
    for ((id, label, _), r) in items.iter().zip(&results) {
        write_anomaly_map(r, &a.out_dir.join(file_stem(id)), a.map_format)?;
        let label = label.map(|l| l.to_string()).unwrap_or_default();
        let _ = writeln!(csv, "{id},{label},{}", r.image_score);
    }
    atomic_write(&a.out_dir.join("scores.csv"), csv.as_bytes())?;
    eprintln!("scored {} samples into {}", results.len(), a.out_dir.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// CSV columns: category,n_test,i_auroc,p_auroc,f1_threshold,f1,f1_level;
/// a final `average` row holds the means (pixel AUROC over the categories
/// that have it).
fn metrics_csv(rows: &[CategoryMetrics]) -> String {
    let mut out = String::from("category,n_test,i_auroc,p_auroc,f1_threshold,f1,f1_level\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{},{},{:.6},{}",
            r.category,
            r.n_test,
            r.i_auroc,
            fmt_opt(r.p_auroc),
            r.f1_threshold,
            r.f1,
            r.f1_level.name()
        );
    }
    let n = rows.len() as f64;
    let p: Vec<f64> = rows.iter().filter_map(|r| r.p_auroc).collect();
    let _ = writeln!(
        out,
        "average,{},{:.6},{},,{:.6},",
        rows.iter().map(|r| r.n_test).sum::<usize>(),
        rows.iter().map(|r| r.i_auroc).sum::<f64>() / n,
        fmt_opt((!p.is_empty()).then(|| p.iter().sum::<f64>() / p.len() as f64)),
        rows.iter().map(|r| r.f1).sum::<f64>() / n,
    );
    out
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    if a.checkpoint.len() != a.manifest.len() {
        return Err(Error::Config(format!(
            "{} checkpoints but {} manifests; pass them in pairs",
            a.checkpoint.len(),
            a.manifest.len()
        ))
        .into());
    }
    let mut rows = Vec::new();
    for (ck_path, m_path) in a.checkpoint.iter().zip(&a.manifest) {
        let ck = read_checkpoint(ck_path)?;
        let manifest = read_manifest(m_path)?;
        let mut post = post_process_for(&manifest);
        post.sigma = a.smooth_sigma;
        post.score_after_smoothing = a.score_after_smoothing;
        let (metrics, _) = evaluate(&ck.model, &manifest, &post)?;
        rows.push(metrics);
    }

    println!("{:<20} {:>6} {:>9} {:>9} {:>8} {:>6}", "category", "n_test", "I-AUROC", "P-AUROC", "F1", "level");
    for r in &rows {
        println!(
            "{:<20} {:>6} {:>9.4} {:>9} {:>8.4} {:>6}",
            r.category,
            r.n_test,
            r.i_auroc,
            r.p_auroc.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            r.f1,
            r.f1_level.name()
        );
    }
    atomic_write(&a.out, metrics_csv(&rows).as_bytes())?;
    if let Some(p) = &a.json {
        atomic_write(p, to_json(&rows)?.as_bytes())?;
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    let (h, w, c) = (a.shape[0], a.shape[1], a.shape[2]);
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Config("--shape values must be positive".into()).into());
    }
    if a.iters == 0 {
        return Err(Error::Config("--iters must be at least 1".into()).into());
    }
    let model = match &a.checkpoint {
        Some(p) => {
            let m = read_checkpoint(p)?.model;
            if m.channels() != c {
                return Err(Error::Config(format!(
                    "--shape gives C={c} but the checkpoint expects {}",
                    m.channels()
                ))
                .into());
            }
            m
        }
        None => Model::new(PipelineConfig::default(), AdaptorVariant::Linear, c, c, 0)?,
    };
    let out = match &a.out_size {
        Some(v) => [v[0], v[1]],
        None => [8 * h, 8 * w],
    };
    let cfg = BenchConfig {
        height: h,
        width: w,
        iters: a.iters,
        warmup: a.warmup,
        post: PostProcess::new(out[0], out[1]),
        seed: 0,
    };
    let r = run_bench(&model, &cfg)?;
    eprintln!(
        "bench {h}x{w}x{c} -> {}x{}, {} iters after {} warmup, {} threads",
        out[0], out[1], r.iters, r.warmup, r.threads
    );
    for (name, s) in [
        ("adaptor", &r.adaptor),
        ("discriminator", &r.discriminator),
        ("post-processing", &r.post_processing),
        ("total", &r.total),
    ] {
        eprintln!(
            "  {name:<16} mean {:>9.3} ms  median {:>9.3} ms  min {:>9.3} ms",
            s.mean_ms, s.median_ms, s.min_ms
        );
    }
    eprintln!("  {:.1} images/s", r.images_per_sec);
    let json = to_json(&r)?;
    println!("{json}");
    if let Some(p) = &a.json {
        atomic_write(p, json.as_bytes())?;
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    let opts = GradcheckOptions {
        max_channels: a.dims[0],
        max_hidden: a.dims[1],
        max_batch: a.dims[2],
        configs: a.configs,
        seed: a.seed,
        tolerance: a.tolerance,
        corrupt: a.corrupt_gradient,
    };
    let report = run_gradcheck(&opts)?;
    println!("{}", to_json(&report)?);
    if report.passed {
        Ok(())
    } else {
        let worst = report
            .configs
            .iter()
            .max_by(|x, y| x.max_rel_err.total_cmp(&y.max_rel_err))
            .map(|c| c.worst.clone())
            .unwrap_or_default();
        Err(Failure::Check(format!(
            "max relative error {:.3e} >= {:.1e}: {worst}",
            report.max_rel_err, report.tolerance
        )))
    }
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let cfg = SynthConfig {
        n_train: a.n_train,
        n_test: a.n_test,
        grid_h: a.grid[0],
        grid_w: a.grid[1],
        channels: a.channels,
        defect_rate: a.defect_rate,
        shift: a.shift,
        seed: a.seed,
        latent_dim: a.latent_dim,
        ..SynthConfig::default()
    };
    cfg.validate()?;
    let ds = generate(&cfg)?;
    let manifest = write_dataset(&cfg, &ds, &a.out_dir)?;
    eprintln!(
        "wrote {} samples; feature std {:.4}, shift {} = {:.1} x std; manifest {}",
        ds.samples.len(),
        ds.feature_std,
        cfg.shift,
        f64::from(cfg.shift) / ds.feature_std,
        manifest.display()
    );
    Ok(())
}
