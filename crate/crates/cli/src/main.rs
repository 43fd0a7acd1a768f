//! `gazeirl`: foveate images, generate synthetic search data, train and
//! evaluate search policies, summarize and validate manifests.
//!
//! Exit codes: 0 success, 1 usage, 2 data validation, 3 numerical divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use gazeirl::config::RunConfig;
use gazeirl::dataset::{load_manifest, DatasetManifest, SearchTrial, Split};
use gazeirl::gail::ModelBundle;
use gazeirl::metrics::{format_summary, summary_table};
use gazeirl::pipeline::{
    bundle_categories, bundle_env, check_categories, evaluate, first_saccade_map, train_on_manifest,
};
use gazeirl::raster::{self, ImageSource};
use gazeirl::retina::{build_pyramid, LevelMap, RetImage};
use gazeirl::rng::substream;
use gazeirl::synth::{gen_dataset, parse_ref, render_ref};
use gazeirl::GazeError;
use log::{info, warn};

#[derive(Parser)]
#[command(name = "gazeirl", version, about = "Imitation learning of goal-directed visual search")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads for rollouts and metrics; results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes one retina-transformed raster per cumulative fixation prefix.
    Foveate {
        #[arg(long)]
        image: PathBuf,
        /// Fixations in image pixels: `x,y;x,y;...`.
        #[arg(long)]
        fixations: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generates synthetic training and test manifests.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Also write every scene as a PPM file and reference it by path.
        #[arg(long)]
        images: bool,
    },
    /// Trains a policy and discriminator on a training manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        /// Episodes per iteration.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Scores a trained policy on a test manifest.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Restrict to one category, by id or name.
        #[arg(long)]
        category: Option<String>,
        /// Trial ids whose first saccade map is written.
        #[arg(long, value_delimiter = ',')]
        maps: Vec<String>,
    },
    /// Prints error rates and fixation counts by condition and category.
    Report {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Checks a manifest and lists every problem.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
    },
}

/// Error carrying its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.chain().find_map(|e| e.downcast_ref::<GazeError>()) {
            Some(GazeError::Config(_)) => 1,
            Some(GazeError::Divergence(_)) => 3,
            _ => 2,
        };
        Self { code, error }
    }
}

impl From<GazeError> for Failure {
    fn from(e: GazeError) -> Self {
        anyhow::Error::from(e).into()
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn usage(error: anyhow::Error) -> Failure {
    Failure { code: 1, error }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    if let Some(n) = cli.common.jobs {
        if n == 0 {
            return Err(usage(anyhow::anyhow!("--jobs must be at least 1")));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| usage(e.into()))?;
    }
    let mut cfg = resolve_config(&cli.common)?;
    match cli.command {
        Command::Foveate { image, fixations, out } => foveate(&cfg, &image, &fixations, &out),
        Command::Synth { out, images } => synth(&cfg, &out, images),
        Command::Train { manifest, out, iterations, episodes } => {
            if let Some(n) = iterations {
                cfg.ppo.iterations = n;
            }
            if let Some(n) = episodes {
                cfg.ppo.episodes_per_iter = n;
            }
            cfg.validate()?;
            train(&cfg, &manifest, &out)
        }
        Command::Eval { manifest, checkpoint, out, category, maps } => {
            eval(&cfg, &manifest, &checkpoint, &out, category.as_deref(), &maps)
        }
        Command::Report { manifest, out } => report(&manifest, out.as_deref()),
        Command::Validate { manifest } => validate(&manifest),
    }
}

fn resolve_config(common: &Common) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text =
                std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(usage)?;
            let mut cfg = RunConfig::default();
            cfg.apply_text(&text).map_err(|e| usage(anyhow::Error::from(e).context(path.display().to_string())))?;
            cfg
        }
        None => RunConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(anyhow::anyhow!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Writes the resolved configuration and seed next to a run's outputs.
fn prepare_out(out: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.txt"), cfg.to_text())?;
    std::fs::write(out.join("seed.txt"), format!("{}\n", cfg.seed))?;
    info!("seed {} (substreams: env, policy-init, extractor-init, train, eval)", cfg.seed);
    Ok(())
}

fn parse_fixations(text: &str) -> anyhow::Result<Vec<(f32, f32)>> {
    text.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let (x, y) = s.split_once(',').with_context(|| format!("fixation {s:?} is not x,y"))?;
            Ok((x.trim().parse()?, y.trim().parse()?))
        })
        .collect()
}

fn foveate(cfg: &RunConfig, image: &Path, fixations: &str, out: &Path) -> Outcome {
    let fixations = parse_fixations(fixations).map_err(usage)?;
    if fixations.is_empty() {
        return Err(usage(anyhow::anyhow!("no fixations given")));
    }
    let img = raster::load_rgb(image).with_context(|| format!("loading {}", image.display()))?;
    let mut fov = cfg.env.foveation.clone();
    fov.width = img.width() as usize;
    fov.height = img.height() as usize;
    prepare_out(out, cfg)?;
    let pyramid = build_pyramid(&img, &fov)?;
    let mut map = LevelMap::coarsest(&fov);
    for (i, &fix) in fixations.iter().enumerate() {
        map.apply(fix, &fov)?;
        let ret = RetImage::compose(&pyramid, &map);
        raster::save_rgb(out.join(format!("ret_{:02}.ppm", i + 1)), &ret.to_rgb8())?;
        raster::save_gray(out.join(format!("levels_{:02}.pgm", i + 1)), &ret.level_raster(fov.levels))?;
    }
    info!("wrote {} retina-transformed images to {}", fixations.len(), out.display());
    Ok(())
}

fn synth(cfg: &RunConfig, out: &Path, images: bool) -> Outcome {
    prepare_out(out, cfg)?;
    let (mut train, mut test) = gen_dataset(&cfg.synth, cfg.seed, &mut substream(cfg.seed, "synth-oracle"))?;
    if images {
        let dir = out.join("images");
        std::fs::create_dir_all(&dir)?;
        for m in [&mut train, &mut test] {
            for t in &mut m.trials {
                let name = format!("images/{}.ppm", t.image.reference.replace(':', "_"));
                if !out.join(&name).exists() {
                    raster::save_rgb(out.join(&name), &render_ref(&t.image.reference, &cfg.synth.scene)?)?;
                }
                t.image.reference = name;
            }
        }
    }
    train.save(out.join("train.json"))?;
    test.save(out.join("test.json"))?;
    info!("wrote {} training and {} test trials to {}", train.trials.len(), test.trials.len(), out.display());
    Ok(())
}

/// Image source resolving file references against the manifest's directory.
fn source_for(manifest: &Path, cfg: &RunConfig) -> ImageSource {
    let mut src = ImageSource::new(manifest.parent().map(Path::to_path_buf));
    src.scene = cfg.synth.scene;
    src
}

fn load(manifest: &Path) -> anyhow::Result<DatasetManifest> {
    load_manifest(manifest).with_context(|| format!("loading {}", manifest.display()))
}

fn train(cfg: &RunConfig, manifest: &Path, out: &Path) -> Outcome {
    let m = load(manifest)?;
    prepare_out(out, cfg)?;
    let (bundle, report, inputs) = train_on_manifest(&m, &source_for(manifest, cfg), cfg)?;
    for w in &inputs.warnings {
        warn!("{w}");
    }
    bundle.save(out.join("model.ckpt"))?;
    report.save(out)?;
    std::fs::write(
        out.join("train_inputs.json"),
        serde_json::to_string_pretty(&inputs).map_err(GazeError::from)? + "\n",
    )?;
    info!(
        "trained {} iterations on {} expert pairs; model at {}",
        report.iterations.len(),
        inputs.expert_pairs,
        out.join("model.ckpt").display()
    );
    Ok(())
}

fn category_id(m: &DatasetManifest, key: &str) -> anyhow::Result<u32> {
    m.categories
        .iter()
        .find(|c| c.name == key || c.id.to_string() == key)
        .map(|c| c.id)
        .with_context(|| format!("unknown category {key:?}"))
}

fn eval(
    cfg: &RunConfig,
    manifest: &Path,
    checkpoint: &Path,
    out: &Path,
    category: Option<&str>,
    maps: &[String],
) -> Outcome {
    let m = load(manifest)?;
    let v = m.validate();
    if !v.errors.is_empty() {
        return Err(GazeError::Validation(v.errors).into());
    }
    let category = category.map(|c| category_id(&m, c)).transpose().map_err(usage)?;
    let bundle = ModelBundle::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let env = bundle_env(cfg, &bundle, bundle_categories(&bundle))?;
    check_categories(&m, &env)?;
    prepare_out(out, cfg)?;
    let source = source_for(manifest, cfg);
    let report = evaluate(&env, &bundle.policy, &m, &source, &cfg.metrics, category, cfg.seed)?;
    for w in &report.warnings {
        warn!("{w}");
    }
    report.save(out, &m.categories)?;
    if !maps.is_empty() {
        let dir = out.join("saccade_maps");
        std::fs::create_dir_all(&dir)?;
        for id in maps {
            let trial: &SearchTrial = m
                .trials
                .iter()
                .find(|t| &t.trial_id == id)
                .with_context(|| format!("no trial {id:?}"))
                .map_err(usage)?;
            let map = first_saccade_map(&env, &bundle.policy, trial, &source)?;
            std::fs::write(dir.join(format!("{id}.csv")), map.to_csv())?;
            raster::save_gray(dir.join(format!("{id}.pgm")), &map.to_raster())?;
        }
    }
    for c in &report.categories {
        println!(
            "{:<10} fixated-in-6 model {:.3} human {:.3}  slope model {:.3} shuffled {:.3}  auc {:.3}  multimatch {:.3}",
            c.name, c.model.stats.fixated_in_6, c.human.stats.fixated_in_6, c.model.target_slope, c.model.shuffled_slope, c.auc_model, c.multimatch
        );
    }
    Ok(())
}

fn report(manifest: &Path, out: Option<&Path>) -> Outcome {
    let m = load(manifest)?;
    let rows = summary_table(&m);
    let text = format_summary(&rows);
    print!("{text}");
    if let Some(out) = out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("summary.txt"), &text)?;
        let mut csv = String::from("condition,category,trials,error_pct,mean_fixations,sd_fixations\n");
        for r in &rows {
            let f = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_default();
            csv.push_str(&format!(
                "{:?},{},{},{:.4},{},{}\n",
                r.condition,
                r.category,
                r.trials,
                r.error_pct,
                f(r.mean_fixations),
                f(r.sd_fixations)
            ));
        }
        std::fs::write(out.join("summary.csv"), csv)?;
    }
    Ok(())
}

fn validate(manifest: &Path) -> Outcome {
    let m = load(manifest)?;
    let v = m.validate();
    for w in &v.warnings {
        warn!("{w}");
    }
    if !v.errors.is_empty() {
        return Err(GazeError::Validation(v.errors).into());
    }
    let synthetic = m.trials.iter().filter(|t| parse_ref(&t.image.reference).is_some()).count();
    let split = match m.split {
        Split::Train => "train",
        Split::Test => "test",
    };
    println!(
        "{}: valid {split} manifest, {} trials ({synthetic} synthetic), {} categories",
        manifest.display(),
        m.trials.len(),
        m.categories.len()
    );
    if m.trials.is_empty() {
        warn!("manifest has no trials");
    }
    Ok(())
}
