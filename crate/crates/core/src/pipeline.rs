//! End-to-end runs: training from a manifest and scoring a policy's
//! scanpaths against recorded ones. Randomness comes from named substreams
//! of one root seed.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{saccade_map, Discriminator, PolicyNet, SaccadeMap};
use crate::config::{MetricConfig, RunConfig};
use crate::dataset::{export_expert_pairs, filter_training};
use crate::dataset::{to_canvas_box, Condition, DatasetManifest, ImageRef, SearchTrial, CANVAS_H, CANVAS_W, MAX_STEPS};
use crate::error::{GazeError, Result};
use crate::gail::{encode_expert_pairs, run_tasks, train, ModelBundle, SearchTask, TrainReport, Trajectory};
use crate::metrics::{
    auc, fdm, fit_slope, guidance_curve, multimatch, object_baseline_curve, other_category_boxes, search_stats,
    sigma_px, subject_model_auc, GuidanceCurve, SearchStats,
};
use crate::raster::ImageSource;
use crate::rng::{indexed_seed, substream, substream_seed};
use crate::search_env::{EnvConfig, Extractor, SearchEnv};

/// Subject id given to generated scanpaths.
pub const MODEL_SUBJECT: &str = "model";

/// Freshly initialized networks for `num_categories` categories.
pub fn init_bundle(cfg: &RunConfig, num_categories: usize, seed: u64) -> ModelBundle {
    let env_cfg = EnvConfig { num_categories, ..cfg.env.clone() };
    let extractor = Extractor::new(env_cfg.feature_channels, &mut substream(seed, "extractor-init"));
    let mut rng = substream(seed, "policy-init");
    let policy = PolicyNet::new(env_cfg.policy_channels(), num_categories, &mut rng);
    let disc = Discriminator::new(env_cfg.policy_channels(), num_categories, &mut rng);
    ModelBundle { extractor, policy, disc }
}

/// Environment around a bundle's extractor; fails when the networks do not
/// fit `num_categories`.
pub fn bundle_env(cfg: &RunConfig, bundle: &ModelBundle, num_categories: usize) -> Result<SearchEnv> {
    let env_cfg = EnvConfig { num_categories, feature_channels: bundle.extractor.channels(), ..cfg.env.clone() };
    if bundle.policy.in_channels() != env_cfg.policy_channels() {
        return Err(GazeError::Validation(vec![format!(
            "checkpoint expects {} input channels but {} categories give {}",
            bundle.policy.in_channels(),
            num_categories,
            env_cfg.policy_channels()
        )]));
    }
    SearchEnv::new(env_cfg, bundle.extractor.clone())
}

/// Counts of what went into a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainInputs {
    pub trials: usize,
    pub kept_trials: usize,
    pub expert_pairs: usize,
    pub tasks: usize,
    pub warnings: Vec<String>,
}

/// Trains on the correct trials of `manifest`: expert pairs from every kept
/// trial, rollout tasks from every kept trial's image and category.
pub fn train_on_manifest(
    manifest: &DatasetManifest,
    source: &ImageSource,
    cfg: &RunConfig,
) -> Result<(ModelBundle, TrainReport, TrainInputs)> {
    let report = manifest.validate();
    if !report.errors.is_empty() {
        return Err(GazeError::Validation(report.errors));
    }
    let num_categories = category_count(manifest);
    let kept = filter_training(manifest, &cfg.filter);
    let missing: Vec<String> = manifest
        .categories
        .iter()
        .filter(|c| !kept.trials.iter().any(|t| t.category_id == c.id))
        .map(|c| format!("category {} ({}) has no usable training trial", c.id, c.name))
        .collect();
    if !missing.is_empty() {
        return Err(GazeError::Validation(missing));
    }
    let (pairs, mut warnings) = export_expert_pairs(&kept)?;
    warnings.splice(0..0, report.warnings);
    let bundle = init_bundle(cfg, num_categories, cfg.seed);
    let env = bundle_env(cfg, &bundle, num_categories)?;
    let expert = encode_expert_pairs(&env, &pairs, &|r| source.load(r))?;
    let (tasks, _) = tasks_for(&kept, source, false)?;
    let inputs = TrainInputs {
        trials: manifest.trials.len(),
        kept_trials: kept.trials.len(),
        expert_pairs: expert.len(),
        tasks: tasks.len(),
        warnings,
    };
    let ModelBundle { extractor, policy, disc } = bundle;
    let (policy, disc, report) =
        train(&env, &expert, &tasks, &cfg.ppo, policy, disc, substream_seed(cfg.seed, "train"))?;
    Ok((ModelBundle { extractor, policy, disc }, report, inputs))
}

/// Target-present tasks of `manifest`, one per trial, with images loaded once
/// per reference.
pub fn tasks_for(
    manifest: &DatasetManifest,
    source: &ImageSource,
    tp_only: bool,
) -> Result<(Vec<SearchTask>, Vec<usize>)> {
    let mut cache: BTreeMap<&str, Arc<crate::raster::RgbImage>> = BTreeMap::new();
    let mut tasks = Vec::new();
    let mut index = Vec::new();
    for (i, t) in manifest.trials.iter().enumerate() {
        if tp_only && (t.condition != Condition::Tp || t.target_box.is_none()) {
            continue;
        }
        let image = match cache.get(t.image.reference.as_str()) {
            Some(img) => img.clone(),
            None => {
                let img = Arc::new(source.load(&t.image.reference)?);
                cache.insert(&t.image.reference, img.clone());
                img
            }
        };
        tasks.push(SearchTask { image, category: t.category_id as usize, target_box: t.canvas_box() });
        index.push(i);
    }
    Ok((tasks, index))
}

/// A generated episode as a trial on the 512×320 canvas.
pub fn trajectory_trial(traj: &Trajectory, like: &SearchTrial) -> SearchTrial {
    SearchTrial {
        trial_id: like.trial_id.clone(),
        subject_id: MODEL_SUBJECT.into(),
        image: ImageRef { reference: like.image.reference.clone(), width: CANVAS_W as u32, height: CANVAS_H as u32 },
        category_id: like.category_id,
        condition: like.condition,
        correct: true,
        target_box: traj.target_box,
        fixations: traj.fixations.iter().map(|&(x, y)| [x, y, 0.0]).collect(),
        deg_per_px: None,
    }
}

/// A recorded trial rescaled to the canvas.
pub fn canvas_trial(t: &SearchTrial) -> SearchTrial {
    let mut c = t.clone();
    c.fixations = (0..t.fixations.len())
        .map(|i| {
            let (x, y) = t.canvas_point(i);
            [x, y, t.fixations[i][2]]
        })
        .collect();
    c.target_box = t.target_box.map(|b| to_canvas_box(&b, t.image.width, t.image.height));
    c.image.width = CANVAS_W as u32;
    c.image.height = CANVAS_H as u32;
    c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSummary {
    pub target: GuidanceCurve,
    pub target_slope: f64,
    /// Guidance to the other category's object, when it is annotated.
    pub baseline: Option<GuidanceCurve>,
    pub baseline_slope: Option<f64>,
    pub stats: SearchStats,
    pub shuffled_slope: f64,
}

fn summarize(trials: &[SearchTrial], cfg: &MetricConfig, seed: u64) -> Result<GuidanceSummary> {
    let target = guidance_curve(trials)?;
    let others = other_category_boxes(trials);
    let baseline =
        if others.iter().all(Option::is_some) { Some(object_baseline_curve(trials, &others)?) } else { None };
    let stats = search_stats(trials, cfg.permutations, seed)?;
    Ok(GuidanceSummary {
        target_slope: target.slope(),
        baseline_slope: baseline.as_ref().map(GuidanceCurve::slope),
        target,
        baseline,
        shuffled_slope: fit_slope(&stats.shuffled_curve)?,
        stats,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryEval {
    pub category: u32,
    pub name: String,
    pub model: GuidanceSummary,
    pub human: GuidanceSummary,
    pub auc_model: f64,
    /// Leave-one-out human agreement; absent with fewer than two subjects.
    pub auc_subject: Option<f64>,
    pub multimatch: f64,
}

/// One row of the per-image table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub image: String,
    pub category: u32,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub fdm_sigma_px: f64,
    pub auc_variant: crate::metrics::AucVariant,
    pub auc_negatives: usize,
    pub categories: Vec<CategoryEval>,
    pub rows: Vec<MetricRow>,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub model_trials: Vec<SearchTrial>,
}

impl EvalReport {
    pub fn rows_csv(&self) -> String {
        let mut out = format!("# fdm_sigma_px={:.4}\nimage,category,metric,value\n", self.fdm_sigma_px);
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{:.6}\n", r.image, r.category, r.metric, r.value));
        }
        out
    }

    pub fn curves_csv(&self) -> String {
        let mut out = String::from("source,category,curve,saccade,probability\n");
        for c in &self.categories {
            for (src, g) in [("model", &c.model), ("human", &c.human)] {
                let mut curves = vec![("target", &g.target.values), ("shuffled", &g.stats.shuffled_curve)];
                if let Some(b) = &g.baseline {
                    curves.push(("baseline", &b.values));
                }
                for (name, v) in curves {
                    for (k, p) in v.iter().enumerate() {
                        out.push_str(&format!("{src},{},{name},{},{p:.6}\n", c.name, k + 1));
                    }
                }
            }
        }
        out
    }

    pub fn save(&self, dir: impl AsRef<Path>, categories: &[crate::dataset::Category]) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::write(dir.join("metrics.csv"), self.rows_csv())?;
        std::fs::write(dir.join("curves.csv"), self.curves_csv())?;
        std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(self)? + "\n")?;
        let mut m = DatasetManifest::new(categories.to_vec(), crate::dataset::Split::Test, self.model_trials.clone());
        m.trials.sort_by(|a, b| a.trial_id.cmp(&b.trial_id));
        m.save(dir.join("model_scanpaths.json"))
    }
}

/// Samples one model scanpath per target-present trial and computes every
/// metric per category and per image.
pub fn evaluate(
    env: &SearchEnv,
    policy: &PolicyNet,
    manifest: &DatasetManifest,
    source: &ImageSource,
    cfg: &MetricConfig,
    category: Option<u32>,
    seed: u64,
) -> Result<EvalReport> {
    let sigma = sigma_px(cfg.fdm_sigma_deg, env.cfg.foveation.deg_per_px as f64);
    let mut report = EvalReport {
        seed,
        fdm_sigma_px: sigma,
        auc_variant: cfg.auc.variant,
        auc_negatives: cfg.auc.negatives,
        categories: Vec::new(),
        rows: Vec::new(),
        warnings: Vec::new(),
        model_trials: Vec::new(),
    };
    let mut selected = manifest.clone();
    selected.trials.retain(|t| category.is_none_or(|c| t.category_id == c));
    let (tasks, index) = tasks_for(&selected, source, true)?;
    if tasks.is_empty() {
        report.warnings.push("no target-present trials to evaluate".into());
        return Ok(report);
    }
    let trajs = run_tasks(env, policy, &tasks, substream_seed(seed, "eval"), cfg.action_mode)?;
    let human: Vec<SearchTrial> = index.iter().map(|&i| canvas_trial(&selected.trials[i])).collect();
    let model: Vec<SearchTrial> = trajs.iter().zip(&human).map(|(t, h)| trajectory_trial(t, h)).collect();

    let cats: Vec<u32> = {
        let mut c: Vec<u32> = human.iter().map(|t| t.category_id).collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    for (ci, &c) in cats.iter().enumerate() {
        let pick = |v: &[SearchTrial]| v.iter().filter(|t| t.category_id == c).cloned().collect::<Vec<_>>();
        let (h, m) = (pick(&human), pick(&model));
        // baselines need both categories; take them from the whole set
        let baseline_of = |all: &[SearchTrial], own: &[SearchTrial]| -> Result<Option<GuidanceCurve>> {
            let others = other_category_boxes(all);
            let mine: Vec<_> = all.iter().zip(others).filter(|(t, _)| t.category_id == c).map(|(_, b)| b).collect();
            if mine.iter().all(Option::is_some) {
                Ok(Some(object_baseline_curve(own, &mine)?))
            } else {
                Ok(None)
            }
        };
        let cseed = indexed_seed(substream_seed(seed, "metrics"), ci as u64);
        let mut ms = summarize(&m, cfg, cseed)?;
        ms.baseline = baseline_of(&model, &m)?;
        ms.baseline_slope = ms.baseline.as_ref().map(GuidanceCurve::slope);
        let mut hs = summarize(&h, cfg, cseed)?;
        hs.baseline = baseline_of(&human, &h)?;
        hs.baseline_slope = hs.baseline.as_ref().map(GuidanceCurve::slope);

        let rows = image_rows(&h, &m, c, sigma, cfg, cseed)?;
        let mean_of = |name: &str| {
            let v: Vec<f64> = rows.iter().filter(|r| r.metric == name).map(|r| r.value).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        report.categories.push(CategoryEval {
            category: c,
            name: manifest.category_name(c).unwrap_or("?").to_string(),
            model: ms,
            human: hs,
            auc_model: mean_of("auc_model").unwrap_or(f64::NAN),
            auc_subject: mean_of("auc_subject"),
            multimatch: mean_of("multimatch").unwrap_or(f64::NAN),
        });
        report.rows.extend(rows);
    }
    report.model_trials = model;
    Ok(report)
}

fn image_rows(
    human: &[SearchTrial],
    model: &[SearchTrial],
    category: u32,
    sigma: f64,
    cfg: &MetricConfig,
    seed: u64,
) -> Result<Vec<MetricRow>> {
    let mut by_image: BTreeMap<&str, (Vec<&SearchTrial>, Vec<&SearchTrial>)> = BTreeMap::new();
    for (h, m) in human.iter().zip(model) {
        let e = by_image.entry(h.image.reference.as_str()).or_default();
        e.0.push(h);
        e.1.push(m);
    }
    let groups: Vec<_> = by_image.into_iter().collect();
    let rows: Vec<Vec<MetricRow>> = groups
        .par_iter()
        .enumerate()
        .map(|(gi, (image, (hs, ms)))| {
            let mut rows = Vec::new();
            let row = |metric: &str, value: f64| MetricRow {
                image: image.to_string(),
                category,
                metric: metric.into(),
                value,
            };
            let search = |t: &SearchTrial| -> Vec<(f32, f32)> { t.points().skip(1).take(MAX_STEPS).collect() };
            let human_fix: Vec<(f32, f32)> = hs.iter().flat_map(|t| search(t)).collect();
            let model_fix: Vec<(f32, f32)> = ms.iter().flat_map(|t| search(t)).collect();
            let gseed = indexed_seed(seed, gi as u64);
            if !human_fix.is_empty() && !model_fix.is_empty() {
                let map = fdm(&model_fix, sigma, CANVAS_W, CANVAS_H)?;
                let mut rng = ChaCha8Rng::seed_from_u64(gseed);
                rows.push(row("auc_model", auc(&map, &human_fix, &cfg.auc, &mut rng)?));
            }
            let per_subject: Vec<Vec<(f32, f32)>> = hs.iter().map(|t| search(t)).filter(|f| !f.is_empty()).collect();
            if per_subject.len() >= 2 {
                rows.push(row(
                    "auc_subject",
                    subject_model_auc(&per_subject, sigma, CANVAS_W, CANVAS_H, &cfg.auc, gseed)?,
                ));
            }
            let mut mm = Vec::new();
            for m in ms {
                let mp: Vec<(f32, f32)> = m.points().take(MAX_STEPS + 1).collect();
                for h in hs {
                    let hp: Vec<(f32, f32)> = h.points().take(MAX_STEPS + 1).collect();
                    if hp.len() >= 2 && mp.len() >= 2 {
                        mm.push(multimatch(&mp, &hp, (CANVAS_W as f32, CANVAS_H as f32))?.mean);
                    }
                }
            }
            if !mm.is_empty() {
                rows.push(row("multimatch", mm.iter().sum::<f64>() / mm.len() as f64));
            }
            let hit = |ts: &[&SearchTrial]| {
                ts.iter()
                    .filter(|t| {
                        crate::metrics::first_entry(&t.points().collect::<Vec<_>>(), &t.target_box.expect("TP trials"))
                            .is_some()
                    })
                    .count() as f64
                    / ts.len() as f64
            };
            rows.push(row("fixated_in_6_model", hit(ms)));
            rows.push(row("fixated_in_6_human", hit(hs)));
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().flatten().collect())
}

/// Saccade map of the first decision on `trial`.
pub fn first_saccade_map(
    env: &SearchEnv,
    policy: &PolicyNet,
    trial: &SearchTrial,
    source: &ImageSource,
) -> Result<SaccadeMap> {
    let image = source.load(&trial.image.reference)?;
    let (_, state) = env.reset(image, trial.category_id as usize, None)?;
    saccade_map(&policy.forward(&state)?)
}

/// Grid planes needed for the manifest's category ids.
pub fn category_count(manifest: &DatasetManifest) -> usize {
    manifest.categories.iter().map(|c| c.id as usize + 1).max().unwrap_or(0)
}

/// Categories a bundle was trained for.
pub fn bundle_categories(bundle: &ModelBundle) -> usize {
    bundle.policy.num_categories()
}

/// Ensures the manifest's categories fit the environment.
pub fn check_categories(manifest: &DatasetManifest, env: &SearchEnv) -> Result<()> {
    let bad: Vec<String> = manifest
        .trials
        .iter()
        .filter(|t| t.category_id as usize >= env.cfg.num_categories)
        .map(|t| {
            format!("trial {}: category {} but the model knows {}", t.trial_id, t.category_id, env.cfg.num_categories)
        })
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(GazeError::Validation(bad))
    }
}
