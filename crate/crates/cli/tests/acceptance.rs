//! Acceptance run: one PASS/FAIL line per headline criterion.
//!
//! The end-to-end criteria drive the `gazeirl` binary on synthetic data with
//! a fixed seed and read its reports back.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use gazeirl::agent::PolicyNet;
use gazeirl::dataset::{load_manifest, Condition, ImageRef, SearchTrial, NUM_ACTIONS};
use gazeirl::gail::{compute_gae, ppo_gradients, ppo_update, PpoConfig, PpoSample, StepRecord, Trajectory};
use gazeirl::metrics::{
    auc, fdm, guidance_curve, multimatch, search_stats, sigma_px, subject_model_auc, AucConfig, Fdm,
};
use gazeirl::raster::RgbImage;
use gazeirl::retina::{build_pyramid, cumulative_foveate, foveate, FoveationConfig, LevelMap, RetImage};
use gazeirl_numerics::{
    forward, log_softmax, softmax, ConvSpec, LayerParams, NdArray, OptimState, ParamStore, Tape, RELU_GAIN,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const SEED: &str = "2024";
const W: usize = 512;
const H: usize = 320;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn noise_image(seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = RgbImage::new(W as u32, H as u32);
    for p in img.pixels_mut() {
        p.0 = [rng.random(), rng.random(), rng.random()];
    }
    img
}

fn random_point(rng: &mut impl Rng) -> (f32, f32) {
    (rng.random_range(0.0..W as f32), rng.random_range(0.0..H as f32))
}

/// Pixels whose centers lie strictly inside the 32×32 window around `f`.
fn window(f: (f32, f32)) -> impl Iterator<Item = usize> {
    let (x0, y0) = ((f.0 - 16.0).floor().max(0.0) as usize, (f.1 - 16.0).floor().max(0.0) as usize);
    let (x1, y1) = (((f.0 + 16.0).ceil() as usize).min(W), ((f.1 + 16.0).ceil() as usize).min(H));
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y))).filter_map(move |(x, y)| {
        let inside = ((x as f32 + 0.5) - f.0).abs() < 16.0 && ((y as f32 + 0.5) - f.1).abs() < 16.0;
        inside.then_some(y * W + x)
    })
}

fn foveation_suite() -> Check {
    let start = Instant::now();
    let cfg = FoveationConfig::default();
    let img = noise_image(1);
    let pyr = build_pyramid(&img, &cfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    for _ in 0..20 {
        let f = random_point(&mut rng);
        let r = foveate(&pyr, f, &cfg).map_err(|e| e.to_string())?;
        for i in window(f) {
            ensure(r.levels[i] == 0, format!("fixation {f:?}: pixel {i} not foveal"))?;
            for c in 0..3 {
                ensure(
                    r.pixels[i * 3 + c] == img.as_raw()[i * 3 + c] as f32,
                    format!("fixation {f:?}: pixel {i} altered"),
                )?;
            }
        }
        let mut by_dist: Vec<(f64, u8)> = (0..W * H)
            .step_by(29)
            .map(|i| {
                let (x, y) = ((i % W) as f64 + 0.5, (i / W) as f64 + 0.5);
                ((x - f.0 as f64).hypot(y - f.1 as f64), r.levels[i])
            })
            .collect();
        by_dist.sort_by(|a, b| a.0.total_cmp(&b.0));
        ensure(
            by_dist.windows(2).all(|w| w[0].1 <= w[1].1),
            format!("fixation {f:?}: level not monotone in eccentricity"),
        )?;
    }

    for seq in 0..100 {
        let n = rng.random_range(2..8);
        let fixes: Vec<(f32, f32)> = (0..n).map(|_| random_point(&mut rng)).collect();
        let mut map = LevelMap::coarsest(&cfg);
        let mut prev = map.levels();
        for &f in &fixes {
            map.apply(f, &cfg).map_err(|e| e.to_string())?;
            let cur = map.levels();
            ensure(cur.iter().zip(&prev).all(|(c, p)| c <= p), format!("sequence {seq}: a pixel got blurrier"))?;
            prev = cur;
        }
        let scratch = cumulative_foveate(&pyr, &fixes, &cfg).map_err(|e| e.to_string())?;
        ensure(RetImage::compose(&pyr, &map) == scratch, format!("sequence {seq}: incremental and direct differ"))?;
        for &f in &fixes {
            ensure(window(f).all(|i| scratch.levels[i] == 0), format!("sequence {seq}: fovea lost"))?;
        }
    }
    let t = start.elapsed();
    ensure(t < Duration::from_secs(60), format!("took {t:.1?}"))?;
    Ok(format!("fovea exact, eccentricity and cumulative monotone over 100 sequences in {t:.1?}"))
}

fn random_array(shape: &[usize], rng: &mut impl Rng) -> NdArray {
    let n = shape.iter().product();
    NdArray::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm(a).max(norm(b)).max(1e-12)
}

fn numerics_suite() -> Check {
    let start = Instant::now();
    let kinds: [(&str, Option<ConvSpec>, Vec<usize>); 5] = [
        ("dense", None, vec![7]),
        ("conv3x3", Some(ConvSpec::new(3, 1, 1)), vec![3, 10, 16]),
        ("conv1x1", Some(ConvSpec::new(1, 1, 0)), vec![3, 10, 16]),
        ("conv4s4", Some(ConvSpec::new(4, 4, 0)), vec![3, 16, 24]),
        ("conv2s2", Some(ConvSpec::new(2, 2, 0)), vec![3, 10, 16]),
    ];
    let step = 1e-3f32;
    let mut worst = 0.0f64;
    for (name, spec, in_shape) in kinds {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let layer = match spec {
                None => LayerParams::dense(in_shape[0], 4, 1.0, &mut rng),
                Some(spec) => LayerParams::conv2d(in_shape[0], 4, spec, RELU_GAIN, &mut rng),
            };
            let mut store = ParamStore::new();
            let handle = store.push_layer(name, layer);
            *store.get_mut(handle.bias) = random_array(&[4], &mut rng).map(|v| 0.1 * v);
            let x = random_array(&in_shape, &mut rng);
            let out_shape = forward(&store.layer(handle), &x).map_err(|e| e.to_string())?.shape().to_vec();
            let r = random_array(&out_shape, &mut rng);
            let loss = |s: &ParamStore| -> (Tape, gazeirl_numerics::Var) {
                let mut t = Tape::new();
                let xv = t.input(x.clone()).unwrap();
                let y = t.layer(s, handle, xv).unwrap();
                let y = t.softplus(y).unwrap();
                let rv = t.input(r.clone()).unwrap();
                let p = t.mul(y, rv).unwrap();
                let l = t.sum(p).unwrap();
                (t, l)
            };
            let (tape, root) = loss(&store);
            let grads = tape.backward(root, &store).map_err(|e| e.to_string())?;
            for id in 0..store.len() {
                let analytic: Vec<f64> = grads.get(id).data().iter().map(|&v| v as f64).collect();
                let mut numeric = vec![0.0f64; analytic.len()];
                for (k, slot) in numeric.iter_mut().enumerate() {
                    let orig = store.get(id).data()[k];
                    store.get_mut(id).data_mut()[k] = orig + step;
                    let (tp, lp) = loss(&store);
                    store.get_mut(id).data_mut()[k] = orig - step;
                    let (tm, lm) = loss(&store);
                    store.get_mut(id).data_mut()[k] = orig;
                    *slot = (tp.scalar(lp).unwrap() as f64 - tm.scalar(lm).unwrap() as f64) / (2.0 * step as f64);
                }
                let e = rel_err(&analytic, &numeric);
                worst = worst.max(e);
                ensure(e < 1e-3, format!("{name} seed {seed} {}: rel err {e:.2e}", store.name(id)))?;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let v: Vec<f32> = (0..NUM_ACTIONS).map(|_| rng.random_range(-20.0f32..20.0)).collect();
        let shift = rng.random_range(-50.0f32..50.0);
        let p = softmax(&NdArray::from_vec(v.clone())).map_err(|e| e.to_string())?;
        let q = softmax(&NdArray::from_vec(v.iter().map(|x| x + shift).collect())).map_err(|e| e.to_string())?;
        let total: f64 = p.data().iter().map(|&x| x as f64).sum();
        ensure((total - 1.0).abs() < 1e-6, format!("softmax sums to {total}"))?;
        let dev = p.data().iter().zip(q.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        ensure(dev < 1e-6, format!("shifted softmax differs by {dev:.2e}"))?;
        let l = log_softmax(&NdArray::from_vec(v)).map_err(|e| e.to_string())?;
        let lse: f64 = l.data().iter().map(|&x| (x as f64).exp()).sum();
        ensure((lse - 1.0).abs() < 1e-5, format!("exp(log_softmax) sums to {lse}"))?;
    }
    let t = start.elapsed();
    ensure(t < Duration::from_secs(60), format!("took {t:.1?}"))?;
    Ok(format!("worst gradient rel err {worst:.1e} over 5 layer kinds x 10 seeds; softmax within 1e-6; {t:.1?}"))
}

fn episode(rewards: &[f32], values: &[f32]) -> Trajectory {
    let n = rewards.len();
    let steps = (0..n)
        .map(|t| StepRecord {
            input: NdArray::zeros(&[1]),
            mask: None,
            action: 0,
            log_prob: 0.0,
            value: values[t],
            reward: Some(rewards[t]),
            done: t + 1 == n,
        })
        .collect();
    Trajectory { episode: 0, task: 0, category: 0, target_box: None, fixations: vec![], steps }
}

fn action_prob(policy: &PolicyNet, x: &NdArray, a: usize) -> f32 {
    let out = policy.forward_input(x).unwrap();
    softmax(&out.logits).unwrap().data()[a]
}

fn policy_input(rng: &mut impl Rng) -> NdArray {
    NdArray::new(vec![35, 10, 16], (0..35 * NUM_ACTIONS).map(|_| rng.random::<f32>()).collect()).unwrap()
}

fn gae_ppo_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=6);
        let r: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (g, l) = (rng.random::<f32>() as f64, rng.random::<f32>() as f64);
        let (adv, _) = compute_gae(&episode(&r, &v), g as f32, l as f32).map_err(|e| e.to_string())?;
        let val = |t: usize| if t < n { v[t] as f64 } else { 0.0 };
        for (t, &a) in adv.iter().enumerate() {
            let oracle: f64 =
                (t..n).map(|k| (g * l).powi((k - t) as i32) * (r[k] as f64 + g * val(k + 1) - val(k))).sum();
            worst = worst.max((a as f64 - oracle).abs());
        }
    }
    ensure(worst < 1e-6, format!("GAE deviates from the double sum by {worst:.2e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let policy = PolicyNet::new(35, 2, &mut rng);
    let x = policy_input(&mut rng);
    let lp = action_prob(&policy, &x, 3).ln();
    let cfg = PpoConfig { entropy_coef: 0.0, value_coef: 0.0, ..Default::default() };
    let clipped =
        [PpoSample { input: &x, mask: None, action: 3, old_log_prob: lp - 1.5f32.ln(), advantage: 2.0, ret: 0.0 }];
    let (grads, _) = ppo_gradients(&policy, &clipped, &cfg).map_err(|e| e.to_string())?;
    ensure(grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)), "clipped sample has a nonzero gradient")?;

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut policy = PolicyNet::new(35, 2, &mut rng);
    let x = policy_input(&mut rng);
    let cfg = PpoConfig { epochs: 1, ..Default::default() };
    let mut opt = OptimState::new(&policy.store, cfg.lr_policy);
    let mut probs = vec![action_prob(&policy, &x, 57)];
    for _ in 0..50 {
        let old = probs[probs.len() - 1].ln();
        let batch = [PpoSample { input: &x, mask: None, action: 57, old_log_prob: old, advantage: 1.0, ret: 0.0 }];
        ppo_update(&mut policy, &mut opt, &batch, &cfg, &mut rng).map_err(|e| e.to_string())?;
        probs.push(action_prob(&policy, &x, 57));
    }
    ensure(probs.windows(2).all(|w| w[1] > w[0]), "bandit probability dropped during an update")?;
    Ok(format!(
        "GAE max dev {worst:.1e} on 1000 episodes; clipped gradient exactly 0; bandit p {:.4} -> {:.4} over 50 updates",
        probs[0], probs[50]
    ))
}

fn trial(id: usize, image: &str, target: [f32; 4], points: &[(f32, f32)]) -> SearchTrial {
    SearchTrial {
        trial_id: format!("t{id}"),
        subject_id: format!("s{}", id % 4),
        image: ImageRef { reference: image.into(), width: W as u32, height: H as u32 },
        category_id: 0,
        condition: Condition::Tp,
        correct: true,
        target_box: Some(target),
        fixations: points.iter().map(|&(x, y)| [x, y, 250.0]).collect(),
        deg_per_px: None,
    }
}

fn metric_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for n in 2..9 {
        let s: Vec<(f32, f32)> = (0..n).map(|_| random_point(&mut rng)).collect();
        let m = multimatch(&s, &s, (W as f32, H as f32)).map_err(|e| e.to_string())?;
        ensure(m.mean == 1.0, format!("MultiMatch self-similarity {}", m.mean))?;
    }

    let uniform = Fdm { width: W, height: H, sigma_px: f64::INFINITY, data: vec![1.0 / (W * H) as f64; W * H] };
    let pos: Vec<(f32, f32)> = (0..50).map(|_| random_point(&mut rng)).collect();
    let cfg = AucConfig::default();
    let a_uniform = auc(&uniform, &pos, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).map_err(|e| e.to_string())?;
    ensure((a_uniform - 0.5).abs() <= 0.02, format!("uniform AUC {a_uniform}"))?;

    let fix: Vec<(f32, f32)> = (0..12).map(|_| random_point(&mut rng)).collect();
    let own = fdm(&fix, sigma_px(1.0, 54.0 / 512.0), W, H).map_err(|e| e.to_string())?;
    let a_self = auc(&own, &fix, &cfg, &mut rng).map_err(|e| e.to_string())?;
    ensure(a_self > 0.9, format!("self-prediction AUC {a_self}"))?;

    let target = [200.0, 100.0, 40.0, 40.0];
    for set in 0..1000 {
        let n = rng.random_range(1..20);
        let trials: Vec<SearchTrial> = (0..n)
            .map(|i| {
                let k = rng.random_range(1..8);
                let pts: Vec<(f32, f32)> = std::iter::once((256.0, 160.0))
                    .chain((0..k).map(|_| if rng.random_bool(0.2) { (220.0, 120.0) } else { random_point(&mut rng) }))
                    .collect();
                trial(i, &format!("i{}", i % 3), target, &pts)
            })
            .collect();
        let c = guidance_curve(&trials).map_err(|e| e.to_string())?.values;
        ensure(c.windows(2).all(|w| w[1] >= w[0]), format!("trial set {set}: curve {c:?} not monotone"))?;
    }

    let subjects: Vec<Vec<(f32, f32)>> = (0..5).map(|_| (0..6).map(|_| random_point(&mut rng)).collect()).collect();
    let sigma = 9.48;
    let got = subject_model_auc(&subjects, sigma, W, H, &cfg, 77).map_err(|e| e.to_string())?;
    let mut total = 0.0;
    for (i, own) in subjects.iter().enumerate() {
        let others: Vec<(f32, f32)> =
            subjects.iter().enumerate().filter(|(j, _)| *j != i).flat_map(|(_, s)| s.iter().copied()).collect();
        let map = fdm(&others, sigma, W, H).map_err(|e| e.to_string())?;
        let mut r = ChaCha8Rng::seed_from_u64(gazeirl::rng::indexed_seed(77, i as u64));
        total += auc(&map, own, &cfg, &mut r).map_err(|e| e.to_string())?;
    }
    let dev = (got - total / subjects.len() as f64).abs();
    ensure(dev < 1e-6, format!("subject model off by {dev:.2e}"))?;
    Ok(format!(
        "MultiMatch self 1.0; uniform AUC {a_uniform:.3}; self-prediction AUC {a_self:.3}; 1000 monotone curves; subject model dev {dev:.1e}"
    ))
}

/// Runs the CLI with the fixed seed and `extra` leading flags; fails on a nonzero exit.
fn gazeirl(extra: &[&str], args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_gazeirl"))
        .args(["--seed", SEED])
        .args(extra)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(
        out.status.success(),
        format!("gazeirl {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()),
    )
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

struct CategoryResult {
    name: String,
    fixated: f64,
    baseline: f64,
    slope: f64,
    shuffled_slope: f64,
}

fn read_eval(dir: &Path) -> Result<Vec<CategoryResult>, String> {
    let text = std::fs::read_to_string(dir.join("metrics.json")).map_err(|e| e.to_string())?;
    let v: Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let num = |v: &Value| v.as_f64().ok_or_else(|| format!("expected a number, got {v}"));
    v["categories"]
        .as_array()
        .ok_or("metrics.json has no categories")?
        .iter()
        .map(|c| {
            let m = &c["model"];
            let baseline = m["baseline"]["values"].as_array().and_then(|b| b.last()).ok_or("no baseline curve")?;
            Ok(CategoryResult {
                name: c["name"].as_str().unwrap_or("?").to_string(),
                fixated: num(&m["stats"]["fixated_in_6"])?,
                baseline: num(baseline)?,
                slope: num(&m["target_slope"])?,
                shuffled_slope: num(&m["shuffled_slope"])?,
            })
        })
        .collect()
}

struct EndToEnd {
    oracle_fixated: f64,
    trained: Vec<CategoryResult>,
    untrained: Vec<CategoryResult>,
    final_disc_accuracy: f64,
    elapsed: Duration,
}

fn run_end_to_end(root: &Path) -> Result<EndToEnd, String> {
    let start = Instant::now();
    let data = root.join("data");
    gazeirl(&[], &["synth", "--out", path(&data)])?;
    let train = load_manifest(data.join("train.json")).map_err(|e| e.to_string())?;
    let tp: Vec<SearchTrial> = train.trials.iter().filter(|t| t.condition == Condition::Tp).cloned().collect();
    ensure(tp.len() == 400, format!("{} training scenes", tp.len()))?;
    let oracle_fixated = search_stats(&tp, 100, 0).map_err(|e| e.to_string())?.fixated_in_6;

    let (train_json, test_json) = (data.join("train.json"), data.join("test.json"));
    let trained = root.join("train");
    gazeirl(&[], &["train", "--manifest", path(&train_json), "--out", path(&trained)])?;
    let eval = root.join("eval");
    let ckpt = trained.join("model.ckpt");
    gazeirl(&[], &["eval", "--manifest", path(&test_json), "--checkpoint", path(&ckpt), "--out", path(&eval)])?;

    let untrained = root.join("untrained");
    gazeirl(&[], &["train", "--manifest", path(&train_json), "--out", path(&untrained), "--iterations", "0"])?;
    let eval0 = root.join("eval0");
    let ckpt0 = untrained.join("model.ckpt");
    gazeirl(&[], &["eval", "--manifest", path(&test_json), "--checkpoint", path(&ckpt0), "--out", path(&eval0)])?;

    let report = std::fs::read_to_string(trained.join("train_report.csv")).map_err(|e| e.to_string())?;
    let mut lines = report.lines();
    let header: Vec<&str> = lines.next().ok_or("empty train report")?.split(',').collect();
    let col = header.iter().position(|h| *h == "disc_accuracy").ok_or("no disc_accuracy column")?;
    let acc: Vec<f64> = lines.map(|l| l.split(',').nth(col).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN)).collect();
    ensure(acc.len() >= 10, format!("{} training iterations", acc.len()))?;
    let last = &acc[acc.len() - 10..];
    Ok(EndToEnd {
        oracle_fixated,
        trained: read_eval(&eval)?,
        untrained: read_eval(&eval0)?,
        final_disc_accuracy: last.iter().sum::<f64>() / 10.0,
        elapsed: start.elapsed(),
    })
}

fn end_to_end(e: &EndToEnd) -> Check {
    let mut notes = vec![format!("oracle {:.3}", e.oracle_fixated)];
    let mut failures = Vec::new();
    if e.oracle_fixated < 0.95 {
        failures.push(format!("oracle fixated-in-6 {:.3} < 0.95", e.oracle_fixated));
    }
    for (c, u) in e.trained.iter().zip(&e.untrained) {
        notes.push(format!(
            "{}: trained {:.3}, slope {:.4} vs shuffled {:.4}, untrained {:.3}",
            c.name, c.fixated, c.slope, c.shuffled_slope, u.fixated
        ));
        if c.fixated < 0.60 {
            failures.push(format!("{} trained fixated-in-6 {:.3} < 0.60", c.name, c.fixated));
        }
        if c.slope < 3.0 * c.shuffled_slope {
            failures.push(format!("{} slope {:.4} < 3x shuffled {:.4}", c.name, c.slope, c.shuffled_slope));
        }
        if u.fixated > 0.15 {
            failures.push(format!("{} untrained fixated-in-6 {:.3} > 0.15", u.name, u.fixated));
        }
    }
    notes.push(format!("disc accuracy {:.3}", e.final_disc_accuracy));
    if (e.final_disc_accuracy - 0.5).abs() > 0.15 {
        failures.push(format!("final discriminator accuracy {:.3} outside 0.5 +/- 0.15", e.final_disc_accuracy));
    }
    if e.trained.len() != 2 || e.untrained.len() != 2 {
        failures.push("expected two categories".into());
    }
    notes.push(format!("{:.0?}", e.elapsed));
    if failures.is_empty() {
        Ok(notes.join("; "))
    } else {
        Err(failures.join("; "))
    }
}

fn category_specificity(e: &EndToEnd) -> Check {
    let mut notes = Vec::new();
    for c in &e.trained {
        notes.push(format!("{}: target {:.3} vs other object {:.3}", c.name, c.fixated, c.baseline));
        ensure(
            c.fixated >= 2.0 * c.baseline,
            format!("{}: target {:.3} < 2x other object {:.3}", c.name, c.fixated, c.baseline),
        )?;
    }
    ensure(e.trained.len() == 2, "expected two categories")?;
    Ok(notes.join("; "))
}

fn read_tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// A short synth, train, eval and report run in `root` with `jobs` worker threads.
fn small_run(root: &Path, jobs: &str) -> Result<(), String> {
    let data = root.join("data");
    let (train, test) = (data.join("train.json"), data.join("test.json"));
    let model = root.join("train");
    let ckpt = model.join("model.ckpt");
    let flags = ["--jobs", jobs, "--set", "synth_train=24", "--set", "synth_test=6"];
    gazeirl(&flags, &["synth", "--out", path(&data)])?;
    gazeirl(
        &flags,
        &["train", "--manifest", path(&train), "--out", path(&model), "--iterations", "3", "--episodes", "8"],
    )?;
    gazeirl(
        &flags,
        &[
            "eval",
            "--manifest",
            path(&test),
            "--checkpoint",
            path(&ckpt),
            "--out",
            path(&root.join("eval")),
            "--maps",
            "test00000c0s0",
        ],
    )?;
    gazeirl(&flags, &["report", "--manifest", path(&test), "--out", path(&root.join("report"))])
}

fn determinism(root: &Path) -> Check {
    let runs = [("a", "1"), ("b", "1"), ("c", "3")];
    let mut trees = Vec::new();
    for (name, jobs) in runs {
        let dir = root.join(name);
        small_run(&dir, jobs)?;
        trees.push(read_tree(&dir));
    }
    let files = trees[0].len();
    ensure(files >= 10, format!("only {files} output files"))?;
    for (i, t) in trees.iter().enumerate().skip(1) {
        ensure(t.keys().eq(trees[0].keys()), format!("run {i} wrote different files"))?;
        for (p, bytes) in t {
            ensure(trees[0][p] == *bytes, format!("run {i}: {} differs", p.display()))?;
        }
    }
    Ok(format!("{files} files byte-identical across 3 runs (1, 1 and 3 threads)"))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut failed = 0;
    let mut report = |name: &str, r: Check| match r {
        Ok(msg) => println!("PASS {name}: {msg}"),
        Err(msg) => {
            failed += 1;
            println!("FAIL {name}: {msg}");
        }
    };
    report("foveation suite", foveation_suite());
    report("numerics suite", numerics_suite());
    report("GAE/PPO oracle equivalence", gae_ppo_suite());
    report("metric oracles", metric_suite());
    match run_end_to_end(&tmp.path().join("e2e")) {
        Ok(e) => {
            report("end-to-end synthetic imitation", end_to_end(&e));
            report("category specificity", category_specificity(&e));
        }
        Err(msg) => {
            report("end-to-end synthetic imitation", Err(msg.clone()));
            report("category specificity", Err(msg));
        }
    }
    report("determinism", determinism(&tmp.path().join("det")));
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
