//! Gaze metrics: fixation density maps, AUC, the leave-one-out subject
//! model, MultiMatch scanpath similarity, target-guidance curves and
//! summary search statistics.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{box_contains, BoxPx, Condition, DatasetManifest, SearchTrial, MAX_STEPS};
use crate::error::{GazeError, Result};
use crate::raster::GrayImage;
use crate::rng::indexed_seed;

/// FDM bandwidth for `sigma_deg` degrees at `deg_per_px`.
pub fn sigma_px(sigma_deg: f64, deg_per_px: f64) -> f64 {
    sigma_deg / deg_per_px
}

/// Normalized fixation density on a pixel raster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fdm {
    pub width: usize,
    pub height: usize,
    pub sigma_px: f64,
    /// Row-major, sums to 1.
    pub data: Vec<f64>,
}

impl Fdm {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Value at the pixel holding point `(x, y)`.
    pub fn at_point(&self, x: f32, y: f32) -> Option<f64> {
        let (px, py) = (x.floor(), y.floor());
        (px >= 0.0 && py >= 0.0 && (px as usize) < self.width && (py as usize) < self.height)
            .then(|| self.at(px as usize, py as usize))
    }

    pub fn argmax(&self) -> (usize, usize) {
        let i = self.data.iter().enumerate().fold(0, |b, (i, &v)| if v > self.data[b] { i } else { b });
        (i % self.width, i / self.width)
    }

    /// Density scaled to the raster's full range.
    pub fn to_raster(&self) -> GrayImage {
        let max = self.data.iter().cloned().fold(f64::MIN_POSITIVE, f64::max);
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([(self.at(x as usize, y as usize) / max * 255.0).round() as u8])
        })
    }
}

/// Sum of isotropic Gaussians centred on the fixations, normalized to 1.
pub fn fdm(fixations: &[(f32, f32)], sigma_px: f64, width: usize, height: usize) -> Result<Fdm> {
    if fixations.is_empty() {
        return Err(GazeError::invalid("density map needs at least one fixation"));
    }
    if !(sigma_px > 0.0 && sigma_px.is_finite()) || width == 0 || height == 0 {
        return Err(GazeError::invalid(format!("bad density map parameters: sigma {sigma_px}, {width}x{height}")));
    }
    let mut data = vec![0.0f64; width * height];
    let k = -0.5 / (sigma_px * sigma_px);
    for &(fx, fy) in fixations {
        let gx: Vec<f64> = (0..width).map(|x| ((x as f64 + 0.5 - fx as f64).powi(2) * k).exp()).collect();
        for y in 0..height {
            let gy = ((y as f64 + 0.5 - fy as f64).powi(2) * k).exp();
            if gy == 0.0 {
                continue;
            }
            for (d, g) in data[y * width..][..width].iter_mut().zip(&gx) {
                *d += gy * g;
            }
        }
    }
    let total: f64 = data.iter().sum();
    if !(total > 0.0) {
        return Err(GazeError::invalid("density underflowed; fixations lie far outside the raster"));
    }
    data.iter_mut().for_each(|v| *v /= total);
    Ok(Fdm { width, height, sigma_px, data })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AucVariant {
    /// Positives against uniformly sampled non-fixated pixels.
    Uniform,
    /// ROC with one threshold per fixation, false positives over every
    /// non-fixated pixel.
    Judd,
}

impl std::str::FromStr for AucVariant {
    type Err = GazeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "judd" => Ok(Self::Judd),
            _ => Err(GazeError::Config(format!("unknown AUC variant {s:?} (uniform, judd)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucConfig {
    pub variant: AucVariant,
    pub negatives: usize,
}

impl Default for AucConfig {
    fn default() -> Self {
        Self { variant: AucVariant::Uniform, negatives: 10_000 }
    }
}

fn positive_values(map: &Fdm, positives: &[(f32, f32)]) -> Result<(Vec<f64>, Vec<bool>)> {
    if positives.is_empty() {
        return Err(GazeError::invalid("AUC needs at least one positive fixation"));
    }
    let mut fixated = vec![false; map.data.len()];
    let mut values = Vec::with_capacity(positives.len());
    for &(x, y) in positives {
        let v = map.at_point(x, y).ok_or_else(|| GazeError::invalid(format!("fixation ({x}, {y}) outside the map")))?;
        fixated[y.floor() as usize * map.width + x.floor() as usize] = true;
        values.push(v);
    }
    Ok((values, fixated))
}

/// Area under the ROC curve of `map` as a predictor of `positives`; ties
/// count one half.
pub fn auc(map: &Fdm, positives: &[(f32, f32)], cfg: &AucConfig, rng: &mut impl Rng) -> Result<f64> {
    let (pos, fixated) = positive_values(map, positives)?;
    match cfg.variant {
        AucVariant::Uniform => {
            if cfg.negatives == 0 {
                return Err(GazeError::Config("AUC needs at least one negative sample".into()));
            }
            if fixated.iter().all(|&f| f) {
                return Err(GazeError::invalid("every pixel is fixated; no negatives to sample"));
            }
            let mut neg = Vec::with_capacity(cfg.negatives);
            while neg.len() < cfg.negatives {
                let i = rng.random_range(0..map.data.len());
                if !fixated[i] {
                    neg.push(map.data[i]);
                }
            }
            neg.sort_by(f64::total_cmp);
            let n = neg.len() as f64;
            let score: f64 = pos
                .iter()
                .map(|&p| {
                    let below = neg.partition_point(|&v| v < p);
                    let not_above = neg.partition_point(|&v| v <= p);
                    below as f64 + 0.5 * (not_above - below) as f64
                })
                .sum();
            Ok(score / (n * pos.len() as f64))
        }
        AucVariant::Judd => {
            let mut neg: Vec<f64> = map.data.iter().zip(&fixated).filter(|(_, &f)| !f).map(|(&v, _)| v).collect();
            if neg.is_empty() {
                return Err(GazeError::invalid("every pixel is fixated; no negatives"));
            }
            neg.sort_by(f64::total_cmp);
            let mut thresholds = pos.clone();
            thresholds.sort_by(|a, b| b.total_cmp(a));
            thresholds.dedup();
            let (np, nn) = (pos.len() as f64, neg.len() as f64);
            let mut pts = vec![(0.0f64, 0.0f64)];
            for &t in &thresholds {
                let tp = pos.iter().filter(|&&p| p >= t).count() as f64 / np;
                let fp = (neg.len() - neg.partition_point(|&v| v < t)) as f64 / nn;
                pts.push((fp, tp));
            }
            pts.push((1.0, 1.0));
            Ok(pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum())
        }
    }
}

/// Mean leave-one-out AUC: each subject's fixations against the density of
/// all other subjects. Subject `i` draws negatives from seed
/// `indexed_seed(seed, i)`.
pub fn subject_model_auc(
    per_subject: &[Vec<(f32, f32)>],
    sigma_px: f64,
    width: usize,
    height: usize,
    cfg: &AucConfig,
    seed: u64,
) -> Result<f64> {
    if per_subject.len() < 2 {
        return Err(GazeError::invalid("the subject model needs at least two subjects"));
    }
    let mut total = 0.0;
    for (i, own) in per_subject.iter().enumerate() {
        let others: Vec<(f32, f32)> =
            per_subject.iter().enumerate().filter(|&(j, _)| j != i).flat_map(|(_, f)| f.iter().copied()).collect();
        let map = fdm(&others, sigma_px, width, height)?;
        let mut rng = ChaCha8Rng::seed_from_u64(indexed_seed(seed, i as u64));
        total += auc(&map, own, cfg, &mut rng)?;
    }
    Ok(total / per_subject.len() as f64)
}

/// The four spatial MultiMatch components and their mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiMatch {
    pub shape: f64,
    pub direction: f64,
    pub length: f64,
    pub position: f64,
    pub mean: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

type Saccade = ((f64, f64), (f64, f64));

fn saccades(path: &[(f32, f32)]) -> Vec<Saccade> {
    path.windows(2)
        .map(|w| {
            let s = (w[0].0 as f64, w[0].1 as f64);
            (s, (w[1].0 as f64 - s.0, w[1].1 as f64 - s.1))
        })
        .collect()
}

/// Saccade pairs on the cheapest monotone path through the vector-difference
/// matrix; diagonal moves win ties.
fn align(a: &[Saccade], b: &[Saccade]) -> Vec<(usize, usize)> {
    let (n, m) = (a.len(), b.len());
    let cost = |i: usize, j: usize| {
        let (u, v) = (a[i].1, b[j].1);
        (u.0 - v.0).hypot(u.1 - v.1)
    };
    let mut acc = vec![f64::INFINITY; n * m];
    for i in 0..n {
        for j in 0..m {
            let prev = if i == 0 && j == 0 {
                0.0
            } else {
                let d = if i > 0 && j > 0 { acc[(i - 1) * m + j - 1] } else { f64::INFINITY };
                let up = if i > 0 { acc[(i - 1) * m + j] } else { f64::INFINITY };
                let left = if j > 0 { acc[i * m + j - 1] } else { f64::INFINITY };
                d.min(up).min(left)
            };
            acc[i * m + j] = prev + cost(i, j);
        }
    }
    let (mut i, mut j) = (n - 1, m - 1);
    let mut path = vec![(i, j)];
    while i > 0 || j > 0 {
        let d = if i > 0 && j > 0 { acc[(i - 1) * m + j - 1] } else { f64::INFINITY };
        let up = if i > 0 { acc[(i - 1) * m + j] } else { f64::INFINITY };
        let left = if j > 0 { acc[i * m + j - 1] } else { f64::INFINITY };
        if d <= up && d <= left {
            i -= 1;
            j -= 1;
        } else if up < left {
            i -= 1;
        } else if left < up {
            j -= 1;
        } else {
            // equal off-diagonal costs: step along the longer remaining side
            if i >= j {
                i -= 1;
            } else {
                j -= 1;
            }
        }
        path.push((i, j));
    }
    path.reverse();
    path
}

/// Spatial MultiMatch similarity of two scanpaths on a `screen` of the
/// given width and height. Durations are ignored.
pub fn multimatch(a: &[(f32, f32)], b: &[(f32, f32)], screen: (f32, f32)) -> Result<MultiMatch> {
    if a.len() < 2 || b.len() < 2 {
        return Err(GazeError::invalid("MultiMatch needs scanpaths of at least two fixations"));
    }
    let diag = (screen.0 as f64).hypot(screen.1 as f64);
    let (sa, sb) = (saccades(a), saccades(b));
    let path = align(&sa, &sb);
    let mut shape = Vec::new();
    let mut direction = Vec::new();
    let mut length = Vec::new();
    let mut position = Vec::new();
    for &(i, j) in &path {
        let ((p, u), (q, v)) = (sa[i], sb[j]);
        shape.push((u.0 - v.0).hypot(u.1 - v.1));
        direction.push((u.0 * v.1 - u.1 * v.0).abs().atan2(u.0 * v.0 + u.1 * v.1));
        length.push((u.0.hypot(u.1) - v.0.hypot(v.1)).abs());
        position.push((p.0 - q.0).hypot(p.1 - q.1));
    }
    let shape = 1.0 - median(shape) / (2.0 * diag);
    let direction = 1.0 - median(direction) / std::f64::consts::PI;
    let length = 1.0 - median(length) / diag;
    let position = 1.0 - median(position) / diag;
    Ok(MultiMatch { shape, direction, length, position, mean: (shape + direction + length + position) / 4.0 })
}

/// Cumulative probability of having fixated an object by saccade k = 1..6.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceCurve {
    pub values: [f64; MAX_STEPS],
    pub trials: usize,
}

impl GuidanceCurve {
    pub fn slope(&self) -> f64 {
        fit_slope(&self.values).expect("six finite points")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("saccade,probability\n");
        for (k, v) in self.values.iter().enumerate() {
            out.push_str(&format!("{},{:.6}\n", k + 1, v));
        }
        out
    }
}

/// Saccade index (1-based) of the first of the first six new fixations to
/// land in `b`; fixations beyond the recorded ones count as misses.
pub fn first_entry(points: &[(f32, f32)], b: &BoxPx) -> Option<usize> {
    points.iter().skip(1).take(MAX_STEPS).position(|&(x, y)| box_contains(b, x, y, 0.0)).map(|i| i + 1)
}

fn curve_from_hits(hits: impl Iterator<Item = Option<usize>>) -> GuidanceCurve {
    let mut counts = [0usize; MAX_STEPS];
    let mut n = 0;
    for h in hits {
        n += 1;
        if let Some(k) = h {
            for c in &mut counts[k - 1..] {
                *c += 1;
            }
        }
    }
    GuidanceCurve { values: counts.map(|c| c as f64 / n.max(1) as f64), trials: n }
}

fn tp_trials(trials: &[SearchTrial]) -> Vec<&SearchTrial> {
    trials.iter().filter(|t| t.condition == Condition::Tp && t.target_box.is_some()).collect()
}

/// Guidance to each trial's own target, over target-present trials.
pub fn guidance_curve(trials: &[SearchTrial]) -> Result<GuidanceCurve> {
    let tp = tp_trials(trials);
    if tp.is_empty() {
        return Err(GazeError::invalid("no target-present trials with target boxes"));
    }
    Ok(curve_from_hits(
        tp.iter().map(|t| first_entry(&t.points().collect::<Vec<_>>(), &t.target_box.expect("filtered"))),
    ))
}

/// Guidance to another object: `other_boxes[i]` is the box of trial `i`'s
/// non-target object, in the trial's native pixels.
pub fn object_baseline_curve(trials: &[SearchTrial], other_boxes: &[Option<BoxPx>]) -> Result<GuidanceCurve> {
    if trials.is_empty() {
        return Err(GazeError::invalid("no trials"));
    }
    if trials.len() != other_boxes.len() {
        return Err(GazeError::invalid(format!("{} trials but {} baseline boxes", trials.len(), other_boxes.len())));
    }
    let hits = trials
        .iter()
        .zip(other_boxes)
        .map(|(t, b)| {
            let b =
                b.ok_or_else(|| GazeError::invalid(format!("trial {}: no box for the other object", t.trial_id)))?;
            Ok(first_entry(&t.points().collect::<Vec<_>>(), &b))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(curve_from_hits(hits.into_iter()))
}

/// For each trial, the target box of the sibling trial on the same image
/// that searched for a different category.
pub fn other_category_boxes(trials: &[SearchTrial]) -> Vec<Option<BoxPx>> {
    let mut by_image: BTreeMap<(&str, u32), BoxPx> = BTreeMap::new();
    for t in trials {
        if let Some(b) = t.target_box {
            by_image.entry((t.image.reference.as_str(), t.category_id)).or_insert(b);
        }
    }
    trials
        .iter()
        .map(|t| {
            by_image
                .range((t.image.reference.as_str(), 0)..=(t.image.reference.as_str(), u32::MAX))
                .find(|((_, c), _)| *c != t.category_id)
                .map(|(_, &b)| b)
        })
        .collect()
}

/// Least-squares slope of `curve` against saccade index 1, 2, ...
pub fn fit_slope(curve: &[f64]) -> Result<f64> {
    if curve.len() < 2 || curve.iter().any(|v| !v.is_finite()) {
        return Err(GazeError::invalid("slope needs at least two finite points"));
    }
    let n = curve.len() as f64;
    let mx = (n + 1.0) / 2.0;
    let my = curve.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, &y) in curve.iter().enumerate() {
        let dx = (i + 1) as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
    }
    Ok(sxy / sxx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchStats {
    pub trials: usize,
    pub fixated_in_6: f64,
    /// Mean saccades to the first target fixation, over trials that made one.
    pub avg_saccades_to_target: Option<f64>,
    /// Fixated-in-6 after permuting scanpaths across images within subject.
    pub shuffled_chance: f64,
    /// Mean guidance curve of the shuffled trials.
    pub shuffled_curve: [f64; MAX_STEPS],
}

pub const DEFAULT_PERMUTATIONS: usize = 100;

/// Fixated-in-6, saccades to target and a within-subject shuffled chance
/// level. Shuffled scanpaths are rescaled to the image they are scored on.
pub fn search_stats(trials: &[SearchTrial], permutations: usize, seed: u64) -> Result<SearchStats> {
    let tp = tp_trials(trials);
    if tp.is_empty() {
        return Err(GazeError::invalid("no target-present trials with target boxes"));
    }
    let paths: Vec<Vec<(f32, f32)>> = tp.iter().map(|t| t.points().collect()).collect();
    let hits: Vec<Option<usize>> =
        tp.iter().zip(&paths).map(|(t, p)| first_entry(p, &t.target_box.expect("filtered"))).collect();
    let found: Vec<usize> = hits.iter().flatten().copied().collect();
    let fixated_in_6 = found.len() as f64 / tp.len() as f64;
    let avg = (!found.is_empty()).then(|| found.iter().sum::<usize>() as f64 / found.len() as f64);

    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in tp.iter().enumerate() {
        groups.entry(t.subject_id.as_str()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled_curve = [0.0; MAX_STEPS];
    let mut chance = 0.0;
    for _ in 0..permutations {
        let mut source: Vec<usize> = (0..tp.len()).collect();
        for idx in groups.values() {
            let mut perm = idx.clone();
            perm.shuffle(&mut rng);
            for (&dst, &src) in idx.iter().zip(&perm) {
                source[dst] = src;
            }
        }
        let curve = curve_from_hits(tp.iter().enumerate().map(|(i, t)| {
            let from = tp[source[i]];
            let (sx, sy) =
                (t.image.width as f32 / from.image.width as f32, t.image.height as f32 / from.image.height as f32);
            let path: Vec<(f32, f32)> = paths[source[i]].iter().map(|&(x, y)| (x * sx, y * sy)).collect();
            first_entry(&path, &t.target_box.expect("filtered"))
        }));
        chance += curve.values[MAX_STEPS - 1];
        for (a, b) in shuffled_curve.iter_mut().zip(curve.values) {
            *a += b;
        }
    }
    let p = permutations.max(1) as f64;
    Ok(SearchStats {
        trials: tp.len(),
        fixated_in_6,
        avg_saccades_to_target: avg,
        shuffled_chance: chance / p,
        shuffled_curve: shuffled_curve.map(|v| v / p),
    })
}

/// One cell block of the dataset summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub condition: Condition,
    pub category: String,
    pub trials: usize,
    pub error_pct: f64,
    /// Fixations per correct trial, the starting fixation included.
    pub mean_fixations: Option<f64>,
    /// Sample standard deviation of the same.
    pub sd_fixations: Option<f64>,
}

/// Error rate and fixation counts per condition and category.
pub fn summary_table(manifest: &DatasetManifest) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for cond in [Condition::Tp, Condition::Ta] {
        for cat in &manifest.categories {
            let ts: Vec<&SearchTrial> =
                manifest.trials.iter().filter(|t| t.condition == cond && t.category_id == cat.id).collect();
            if ts.is_empty() {
                continue;
            }
            let counts: Vec<f64> = ts.iter().filter(|t| t.correct).map(|t| t.fixations.len() as f64).collect();
            let errors = ts.iter().filter(|t| !t.correct).count();
            let mean = (!counts.is_empty()).then(|| counts.iter().sum::<f64>() / counts.len() as f64);
            let sd = mean
                .filter(|_| counts.len() > 1)
                .map(|m| (counts.iter().map(|c| (c - m).powi(2)).sum::<f64>() / (counts.len() - 1) as f64).sqrt());
            rows.push(SummaryRow {
                condition: cond,
                category: cat.name.clone(),
                trials: ts.len(),
                error_pct: 100.0 * errors as f64 / ts.len() as f64,
                mean_fixations: mean,
                sd_fixations: sd,
            });
        }
    }
    rows
}

/// Plain-text rendering of [`summary_table`].
pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut out = format!(
        "{:<16} {:<16} {:>7} {:>9}  {}\n",
        "condition", "category", "trials", "error(%)", "mean (SD) fixations"
    );
    for r in rows {
        let cond = match r.condition {
            Condition::Tp => "target-present",
            Condition::Ta => "target-absent",
        };
        let fix = match (r.mean_fixations, r.sd_fixations) {
            (Some(m), Some(s)) => format!("{m:.2} (±{s:.1})"),
            (Some(m), None) => format!("{m:.2}"),
            _ => "-".into(),
        };
        out.push_str(&format!("{:<16} {:<16} {:>7} {:>9.0}  {}\n", cond, r.category, r.trials, r.error_pct, fix));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_examples() {
        let lin: Vec<f64> = (1..=6).map(|k| 0.1 * k as f64).collect();
        assert!((fit_slope(&lin).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(fit_slope(&[0.3; 6]).unwrap(), 0.0);
        assert!(fit_slope(&[1.0]).is_err());
    }

    #[test]
    fn perpendicular_saccades() {
        let a = [(100.0, 100.0), (150.0, 100.0)];
        let b = [(100.0, 100.0), (100.0, 150.0)];
        let m = multimatch(&a, &b, (512.0, 320.0)).unwrap();
        assert!((m.direction - 0.5).abs() < 1e-12);
        assert_eq!(m.length, 1.0);
        assert_eq!(m.position, 1.0);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
