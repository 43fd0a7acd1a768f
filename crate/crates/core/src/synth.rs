//! Procedural search scenes and an oracle searcher.
//!
//! Every target-present scene holds one object of each category plus gray
//! distractors that share the objects' patterns and luminance. Category 0
//! objects are warm-tinted concentric rings, category 1 objects cool-tinted
//! checkerboards. The image depends only on the scene seed, so the same
//! image serves searches for either category.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{
    BoxPx, Category, Condition, DatasetManifest, ImageRef, SearchTrial, Split, CANVAS_H, CANVAS_W, MAX_STEPS,
};
use crate::error::{GazeError, Result};
use crate::raster::RgbImage;

pub const NUM_CATEGORIES: usize = 2;
pub const CATEGORY_NAMES: [&str; NUM_CATEGORIES] = ["rings", "checker"];
const MAX_PLACEMENT_TRIES: usize = 10_000;
/// The central cell of a 5×5 partition of the canvas; objects stay out of it.
pub const CENTER_ZONE: BoxPx = [204.8, 128.0, 102.4, 64.0];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneConfig {
    pub distractors: usize,
    pub min_size: f32,
    pub max_size: f32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { distractors: 6, min_size: 32.0, max_size: 44.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pattern {
    Rings,
    Checker,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Palette {
    light: [f32; 3],
    dark: [f32; 3],
}

const GRAY: Palette = Palette { light: [190.0, 190.0, 190.0], dark: [70.0, 70.0, 70.0] };
const WARM: Palette = Palette { light: [236.0, 181.0, 140.0], dark: [112.0, 58.0, 28.0] };
const COOL: Palette = Palette { light: [140.0, 186.0, 240.0], dark: [30.0, 68.0, 118.0] };

fn category_look(category: usize) -> (Pattern, Palette) {
    if category == 0 {
        (Pattern::Rings, WARM)
    } else {
        (Pattern::Checker, COOL)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub image: RgbImage,
    pub seed: u64,
    /// Box of each category's object; `None` where absent.
    pub objects: [Option<BoxPx>; NUM_CATEGORIES],
    pub distractors: Vec<BoxPx>,
    pub category: usize,
    pub tp: bool,
}

impl SyntheticScene {
    pub fn target_box(&self) -> Option<BoxPx> {
        if self.tp {
            self.objects[self.category]
        } else {
            None
        }
    }

    pub fn reference(&self) -> String {
        scene_ref(self.seed, self.category, self.tp)
    }
}

pub fn scene_ref(seed: u64, category: usize, tp: bool) -> String {
    if tp {
        format!("synth:{seed}")
    } else {
        format!("synth:{seed}:ta{category}")
    }
}

/// Parses a synthetic image reference into (seed, absent category).
pub fn parse_ref(reference: &str) -> Option<(u64, Option<usize>)> {
    let rest = reference.strip_prefix("synth:")?;
    match rest.split_once(':') {
        None => Some((rest.parse().ok()?, None)),
        Some((seed, ta)) => Some((seed.parse().ok()?, Some(ta.strip_prefix("ta")?.parse().ok()?))),
    }
}

fn overlaps(a: &BoxPx, b: &BoxPx, gap: f32) -> bool {
    a[0] < b[0] + b[2] + gap && b[0] < a[0] + a[2] + gap && a[1] < b[1] + b[3] + gap && b[1] < a[1] + a[3] + gap
}

fn place(rng: &mut impl Rng, cfg: &SceneConfig, taken: &[BoxPx]) -> Result<BoxPx> {
    for _ in 0..MAX_PLACEMENT_TRIES {
        let w = rng.random_range(cfg.min_size..=cfg.max_size).round();
        let h = rng.random_range(cfg.min_size..=cfg.max_size).round();
        let x = rng.random_range(4.0..(CANVAS_W as f32 - w - 4.0)).round();
        let y = rng.random_range(4.0..(CANVAS_H as f32 - h - 4.0)).round();
        let b = [x, y, w, h];
        if !overlaps(&b, &CENTER_ZONE, 0.0) && taken.iter().all(|t| !overlaps(&b, t, 6.0)) {
            return Ok(b);
        }
    }
    Err(GazeError::invalid("could not place all scene objects"))
}

fn paint(img: &mut RgbImage, b: &BoxPx, pattern: Pattern, palette: Palette, phase: f32) {
    let (cx, cy) = (b[0] + b[2] / 2.0, b[1] + b[3] / 2.0);
    for y in b[1] as u32..(b[1] + b[3]) as u32 {
        for x in b[0] as u32..(b[0] + b[2]) as u32 {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let light = match pattern {
                Pattern::Rings => {
                    let r = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt();
                    (((r + phase) / 3.0) as u32).is_multiple_of(2)
                }
                Pattern::Checker => ((x - b[0] as u32) / 4 + (y - b[1] as u32) / 4).is_multiple_of(2),
            };
            let c = if light { palette.light } else { palette.dark };
            img.put_pixel(x, y, image::Rgb(c.map(|v| v.round() as u8)));
        }
    }
}

fn background(rng: &mut impl Rng) -> RgbImage {
    // coarse value noise, bilinearly interpolated, plus fine grain
    let (gw, gh) = (17usize, 11usize);
    let coarse: Vec<f32> = (0..gw * gh).map(|_| rng.random_range(-18.0..18.0)).collect();
    let mut img = RgbImage::new(CANVAS_W as u32, CANVAS_H as u32);
    for y in 0..CANVAS_H {
        for x in 0..CANVAS_W {
            let (u, v) = (x as f32 / 32.0, y as f32 / 32.0);
            let (i, j) = (u as usize, v as usize);
            let (fu, fv) = (u - i as f32, v - j as f32);
            let at = |a: usize, b: usize| coarse[b.min(gh - 1) * gw + a.min(gw - 1)];
            let smooth = at(i, j) * (1.0 - fu) * (1.0 - fv)
                + at(i + 1, j) * fu * (1.0 - fv)
                + at(i, j + 1) * (1.0 - fu) * fv
                + at(i + 1, j + 1) * fu * fv;
            let g = (128.0 + smooth + rng.random_range(-8.0..8.0)).round().clamp(0.0, 255.0) as u8;
            img.put_pixel(x as u32, y as u32, image::Rgb([g, g, g]));
        }
    }
    img
}

/// The scene for `seed`. Without `absent`, both category objects are drawn;
/// `absent = Some(c)` leaves out category `c`'s object.
pub fn render_scene(
    seed: u64,
    cfg: &SceneConfig,
    absent: Option<usize>,
) -> Result<(RgbImage, [Option<BoxPx>; NUM_CATEGORIES], Vec<BoxPx>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = background(&mut rng);
    let mut taken: Vec<BoxPx> = Vec::new();
    let mut objects = [None; NUM_CATEGORIES];
    for (c, slot) in objects.iter_mut().enumerate() {
        let b = place(&mut rng, cfg, &taken)?;
        taken.push(b);
        let phase = rng.random_range(0.0..6.0);
        if absent != Some(c) {
            let (pattern, palette) = category_look(c);
            paint(&mut img, &b, pattern, palette, phase);
            *slot = Some(b);
        }
    }
    let mut distractors = Vec::new();
    for _ in 0..cfg.distractors {
        let b = place(&mut rng, cfg, &taken)?;
        taken.push(b);
        let pattern = if rng.random_bool(0.5) { Pattern::Rings } else { Pattern::Checker };
        let phase = rng.random_range(0.0..6.0);
        paint(&mut img, &b, pattern, GRAY, phase);
        distractors.push(b);
    }
    Ok((img, objects, distractors))
}

/// Scene `seed` searched for `category`; target-absent scenes omit that
/// category's object.
pub fn gen_scene(seed: u64, category: usize, tp: bool, cfg: &SceneConfig) -> Result<SyntheticScene> {
    if category >= NUM_CATEGORIES {
        return Err(GazeError::invalid(format!("category {category} >= {NUM_CATEGORIES}")));
    }
    let (image, objects, distractors) = render_scene(seed, cfg, if tp { None } else { Some(category) })?;
    Ok(SyntheticScene { image, seed, objects, distractors, category, tp })
}

/// Image behind a synthetic reference.
pub fn render_ref(reference: &str, cfg: &SceneConfig) -> Result<RgbImage> {
    let (seed, absent) = parse_ref(reference)
        .ok_or_else(|| GazeError::invalid(format!("not a synthetic image reference: {reference}")))?;
    Ok(render_scene(seed, cfg, absent)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleConfig {
    /// Landing noise of the homing saccade, in pixels.
    pub noise_sigma: f32,
    /// Chance of visiting a distractor before homing in.
    pub distractor_prob: f32,
    /// Spread of the fixations that follow the target hit.
    pub hover_sigma: f32,
    pub max_saccades: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { noise_sigma: 4.0, distractor_prob: 0.25, hover_sigma: 8.0, max_saccades: MAX_STEPS }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.hover_sigma >= 0.0) || !(0.0..=1.0).contains(&self.distractor_prob) {
            return Err(GazeError::Config("oracle sigmas must be >= 0 and distractor_prob in [0, 1]".into()));
        }
        Ok(())
    }
}

fn clamp_point(x: f32, y: f32) -> (f32, f32) {
    (x.clamp(0.0, CANVAS_W as f32 - 0.01), y.clamp(0.0, CANVAS_H as f32 - 0.01))
}

fn jitter(rng: &mut impl Rng, center: (f32, f32), sigma: f32) -> (f32, f32) {
    if sigma == 0.0 {
        return clamp_point(center.0, center.1);
    }
    let n = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    clamp_point(center.0 + n.sample(rng), center.1 + n.sample(rng))
}

fn box_center(b: &BoxPx) -> (f32, f32) {
    (b[0] + b[2] / 2.0, b[1] + b[3] / 2.0)
}

/// An expert scanpath over a target-present scene: from the center, maybe
/// one distractor, then the target, then hovering near it.
pub fn oracle_scanpath(
    scene: &SyntheticScene,
    cfg: &OracleConfig,
    rng: &mut impl Rng,
    trial_id: String,
    subject_id: String,
) -> Result<SearchTrial> {
    let target = scene.target_box().ok_or_else(|| GazeError::invalid("oracle needs a target-present scene"))?;
    let mut points = vec![((CANVAS_W / 2) as f32, (CANVAS_H / 2) as f32)];
    if !scene.distractors.is_empty() && rng.random::<f32>() < cfg.distractor_prob {
        let d = scene.distractors[rng.random_range(0..scene.distractors.len())];
        points.push(jitter(rng, box_center(&d), cfg.noise_sigma));
    }
    points.push(jitter(rng, box_center(&target), cfg.noise_sigma));
    while points.len() < cfg.max_saccades + 1 {
        points.push(jitter(rng, box_center(&target), cfg.hover_sigma));
    }
    points.truncate(cfg.max_saccades + 1);
    Ok(SearchTrial {
        trial_id,
        subject_id,
        image: ImageRef { reference: scene.reference(), width: CANVAS_W as u32, height: CANVAS_H as u32 },
        category_id: scene.category as u32,
        condition: Condition::Tp,
        correct: true,
        target_box: Some(target),
        fixations: points.iter().map(|&(x, y)| [x, y, rng.random_range(180.0f32..320.0).round()]).collect(),
        deg_per_px: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// Oracle searchers per test image and category.
    pub test_subjects: usize,
    /// Distinct oracle subject ids cycled through the training trials.
    pub train_subjects: usize,
    pub scene: SceneConfig,
    pub oracle: OracleConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 400,
            n_test: 100,
            test_subjects: 3,
            train_subjects: 8,
            scene: SceneConfig::default(),
            oracle: OracleConfig::default(),
        }
    }
}

pub fn categories() -> Vec<Category> {
    CATEGORY_NAMES.iter().enumerate().map(|(i, n)| Category { id: i as u32, name: n.to_string() }).collect()
}

/// Scene seeds of the two splits. Test seeds follow the training range,
/// so the splits never share a scene.
pub fn split_seeds(root: u64, n_train: usize, n_test: usize) -> (Vec<u64>, Vec<u64>) {
    let base = root.wrapping_mul(1 << 24);
    let train = (0..n_train as u64).map(|i| base.wrapping_add(i)).collect();
    let test = (0..n_test as u64).map(|i| base.wrapping_add(n_train as u64 + i)).collect();
    (train, test)
}

/// Training manifest (one trial per scene, categories alternating) and test
/// manifest (every scene searched for every category by several subjects).
pub fn gen_dataset(cfg: &SynthConfig, root: u64, rng: &mut impl Rng) -> Result<(DatasetManifest, DatasetManifest)> {
    if cfg.n_train == 0 && cfg.n_test == 0 {
        return Err(GazeError::Config("synthetic dataset needs at least one scene".into()));
    }
    cfg.oracle.validate()?;
    let (train_seeds, test_seeds) = split_seeds(root, cfg.n_train, cfg.n_test);
    let mut train = Vec::with_capacity(cfg.n_train);
    for (i, &seed) in train_seeds.iter().enumerate() {
        let scene = gen_scene(seed, i % NUM_CATEGORIES, true, &cfg.scene)?;
        let subject = format!("oracle{}", i % cfg.train_subjects.max(1));
        train.push(oracle_scanpath(&scene, &cfg.oracle, rng, format!("train{i:05}"), subject)?);
    }
    let mut test = Vec::new();
    for (i, &seed) in test_seeds.iter().enumerate() {
        for c in 0..NUM_CATEGORIES {
            let scene = gen_scene(seed, c, true, &cfg.scene)?;
            for s in 0..cfg.test_subjects {
                let id = format!("test{i:05}c{c}s{s}");
                test.push(oracle_scanpath(&scene, &cfg.oracle, rng, id, format!("oracle{s}"))?);
            }
        }
    }
    Ok((DatasetManifest::new(categories(), Split::Train, train), DatasetManifest::new(categories(), Split::Test, test)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refs_round_trip() {
        assert_eq!(parse_ref("synth:42"), Some((42, None)));
        assert_eq!(parse_ref("synth:42:ta1"), Some((42, Some(1))));
        assert_eq!(parse_ref("img.ppm"), None);
        assert_eq!(parse_ref("synth:x"), None);
        assert_eq!(scene_ref(7, 1, false), "synth:7:ta1");
    }

    #[test]
    fn image_is_shared_across_categories() {
        let cfg = SceneConfig::default();
        let a = gen_scene(5, 0, true, &cfg).unwrap();
        let b = gen_scene(5, 1, true, &cfg).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.objects, b.objects);
        assert_ne!(a.target_box(), b.target_box());
    }

    #[test]
    fn splits_are_disjoint() {
        let (a, b) = split_seeds(3, 400, 100);
        assert!(a.iter().all(|s| !b.contains(s)));
    }
}
