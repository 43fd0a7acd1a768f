//! Search-trial manifests: loading, validation, training filter, and
//! conversion of fixations into grid actions.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GazeError, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const GRID_ROWS: usize = 10;
pub const GRID_COLS: usize = 16;
pub const NUM_ACTIONS: usize = GRID_ROWS * GRID_COLS;
pub const CANVAS_W: usize = 512;
pub const CANVAS_H: usize = 320;
pub const CELL: usize = 32;
/// New fixations per episode.
pub const MAX_STEPS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Tp,
    Ta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Category {
    pub id: u32,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRef {
    #[serde(rename = "ref")]
    pub reference: String,
    pub width: u32,
    pub height: u32,
}

/// Axis-aligned box `[x, y, w, h]` in native pixels; contains `[x, x + w) × [y, y + h)`.
pub type BoxPx = [f32; 4];

pub fn box_contains(b: &BoxPx, x: f32, y: f32, margin: f32) -> bool {
    x >= b[0] - margin && x < b[0] + b[2] + margin && y >= b[1] - margin && y < b[1] + b[3] + margin
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchTrial {
    pub trial_id: String,
    pub subject_id: String,
    pub image: ImageRef,
    pub category_id: u32,
    pub condition: Condition,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_box: Option<BoxPx>,
    /// `[x, y, duration_ms]`, starting fixation first.
    pub fixations: Vec<[f32; 3]>,
    /// Display scale of this trial, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deg_per_px: Option<f32>,
}

impl SearchTrial {
    pub fn points(&self) -> impl Iterator<Item = (f32, f32)> + '_ {
        self.fixations.iter().map(|f| (f[0], f[1]))
    }

    /// Fixation `i` mapped onto the 512×320 canvas.
    pub fn canvas_point(&self, i: usize) -> (f32, f32) {
        let f = self.fixations[i];
        (f[0] * CANVAS_W as f32 / self.image.width as f32, f[1] * CANVAS_H as f32 / self.image.height as f32)
    }

    /// Target box mapped onto the canvas.
    pub fn canvas_box(&self) -> Option<BoxPx> {
        self.target_box.map(|b| to_canvas_box(&b, self.image.width, self.image.height))
    }

    pub fn target_fixated(&self, margin_px: f32) -> bool {
        match &self.target_box {
            Some(b) => self.points().any(|(x, y)| box_contains(b, x, y, margin_px)),
            None => false,
        }
    }
}

pub fn to_canvas_box(b: &BoxPx, width: u32, height: u32) -> BoxPx {
    let sx = CANVAS_W as f32 / width as f32;
    let sy = CANVAS_H as f32 / height as f32;
    [b[0] * sx, b[1] * sy, b[2] * sx, b[3] * sy]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub categories: Vec<Category>,
    pub split: Split,
    pub trials: Vec<SearchTrial>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
}

impl DatasetManifest {
    pub fn new(categories: Vec<Category>, split: Split, trials: Vec<SearchTrial>) -> Self {
        Self { version: SCHEMA_VERSION, categories, split, trials }
    }

    pub fn category_name(&self, id: u32) -> Option<&str> {
        self.categories.iter().find(|c| c.id == id).map(|c| c.name.as_str())
    }

    pub fn validate(&self) -> ValidationReport {
        let mut rep = ValidationReport::default();
        if self.version != SCHEMA_VERSION {
            rep.errors.push(format!("schema version {} (expected {SCHEMA_VERSION})", self.version));
        }
        let mut cat_ids = HashSet::new();
        for c in &self.categories {
            if !cat_ids.insert(c.id) {
                rep.errors.push(format!("category id {} listed twice", c.id));
            }
        }
        let mut seen = HashSet::new();
        for t in &self.trials {
            let id = &t.trial_id;
            if !seen.insert(id.as_str()) {
                rep.errors.push(format!("trial {id}: duplicate trial id"));
            }
            if !cat_ids.contains(&t.category_id) {
                rep.errors.push(format!("trial {id}: unknown category {}", t.category_id));
            }
            let (w, h) = (t.image.width as f32, t.image.height as f32);
            if t.image.width == 0 || t.image.height == 0 {
                rep.errors.push(format!("trial {id}: image size {}x{}", t.image.width, t.image.height));
                continue;
            }
            if t.fixations.is_empty() {
                rep.errors.push(format!("trial {id}: no fixations (the starting fixation is required)"));
            } else if t.fixations.len() < 2 {
                rep.warnings.push(format!("trial {id}: fewer than 2 fixations"));
            }
            for (i, f) in t.fixations.iter().enumerate() {
                if !f.iter().all(|v| v.is_finite()) || f[0] < 0.0 || f[1] < 0.0 || f[0] >= w || f[1] >= h {
                    rep.errors.push(format!("trial {id}: fixation {i} at ({}, {}) outside {w}x{h}", f[0], f[1]));
                }
                if f[2] < 0.0 {
                    rep.errors.push(format!("trial {id}: fixation {i} has negative duration"));
                }
            }
            if let Some(dpp) = t.deg_per_px {
                if !(dpp > 0.0) {
                    rep.errors.push(format!("trial {id}: deg_per_px must be > 0"));
                }
            }
            match (t.condition, &t.target_box) {
                (Condition::Tp, None) => {
                    rep.errors.push(format!("trial {id}: target-present trial without target box"))
                }
                (Condition::Ta, Some(_)) => {
                    rep.errors.push(format!("trial {id}: target-absent trial with a target box"))
                }
                (Condition::Tp, Some(b)) => {
                    if !(b[2] > 0.0 && b[3] > 0.0) || b[0] < 0.0 || b[1] < 0.0 || b[0] + b[2] > w || b[1] + b[3] > h {
                        rep.errors.push(format!("trial {id}: target box {b:?} invalid for {w}x{h} image"));
                    } else if b[2] * b[3] >= 0.1 * w * h {
                        rep.warnings.push(format!("trial {id}: target covers at least 10% of the image"));
                    }
                }
                (Condition::Ta, None) => {}
            }
        }
        rep
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Parses and validates; warnings are logged, errors reject the manifest.
pub fn parse_manifest(text: &str) -> Result<DatasetManifest> {
    let m: DatasetManifest = serde_json::from_str(text)?;
    if m.version != SCHEMA_VERSION {
        return Err(GazeError::Validation(vec![format!("schema version {} (expected {SCHEMA_VERSION})", m.version)]));
    }
    let rep = m.validate();
    for w in &rep.warnings {
        log::warn!("{w}");
    }
    if rep.errors.is_empty() {
        Ok(m)
    } else {
        Err(GazeError::Validation(rep.errors))
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    parse_manifest(&std::fs::read_to_string(path)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterConfig {
    /// Box inflation in degrees for the target-fixated test.
    pub margin_deg: f32,
    /// Degrees per canvas pixel, used when a trial carries no scale.
    pub deg_per_px: f32,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { margin_deg: 0.0, deg_per_px: 54.0 / 512.0 }
    }
}

/// Keeps correct trials, dropping target-present trials whose target was
/// never fixated.
pub fn filter_training(manifest: &DatasetManifest, cfg: &FilterConfig) -> DatasetManifest {
    let trials = manifest
        .trials
        .iter()
        .filter(|t| {
            t.correct
                && match t.condition {
                    Condition::Ta => true,
                    Condition::Tp => {
                        let dpp = t.deg_per_px.unwrap_or(cfg.deg_per_px * CANVAS_W as f32 / t.image.width as f32);
                        t.target_fixated(cfg.margin_deg / dpp)
                    }
                }
        })
        .cloned()
        .collect();
    DatasetManifest { trials, ..manifest.clone() }
}

/// Grid cell holding native point `(x, y)` after resizing to 512×320.
pub fn discretize_fixation(x: f32, y: f32, native_w: u32, native_h: u32) -> Result<usize> {
    if !(x >= 0.0 && y >= 0.0 && x < native_w as f32 && y < native_h as f32) {
        return Err(GazeError::invalid(format!("point ({x}, {y}) outside {native_w}x{native_h}")));
    }
    let col = (x as f64 * CANVAS_W as f64 / native_w as f64 / CELL as f64).floor() as usize;
    let row = (y as f64 * CANVAS_H as f64 / native_h as f64 / CELL as f64).floor() as usize;
    Ok(row.min(GRID_ROWS - 1) * GRID_COLS + col.min(GRID_COLS - 1))
}

/// Canvas pixel at the center of cell `action`.
pub fn action_to_pixel(action: usize) -> Result<(f32, f32)> {
    if action >= NUM_ACTIONS {
        return Err(GazeError::invalid(format!("action {action} >= {NUM_ACTIONS}")));
    }
    let (row, col) = (action / GRID_COLS, action % GRID_COLS);
    Ok(((col * CELL + CELL / 2) as f32, (row * CELL + CELL / 2) as f32))
}

/// One expert decision: after the first `step + 1` fixations of a trial,
/// the expert moved to cell `action`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertPair {
    pub trial_id: String,
    pub step: usize,
    pub image_ref: String,
    pub category_id: u32,
    /// Fixations so far in native pixels, starting fixation first.
    pub prefix: Vec<(f32, f32)>,
    pub action: usize,
}

impl ExpertPair {
    /// Cells of the new fixations in the prefix (the start is excluded).
    pub fn prefix_actions(&self, native_w: u32, native_h: u32) -> Result<Vec<usize>> {
        self.prefix[1..].iter().map(|&(x, y)| discretize_fixation(x, y, native_w, native_h)).collect()
    }
}

/// Expert pairs of every trial plus a warning per trial that contributes none.
pub fn export_expert_pairs(manifest: &DatasetManifest) -> Result<(Vec<ExpertPair>, Vec<String>)> {
    let mut pairs = Vec::new();
    let mut warnings = Vec::new();
    for t in &manifest.trials {
        let n = t.fixations.len();
        if n < 2 {
            warnings.push(format!("trial {}: {n} fixation(s), no expert pairs", t.trial_id));
            continue;
        }
        for k in 0..=(MAX_STEPS - 1).min(n - 2) {
            let next = t.fixations[k + 1];
            pairs.push(ExpertPair {
                trial_id: t.trial_id.clone(),
                step: k,
                image_ref: t.image.reference.clone(),
                category_id: t.category_id,
                prefix: t.fixations[..=k].iter().map(|f| (f[0], f[1])).collect(),
                action: discretize_fixation(next[0], next[1], t.image.width, t.image.height)?,
            });
        }
    }
    Ok((pairs, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corners_and_center() {
        assert_eq!(discretize_fixation(0.0, 0.0, 512, 320).unwrap(), 0);
        assert_eq!(discretize_fixation(511.0, 319.0, 512, 320).unwrap(), 159);
        assert_eq!(discretize_fixation(256.0, 160.0, 512, 320).unwrap(), 88);
        assert!(discretize_fixation(-3.0, 0.0, 512, 320).is_err());
        assert!(discretize_fixation(512.0, 0.0, 512, 320).is_err());
    }

    #[test]
    fn action_pixels() {
        assert_eq!(action_to_pixel(0).unwrap(), (16.0, 16.0));
        assert_eq!(action_to_pixel(159).unwrap(), (496.0, 304.0));
        assert!(action_to_pixel(160).is_err());
    }

    #[test]
    fn half_open_boxes() {
        let b = [10.0, 10.0, 5.0, 5.0];
        assert!(box_contains(&b, 10.0, 14.9, 0.0));
        assert!(!box_contains(&b, 15.0, 12.0, 0.0));
        assert!(box_contains(&b, 15.0, 12.0, 1.0));
    }

    #[test]
    fn empty_manifest_is_valid() {
        let m = parse_manifest(r#"{"version":1,"categories":[],"split":"train","trials":[]}"#).unwrap();
        assert!(m.trials.is_empty());
        assert!(parse_manifest(r#"{"version":2,"categories":[],"split":"train","trials":[]}"#).is_err());
        assert!(parse_manifest(r#"{"version":1,"categories":[],"split":"train","trials":[],"x":1}"#).is_err());
    }
}
