//! Episodic search environment over cumulatively foveated images.

use gazeirl_numerics::{forward, ConvSpec, LayerHandle, LayerParams, NdArray, ParamStore, RELU_GAIN};
use rand::Rng;

use crate::dataset::{action_to_pixel, box_contains, BoxPx, CELL, GRID_COLS, GRID_ROWS, MAX_STEPS, NUM_ACTIONS};
use crate::error::{GazeError, Result};
use crate::raster::{self, RgbImage};
use crate::retina::{build_pyramid, sample_pixel, BlurPyramid, FoveationConfig, LevelMap, RetImage, CHANNELS};

#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    pub foveation: FoveationConfig,
    /// Extractor output channels.
    pub feature_channels: usize,
    pub num_categories: usize,
    /// Forbid saccades to already visited cells.
    pub inhibition_of_return: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            foveation: FoveationConfig::default(),
            feature_channels: 32,
            num_categories: 2,
            inhibition_of_return: false,
        }
    }
}

impl EnvConfig {
    /// Channels of a state's feature map: extractor output plus category planes.
    pub fn state_channels(&self) -> usize {
        self.feature_channels + self.num_categories
    }

    /// Channels seen by the policy: state features plus the history plane.
    pub fn policy_channels(&self) -> usize {
        self.state_channels() + 1
    }
}

/// Convolutional encoder from a 512×320 image to one feature column per
/// grid cell. Strides 4, 4, 2 with matching kernels tile the image, so each
/// output cell sees exactly its own 32×32 block.
#[derive(Clone, Debug)]
pub struct Extractor {
    store: ParamStore,
    layers: [LayerHandle; 3],
    channels: usize,
}

const EXTRACTOR_WIDTHS: [usize; 2] = [8, 16];

impl Extractor {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let dims = [CHANNELS, EXTRACTOR_WIDTHS[0], EXTRACTOR_WIDTHS[1], channels];
        let specs = [ConvSpec::new(4, 4, 0), ConvSpec::new(4, 4, 0), ConvSpec::new(2, 2, 0)];
        let layers = [0, 1, 2].map(|i| {
            store.push_layer(
                &format!("conv{}", i + 1),
                LayerParams::conv2d(dims[i], dims[i + 1], specs[i], RELU_GAIN, rng),
            )
        });
        Self { store, layers, channels }
    }

    /// Rebuilds an extractor from saved tensors.
    pub fn from_store(store: ParamStore) -> Result<Self> {
        let specs = [ConvSpec::new(4, 4, 0), ConvSpec::new(4, 4, 0), ConvSpec::new(2, 2, 0)];
        let mut layers = Vec::new();
        for (i, spec) in specs.into_iter().enumerate() {
            let find = |suffix: &str| {
                let name = format!("conv{}.{suffix}", i + 1);
                store.find(&name).ok_or_else(|| GazeError::invalid(format!("extractor tensor {name} missing")))
            };
            layers.push(LayerHandle {
                kind: gazeirl_numerics::LayerKind::Conv2d(spec),
                weights: find("weight")?,
                bias: find("bias")?,
            });
        }
        let channels = store.get(layers[2].weights).shape()[0];
        Ok(Self { store, layers: [layers[0], layers[1], layers[2]], channels })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Encodes interleaved RGB on the 0..=255 scale.
    pub fn encode(&self, pixels: &[f32], width: usize, height: usize) -> Result<NdArray> {
        if !width.is_multiple_of(CELL) || !height.is_multiple_of(CELL) || pixels.len() != width * height * CHANNELS {
            return Err(GazeError::invalid(format!("extractor input {width}x{height} with {} values", pixels.len())));
        }
        let n = width * height;
        let mut chw = vec![0.0f32; n * CHANNELS];
        for i in 0..n {
            for c in 0..CHANNELS {
                chw[c * n + i] = pixels[i * CHANNELS + c] / 127.5 - 1.0;
            }
        }
        let mut x = NdArray::new(vec![CHANNELS, height, width], chw)?;
        for &h in &self.layers {
            x = forward(&self.store.layer(h), &x)?.map(|v| v.max(0.0));
        }
        Ok(x)
    }
}

/// Extractor features of `ret` with the category one-hot planes appended.
pub fn extract_features(
    extractor: &Extractor,
    ret: &RetImage,
    category: usize,
    num_categories: usize,
) -> Result<NdArray> {
    if ret.width != GRID_COLS * CELL || ret.height != GRID_ROWS * CELL {
        return Err(GazeError::invalid(format!("retina image is {}x{}, expected 512x320", ret.width, ret.height)));
    }
    let feats = extractor.encode(&ret.pixels, ret.width, ret.height)?;
    with_category(&feats, category, num_categories)
}

fn with_category(feats: &NdArray, category: usize, num_categories: usize) -> Result<NdArray> {
    if category >= num_categories {
        return Err(GazeError::invalid(format!("category {category} >= {num_categories}")));
    }
    let mut planes = NdArray::zeros(&[num_categories, GRID_ROWS, GRID_COLS]);
    planes.data_mut()[category * NUM_ACTIONS..][..NUM_ACTIONS].fill(1.0);
    Ok(NdArray::concat0(&[feats, &planes])?)
}

/// What the policy and discriminator see at one decision point.
#[derive(Clone, Debug, PartialEq)]
pub struct State {
    /// `(C + K) × 10 × 16`: extractor features and category planes.
    pub features: NdArray,
    /// 1 at every visited cell, 0 elsewhere.
    pub history: Vec<f32>,
    /// New fixations made so far.
    pub step: usize,
}

impl State {
    /// Features with the history plane appended.
    pub fn policy_input(&self) -> NdArray {
        let hist = NdArray::new(vec![1, GRID_ROWS, GRID_COLS], self.history.clone()).expect("history has 160 cells");
        NdArray::concat0(&[&self.features, &hist]).expect("spatial extents agree")
    }

    /// Mask of cells still allowed under inhibition of return.
    pub fn unvisited(&self) -> Vec<bool> {
        self.history.iter().map(|&h| h == 0.0).collect()
    }
}

/// One search episode in progress.
#[derive(Clone, Debug)]
pub struct Episode {
    pyramid: BlurPyramid,
    levels: LevelMap,
    fixations: Vec<(f32, f32)>,
    visited: Vec<f32>,
    category: usize,
    target_box: Option<BoxPx>,
    /// Extractor output and the level map it was computed from.
    encoded: Option<(NdArray, Vec<f32>)>,
}

impl Episode {
    pub fn fixations(&self) -> &[(f32, f32)] {
        &self.fixations
    }

    pub fn category(&self) -> usize {
        self.category
    }

    pub fn target_box(&self) -> Option<BoxPx> {
        self.target_box
    }

    pub fn steps_taken(&self) -> usize {
        self.fixations.len() - 1
    }

    pub fn done(&self) -> bool {
        self.steps_taken() >= MAX_STEPS
    }

    pub fn retina_image(&self) -> RetImage {
        RetImage::compose(&self.pyramid, &self.levels)
    }

    pub fn level_map(&self) -> &LevelMap {
        &self.levels
    }

    /// Moves the fovea to `action` without encoding the new state.
    pub fn advance(&mut self, action: usize, cfg: &FoveationConfig) -> Result<bool> {
        if self.done() {
            return Err(GazeError::invalid("step after the episode ended"));
        }
        let p = action_to_pixel(action)?;
        self.levels.apply(p, cfg)?;
        self.fixations.push(p);
        self.visited[action] = 1.0;
        Ok(self.target_box.is_some_and(|b| box_contains(&b, p.0, p.1, 0.0)))
    }
}

/// Outcome of one saccade.
#[derive(Clone, Debug)]
pub struct Step {
    pub state: State,
    pub target_hit: bool,
    pub done: bool,
}

/// Encodes episodes into states with a fixed extractor.
#[derive(Clone, Debug)]
pub struct SearchEnv {
    pub cfg: EnvConfig,
    pub extractor: Extractor,
}

impl SearchEnv {
    pub fn new(cfg: EnvConfig, extractor: Extractor) -> Result<Self> {
        cfg.foveation.validate()?;
        if cfg.foveation.width != GRID_COLS * CELL || cfg.foveation.height != GRID_ROWS * CELL {
            return Err(GazeError::Config("the search grid needs a 512x320 canvas".into()));
        }
        if extractor.channels() != cfg.feature_channels {
            return Err(GazeError::Config(format!(
                "extractor has {} channels, config says {}",
                extractor.channels(),
                cfg.feature_channels
            )));
        }
        Ok(Self { cfg, extractor })
    }

    /// Starts at the canvas center. `target_box` is in canvas pixels.
    pub fn reset(&self, image: RgbImage, category: usize, target_box: Option<BoxPx>) -> Result<(Episode, State)> {
        let mut ep = self.start(image, category, target_box)?;
        let state = self.observe(&mut ep)?;
        Ok((ep, state))
    }

    /// [`reset`](Self::reset) without encoding the first state.
    pub fn start(&self, image: RgbImage, category: usize, target_box: Option<BoxPx>) -> Result<Episode> {
        if category >= self.cfg.num_categories {
            return Err(GazeError::invalid(format!("category {category} >= {}", self.cfg.num_categories)));
        }
        let fov = &self.cfg.foveation;
        let image = raster::resize(image, fov.width as u32, fov.height as u32);
        let pyramid = build_pyramid(&image, fov)?;
        let center = ((fov.width / 2) as f32, (fov.height / 2) as f32);
        let mut levels = LevelMap::coarsest(fov);
        levels.apply(center, fov)?;
        let mut visited = vec![0.0; NUM_ACTIONS];
        visited[crate::dataset::discretize_fixation(center.0, center.1, fov.width as u32, fov.height as u32)?] = 1.0;
        Ok(Episode { pyramid, levels, fixations: vec![center], visited, category, target_box, encoded: None })
    }

    /// Encodes the current state. Only grid cells whose levels changed since
    /// the last call are re-encoded; the extractor sees each cell in isolation,
    /// so the result equals a full encoding.
    pub fn observe(&self, ep: &mut Episode) -> Result<State> {
        let raw = ep.levels.raw();
        let feats = match ep.encoded.take() {
            None => {
                let ret = ep.retina_image();
                self.extractor.encode(&ret.pixels, ret.width, ret.height)?
            }
            Some((mut feats, seen)) => {
                let w = GRID_COLS * CELL;
                let mut block = vec![0.0f32; CELL * CELL * CHANNELS];
                for cell in 0..NUM_ACTIONS {
                    let (x0, y0) = ((cell % GRID_COLS) * CELL, (cell / GRID_COLS) * CELL);
                    let rows = (y0..y0 + CELL).map(|y| y * w + x0..y * w + x0 + CELL);
                    if rows.clone().all(|r| raw[r.clone()] == seen[r]) {
                        continue;
                    }
                    for (by, r) in rows.enumerate() {
                        for (bx, i) in r.enumerate() {
                            sample_pixel(&ep.pyramid, raw[i], i, &mut block[(by * CELL + bx) * CHANNELS..][..CHANNELS]);
                        }
                    }
                    let col = self.extractor.encode(&block, CELL, CELL)?;
                    for (c, &v) in col.data().iter().enumerate() {
                        feats.data_mut()[c * NUM_ACTIONS + cell] = v;
                    }
                }
                feats
            }
        };
        let state = State {
            features: with_category(&feats, ep.category, self.cfg.num_categories)?,
            history: ep.visited.clone(),
            step: ep.steps_taken(),
        };
        ep.encoded = Some((feats, raw.to_vec()));
        Ok(state)
    }

    pub fn step(&self, ep: &mut Episode, action: usize) -> Result<Step> {
        let target_hit = ep.advance(action, &self.cfg.foveation)?;
        Ok(Step { state: self.observe(ep)?, target_hit, done: ep.done() })
    }
}
