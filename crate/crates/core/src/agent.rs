//! Actor-critic policy over grid cells and the state-action discriminator.

use gazeirl_numerics::{
    log_softmax, sigmoid, softmax, ConvSpec, LayerHandle, LayerKind, LayerParams, NdArray, ParamId, ParamStore, Tape,
    Var, RELU_GAIN,
};
use rand::Rng;

use crate::dataset::{GRID_COLS, GRID_ROWS, NUM_ACTIONS};
use crate::error::{GazeError, Result};
use crate::search_env::State;

pub const DISC_EPS: f32 = 1e-6;
/// Added to the logits of masked cells.
const MASKED: f32 = -1e9;
const TRUNK_WIDTH: usize = 32;
const HEAD_WIDTH: usize = 16;
const VALUE_WIDTH: usize = 32;
/// Output layers start near zero so an untrained policy is close to uniform.
const OUTPUT_GAIN: f32 = 0.01;

fn conv1x1() -> ConvSpec {
    ConvSpec::new(1, 1, 0)
}

fn conv3x3() -> ConvSpec {
    ConvSpec::new(3, 1, 1)
}

fn handle(store: &ParamStore, prefix: &str, kind: LayerKind) -> Result<LayerHandle> {
    let find = |suffix: &str| {
        let name = format!("{prefix}.{suffix}");
        store.find(&name).ok_or_else(|| GazeError::invalid(format!("tensor {name} missing")))
    };
    Ok(LayerHandle { kind, weights: find("weight")?, bias: find("bias")? })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    pub logits: NdArray,
    pub value: f32,
}

/// Input layers, one per target category; the active category's one-hot
/// plane selects which layer sees the state.
fn push_category_layers<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    in_channels: usize,
    num_categories: usize,
    rng: &mut R,
) -> Vec<LayerHandle> {
    (0..num_categories)
        .map(|k| {
            store.push_layer(
                &format!("{prefix}.{k}"),
                LayerParams::conv2d(in_channels, TRUNK_WIDTH, conv1x1(), RELU_GAIN, rng),
            )
        })
        .collect()
}

fn find_category_layers(store: &ParamStore, prefix: &str) -> Result<Vec<LayerHandle>> {
    let mut layers = Vec::new();
    while store.find(&format!("{prefix}.{}.weight", layers.len())).is_some() {
        layers.push(handle(store, &format!("{prefix}.{}", layers.len()), LayerKind::Conv2d(conv1x1()))?);
    }
    if layers.is_empty() {
        return Err(GazeError::invalid(format!("tensor {prefix}.0.weight missing")));
    }
    Ok(layers)
}

/// Category whose plane is hottest; the planes sit just before the history
/// plane (and the action plane, when `trailing` is 2).
fn active_category(x: &NdArray, num_categories: usize, trailing: usize) -> usize {
    let first = x.shape()[0] - trailing - num_categories;
    (0..num_categories)
        .fold((0, f32::MIN), |best, k| {
            let v = x.data()[(first + k) * NUM_ACTIONS];
            if v > best.1 {
                (k, v)
            } else {
                best
            }
        })
        .0
}

/// Category-selected input layer, shared convolutional trunk, a per-cell
/// logit head and a value head on the pooled, gradient-detached trunk.
#[derive(Clone, Debug)]
pub struct PolicyNet {
    pub store: ParamStore,
    trunk1: Vec<LayerHandle>,
    trunk2: LayerHandle,
    head: LayerHandle,
    value1: LayerHandle,
    value2: LayerHandle,
    in_channels: usize,
}

impl PolicyNet {
    /// `in_channels` counts features, `num_categories` category planes and the history plane.
    pub fn new<R: Rng + ?Sized>(in_channels: usize, num_categories: usize, rng: &mut R) -> Self {
        assert!(num_categories >= 1 && in_channels > num_categories, "policy needs category planes");
        let mut store = ParamStore::new();
        let trunk1 = push_category_layers(&mut store, "trunk1", in_channels, num_categories, rng);
        let trunk2 =
            store.push_layer("trunk2", LayerParams::conv2d(TRUNK_WIDTH, HEAD_WIDTH, conv3x3(), RELU_GAIN, rng));
        let head = store.push_layer("head", LayerParams::conv2d(HEAD_WIDTH, 1, conv1x1(), OUTPUT_GAIN, rng));
        let value1 = store.push_layer("value1", LayerParams::dense(HEAD_WIDTH, VALUE_WIDTH, RELU_GAIN, rng));
        let value2 = store.push_layer("value2", LayerParams::dense(VALUE_WIDTH, 1, OUTPUT_GAIN, rng));
        Self { store, trunk1, trunk2, head, value1, value2, in_channels }
    }

    pub fn from_store(store: ParamStore) -> Result<Self> {
        let trunk1 = find_category_layers(&store, "trunk1")?;
        let in_channels = store.get(trunk1[0].weights).shape()[1];
        Ok(Self {
            trunk1,
            trunk2: handle(&store, "trunk2", LayerKind::Conv2d(conv3x3()))?,
            head: handle(&store, "head", LayerKind::Conv2d(conv1x1()))?,
            value1: handle(&store, "value1", LayerKind::Dense)?,
            value2: handle(&store, "value2", LayerKind::Dense)?,
            in_channels,
            store,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn num_categories(&self) -> usize {
        self.trunk1.len()
    }

    /// Tensors of the value head, which get their own learning rate.
    pub fn value_params(&self) -> Vec<ParamId> {
        vec![self.value1.weights, self.value1.bias, self.value2.weights, self.value2.bias]
    }

    fn check_input(&self, x: &NdArray) -> Result<()> {
        if x.shape() != [self.in_channels, GRID_ROWS, GRID_COLS] {
            return Err(GazeError::invalid(format!(
                "policy input {:?}, expected [{}, 10, 16]",
                x.shape(),
                self.in_channels
            )));
        }
        Ok(())
    }

    pub fn forward_input(&self, x: &NdArray) -> Result<PolicyOutput> {
        let mut tape = Tape::new();
        let (logits, value) = self.forward_tape(&mut tape, x)?;
        Ok(PolicyOutput { logits: tape.value(logits)?.clone(), value: tape.scalar(value)? })
    }

    pub fn forward(&self, state: &State) -> Result<PolicyOutput> {
        self.forward_input(&state.policy_input())
    }

    /// Records the forward pass; returns (logits `[160]`, value `[1]`).
    pub fn forward_tape(&self, tape: &mut Tape, x: &NdArray) -> Result<(Var, Var)> {
        self.check_input(x)?;
        let s = &self.store;
        let first = self.trunk1[active_category(x, self.trunk1.len(), 1)];
        let xv = tape.input(x.clone())?;
        let h = tape.layer(s, first, xv)?;
        let h = tape.relu(h)?;
        let h = tape.layer(s, self.trunk2, h)?;
        let h = tape.relu(h)?;
        let logits = tape.layer(s, self.head, h)?;
        let logits = tape.reshape(logits, &[NUM_ACTIONS])?;
        let pooled = tape.detach(h)?;
        let pooled = tape.spatial_mean(pooled)?;
        let v = tape.layer(s, self.value1, pooled)?;
        let v = tape.relu(v)?;
        let value = tape.layer(s, self.value2, v)?;
        Ok((logits, value))
    }
}

/// Additive logit mask: 0 for allowed cells, a large negative otherwise.
pub fn mask_bias(mask: &[bool]) -> NdArray {
    NdArray::from_vec(mask.iter().map(|&ok| if ok { 0.0 } else { MASKED }).collect())
}

fn restricted_log_probs(logits: &NdArray, mask: Option<&[bool]>) -> Result<Vec<f64>> {
    if logits.shape() != [NUM_ACTIONS] {
        return Err(GazeError::invalid(format!("logits {:?}, expected [160]", logits.shape())));
    }
    if let Some(m) = mask {
        if m.len() != NUM_ACTIONS {
            return Err(GazeError::invalid("mask must cover 160 cells"));
        }
        if !m.iter().any(|&b| b) {
            return Err(GazeError::invalid("every cell is masked"));
        }
    }
    let allowed = |i: usize| mask.is_none_or(|m| m[i]);
    let l = logits.data();
    let max = (0..NUM_ACTIONS).filter(|&i| allowed(i)).map(|i| l[i] as f64).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(GazeError::invalid("non-finite logits"));
    }
    let z: f64 = (0..NUM_ACTIONS).filter(|&i| allowed(i)).map(|i| (l[i] as f64 - max).exp()).sum();
    let lz = max + z.ln();
    Ok((0..NUM_ACTIONS).map(|i| if allowed(i) { l[i] as f64 - lz } else { f64::NEG_INFINITY }).collect())
}

/// Draws a cell from the softmax of `logits`, restricted to `mask` when
/// given. Returns the cell and its log-probability under the restricted
/// distribution.
pub fn sample_action<R: Rng + ?Sized>(logits: &NdArray, rng: &mut R, mask: Option<&[bool]>) -> Result<(usize, f32)> {
    let lp = restricted_log_probs(logits, mask)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &l) in lp.iter().enumerate() {
        if l == f64::NEG_INFINITY {
            continue;
        }
        last = i;
        acc += l.exp();
        if u < acc {
            return Ok((i, l as f32));
        }
    }
    Ok((last, lp[last] as f32))
}

/// Most probable allowed cell and its log-probability.
pub fn greedy_action(logits: &NdArray, mask: Option<&[bool]>) -> Result<(usize, f32)> {
    let lp = restricted_log_probs(logits, mask)?;
    let (i, &l) =
        lp.iter().enumerate().fold((0, &f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
    Ok((i, l as f32))
}

/// How evaluation picks saccades.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionMode {
    Sample,
    Greedy,
}

/// Per-cell priorities on the 10×16 grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SaccadeMap {
    pub priority: NdArray,
}

impl SaccadeMap {
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.priority.data()[row * GRID_COLS + col]
    }

    pub fn argmax(&self) -> usize {
        self.priority.argmax().unwrap_or(0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..GRID_ROWS {
            let row: Vec<String> = (0..GRID_COLS).map(|c| format!("{:.6}", self.get(r, c))).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Nearest-neighbour upsampling to the canvas, scaled to the map maximum.
    pub fn to_raster(&self) -> crate::raster::GrayImage {
        let max = self.priority.data().iter().cloned().fold(f32::MIN_POSITIVE, f32::max);
        crate::raster::GrayImage::from_fn(512, 320, |x, y| {
            let v = self.get(y as usize / 32, x as usize / 32) / max;
            image::Luma([(v * 255.0).round() as u8])
        })
    }
}

pub fn saccade_map(output: &PolicyOutput) -> Result<SaccadeMap> {
    Ok(SaccadeMap { priority: softmax(&output.logits)?.reshape(&[GRID_ROWS, GRID_COLS])? })
}

/// Log-probabilities of every cell, unrestricted.
pub fn action_log_probs(output: &PolicyOutput) -> Result<NdArray> {
    Ok(log_softmax(&output.logits)?)
}

/// Scores state-action pairs as expert (1) or generated (0).
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub store: ParamStore,
    l1: Vec<LayerHandle>,
    l2: LayerHandle,
    l3: LayerHandle,
    in_channels: usize,
}

impl Discriminator {
    /// `state_channels` counts the policy input; the action plane is added here.
    pub fn new<R: Rng + ?Sized>(state_channels: usize, num_categories: usize, rng: &mut R) -> Self {
        assert!(num_categories >= 1 && state_channels > num_categories, "discriminator needs category planes");
        let mut store = ParamStore::new();
        let l1 = push_category_layers(&mut store, "l1", state_channels + 1, num_categories, rng);
        let l2 = store.push_layer("l2", LayerParams::conv2d(TRUNK_WIDTH, HEAD_WIDTH, conv3x3(), RELU_GAIN, rng));
        let l3 = store.push_layer("l3", LayerParams::conv2d(HEAD_WIDTH, 1, conv1x1(), OUTPUT_GAIN, rng));
        Self { store, l1, l2, l3, in_channels: state_channels + 1 }
    }

    pub fn from_store(store: ParamStore) -> Result<Self> {
        let l1 = find_category_layers(&store, "l1")?;
        let in_channels = store.get(l1[0].weights).shape()[1];
        Ok(Self {
            l1,
            l2: handle(&store, "l2", LayerKind::Conv2d(conv3x3()))?,
            l3: handle(&store, "l3", LayerKind::Conv2d(conv1x1()))?,
            in_channels,
            store,
        })
    }

    fn input(&self, state_input: &NdArray, action: usize) -> Result<NdArray> {
        if action >= NUM_ACTIONS {
            return Err(GazeError::invalid(format!("action {action} >= 160")));
        }
        if state_input.shape() != [self.in_channels - 1, GRID_ROWS, GRID_COLS] {
            return Err(GazeError::invalid(format!(
                "discriminator state {:?}, expected [{}, 10, 16]",
                state_input.shape(),
                self.in_channels - 1
            )));
        }
        let mut plane = NdArray::zeros(&[1, GRID_ROWS, GRID_COLS]);
        plane.data_mut()[action] = 1.0;
        Ok(NdArray::concat0(&[state_input, &plane])?)
    }

    /// Pre-sigmoid score of `action` in the state whose policy input is `state_input`.
    pub fn logit(&self, state_input: &NdArray, action: usize) -> Result<f32> {
        let mut tape = Tape::new();
        let z = self.logit_tape(&mut tape, state_input, action)?;
        Ok(tape.scalar(z)?)
    }

    /// Probability that the pair is expert, clamped to `[ε, 1 − ε]`.
    pub fn score(&self, state: &State, action: usize) -> Result<f32> {
        Ok(clamp_score(sigmoid(self.logit(&state.policy_input(), action)?)))
    }

    /// Records the forward pass; returns the scalar logit.
    pub fn logit_tape(&self, tape: &mut Tape, state_input: &NdArray, action: usize) -> Result<Var> {
        let x = self.input(state_input, action)?;
        let s = &self.store;
        let first = self.l1[active_category(&x, self.l1.len(), 2)];
        let xv = tape.input(x)?;
        let h = tape.layer(s, first, xv)?;
        let h = tape.relu(h)?;
        let h = tape.layer(s, self.l2, h)?;
        let h = tape.relu(h)?;
        let m = tape.layer(s, self.l3, h)?;
        let m = tape.reshape(m, &[NUM_ACTIONS])?;
        Ok(tape.pick(m, action)?)
    }
}

pub fn clamp_score(p: f32) -> f32 {
    p.clamp(DISC_EPS, 1.0 - DISC_EPS)
}
