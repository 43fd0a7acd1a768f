use gazeirl_numerics::{
    forward, ConvSpec, LayerHandle, LayerParams, NdArray, OptimState, ParamStore, Tape, Var, RELU_GAIN,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_array(shape: &[usize], rng: &mut impl Rng) -> NdArray {
    let n = shape.iter().product();
    NdArray::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

/// Direct sliding-window convolution, f64 accumulation.
fn naive_conv(input: &NdArray, layer: &LayerParams, spec: ConvSpec) -> Vec<f64> {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let o = layer.weights.shape()[0];
    let k = spec.kernel;
    let oh = (h + 2 * spec.padding - k) / spec.stride + 1;
    let ow = (w + 2 * spec.padding - k) / spec.stride + 1;
    let mut out = vec![0.0f64; o * oh * ow];
    for oi in 0..o {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = layer.bias.data()[oi] as f64;
                for ci in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * spec.stride + ky) as isize - spec.padding as isize;
                            let ix = (x * spec.stride + kx) as isize - spec.padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let wv = layer.weights.data()[((oi * c + ci) * k + ky) * k + kx] as f64;
                            let xv = input.data()[(ci * h + iy as usize) * w + ix as usize] as f64;
                            acc += wv * xv;
                        }
                    }
                }
                out[(oi * oh + y) * ow + x] = acc;
            }
        }
    }
    out
}

#[test]
fn conv_matches_sliding_window_oracle() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for spec in [ConvSpec::new(3, 1, 1), ConvSpec::new(4, 4, 0), ConvSpec::new(2, 2, 0), ConvSpec::new(3, 2, 1)] {
            let layer = LayerParams::conv2d(3, 5, spec, RELU_GAIN, &mut rng);
            let mut layer = layer;
            layer.bias = random_array(&[5], &mut rng);
            let input = random_array(&[3, 10, 16], &mut rng);
            let out = forward(&layer, &input).unwrap();
            let oracle = naive_conv(&input, &layer, spec);
            assert_eq!(out.len(), oracle.len());
            if spec == ConvSpec::new(3, 1, 1) {
                assert_eq!(out.shape(), &[5, 10, 16]);
            }
            for (a, b) in out.data().iter().zip(&oracle) {
                assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn softmax_matches_f64_oracle() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f32> = (0..10).map(|_| rng.random_range(-8.0f32..8.0)).collect();
        let p = gazeirl_numerics::softmax(&NdArray::from_vec(logits.clone())).unwrap();
        let max = logits.iter().map(|&v| v as f64).fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|&v| (v as f64 - max).exp()).sum();
        for (i, &v) in logits.iter().enumerate() {
            let exact = (v as f64 - max).exp() / z;
            assert!((p.data()[i] as f64 - exact).abs() < 1e-6);
        }
    }
}

/// A small net exercising every differentiable op on the tape.
struct Net {
    conv3: LayerHandle,
    conv_s2: LayerHandle,
    conv1: LayerHandle,
    dense: LayerHandle,
}

impl Net {
    fn new(store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let conv3 = store.push_layer("c3", LayerParams::conv2d(2, 4, ConvSpec::new(3, 1, 1), RELU_GAIN, rng));
        let conv_s2 = store.push_layer("cs", LayerParams::conv2d(4, 4, ConvSpec::new(2, 2, 0), RELU_GAIN, rng));
        let conv1 = store.push_layer("c1", LayerParams::conv2d(4, 3, ConvSpec::new(1, 1, 0), 1.0, rng));
        let dense = store.push_layer("d", LayerParams::dense(3, 5, 1.0, rng));
        for id in 0..store.len() {
            let shape = store.get(id).shape().to_vec();
            if shape.len() == 1 {
                *store.get_mut(id) = random_array(&shape, rng).map(|v| 0.1 * v);
            }
        }
        Self { conv3, conv_s2, conv1, dense }
    }

    fn loss(&self, store: &ParamStore, x: &NdArray, target: usize) -> (Tape, Var) {
        let mut t = Tape::new();
        let x = t.input(x.clone()).unwrap();
        let h = t.layer(store, self.conv3, x).unwrap();
        let h = t.relu(h).unwrap();
        let h = t.layer(store, self.conv_s2, h).unwrap();
        let h = t.softplus(h).unwrap();
        let h = t.layer(store, self.conv1, h).unwrap();
        let pooled = t.spatial_mean(h).unwrap();
        let pooled = t.scale(pooled, 12.0).unwrap();
        let logits = t.layer(store, self.dense, pooled).unwrap();
        let lsm = t.log_softmax(logits).unwrap();
        let nll = t.pick(lsm, target).unwrap();
        let nll = t.scale(nll, -1.0).unwrap();
        // clipped ratio term and a squared value term
        let r = t.exp(lsm).unwrap();
        let rc = t.clamp(r, 0.1, 0.3).unwrap();
        let m = t.minimum(r, rc).unwrap();
        let ms = t.sum(m).unwrap();
        let sq = t.square(logits).unwrap();
        let sq = t.mean(sq).unwrap();
        let sq = t.scale(sq, 0.1).unwrap();
        let a = t.add(nll, ms).unwrap();
        let loss = t.add(a, sq).unwrap();
        (t, loss)
    }

    /// Smallest distance from any relu or clamp input to its kink.
    fn kink_margin(&self, store: &ParamStore, x: &NdArray) -> f32 {
        let mut t = Tape::new();
        let xv = t.input(x.clone()).unwrap();
        let pre = t.layer(store, self.conv3, xv).unwrap();
        let h = t.relu(pre).unwrap();
        let h = t.layer(store, self.conv_s2, h).unwrap();
        let h = t.softplus(h).unwrap();
        let h = t.layer(store, self.conv1, h).unwrap();
        let pooled = t.spatial_mean(h).unwrap();
        let pooled = t.scale(pooled, 12.0).unwrap();
        let logits = t.layer(store, self.dense, pooled).unwrap();
        let p = gazeirl_numerics::softmax(t.value(logits).unwrap()).unwrap();
        let relu_gap = t.value(pre).unwrap().data().iter().map(|v| v.abs());
        let clamp_gap = p.data().iter().map(|&v| (v - 0.1).abs().min((v - 0.3).abs()));
        relu_gap.chain(clamp_gap).fold(f32::INFINITY, f32::min)
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

const FD_STEP: f32 = 1e-3;

/// Central differences of `loss` with respect to every tensor of `store`,
/// compared to the tape gradient.
fn check_gradients(store: &mut ParamStore, loss: impl Fn(&ParamStore) -> (Tape, Var)) -> Vec<(String, f64)> {
    let (tape, root) = loss(store);
    let grads = tape.backward(root, store).unwrap();
    let mut errors = Vec::new();
    for id in 0..store.len() {
        let analytic: Vec<f64> = grads.get(id).data().iter().map(|&v| v as f64).collect();
        let mut numeric = vec![0.0f64; analytic.len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + FD_STEP;
            let (tp, lp) = loss(store);
            store.get_mut(id).data_mut()[k] = orig - FD_STEP;
            let (tm, lm) = loss(store);
            store.get_mut(id).data_mut()[k] = orig;
            *slot = (tp.scalar(lp).unwrap() as f64 - tm.scalar(lm).unwrap() as f64) / (2.0 * FD_STEP as f64);
        }
        errors.push((store.name(id).to_string(), rel_err(&analytic, &numeric)));
    }
    errors
}

#[test]
fn every_layer_kind_passes_gradient_check() {
    let kinds: [(&str, Option<ConvSpec>, Vec<usize>); 5] = [
        ("dense", None, vec![7]),
        ("conv3x3", Some(ConvSpec::new(3, 1, 1)), vec![3, 10, 16]),
        ("conv1x1", Some(ConvSpec::new(1, 1, 0)), vec![3, 10, 16]),
        ("conv4s4", Some(ConvSpec::new(4, 4, 0)), vec![3, 16, 24]),
        ("conv2s2", Some(ConvSpec::new(2, 2, 0)), vec![3, 10, 16]),
    ];
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
            let out_shape = forward(&store.layer(handle), &x).unwrap().shape().to_vec();
            let r = random_array(&out_shape, &mut rng);
            let errors = check_gradients(&mut store, |s| {
                let mut t = Tape::new();
                let xv = t.input(x.clone()).unwrap();
                let y = t.layer(s, handle, xv).unwrap();
                let y = t.softplus(y).unwrap();
                let rv = t.input(r.clone()).unwrap();
                let p = t.mul(y, rv).unwrap();
                let l = t.sum(p).unwrap();
                (t, l)
            });
            for (tensor, e) in errors {
                assert!(e < 1e-3, "{name} seed {seed} {tensor}: rel err {e}");
            }
        }
    }
}

/// Convolution over f64 tensors with the same layout as the tape layers.
fn conv_f64(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    b: &[f64],
    spec: ConvSpec,
) -> (Vec<f64>, usize, usize) {
    let o = b.len();
    let k = spec.kernel;
    let oh = (h + 2 * spec.padding - k) / spec.stride + 1;
    let ow = (w + 2 * spec.padding - k) / spec.stride + 1;
    let mut out = vec![0.0; o * oh * ow];
    for oi in 0..o {
        for y in 0..oh {
            for xo in 0..ow {
                let mut acc = b[oi];
                for ci in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * spec.stride + ky) as isize - spec.padding as isize;
                            let ix = (xo * spec.stride + kx) as isize - spec.padding as isize;
                            if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                                acc +=
                                    wt[((oi * c + ci) * k + ky) * k + kx] * x[(ci * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                }
                out[(oi * oh + y) * ow + xo] = acc;
            }
        }
    }
    (out, oh, ow)
}

/// Double-precision forward of [`Net::loss`] over parameters `p`, in store order.
fn net_loss_f64(p: &[Vec<f64>], x: &NdArray, target: usize) -> f64 {
    let xs: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (a, h, w) = conv_f64(&xs, c, h, w, &p[0], &p[1], ConvSpec::new(3, 1, 1));
    let a: Vec<f64> = a.iter().map(|v| v.max(0.0)).collect();
    let (a, h, w) = conv_f64(&a, 4, h, w, &p[2], &p[3], ConvSpec::new(2, 2, 0));
    let a: Vec<f64> = a.iter().map(|v| v.max(0.0) + (-v.abs()).exp().ln_1p()).collect();
    let (a, h, w) = conv_f64(&a, 4, h, w, &p[4], &p[5], ConvSpec::new(1, 1, 0));
    let n = h * w;
    let pooled: Vec<f64> = a.chunks(n).map(|ch| 12.0 * ch.iter().sum::<f64>() / n as f64).collect();
    let logits: Vec<f64> = (0..5).map(|o| p[7][o] + (0..3).map(|i| p[6][o * 3 + i] * pooled[i]).sum::<f64>()).collect();
    let max = logits.iter().cloned().fold(f64::MIN, f64::max);
    let lz = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let lsm: Vec<f64> = logits.iter().map(|l| l - lz).collect();
    let ms: f64 = lsm.iter().map(|l| l.exp()).map(|r| r.min(r.clamp(0.1, 0.3))).sum();
    let sq = 0.1 * logits.iter().map(|l| l * l).sum::<f64>() / 5.0;
    -lsm[target] + ms + sq
}

#[test]
fn composite_net_passes_gradient_check() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut store = ParamStore::new();
        let net = Net::new(&mut store, &mut rng);
        // central differences are meaningless across a kink
        let x = loop {
            let x = random_array(&[2, 6, 8], &mut rng);
            if net.kink_margin(&store, &x) > 0.01 {
                break x;
            }
        };
        let target = rng.random_range(0..5);
        let (tape, root) = net.loss(&store, &x, target);
        let grads = tape.backward(root, &store).unwrap();
        let mut params: Vec<Vec<f64>> =
            store.iter().map(|(_, t)| t.data().iter().map(|&v| v as f64).collect()).collect();
        assert!((net_loss_f64(&params, &x, target) - tape.scalar(root).unwrap() as f64).abs() < 1e-5);

        let h = FD_STEP as f64;
        for id in 0..store.len() {
            let analytic: Vec<f64> = grads.get(id).data().iter().map(|&v| v as f64).collect();
            let mut numeric = vec![0.0; analytic.len()];
            for k in 0..analytic.len() {
                let orig = params[id][k];
                params[id][k] = orig + h;
                let lp = net_loss_f64(&params, &x, target);
                params[id][k] = orig - h;
                let lm = net_loss_f64(&params, &x, target);
                params[id][k] = orig;
                numeric[k] = (lp - lm) / (2.0 * h);
            }
            let e = rel_err(&analytic, &numeric);
            assert!(e < 1e-3, "seed {seed} {}: rel err {e}", store.name(id));
        }
    }
}

#[test]
fn adam_descends_one_dimensional_quadratic() {
    let mut store = ParamStore::new();
    store.push("x", NdArray::from_vec(vec![3.0]));
    let mut opt = OptimState::new(&store, 1e-2);
    let mut losses = Vec::new();
    for _ in 0..100 {
        let mut t = Tape::new();
        let x = t.param(&store, 0).unwrap();
        let shifted = t.add_scalar(x, -1.0).unwrap();
        let sq = t.square(shifted).unwrap();
        let loss = t.sum(sq).unwrap();
        losses.push(t.scalar(loss).unwrap());
        let g = t.backward(loss, &store).unwrap();
        opt.optim_step(&mut store, &g).unwrap();
    }
    for w in losses.windows(10) {
        assert!(w[9] < w[0], "no decrease over window {w:?}");
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let net = Net::new(&mut store, &mut rng);
        let x = random_array(&[2, 6, 8], &mut rng);
        let (t, l) = net.loss(&store, &x, 1);
        t.scalar(l).unwrap().to_bits()
    };
    assert_eq!(build(), build());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_normalized_and_shift_invariant(
            raw in prop::collection::vec(-20_480i32..20_480, 1..200),
            shift in -50i32..50,
        ) {
            // multiples of 2^-10 so that adding an integer shift is exact in f32
            let logits: Vec<f32> = raw.iter().map(|&v| v as f32 / 1024.0).collect();
            let shift = shift as f32;
            let p = gazeirl_numerics::softmax(&NdArray::from_vec(logits.clone())).unwrap();
            let total: f64 = p.data().iter().map(|&v| v as f64).sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            prop_assert!(p.data().iter().all(|&v| v > 0.0 || logits.len() > 1));
            let shifted: Vec<f32> = logits.iter().map(|v| v + shift).collect();
            let q = gazeirl_numerics::softmax(&NdArray::from_vec(shifted)).unwrap();
            for (a, b) in p.data().iter().zip(q.data()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn checkpoint_round_trip(values in prop::collection::vec(-1e6f32..1e6, 0..64), name in "[a-z.]{1,12}") {
            let mut s = ParamStore::new();
            s.push(name, NdArray::from_vec(values));
            let mut buf = Vec::new();
            gazeirl_numerics::write_checkpoint(&mut buf, &s).unwrap();
            prop_assert_eq!(gazeirl_numerics::read_checkpoint(&buf[..]).unwrap(), s);
        }
    }
}
