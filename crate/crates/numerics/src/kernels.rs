//! Raw dense and convolution kernels on flat slices.
//!
//! Convolutions use a CHW layout and go through an im2col buffer so the hot
//! loops are contiguous axpy/dot operations over output positions.

/// Square-kernel convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self { kernel, stride, padding }
    }

    /// Output extent along one axis, or `None` if the kernel does not fit.
    pub fn out_extent(&self, n: usize) -> Option<usize> {
        if self.stride == 0 || self.kernel == 0 {
            return None;
        }
        let padded = n + 2 * self.padding;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// `y = W x + b` with `W` of shape `(out, in)`.
pub fn dense_forward(w: &[f32], b: &[f32], x: &[f32], out_dim: usize, in_dim: usize) -> Vec<f32> {
    (0..out_dim)
        .map(|o| {
            let row = &w[o * in_dim..(o + 1) * in_dim];
            b[o] + dot(row, x)
        })
        .collect()
}

/// Returns `(dx, dw, db)` for a dense layer.
pub fn dense_backward(
    w: &[f32],
    x: &[f32],
    dy: &[f32],
    out_dim: usize,
    in_dim: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut dx = vec![0.0; in_dim];
    let mut dw = vec![0.0; out_dim * in_dim];
    for o in 0..out_dim {
        let g = dy[o];
        let row = &w[o * in_dim..(o + 1) * in_dim];
        axpy(&mut dx, g, row);
        axpy(&mut dw[o * in_dim..(o + 1) * in_dim], g, x);
    }
    (dx, dw, dy.to_vec())
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        for k in 0..8 {
            acc[k] += a[i * 8 + k] * b[i * 8 + k];
        }
    }
    let mut s: f32 = acc.iter().sum();
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(y: &mut [f32], alpha: f32, x: &[f32]) {
    for (a, b) in y.iter_mut().zip(x) {
        *a += alpha * b;
    }
}

/// Input patches laid out as `(c * k * k, oh * ow)`.
fn im2col(input: &[f32], c: usize, h: usize, w: usize, spec: ConvSpec, oh: usize, ow: usize) -> Vec<f32> {
    let k = spec.kernel;
    let n = oh * ow;
    let mut cols = vec![0.0; c * k * k * n];
    for ci in 0..c {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * n;
                let dst = &mut cols[row..row + n];
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            *o = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], c: usize, h: usize, w: usize, spec: ConvSpec, oh: usize, ow: usize) -> Vec<f32> {
    let k = spec.kernel;
    let n = oh * ow;
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * n;
                let src = &cols[row..row + n];
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Convolution forward pass. `input` is `(c, h, w)`, `weights` is
/// `(o, c, k, k)`. Returns the `(o, oh, ow)` output buffer.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    input: &[f32],
    c: usize,
    h: usize,
    w: usize,
    weights: &[f32],
    bias: &[f32],
    o: usize,
    spec: ConvSpec,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let kk = c * spec.kernel * spec.kernel;
    let n = oh * ow;
    let owned;
    let cols: &[f32] = if spec.is_pointwise() {
        input
    } else {
        owned = im2col(input, c, h, w, spec, oh, ow);
        &owned
    };
    let mut out = vec![0.0; o * n];
    for oi in 0..o {
        let dst = &mut out[oi * n..(oi + 1) * n];
        dst.fill(bias[oi]);
        let wrow = &weights[oi * kk..(oi + 1) * kk];
        for (r, &wv) in wrow.iter().enumerate() {
            if wv != 0.0 {
                axpy(dst, wv, &cols[r * n..(r + 1) * n]);
            }
        }
    }
    out
}

/// Convolution backward pass. Returns `(dinput, dweights, dbias)`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input: &[f32],
    c: usize,
    h: usize,
    w: usize,
    weights: &[f32],
    o: usize,
    spec: ConvSpec,
    oh: usize,
    ow: usize,
    dout: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let kk = c * spec.kernel * spec.kernel;
    let n = oh * ow;
    let owned;
    let cols: &[f32] = if spec.is_pointwise() {
        input
    } else {
        owned = im2col(input, c, h, w, spec, oh, ow);
        &owned
    };
    let mut dw = vec![0.0; o * kk];
    let mut db = vec![0.0; o];
    let mut dcols = vec![0.0; kk * n];
    for oi in 0..o {
        let g = &dout[oi * n..(oi + 1) * n];
        db[oi] = g.iter().sum();
        let wrow = &weights[oi * kk..(oi + 1) * kk];
        for r in 0..kk {
            dw[oi * kk + r] = dot(g, &cols[r * n..(r + 1) * n]);
            axpy(&mut dcols[r * n..(r + 1) * n], wrow[r], g);
        }
    }
    let dinput = if spec.is_pointwise() { dcols } else { col2im(&dcols, c, h, w, spec, oh, ow) };
    (dinput, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_extent() {
        assert_eq!(ConvSpec::new(3, 1, 1).out_extent(10), Some(10));
        assert_eq!(ConvSpec::new(4, 4, 0).out_extent(320), Some(80));
        assert_eq!(ConvSpec::new(5, 1, 0).out_extent(3), None);
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let (c, h, w) = (2, 5, 4);
        let spec = ConvSpec::new(3, 2, 1);
        let oh = spec.out_extent(h).unwrap();
        let ow = spec.out_extent(w).unwrap();
        let x: Vec<f32> = (0..c * h * w).map(|i| (i as f32 * 0.37).sin()).collect();
        let y: Vec<f32> = (0..c * 9 * oh * ow).map(|i| (i as f32 * 0.11).cos()).collect();
        let lhs: f32 = im2col(&x, c, h, w, spec, oh, ow).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.iter().zip(col2im(&y, c, h, w, spec, oh, ow)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
    }
}
