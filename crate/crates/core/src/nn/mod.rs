//! Minimal CNN building blocks with hand-written backward passes.
//!
//! Layers are generic over the float type so the same code path can be
//! exercised at `f64` against finite differences and run at `f32` in
//! production. Convolutions go through im2col + GEMM (`ndarray::dot`), which
//! is where essentially all training time is spent.

mod adam;

pub use adam::Adam;

use ndarray::{s, Array1, Array2, Array3, Axis};
pub use ndarray::NdFloat;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Convolution with square kernel (`k` = 1 or 3), stride 1.
/// 3x3 kernels use zero padding of 1 so spatial shape is preserved.
#[derive(Debug, Clone)]
pub struct Conv<F> {
    /// Weights flattened to `(cout, cin * k * k)` for the GEMM path.
    pub w: Array2<F>,
    pub b: Array1<F>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

/// Gradient of one convolution, same shapes as the parameters.
#[derive(Debug, Clone)]
pub struct ConvGrad<F> {
    pub w: Array2<F>,
    pub b: Array1<F>,
}

/// Standard normal via Box-Muller, deterministic given the stream.
fn normal<F: NdFloat>(rng: &mut ChaCha8Rng) -> F {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    F::from(z).unwrap()
}

impl<F: NdFloat> Conv<F> {
    /// He-normal initialization.
    pub fn init(cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(k == 1 || k == 3, "only 1x1 and 3x3 kernels are supported");
        let fan_in = (cin * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let std_f = F::from(std).unwrap();
        let w = Array2::from_shape_fn((cout, cin * k * k), |_| normal::<F>(rng) * std_f);
        let b = Array1::zeros(cout);
        Conv { w, b, cin, cout, k }
    }

    pub fn zero_grad(&self) -> ConvGrad<F> {
        ConvGrad {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    /// im2col: unfold `x` into a `(cin*k*k, h*w)` matrix.
    fn im2col(&self, x: &Array3<F>) -> Array2<F> {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.cin);
        if self.k == 1 {
            return x.to_shape((c, h * w)).unwrap().to_owned();
        }
        let mut padded = Array3::<F>::zeros((c, h + 2, w + 2));
        padded.slice_mut(s![.., 1..h + 1, 1..w + 1]).assign(x);
        let mut cols = Array2::<F>::zeros((c * 9, h * w));
        for ci in 0..c {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = ci * 9 + ky * 3 + kx;
                    let mut dst = cols.row_mut(row);
                    for y in 0..h {
                        let src = padded.slice(s![ci, y + ky, kx..kx + w]);
                        dst.slice_mut(s![y * w..(y + 1) * w]).assign(&src);
                    }
                }
            }
        }
        cols
    }

    /// Scatter-add of column gradients back to input layout.
    fn col2im(&self, dcols: &Array2<F>, h: usize, w: usize) -> Array3<F> {
        if self.k == 1 {
            return dcols.to_shape((self.cin, h, w)).unwrap().to_owned();
        }
        let mut dpad = Array3::<F>::zeros((self.cin, h + 2, w + 2));
        for ci in 0..self.cin {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = ci * 9 + ky * 3 + kx;
                    let src = dcols.row(row);
                    for y in 0..h {
                        let mut dst = dpad.slice_mut(s![ci, y + ky, kx..kx + w]);
                        dst += &src.slice(s![y * w..(y + 1) * w]);
                    }
                }
            }
        }
        dpad.slice(s![.., 1..h + 1, 1..w + 1]).to_owned()
    }

    pub fn forward(&self, x: &Array3<F>) -> Array3<F> {
        self.forward_cached(x).0
    }

    /// Forward pass returning the im2col matrix needed by [`Conv::backward`].
    pub fn forward_cached(&self, x: &Array3<F>) -> (Array3<F>, Array2<F>) {
        let (_, h, w) = x.dim();
        let cols = self.im2col(x);
        let mut out = self.w.dot(&cols);
        out += &self.b.view().insert_axis(Axis(1));
        (out.to_shape((self.cout, h, w)).unwrap().to_owned(), cols)
    }

    /// Backward pass. `cols` is the cache from [`Conv::forward_cached`].
    /// Returns the input gradient and accumulates parameter gradients.
    pub fn backward(&self, cols: &Array2<F>, dy: &Array3<F>, grad: &mut ConvGrad<F>) -> Array3<F> {
        let (_, h, w) = dy.dim();
        let dy2 = dy.to_shape((self.cout, h * w)).unwrap();
        grad.w += &dy2.dot(&cols.t());
        grad.b += &dy2.sum_axis(Axis(1));
        let dcols = self.w.t().dot(&dy2);
        self.col2im(&dcols, h, w)
    }

    /// Input gradient only — skips the parameter-gradient GEMM and needs no
    /// im2col cache. This is the hot path for input-space attacks.
    pub fn backward_input(&self, dy: &Array3<F>) -> Array3<F> {
        let (_, h, w) = dy.dim();
        let dy2 = dy.to_shape((self.cout, h * w)).unwrap();
        let dcols = self.w.t().dot(&dy2);
        self.col2im(&dcols, h, w)
    }

    pub fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// ReLU applied out of place.
pub fn relu<F: NdFloat>(x: &Array3<F>) -> Array3<F> {
    x.mapv(|v| v.max(F::zero()))
}

/// ReLU backward given the *activated output* `y` (y > 0 iff pre-act > 0).
pub fn relu_backward<F: NdFloat>(y: &Array3<F>, dy: &Array3<F>) -> Array3<F> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &v| {
        if v <= F::zero() {
            *d = F::zero();
        }
    });
    dx
}

/// 2x2 max pooling, stride 2. Ties resolve to the first element in scan
/// order, so forward and backward stay deterministic.
pub fn maxpool2<F: NdFloat>(x: &Array3<F>) -> (Array3<F>, Array3<u8>) {
    let (c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even spatial dims");
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array3::<F>::zeros((c, oh, ow));
    let mut idx = Array3::<u8>::zeros((c, oh, ow));
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = x[[ci, oy * 2, ox * 2]];
                let mut bi = 0u8;
                for (i, (dy, dx)) in [(0, 1), (1, 0), (1, 1)].iter().enumerate() {
                    let v = x[[ci, oy * 2 + dy, ox * 2 + dx]];
                    if v > best {
                        best = v;
                        bi = (i + 1) as u8;
                    }
                }
                y[[ci, oy, ox]] = best;
                idx[[ci, oy, ox]] = bi;
            }
        }
    }
    (y, idx)
}

pub fn maxpool2_backward<F: NdFloat>(
    idx: &Array3<u8>,
    dy: &Array3<F>,
    in_shape: (usize, usize, usize),
) -> Array3<F> {
    let (c, oh, ow) = dy.dim();
    let mut dx = Array3::<F>::zeros(in_shape);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let i = idx[[ci, oy, ox]] as usize;
                let (py, px) = (oy * 2 + i / 2, ox * 2 + i % 2);
                dx[[ci, py, px]] = dx[[ci, py, px]] + dy[[ci, oy, ox]];
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<F: NdFloat>(x: &Array3<F>) -> Array3<F> {
    let (c, h, w) = x.dim();
    let mut y = Array3::<F>::zeros((c, h * 2, w * 2));
    for ci in 0..c {
        for yy in 0..h {
            for xx in 0..w {
                let v = x[[ci, yy, xx]];
                y[[ci, yy * 2, xx * 2]] = v;
                y[[ci, yy * 2, xx * 2 + 1]] = v;
                y[[ci, yy * 2 + 1, xx * 2]] = v;
                y[[ci, yy * 2 + 1, xx * 2 + 1]] = v;
            }
        }
    }
    y
}

pub fn upsample2_backward<F: NdFloat>(dy: &Array3<F>) -> Array3<F> {
    let (c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array3::<F>::zeros((c, h, w));
    for ci in 0..c {
        for yy in 0..h {
            for xx in 0..w {
                dx[[ci, yy, xx]] = dy[[ci, yy * 2, xx * 2]]
                    + dy[[ci, yy * 2, xx * 2 + 1]]
                    + dy[[ci, yy * 2 + 1, xx * 2]]
                    + dy[[ci, yy * 2 + 1, xx * 2 + 1]];
            }
        }
    }
    dx
}

/// Channel concatenation `[a; b]`.
pub fn concat_channels<F: NdFloat>(a: &Array3<F>, b: &Array3<F>) -> Array3<F> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("spatial dims must match")
}

/// Split a channel-concat gradient back into the two parts.
pub fn split_channels<F: NdFloat>(d: &Array3<F>, ca: usize) -> (Array3<F>, Array3<F>) {
    let da = d.slice(s![..ca, .., ..]).to_owned();
    let db = d.slice(s![ca.., .., ..]).to_owned();
    (da, db)
}

/// Channel-wise softmax over a `(k, h, w)` logits tensor.
pub fn softmax_channels<F: NdFloat>(logits: &Array3<F>) -> Array3<F> {
    let (k, h, w) = logits.dim();
    let mut out = logits.clone();
    for y in 0..h {
        for x in 0..w {
            let mut mx = out[[0, y, x]];
            for c in 1..k {
                mx = mx.max(out[[c, y, x]]);
            }
            let mut sum = F::zero();
            for c in 0..k {
                let e = (out[[c, y, x]] - mx).exp();
                out[[c, y, x]] = e;
                sum = sum + e;
            }
            for c in 0..k {
                out[[c, y, x]] = out[[c, y, x]] / sum;
            }
        }
    }
    out
}

/// Backward through channel-wise softmax: given probs `p` and `dL/dp`,
/// returns `dL/dlogits = p ⊙ (dp − Σ_c dp_c p_c)`.
pub fn softmax_channels_backward<F: NdFloat>(p: &Array3<F>, dp: &Array3<F>) -> Array3<F> {
    let (k, h, w) = p.dim();
    let mut dz = Array3::<F>::zeros((k, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut dot = F::zero();
            for c in 0..k {
                dot = dot + dp[[c, y, x]] * p[[c, y, x]];
            }
            for c in 0..k {
                dz[[c, y, x]] = p[[c, y, x]] * (dp[[c, y, x]] - dot);
            }
        }
    }
    dz
}
