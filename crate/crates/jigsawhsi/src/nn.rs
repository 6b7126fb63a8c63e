//! Differentiable layer primitives with analytic forward and backward
//! passes: convolution, dense, relu, pooling, concatenation, crop,
//! dropout and the softmax cross-entropy head.
//!
//! All ops are pure given (inputs, parameters, rng state) and accumulate
//! in a fixed order, so results are bitwise reproducible under a fixed
//! seed. Shape violations are programming errors and panic.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Scalar type for network math: f32 in production, f64 for gradient
/// verification.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumCast
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Default
    + std::fmt::Debug
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self {
        num_traits::cast(v).unwrap()
    }
    fn into_f64(self) -> f64 {
        num_traits::cast(self).unwrap()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// (N, H, W, C) tensor, channels-last, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<F> {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Tensor4<F> {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Self {
            n,
            h,
            w,
            c,
            data: vec![F::zero(); n * h * w * c],
        }
    }

    pub fn from_vec(n: usize, h: usize, w: usize, c: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), n * h * w * c, "tensor data length mismatch");
        Self { n, h, w, c, data }
    }

    #[inline]
    pub fn idx(&self, b: usize, y: usize, x: usize, ch: usize) -> usize {
        ((b * self.h + y) * self.w + x) * self.c + ch
    }

    #[inline]
    pub fn get(&self, b: usize, y: usize, x: usize, ch: usize) -> F {
        self.data[self.idx(b, y, x, ch)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, y: usize, x: usize, ch: usize, v: F) {
        let i = self.idx(b, y, x, ch);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.n == other.n && self.h == other.h && self.w == other.w && self.c == other.c
    }
}

/// Row-major (rows x cols) matrix for the dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Mat<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: F) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Glorot-uniform weight init: U(+-sqrt(6/(fan_in+fan_out))).
pub fn glorot_uniform<F: Scalar>(
    fan_in: usize,
    fan_out: usize,
    len: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<F> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..len)
        .map(|_| F::from_f64(rng.gen_range(-limit..limit)))
        .collect()
}

// ---------------------------------------------------------------------------
// Convolution (same padding, stride 1, odd kernel)
// ---------------------------------------------------------------------------

/// Weights are laid out [ky][kx][cin][cout]; output spatial dims equal
/// input dims.
pub fn conv2d_forward<F: Scalar>(
    x: &Tensor4<F>,
    w: &[F],
    b: &[F],
    k: usize,
    cin: usize,
    cout: usize,
) -> Tensor4<F> {
    assert_eq!(k % 2, 1, "kernel size must be odd");
    assert_eq!(x.c, cin, "conv2d input channel mismatch: {} vs {}", x.c, cin);
    assert_eq!(w.len(), k * k * cin * cout);
    assert_eq!(b.len(), cout);
    let half = k / 2;
    let mut y = Tensor4::zeros(x.n, x.h, x.w, cout);
    for bn in 0..x.n {
        for oy in 0..x.h {
            for ox in 0..x.w {
                let out_base = y.idx(bn, oy, ox, 0);
                let acc = &mut y.data[out_base..out_base + cout];
                acc.copy_from_slice(b);
                for ky in 0..k {
                    let sy = oy as isize + ky as isize - half as isize;
                    if sy < 0 || sy >= x.h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = ox as isize + kx as isize - half as isize;
                        if sx < 0 || sx >= x.w as isize {
                            continue;
                        }
                        let in_base = x.idx(bn, sy as usize, sx as usize, 0);
                        let w_base = (ky * k + kx) * cin * cout;
                        for ci in 0..cin {
                            let xv = x.data[in_base + ci];
                            let ws = &w[w_base + ci * cout..w_base + (ci + 1) * cout];
                            for (a, &wv) in acc.iter_mut().zip(ws) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Gradients w.r.t. input, weights and bias for the same-padding stride-1
/// convolution.
pub fn conv2d_backward<F: Scalar>(
    x: &Tensor4<F>,
    w: &[F],
    dy: &Tensor4<F>,
    k: usize,
    cin: usize,
    cout: usize,
) -> (Tensor4<F>, Vec<F>, Vec<F>) {
    assert_eq!(dy.c, cout);
    assert!(dy.n == x.n && dy.h == x.h && dy.w == x.w);
    let half = k / 2;
    let mut dx = Tensor4::zeros(x.n, x.h, x.w, cin);
    let mut dw = vec![F::zero(); w.len()];
    let mut db = vec![F::zero(); cout];
    for bn in 0..x.n {
        for oy in 0..x.h {
            for ox in 0..x.w {
                let dy_base = dy.idx(bn, oy, ox, 0);
                let g = &dy.data[dy_base..dy_base + cout];
                for (dbv, &gv) in db.iter_mut().zip(g) {
                    *dbv += gv;
                }
                for ky in 0..k {
                    let sy = oy as isize + ky as isize - half as isize;
                    if sy < 0 || sy >= x.h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = ox as isize + kx as isize - half as isize;
                        if sx < 0 || sx >= x.w as isize {
                            continue;
                        }
                        let in_base = x.idx(bn, sy as usize, sx as usize, 0);
                        let w_base = (ky * k + kx) * cin * cout;
                        for ci in 0..cin {
                            let xv = x.data[in_base + ci];
                            let ws = &w[w_base + ci * cout..w_base + (ci + 1) * cout];
                            let dws = &mut dw[w_base + ci * cout..w_base + (ci + 1) * cout];
                            let mut acc = F::zero();
                            for ((dwv, &wv), &gv) in dws.iter_mut().zip(ws).zip(g) {
                                *dwv += xv * gv;
                                acc += wv * gv;
                            }
                            dx.data[in_base + ci] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

pub fn dense_forward<F: Scalar>(x: &Mat<F>, w: &Mat<F>, b: &[F]) -> Mat<F> {
    assert_eq!(x.cols, w.rows, "dense feature mismatch");
    assert_eq!(b.len(), w.cols);
    let mut y = Mat::zeros(x.rows, w.cols);
    for r in 0..x.rows {
        let yr = &mut y.data[r * w.cols..(r + 1) * w.cols];
        yr.copy_from_slice(b);
        for f in 0..x.cols {
            let xv = x.get(r, f);
            let wr = &w.data[f * w.cols..(f + 1) * w.cols];
            for (yv, &wv) in yr.iter_mut().zip(wr) {
                *yv += xv * wv;
            }
        }
    }
    y
}

pub fn dense_backward<F: Scalar>(x: &Mat<F>, w: &Mat<F>, dy: &Mat<F>) -> (Mat<F>, Mat<F>, Vec<F>) {
    assert_eq!(dy.rows, x.rows);
    assert_eq!(dy.cols, w.cols);
    let mut dx = Mat::zeros(x.rows, x.cols);
    let mut dw = Mat::zeros(w.rows, w.cols);
    let mut db = vec![F::zero(); w.cols];
    for r in 0..x.rows {
        let g = dy.row(r);
        for (dbv, &gv) in db.iter_mut().zip(g) {
            *dbv += gv;
        }
        for f in 0..x.cols {
            let xv = x.get(r, f);
            let wr = &w.data[f * w.cols..(f + 1) * w.cols];
            let dwr = &mut dw.data[f * w.cols..(f + 1) * w.cols];
            let mut acc = F::zero();
            for ((dwv, &wv), &gv) in dwr.iter_mut().zip(wr).zip(g) {
                *dwv += xv * gv;
                acc += wv * gv;
            }
            dx.set(r, f, acc);
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// Activations and pooling
// ---------------------------------------------------------------------------

pub fn relu<F: Scalar>(x: &[F]) -> Vec<F> {
    x.iter().map(|&v| v.max(F::zero())).collect()
}

/// dL/dx given the relu *input*.
pub fn relu_backward<F: Scalar>(x: &[F], dy: &[F]) -> Vec<F> {
    x.iter()
        .zip(dy)
        .map(|(&xv, &gv)| if xv > F::zero() { gv } else { F::zero() })
        .collect()
}

/// Max pooling, stride 1, same padding; ties go to the first element in
/// row-major scan order. Returns the output and the winning input index
/// per output cell for the backward pass.
pub fn max_pool_forward<F: Scalar>(x: &Tensor4<F>, p: usize) -> (Tensor4<F>, Vec<usize>) {
    let lo = (p - 1) / 2;
    let mut y = Tensor4::zeros(x.n, x.h, x.w, x.c);
    let mut argmax = vec![0usize; y.data.len()];
    for bn in 0..x.n {
        for oy in 0..x.h {
            for ox in 0..x.w {
                for ch in 0..x.c {
                    let mut best = F::neg_infinity();
                    let mut best_idx = 0;
                    for ky in 0..p {
                        let sy = oy as isize + ky as isize - lo as isize;
                        if sy < 0 || sy >= x.h as isize {
                            continue;
                        }
                        for kx in 0..p {
                            let sx = ox as isize + kx as isize - lo as isize;
                            if sx < 0 || sx >= x.w as isize {
                                continue;
                            }
                            let v = x.get(bn, sy as usize, sx as usize, ch);
                            if v > best {
                                best = v;
                                best_idx = x.idx(bn, sy as usize, sx as usize, ch);
                            }
                        }
                    }
                    let oi = y.idx(bn, oy, ox, ch);
                    y.data[oi] = best;
                    argmax[oi] = best_idx;
                }
            }
        }
    }
    (y, argmax)
}

pub fn max_pool_backward<F: Scalar>(
    x_shape: (usize, usize, usize, usize),
    argmax: &[usize],
    dy: &Tensor4<F>,
) -> Tensor4<F> {
    let (n, h, w, c) = x_shape;
    let mut dx = Tensor4::zeros(n, h, w, c);
    for (oi, &src) in argmax.iter().enumerate() {
        dx.data[src] += dy.data[oi];
    }
    dx
}

/// Average pooling with stride p and zero padding on the right/bottom
/// edge; the divisor is always p*p, so the gradient is uniform 1/p^2.
pub fn avg_pool_forward<F: Scalar>(x: &Tensor4<F>, p: usize) -> Tensor4<F> {
    let oh = x.h.div_ceil(p);
    let ow = x.w.div_ceil(p);
    let inv = F::from_f64(1.0 / (p * p) as f64);
    let mut y = Tensor4::zeros(x.n, oh, ow, x.c);
    for bn in 0..x.n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..x.c {
                    let mut acc = F::zero();
                    for ky in 0..p {
                        let sy = oy * p + ky;
                        if sy >= x.h {
                            continue;
                        }
                        for kx in 0..p {
                            let sx = ox * p + kx;
                            if sx >= x.w {
                                continue;
                            }
                            acc += x.get(bn, sy, sx, ch);
                        }
                    }
                    y.set(bn, oy, ox, ch, acc * inv);
                }
            }
        }
    }
    y
}

pub fn avg_pool_backward<F: Scalar>(
    x_shape: (usize, usize, usize, usize),
    p: usize,
    dy: &Tensor4<F>,
) -> Tensor4<F> {
    let (n, h, w, c) = x_shape;
    let inv = F::from_f64(1.0 / (p * p) as f64);
    let mut dx = Tensor4::zeros(n, h, w, c);
    for bn in 0..n {
        for oy in 0..dy.h {
            for ox in 0..dy.w {
                for ch in 0..c {
                    let g = dy.get(bn, oy, ox, ch) * inv;
                    for ky in 0..p {
                        let sy = oy * p + ky;
                        if sy >= h {
                            continue;
                        }
                        for kx in 0..p {
                            let sx = ox * p + kx;
                            if sx >= w {
                                continue;
                            }
                            let i = dx.idx(bn, sy, sx, ch);
                            dx.data[i] += g;
                        }
                    }
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Shape plumbing
// ---------------------------------------------------------------------------

pub fn concat_channels<F: Scalar>(xs: &[&Tensor4<F>]) -> Tensor4<F> {
    assert!(!xs.is_empty());
    let (n, h, w) = (xs[0].n, xs[0].h, xs[0].w);
    for x in xs {
        assert!(x.n == n && x.h == h && x.w == w, "concat shape mismatch");
    }
    let c_total: usize = xs.iter().map(|x| x.c).sum();
    let mut y = Tensor4::zeros(n, h, w, c_total);
    for bn in 0..n {
        for yy in 0..h {
            for xx in 0..w {
                let mut off = y.idx(bn, yy, xx, 0);
                for x in xs {
                    let base = x.idx(bn, yy, xx, 0);
                    y.data[off..off + x.c].copy_from_slice(&x.data[base..base + x.c]);
                    off += x.c;
                }
            }
        }
    }
    y
}

/// Splits a channel-concat gradient back into per-input gradients.
pub fn concat_channels_backward<F: Scalar>(dy: &Tensor4<F>, channels: &[usize]) -> Vec<Tensor4<F>> {
    assert_eq!(channels.iter().sum::<usize>(), dy.c);
    let mut out: Vec<Tensor4<F>> = channels
        .iter()
        .map(|&c| Tensor4::zeros(dy.n, dy.h, dy.w, c))
        .collect();
    for bn in 0..dy.n {
        for yy in 0..dy.h {
            for xx in 0..dy.w {
                let mut off = dy.idx(bn, yy, xx, 0);
                for part in out.iter_mut() {
                    let base = part.idx(bn, yy, xx, 0);
                    let c = part.c;
                    part.data[base..base + c].copy_from_slice(&dy.data[off..off + c]);
                    off += c;
                }
            }
        }
    }
    out
}

/// Keeps only the spatial center of each tile (odd H and W required).
pub fn crop_center<F: Scalar>(x: &Tensor4<F>) -> Tensor4<F> {
    assert!(x.h % 2 == 1 && x.w % 2 == 1, "crop needs odd spatial dims");
    let cy = x.h / 2;
    let cx = x.w / 2;
    let mut y = Tensor4::zeros(x.n, 1, 1, x.c);
    for bn in 0..x.n {
        let base = x.idx(bn, cy, cx, 0);
        let out = y.idx(bn, 0, 0, 0);
        y.data[out..out + x.c].copy_from_slice(&x.data[base..base + x.c]);
    }
    y
}

pub fn crop_center_backward<F: Scalar>(
    x_shape: (usize, usize, usize, usize),
    dy: &Tensor4<F>,
) -> Tensor4<F> {
    let (n, h, w, c) = x_shape;
    let mut dx = Tensor4::zeros(n, h, w, c);
    let cy = h / 2;
    let cx = w / 2;
    for bn in 0..n {
        let base = dx.idx(bn, cy, cx, 0);
        let src = dy.idx(bn, 0, 0, 0);
        dx.data[base..base + c].copy_from_slice(&dy.data[src..src + c]);
    }
    dx
}

/// (N, H, W, C) -> (N, H*W*C); the layout is already row-major, so this is
/// a reinterpretation.
pub fn flatten<F: Scalar>(x: &Tensor4<F>) -> Mat<F> {
    Mat::from_vec(x.n, x.h * x.w * x.c, x.data.clone())
}

pub fn unflatten<F: Scalar>(m: &Mat<F>, h: usize, w: usize, c: usize) -> Tensor4<F> {
    Tensor4::from_vec(m.rows, h, w, c, m.data.clone())
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Inverted dropout: zero with probability `rate`, scale survivors by
/// 1/(1-rate). Identity in inference mode. Returns the per-element scale
/// mask for the backward pass.
pub fn dropout<F: Scalar>(
    x: &[F],
    rate: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> (Vec<F>, Vec<F>) {
    assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
    if mode == Mode::Infer || rate == 0.0 {
        return (x.to_vec(), vec![F::one(); x.len()]);
    }
    let scale = F::from_f64(1.0 / (1.0 - rate));
    let mut mask = Vec::with_capacity(x.len());
    let mut y = Vec::with_capacity(x.len());
    for &v in x {
        if rng.gen::<f64>() < rate {
            mask.push(F::zero());
            y.push(F::zero());
        } else {
            mask.push(scale);
            y.push(v * scale);
        }
    }
    (y, mask)
}

pub fn dropout_backward<F: Scalar>(mask: &[F], dy: &[F]) -> Vec<F> {
    mask.iter().zip(dy).map(|(&m, &g)| m * g).collect()
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy head
// ---------------------------------------------------------------------------

/// Row-stabilized softmax with mean cross-entropy loss; returns
/// (loss, probabilities, dL/dlogits). Targets must be one-hot rows.
pub fn softmax_xent<F: Scalar>(logits: &Mat<F>, targets: &Mat<F>) -> (F, Mat<F>, Mat<F>) {
    assert_eq!(logits.rows, targets.rows);
    assert_eq!(logits.cols, targets.cols);
    let n = logits.rows;
    let k = logits.cols;
    let inv_n = F::from_f64(1.0 / n as f64);
    let mut probs = Mat::zeros(n, k);
    let mut dlogits = Mat::zeros(n, k);
    let mut loss = F::zero();
    for r in 0..n {
        let t = targets.row(r);
        let ones = t.iter().filter(|&&v| v == F::one()).count();
        let zeros = t.iter().filter(|&&v| v == F::zero()).count();
        assert!(
            ones == 1 && zeros == k - 1,
            "target row {r} is not one-hot"
        );
        let row = logits.row(r);
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut denom = F::zero();
        for c in 0..k {
            let e = (row[c] - max).exp();
            probs.set(r, c, e);
            denom += e;
        }
        for c in 0..k {
            let p = probs.get(r, c) / denom;
            probs.set(r, c, p);
            dlogits.set(r, c, (p - t[c]) * inv_n);
            if t[c] == F::one() {
                loss -= (p.max(F::from_f64(1e-300))).ln();
            }
        }
    }
    (loss * inv_n, probs, dlogits)
}

// ---------------------------------------------------------------------------
// L2 regularization
// ---------------------------------------------------------------------------

/// coeff * sum(w^2) over a weight array (biases are excluded by the
/// caller).
pub fn l2_penalty<F: Scalar>(weights: &[F], coeff: F) -> F {
    weights.iter().map(|&w| w * w).sum::<F>() * coeff
}

/// Adds 2 * coeff * w to an existing gradient array.
pub fn add_l2_grad<F: Scalar>(weights: &[F], grads: &mut [F], coeff: F) {
    let two = F::from_f64(2.0);
    for (g, &w) in grads.iter_mut().zip(weights) {
        *g += two * coeff * w;
    }
}
