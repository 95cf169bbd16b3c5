use matrixmultiply::sgemm;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Layer, LayerSpec, Tensor};

#[derive(Debug, Clone)]
pub(crate) enum Cache {
    /// The layer input; columns are rebuilt per sample in the backward pass.
    Conv { input: Vec<f32> },
    Dense { input: Vec<f32> },
    /// Layer output; enough for sigmoid and the interval head.
    Output(Vec<f32>),
    /// Which ReLU inputs were positive.
    Relu { active: Vec<bool> },
    Dropout { mask: Vec<f32> },
    Maxpool { argmax: Vec<u32> },
    Flatten,
}

/// `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f32], rsa: isize, csa: isize, b: &[f32], rsb: isize, csb: isize, beta: f32, c: &mut [f32]) {
    if k <= 12 && csb == 1 {
        // packing overhead dominates sgemm at this depth
        for i in 0..m {
            let row = &mut c[i * n..(i + 1) * n];
            if beta == 0.0 {
                row.fill(0.0);
            }
            for p in 0..k {
                let w = a[i * rsa as usize + p * csa as usize];
                let src = &b[p * rsb as usize..p * rsb as usize + n];
                row.iter_mut().zip(src).for_each(|(o, x)| *o += w * x);
            }
        }
        return;
    }
    // SAFETY: callers pass buffers holding at least the strided extents of
    // an m x k, k x n and m x n (row-major, rsc = n) matrix respectively.
    unsafe {
        sgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn of(layer: &Layer) -> Self {
        let (kernel, stride, pad) = match layer.spec {
            LayerSpec::Conv2d { kernel, stride, padding, .. } => (kernel, stride, padding),
            _ => unreachable!("not a conv layer"),
        };
        let s = &layer.in_shape;
        Self {
            c: s[0],
            h: s[1],
            w: s[2],
            kh: kernel[0],
            kw: kernel[1],
            stride,
            pad,
            oh: layer.out_shape[1],
            ow: layer.out_shape[2],
        }
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Output columns `[lo, hi)` whose tap `kx` lands inside the image.
    #[inline]
    fn valid_ox(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(self.stride) };
        let hi = if self.w + self.pad > kx { (self.w + self.pad - kx).div_ceil(self.stride).min(self.ow) } else { 0 };
        (lo, hi.max(lo))
    }

    /// Source row of output row `oy` for tap `ky`, if inside the image.
    #[inline]
    fn src_y(&self, oy: usize, ky: usize) -> Option<usize> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        (y < self.h).then_some(y)
    }

    fn im2col(&self, img: &[f32], cols: &mut [f32]) {
        let n = self.cols();
        for ci in 0..self.c {
            let plane = &img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &mut cols[((ci * self.kh + ky) * self.kw + kx) * n..][..n];
                    let (lo, hi) = self.valid_ox(kx);
                    for oy in 0..self.oh {
                        let out = &mut row[oy * self.ow..(oy + 1) * self.ow];
                        let Some(y) = self.src_y(oy, ky) else {
                            out.fill(0.0);
                            continue;
                        };
                        out[..lo].fill(0.0);
                        out[hi..].fill(0.0);
                        let src = &plane[y * self.w..(y + 1) * self.w];
                        let x0 = lo * self.stride + kx - self.pad;
                        if self.stride == 1 {
                            out[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                        } else {
                            for (i, o) in out[lo..hi].iter_mut().enumerate() {
                                *o = src[x0 + i * self.stride];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], img: &mut [f32]) {
        let n = self.cols();
        for ci in 0..self.c {
            let plane = &mut img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &cols[((ci * self.kh + ky) * self.kw + kx) * n..][..n];
                    let (lo, hi) = self.valid_ox(kx);
                    for oy in 0..self.oh {
                        let Some(y) = self.src_y(oy, ky) else { continue };
                        let src = &row[oy * self.ow + lo..oy * self.ow + hi];
                        let dst = &mut plane[y * self.w..(y + 1) * self.w];
                        let x0 = lo * self.stride + kx - self.pad;
                        for (i, v) in src.iter().enumerate() {
                            dst[x0 + i * self.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `grad[f x rows] += dy[f x n] * cols[rows x n]^T` as row dot products;
/// sgemm packs the transposed operand slowly at these shapes.
fn weight_grad(dy: &[f32], cols: &[f32], filters: usize, rows: usize, n: usize, grad: &mut [f32]) {
    for (f, g) in grad.chunks_exact_mut(rows).enumerate().take(filters) {
        let d = &dy[f * n..(f + 1) * n];
        for (r, gr) in g.iter_mut().enumerate() {
            *gr += dot(d, &cols[r * n..(r + 1) * n]);
        }
    }
}

/// Dot product with independent partial sums so it vectorizes.
fn dot(a: &[f32], b: &[f32]) -> f32 {
    const LANES: usize = 16;
    let mut acc = [0.0f32; LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f32>() + tail
}

fn out_tensor(layer: &Layer, batch: usize, data: Vec<f32>) -> Tensor {
    let mut shape = vec![batch];
    shape.extend(&layer.out_shape);
    Tensor { shape, data }
}

fn in_tensor(layer: &Layer, batch: usize, data: Vec<f32>) -> Tensor {
    let mut shape = vec![batch];
    shape.extend(&layer.in_shape);
    Tensor { shape, data }
}

fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

pub(crate) fn forward(layer: &Layer, mut x: Tensor, rng: Option<&mut ChaCha8Rng>, train: bool) -> (Tensor, Option<Cache>) {
    let batch = x.batch();
    match &layer.spec {
        LayerSpec::Conv2d { filters, .. } => {
            let g = ConvGeom::of(layer);
            let (rows, n) = (g.rows(), g.cols());
            let (weight, bias) = (&layer.params[0].value, &layer.params[1].value);
            let per_in = g.c * g.h * g.w;
            let mut out = vec![0.0; batch * filters * n];
            let mut col = vec![0.0; rows * n];
            for s in 0..batch {
                g.im2col(&x.data[s * per_in..(s + 1) * per_in], &mut col);
                let o = &mut out[s * filters * n..(s + 1) * filters * n];
                for (f, b) in bias.iter().enumerate() {
                    o[f * n..(f + 1) * n].iter_mut().for_each(|v| *v = *b);
                }
                gemm(*filters, rows, n, weight, rows as isize, 1, &col, n as isize, 1, 1.0, o);
            }
            (out_tensor(layer, batch, out), train.then_some(Cache::Conv { input: x.data }))
        }
        LayerSpec::Dense { units } => {
            let fan_in = layer.in_shape[0];
            let (weight, bias) = (&layer.params[0].value, &layer.params[1].value);
            let mut out: Vec<f32> = (0..batch).flat_map(|_| bias.iter().copied()).collect();
            gemm(batch, fan_in, *units, &x.data, fan_in as isize, 1, weight, 1, fan_in as isize, 1.0, &mut out);
            (out_tensor(layer, batch, out), train.then(|| Cache::Dense { input: x.data.clone() }))
        }
        LayerSpec::Relu => {
            let cache = train.then(|| Cache::Relu { active: x.data.iter().map(|v| *v > 0.0).collect() });
            x.data.iter_mut().for_each(|v| *v = v.max(0.0));
            (x, cache)
        }
        LayerSpec::Sigmoid => {
            x.data.iter_mut().for_each(|v| *v = sigmoid(*v));
            let cache = train.then(|| Cache::Output(x.data.clone()));
            (x, cache)
        }
        LayerSpec::IntervalHead => {
            let out: Vec<f32> = x
                .data
                .chunks_exact(2)
                .flat_map(|z| [0.5 * z[0].tanh(), sigmoid(z[1])])
                .collect();
            let cache = train.then(|| Cache::Output(out.clone()));
            (out_tensor(layer, batch, out), cache)
        }
        LayerSpec::Dropout { p } => {
            if !train || *p == 0.0 {
                let cache = train.then(|| Cache::Dropout { mask: vec![1.0; x.data.len()] });
                return (x, cache);
            }
            let rng = rng.expect("train-mode dropout needs an rng");
            let keep = 1.0 / (1.0 - p);
            let mask: Vec<f32> = (0..x.data.len()).map(|_| if rng.gen::<f32>() < *p { 0.0 } else { keep }).collect();
            x.data.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
            (x, Some(Cache::Dropout { mask }))
        }
        LayerSpec::Maxpool2d { pool, .. } => {
            let [c, h, w] = [layer.in_shape[0], layer.in_shape[1], layer.in_shape[2]];
            let [oh, ow] = [layer.out_shape[1], layer.out_shape[2]];
            let mut out = Vec::with_capacity(batch * c * oh * ow);
            let mut argmax = Vec::with_capacity(if train { batch * c * oh * ow } else { 0 });
            for plane in x.data.chunks_exact(h * w) {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = (f32::NEG_INFINITY, 0usize);
                        for dy in 0..pool[0] {
                            for dx in 0..pool[1] {
                                let idx = (oy * pool[0] + dy) * w + ox * pool[1] + dx;
                                if plane[idx] > best.0 {
                                    best = (plane[idx], idx);
                                }
                            }
                        }
                        out.push(best.0);
                        if train {
                            argmax.push(best.1 as u32);
                        }
                    }
                }
            }
            (out_tensor(layer, batch, out), train.then_some(Cache::Maxpool { argmax }))
        }
        LayerSpec::Flatten => (out_tensor(layer, batch, x.data), train.then_some(Cache::Flatten)),
    }
}

/// Accumulates parameter gradients and returns the input gradient when
/// `need_input` is set.
pub(crate) fn backward(layer: &mut Layer, cache: &Cache, mut dy: Tensor, need_input: bool) -> Option<Tensor> {
    let batch = dy.batch();
    let dx = match (&layer.spec, cache) {
        (LayerSpec::Conv2d { filters, .. }, Cache::Conv { input }) => {
            let g = ConvGeom::of(layer);
            let (rows, n) = (g.rows(), g.cols());
            let per_in = g.c * g.h * g.w;
            let mut dx = if need_input { vec![0.0; batch * per_in] } else { Vec::new() };
            let mut dcols = vec![0.0; rows * n];
            let mut col = vec![0.0; rows * n];
            let [wp, bp] = &mut layer.params[..] else { unreachable!("conv has weight and bias") };
            for s in 0..batch {
                let d = &dy.data[s * filters * n..(s + 1) * filters * n];
                g.im2col(&input[s * per_in..(s + 1) * per_in], &mut col);
                weight_grad(d, &col, *filters, rows, n, &mut wp.grad);
                for (f, gb) in bp.grad.iter_mut().enumerate() {
                    *gb += d[f * n..(f + 1) * n].iter().sum::<f32>();
                }
                if need_input {
                    gemm(rows, *filters, n, &wp.value, 1, rows as isize, d, n as isize, 1, 0.0, &mut dcols);
                    g.col2im(&dcols, &mut dx[s * per_in..(s + 1) * per_in]);
                }
            }
            dx
        }
        (LayerSpec::Dense { units }, Cache::Dense { input }) => {
            let fan_in = layer.in_shape[0];
            let [wp, bp] = &mut layer.params[..] else { unreachable!("dense has weight and bias") };
            gemm(*units, batch, fan_in, &dy.data, 1, *units as isize, input, fan_in as isize, 1, 1.0, &mut wp.grad);
            for row in dy.data.chunks_exact(*units) {
                bp.grad.iter_mut().zip(row).for_each(|(g, d)| *g += d);
            }
            let mut dx = Vec::new();
            if need_input {
                dx = vec![0.0; batch * fan_in];
                gemm(batch, *units, fan_in, &dy.data, *units as isize, 1, &wp.value, fan_in as isize, 1, 0.0, &mut dx);
            }
            dx
        }
        (LayerSpec::Relu, Cache::Relu { active }) => {
            dy.data.iter_mut().zip(active).filter(|(_, a)| !**a).for_each(|(d, _)| *d = 0.0);
            dy.data
        }
        (LayerSpec::Sigmoid, Cache::Output(out)) => {
            dy.data.iter_mut().zip(out).for_each(|(d, s)| *d *= s * (1.0 - s));
            dy.data
        }
        (LayerSpec::IntervalHead, Cache::Output(out)) => dy
            .data
            .chunks_exact(2)
            .zip(out.chunks_exact(2))
            .flat_map(|(d, y)| {
                let t = 2.0 * y[0];
                [d[0] * 0.5 * (1.0 - t * t), d[1] * y[1] * (1.0 - y[1])]
            })
            .collect(),
        (LayerSpec::Dropout { .. }, Cache::Dropout { mask }) => {
            dy.data.iter_mut().zip(mask).for_each(|(d, m)| *d *= m);
            dy.data
        }
        (LayerSpec::Maxpool2d { .. }, Cache::Maxpool { argmax }) => {
            let [h, w] = [layer.in_shape[1], layer.in_shape[2]];
            let per_plane_out = layer.out_shape[1] * layer.out_shape[2];
            let planes = dy.data.len() / per_plane_out;
            let mut dx = vec![0.0; planes * h * w];
            for (p, (d, a)) in dy.data.chunks_exact(per_plane_out).zip(argmax.chunks_exact(per_plane_out)).enumerate() {
                let plane = &mut dx[p * h * w..(p + 1) * h * w];
                for (g, idx) in d.iter().zip(a) {
                    plane[*idx as usize] += g;
                }
            }
            dx
        }
        (LayerSpec::Flatten, Cache::Flatten) => dy.data,
        _ => unreachable!("cache kind always matches its layer"),
    };
    need_input.then(|| in_tensor(layer, batch, dx))
}
