//! Minimal reverse-mode differentiation tape over `f64` ndarrays.
//!
//! Forward ops append nodes to a [`Tape`]; [`Tape::backward`] walks the tape
//! in reverse from a scalar root and accumulates gradients. The same tape can
//! be differentiated from several roots, which is how the trainer computes
//! the per-network objectives without rebuilding shared forward passes.
//!
//! Everything is `f64`: the whole test story rests on central finite
//! differences agreeing with analytic gradients to 1e-4 relative error, and
//! single precision does not leave enough headroom for that.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, IxDyn};

pub type Arr = ArrayD<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub usize);

type BackFn = Box<dyn Fn(&[Arr], &Arr, &mut dyn FnMut(usize, Arr))>;

pub struct Tape {
    values: Vec<Arr>,
    backs: Vec<Option<BackFn>>,
}

/// Per-node gradients produced by a backward pass.
pub struct Gradients(Vec<Option<Arr>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }
}

fn reshape(a: &Arr, shape: &[usize]) -> Arr {
    a.to_shape(IxDyn(shape)).expect("reshape size mismatch").to_owned()
}

fn as4(a: &Arr) -> ndarray::ArrayView4<'_, f64> {
    a.view().into_dimensionality().expect("expected rank-4 array")
}

fn as2(a: &Arr) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality().expect("expected rank-2 array")
}

fn scalar_arr(v: f64) -> Arr {
    ArrayD::from_elem(IxDyn(&[]), v)
}

/// Lay out conv patches as a `[Ci*k*k, B*Ho*Wo]` matrix.
fn im2col(x: &ndarray::ArrayView4<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (b, ci, h, w) = x.dim();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut col = Array2::<f64>::zeros((ci * k * k, b * ho * wo));
    for c in 0..ci {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let mut row_view = col.row_mut(row);
                let rv = row_view.as_slice_mut().unwrap();
                for bi in 0..b {
                    let xb = x.index_axis(Axis(0), bi);
                    let xc = xb.index_axis(Axis(0), c);
                    let xs = xc.as_slice().unwrap();
                    for oh in 0..ho {
                        let ih = (oh * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let dst = (bi * ho + oh) * wo;
                        let src = ih as usize * w;
                        for ow in 0..wo {
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if iw >= 0 && iw < w as isize {
                                rv[dst + ow] = xs[src + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add a `[Ci*k*k, B*Ho*Wo]` gradient back onto the input image.
fn col2im(
    dcol: &Array2<f64>,
    dims: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (b, ci, h, w) = dims;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut dx = Array4::<f64>::zeros((b, ci, h, w));
    for c in 0..ci {
        for ki in 0..k {
            for kj in 0..k {
                let row = dcol.row((c * k + ki) * k + kj);
                let rv = row.as_slice().unwrap();
                for bi in 0..b {
                    for oh in 0..ho {
                        let ih = (oh * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let src = (bi * ho + oh) * wo;
                        for ow in 0..wo {
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if iw >= 0 && iw < w as isize {
                                dx[[bi, c, ih as usize, iw as usize]] += rv[src + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { values: Vec::new(), backs: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.values[v.0]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let a = &self.values[v.0];
        debug_assert_eq!(a.len(), 1);
        *a.iter().next().unwrap()
    }

    fn push(&mut self, value: Arr, back: Option<BackFn>) -> Var {
        self.values.push(value);
        self.backs.push(back);
        Var(self.values.len() - 1)
    }

    /// A node with no parents. Gradients stop here; they can still be read
    /// back, which is how trainable parameters receive their updates.
    pub fn leaf(&mut self, value: Arr) -> Var {
        self.push(value, None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape(), "add shape mismatch");
        let v = &self.values[a.0] + &self.values[b.0];
        let (ai, bi) = (a.0, b.0);
        self.push(
            v,
            Some(Box::new(move |_vals, g, sink| {
                sink(ai, g.clone());
                sink(bi, g.clone());
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = &self.values[a.0] * c;
        let ai = a.0;
        self.push(v, Some(Box::new(move |_vals, g, sink| sink(ai, g * c))))
    }

    /// Elementwise product with a fixed mask (dropout, gradient halving, ...).
    pub fn mul_mask(&mut self, a: Var, mask: Arr) -> Var {
        assert_eq!(self.values[a.0].shape(), mask.shape(), "mask shape mismatch");
        let v = &self.values[a.0] * &mask;
        let ai = a.0;
        self.push(v, Some(Box::new(move |_vals, g, sink| sink(ai, g * &mask))))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| if x > 0.0 { x } else { x.exp() - 1.0 });
        let ai = a.0;
        let out = self.push(v, None);
        let yi = out.0;
        // y > 0 iff x > 0; d/dx = 1 for x > 0 else e^x = y + 1
        self.backs[yi] = Some(Box::new(move |vals, g, sink| {
            let y = &vals[yi];
            let mut dg = g.clone();
            ndarray::Zip::from(&mut dg).and(y).for_each(|d, &yv| {
                if yv <= 0.0 {
                    *d *= yv + 1.0;
                }
            });
            sink(ai, dg);
        }));
        out
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let ai = a.0;
        let out = self.push(v, None);
        let yi = out.0;
        self.backs[yi] = Some(Box::new(move |vals, g, sink| {
            let y = &vals[yi];
            let dg = g * &y.mapv(|yv| yv * (1.0 - yv));
            sink(ai, dg);
        }));
        out
    }

    /// 2-D convolution, square kernel, zero padding. `x: [B,Ci,H,W]`,
    /// `w: [Co,Ci,k,k]`, `b: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = as4(&self.values[x.0]);
        let (bn, ci, h, wd) = xv.dim();
        let wv = as4(&self.values[w.0]);
        let (co, wci, k, k2) = wv.dim();
        assert_eq!(ci, wci, "conv channel mismatch");
        assert_eq!(k, k2, "conv kernel must be square");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;

        let col = im2col(&xv, k, stride, pad);
        let wmat = wv.to_shape((co, ci * k * k)).unwrap().to_owned();
        let y2 = wmat.dot(&col); // [Co, B*Ho*Wo]
        let bias = self.values[b.0].clone();
        let bslice: Vec<f64> = bias.iter().copied().collect();
        let mut y = Array4::<f64>::zeros((bn, co, ho, wo));
        for c in 0..co {
            let row = y2.row(c);
            let rv = row.as_slice().unwrap();
            for bi in 0..bn {
                for oh in 0..ho {
                    let src = (bi * ho + oh) * wo;
                    for ow in 0..wo {
                        y[[bi, c, oh, ow]] = rv[src + ow] + bslice[c];
                    }
                }
            }
        }

        let (xi, wi, bi_) = (x.0, w.0, b.0);
        self.push(
            y.into_dyn(),
            Some(Box::new(move |vals, g, sink| {
                let gv = as4(g);
                let (bn, co, ho, wo) = gv.dim();
                let mut g2 = Array2::<f64>::zeros((co, bn * ho * wo));
                for c in 0..co {
                    let mut row = g2.row_mut(c);
                    let rv = row.as_slice_mut().unwrap();
                    for bi in 0..bn {
                        for oh in 0..ho {
                            let dst = (bi * ho + oh) * wo;
                            for ow in 0..wo {
                                rv[dst + ow] = gv[[bi, c, oh, ow]];
                            }
                        }
                    }
                }
                let xv = as4(&vals[xi]);
                let dims = xv.dim();
                let col = im2col(&xv, k, stride, pad);
                let dwmat = g2.dot(&col.t()); // [Co, Ci*k*k]
                sink(wi, reshape(&dwmat.into_dyn(), &[co, ci, k, k]));
                let db = g2.sum_axis(Axis(1));
                sink(bi_, db.into_dyn());
                let wv = as4(&vals[wi]);
                let wmat = wv.to_shape((co, ci * k * k)).unwrap().to_owned();
                let dcol = wmat.t().dot(&g2);
                sink(xi, col2im(&dcol, dims, k, stride, pad).into_dyn());
            })),
        )
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xv = as4(&self.values[x.0]);
        let (b, c, h, w) = xv.dim();
        let mut y = Array4::<f64>::zeros((b, c, h * 2, w * 2));
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let v = xv[[bi, ci, i, j]];
                        y[[bi, ci, 2 * i, 2 * j]] = v;
                        y[[bi, ci, 2 * i, 2 * j + 1]] = v;
                        y[[bi, ci, 2 * i + 1, 2 * j]] = v;
                        y[[bi, ci, 2 * i + 1, 2 * j + 1]] = v;
                    }
                }
            }
        }
        let xi = x.0;
        self.push(
            y.into_dyn(),
            Some(Box::new(move |_vals, g, sink| {
                let gv = as4(g);
                let (b, c, h2, w2) = gv.dim();
                let (h, w) = (h2 / 2, w2 / 2);
                let mut dx = Array4::<f64>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                dx[[bi, ci, i, j]] = gv[[bi, ci, 2 * i, 2 * j]]
                                    + gv[[bi, ci, 2 * i, 2 * j + 1]]
                                    + gv[[bi, ci, 2 * i + 1, 2 * j]]
                                    + gv[[bi, ci, 2 * i + 1, 2 * j + 1]];
                            }
                        }
                    }
                }
                sink(xi, dx.into_dyn());
            })),
        )
    }

    /// Center-crop every sample to `(oh, ow)` (used to undo odd-size
    /// upsampling drift in the decoder).
    pub fn crop_center(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let xv = as4(&self.values[x.0]);
        let (b, _c, h, w) = xv.dim();
        let r0 = (h - oh) / 2;
        let c0 = (w - ow) / 2;
        let offsets = vec![(r0, c0); b];
        self.crop_per_sample(x, &offsets, oh, ow)
    }

    /// Crop each sample at its own offset.
    pub fn crop_per_sample(
        &mut self,
        x: Var,
        offsets: &[(usize, usize)],
        oh: usize,
        ow: usize,
    ) -> Var {
        let xv = as4(&self.values[x.0]);
        let (b, c, h, w) = xv.dim();
        assert_eq!(offsets.len(), b, "one offset per sample");
        let mut y = Array4::<f64>::zeros((b, c, oh, ow));
        for bi in 0..b {
            let (r0, c0) = offsets[bi];
            assert!(r0 + oh <= h && c0 + ow <= w, "crop outside input");
            for ci in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        y[[bi, ci, i, j]] = xv[[bi, ci, r0 + i, c0 + j]];
                    }
                }
            }
        }
        let xi = x.0;
        let offs = offsets.to_vec();
        self.push(
            y.into_dyn(),
            Some(Box::new(move |vals, g, sink| {
                let gv = as4(g);
                let xv = as4(&vals[xi]);
                let mut dx = Array4::<f64>::zeros(xv.dim());
                let (b, c, _, _) = xv.dim();
                for bi in 0..b {
                    let (r0, c0) = offs[bi];
                    for ci in 0..c {
                        for i in 0..oh {
                            for j in 0..ow {
                                dx[[bi, ci, r0 + i, c0 + j]] = gv[[bi, ci, i, j]];
                            }
                        }
                    }
                }
                sink(xi, dx.into_dyn());
            })),
        )
    }

    /// Mirror selected samples horizontally.
    pub fn flip_per_sample(&mut self, x: Var, flags: &[bool]) -> Var {
        let xv = as4(&self.values[x.0]);
        let (b, _c, _h, _w) = xv.dim();
        assert_eq!(flags.len(), b);
        let mut y = xv.to_owned();
        for (bi, &f) in flags.iter().enumerate() {
            if f {
                let mut s = y.index_axis_mut(Axis(0), bi);
                s.invert_axis(Axis(2));
            }
        }
        let xi = x.0;
        let fl = flags.to_vec();
        self.push(
            y.into_dyn(),
            Some(Box::new(move |_vals, g, sink| {
                let gv = as4(g);
                let mut dx = gv.to_owned();
                for (bi, &f) in fl.iter().enumerate() {
                    if f {
                        let mut s = dx.index_axis_mut(Axis(0), bi);
                        s.invert_axis(Axis(2));
                    }
                }
                sink(xi, dx.into_dyn());
            })),
        )
    }

    /// `[B,C,H,W] -> [B, C*H*W]`.
    pub fn flatten(&mut self, x: Var) -> Var {
        let shape: Vec<usize> = self.values[x.0].shape().to_vec();
        let b = shape[0];
        let d: usize = shape[1..].iter().product();
        let v = reshape(&self.values[x.0], &[b, d]);
        let xi = x.0;
        self.push(
            v,
            Some(Box::new(move |vals, g, sink| {
                sink(xi, reshape(g, vals[xi].shape()));
            })),
        )
    }

    /// `[B, C*H*W] -> [B,C,H,W]`.
    pub fn unflatten(&mut self, x: Var, c: usize, h: usize, w: usize) -> Var {
        let b = self.values[x.0].shape()[0];
        let v = reshape(&self.values[x.0], &[b, c, h, w]);
        let xi = x.0;
        self.push(
            v,
            Some(Box::new(move |vals, g, sink| {
                sink(xi, reshape(g, vals[xi].shape()));
            })),
        )
    }

    /// Fully connected layer. `x: [B,D]`, `w: [D,K]`, `b: [K]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = as2(&self.values[x.0]);
        let wv = as2(&self.values[w.0]);
        assert_eq!(xv.dim().1, wv.dim().0, "dense shape mismatch");
        let bias = self.values[b.0].clone();
        let mut y = xv.dot(&wv);
        let b1: Array1<f64> = bias.into_dimensionality().expect("dense bias must be rank 1");
        y += &b1;
        let (xi, wi, bi_) = (x.0, w.0, b.0);
        self.push(
            y.into_dyn(),
            Some(Box::new(move |vals, g, sink| {
                let gv = as2(g);
                let xv = as2(&vals[xi]);
                let wv = as2(&vals[wi]);
                sink(xi, gv.dot(&wv.t()).into_dyn());
                sink(wi, xv.t().dot(&gv).into_dyn());
                sink(bi_, gv.sum_axis(Axis(0)).into_dyn());
            })),
        )
    }

    /// Normalize each row to unit L2 norm (norm floored at `eps`).
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let xv = as2(&self.values[x.0]);
        let (b, d) = xv.dim();
        let mut y = Array2::<f64>::zeros((b, d));
        let mut norms = vec![0.0f64; b];
        for i in 0..b {
            let n = xv.row(i).dot(&xv.row(i)).sqrt().max(eps);
            norms[i] = n;
            for j in 0..d {
                y[[i, j]] = xv[[i, j]] / n;
            }
        }
        let xi = x.0;
        let out = self.push(y.into_dyn(), None);
        let yi = out.0;
        self.backs[yi] = Some(Box::new(move |vals, g, sink| {
            let gv = as2(g);
            let yv = as2(&vals[yi]);
            let (b, d) = yv.dim();
            let mut dx = Array2::<f64>::zeros((b, d));
            for i in 0..b {
                let dotp = yv.row(i).dot(&gv.row(i));
                for j in 0..d {
                    dx[[i, j]] = (gv[[i, j]] - yv[[i, j]] * dotp) / norms[i];
                }
            }
            sink(xi, dx.into_dyn());
        }));
        out
    }

    /// A node with a caller-supplied value and backward rule of one input.
    /// `back(input_value, grad_out)` must return the input gradient.
    pub fn unary_custom(
        &mut self,
        x: Var,
        value: Arr,
        back: Box<dyn Fn(&Arr, &Arr) -> Arr>,
    ) -> Var {
        let xi = x.0;
        self.push(
            value,
            Some(Box::new(move |vals, g, sink| {
                sink(xi, back(&vals[xi], g));
            })),
        )
    }

    /// Sum of all elements.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = self.values[a.0].sum();
        let ai = a.0;
        self.push(
            scalar_arr(v),
            Some(Box::new(move |vals, g, sink| {
                let gs = *g.iter().next().unwrap();
                sink(ai, vals[ai].mapv(|_| gs));
            })),
        )
    }

    /// Mean absolute elementwise deviation between two same-shape arrays.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape(), "mad shape mismatch");
        let diff = &self.values[a.0] - &self.values[b.0];
        let n = diff.len() as f64;
        let v = diff.mapv(f64::abs).sum() / n;
        let (ai, bi) = (a.0, b.0);
        self.push(
            scalar_arr(v),
            Some(Box::new(move |vals, g, sink| {
                let gs = *g.iter().next().unwrap();
                let diff = &vals[ai] - &vals[bi];
                let da = diff.mapv(|d| gs * d.signum() / n);
                sink(bi, -&da);
                sink(ai, da);
            })),
        )
    }

    /// Mean softmax cross-entropy over a batch of logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = as2(&self.values[logits.0]);
        let (b, k) = lv.dim();
        assert_eq!(labels.len(), b);
        let mut total = 0.0;
        for i in 0..b {
            let row = lv.row(i);
            let m = row.fold(f64::NEG_INFINITY, |a, &x| a.max(x));
            let lse = m + row.mapv(|x| (x - m).exp()).sum().ln();
            total += lse - row[labels[i]];
        }
        let li = logits.0;
        let lab = labels.to_vec();
        self.push(
            scalar_arr(total / b as f64),
            Some(Box::new(move |vals, g, sink| {
                let gs = *g.iter().next().unwrap();
                let lv = as2(&vals[li]);
                let (b, k2) = lv.dim();
                debug_assert_eq!(k2, k);
                let mut dl = Array2::<f64>::zeros((b, k));
                for i in 0..b {
                    let row = lv.row(i);
                    let m = row.fold(f64::NEG_INFINITY, |a, &x| a.max(x));
                    let exps = row.mapv(|x| (x - m).exp());
                    let z = exps.sum();
                    for j in 0..k {
                        let p = exps[j] / z;
                        dl[[i, j]] = gs * (p - if j == lab[i] { 1.0 } else { 0.0 }) / b as f64;
                    }
                }
                sink(li, dl.into_dyn());
            })),
        )
    }

    /// Differentiate `root` (a scalar node) with respect to everything that
    /// feeds it.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.values[root.0].len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Arr>> = Vec::with_capacity(self.values.len());
        grads.resize_with(self.values.len(), || None);
        grads[root.0] = Some(scalar_arr(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(back) = &self.backs[i] {
                back(&self.values, &g, &mut |p, contrib| {
                    debug_assert!(p < i, "backward edge must point to an earlier node");
                    match &mut grads[p] {
                        Some(acc) => *acc += &contrib,
                        slot @ None => *slot = Some(contrib),
                    }
                });
            }
            grads[i] = Some(g);
        }
        Gradients(grads)
    }
}

/// Central finite-difference gradient of a scalar function of one array.
/// Test-support oracle; deliberately independent of the tape.
pub fn numeric_grad<F>(x: &Arr, mut f: F, eps: f64) -> Arr
where
    F: FnMut(&Arr) -> f64,
{
    let mut g = Arr::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let orig = x.as_slice().unwrap()[idx];
        let h = eps * (1.0 + orig.abs());
        xp.as_slice_mut().unwrap()[idx] = orig + h;
        let fp = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig - h;
        let fm = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig;
        g.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Largest relative deviation between an analytic and a numeric gradient.
pub fn max_rel_err(analytic: &Arr, numeric: &Arr) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        let denom = 1.0f64.max(a.abs()).max(n.abs());
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}
