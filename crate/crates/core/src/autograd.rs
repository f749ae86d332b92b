//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation as it is evaluated. Values live on the
//! tape and are addressed through copyable [`Var`] handles; calling
//! [`Tape::backward`] walks the record in reverse and returns the gradient of
//! a scalar output with respect to every leaf.
//!
//! Shape mismatches inside tape operations are programming errors and panic.
//! Public entry points elsewhere in the crate validate shapes up front and
//! return proper errors before anything reaches the tape.

use ndarray::{Array2, ArrayD, ArrayView2, Ix2, IxDyn};

pub type Tensor = ArrayD<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Read access to the forward values while a backward closure runs.
pub struct Ctx<'a> {
    values: &'a [Tensor],
    requires: &'a [bool],
}

impl Ctx<'_> {
    pub fn value(&self, v: usize) -> &Tensor {
        &self.values[v]
    }

    pub fn needs(&self, v: usize) -> bool {
        self.requires[v]
    }
}

type Backward = Box<dyn Fn(&Tensor, &Ctx<'_>) -> Vec<(usize, Tensor)> + Send + Sync>;

#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    requires: Vec<bool>,
    backward: Vec<Option<Backward>>,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn scalar_tensor(x: f64) -> Tensor {
    ArrayD::from_elem(IxDyn(&[]), x)
}

fn as2(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("expected a 2-d tensor")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.values.push(value);
        self.requires.push(true);
        self.backward.push(None);
        Var(self.values.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.values.push(value);
        self.requires.push(false);
        self.backward.push(None);
        Var(self.values.len() - 1)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(scalar_tensor(x))
    }

    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.values[v.0].clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    /// First element of the value; intended for scalars.
    pub fn item(&self, v: Var) -> f64 {
        *self.values[v.0].iter().next().expect("empty tensor")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    fn push(&mut self, value: Tensor, parents: &[Var], backward: Backward) -> Var {
        let req = parents.iter().any(|p| self.requires[p.0]);
        self.values.push(value);
        self.requires.push(req);
        self.backward.push(if req { Some(backward) } else { None });
        Var(self.values.len() - 1)
    }

    /// Gradient of `output` (seeded with ones) with respect to every leaf.
    pub fn backward(&self, output: Var) -> Gradients {
        let n = output.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        if !self.requires[output.0] {
            return Gradients { grads };
        }
        grads[output.0] = Some(ArrayD::ones(self.values[output.0].raw_dim()));
        let ctx = Ctx {
            values: &self.values,
            requires: &self.requires,
        };
        for i in (0..n).rev() {
            let Some(back) = &self.backward[i] else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            for (p, contrib) in back(&g, &ctx) {
                if !self.requires[p] {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => *acc += &contrib,
                    slot => *slot = Some(contrib),
                }
            }
        }
        Gradients { grads }
    }

    // ---- elementwise -------------------------------------------------------

    fn check_same(&self, a: Var, b: Var) {
        assert_eq!(self.shape(a), self.shape(b), "shape mismatch in elementwise op");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b);
        let value = &self.values[a.0] + &self.values[b.0];
        let (ia, ib) = (a.0, b.0);
        self.push(
            value,
            &[a, b],
            Box::new(move |g, _| vec![(ia, g.clone()), (ib, g.clone())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b);
        let value = &self.values[a.0] - &self.values[b.0];
        let (ia, ib) = (a.0, b.0);
        self.push(value, &[a, b], Box::new(move |g, _| vec![(ia, g.clone()), (ib, -g)]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b);
        let value = &self.values[a.0] * &self.values[b.0];
        let (ia, ib) = (a.0, b.0);
        self.push(
            value,
            &[a, b],
            Box::new(move |g, ctx| {
                let mut out = Vec::with_capacity(2);
                if ctx.needs(ia) {
                    out.push((ia, g * ctx.value(ib)));
                }
                if ctx.needs(ib) {
                    out.push((ib, g * ctx.value(ia)));
                }
                out
            }),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b);
        let value = &self.values[a.0] / &self.values[b.0];
        let (ia, ib) = (a.0, b.0);
        self.push(
            value,
            &[a, b],
            Box::new(move |g, ctx| {
                let bv = ctx.value(ib);
                let mut out = Vec::with_capacity(2);
                if ctx.needs(ia) {
                    out.push((ia, g / bv));
                }
                if ctx.needs(ib) {
                    let av = ctx.value(ia);
                    out.push((ib, -(g * av) / (bv * bv)));
                }
                out
            }),
        )
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = &self.values[a.0] * c;
        let ia = a.0;
        self.push(value, &[a], Box::new(move |g, _| vec![(ia, g * c)]))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let value = &self.values[a.0] + c;
        let ia = a.0;
        self.push(value, &[a], Box::new(move |g, _| vec![(ia, g.clone())]))
    }

    /// Tensor times a scalar-valued variable.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.values[s.0].len(), 1, "scale_by expects a scalar");
        let sv = self.item(s);
        let value = &self.values[a.0] * sv;
        let (ia, is) = (a.0, s.0);
        self.push(
            value,
            &[a, s],
            Box::new(move |g, ctx| {
                let mut out = Vec::with_capacity(2);
                let sv = *ctx.value(is).iter().next().unwrap();
                if ctx.needs(ia) {
                    out.push((ia, g * sv));
                }
                if ctx.needs(is) {
                    let d = (g * ctx.value(ia)).sum();
                    out.push((is, ArrayD::from_elem(ctx.value(is).raw_dim(), d)));
                }
                out
            }),
        )
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Var {
        let value = self.values[a.0].mapv(f);
        let ia = a.0;
        let out_idx = self.values.len();
        self.push(
            value,
            &[a],
            Box::new(move |g, ctx| {
                let x = ctx.value(ia);
                let y = ctx.value(out_idx);
                let mut d = g.clone();
                ndarray::Zip::from(&mut d)
                    .and(x)
                    .and(y)
                    .for_each(|d, &x, &y| *d *= df(x, y));
                vec![(ia, d)]
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, |_, y| y)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (1.0 - y))
    }

    /// `log(sigmoid(x))`, stable for large `|x|`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| -softplus(-x), |x, _| sigmoid(-x))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, |_, y| 1.0 - y * y)
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let value = scalar_tensor(self.values[a.0].sum());
        let ia = a.0;
        self.push(
            value,
            &[a],
            Box::new(move |g, ctx| {
                let gv = *g.iter().next().unwrap();
                vec![(ia, ArrayD::from_elem(ctx.value(ia).raw_dim(), gv))]
            }),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.values[a.0].len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum of squares.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let value = scalar_tensor(self.values[a.0].iter().map(|x| x * x).sum());
        let ia = a.0;
        self.push(
            value,
            &[a],
            Box::new(move |g, ctx| {
                let gv = *g.iter().next().unwrap();
                vec![(ia, ctx.value(ia) * (2.0 * gv))]
            }),
        )
    }

    /// `log(sum(exp(a)))` over all elements.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let x = &self.values[a.0];
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = x.iter().map(|v| (v - m).exp()).sum();
        let lse = m + s.ln();
        let ia = a.0;
        self.push(
            scalar_tensor(lse),
            &[a],
            Box::new(move |g, ctx| {
                let gv = *g.iter().next().unwrap();
                let x = ctx.value(ia);
                vec![(ia, x.mapv(|v| (v - lse).exp() * gv))]
            }),
        )
    }

    /// Sum of several scalars.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        assert!(!terms.is_empty());
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t);
        }
        acc
    }

    // ---- shape -------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let src = &self.values[a.0];
        let value = src
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        let ia = a.0;
        self.push(
            value,
            &[a],
            Box::new(move |g, ctx| {
                let shape = ctx.value(ia).raw_dim();
                let back = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(shape)
                    .unwrap();
                vec![(ia, back)]
            }),
        )
    }

    /// Flattens and concatenates the inputs into one 1-d tensor.
    pub fn concat_flat(&mut self, parts: &[Var]) -> Var {
        let mut data = Vec::new();
        let mut spans = Vec::with_capacity(parts.len());
        for p in parts {
            let v = &self.values[p.0];
            spans.push((p.0, data.len(), v.len()));
            data.extend(v.as_standard_layout().iter());
        }
        let len = data.len();
        let value = ArrayD::from_shape_vec(IxDyn(&[len]), data).unwrap();
        self.push(
            value,
            parts,
            Box::new(move |g, ctx| {
                let gs = g.as_slice().expect("contiguous grad");
                spans
                    .iter()
                    .filter(|(i, _, _)| ctx.needs(*i))
                    .map(|&(i, start, n)| {
                        let shape = ctx.value(i).raw_dim();
                        let piece = ArrayD::from_shape_vec(shape, gs[start..start + n].to_vec()).unwrap();
                        (i, piece)
                    })
                    .collect()
            }),
        )
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = as2(&self.values[a.0]).dot(&as2(&self.values[b.0])).into_dyn();
        let (ia, ib) = (a.0, b.0);
        self.push(
            value,
            &[a, b],
            Box::new(move |g, ctx| {
                let g2 = as2(g);
                let mut out = Vec::with_capacity(2);
                if ctx.needs(ia) {
                    out.push((ia, g2.dot(&as2(ctx.value(ib)).t()).into_dyn()));
                }
                if ctx.needs(ib) {
                    out.push((ib, as2(ctx.value(ia)).t().dot(&g2).into_dyn()));
                }
                out
            }),
        )
    }

    /// `a[k, h] + b[h]` for every row `k`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let av = as2(&self.values[a.0]);
        let bv = self.values[b.0].view().into_dimensionality::<ndarray::Ix1>().unwrap();
        assert_eq!(av.ncols(), bv.len(), "add_row width mismatch");
        let value = (&av + &bv).into_dyn();
        let (ia, ib) = (a.0, b.0);
        self.push(
            value,
            &[a, b],
            Box::new(move |g, ctx| {
                let mut out = vec![(ia, g.clone())];
                if ctx.needs(ib) {
                    out.push((ib, as2(g).sum_axis(ndarray::Axis(0)).into_dyn()));
                }
                out
            }),
        )
    }

    /// `a[k, h] * b[h]` for every row `k`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let av = as2(&self.values[a.0]);
        let bv = self.values[b.0].view().into_dimensionality::<ndarray::Ix1>().unwrap();
        assert_eq!(av.ncols(), bv.len(), "mul_row width mismatch");
        let value = (&av * &bv).into_dyn();
        let (ia, ib) = (a.0, b.0);
        self.push(
            value,
            &[a, b],
            Box::new(move |g, ctx| {
                let g2 = as2(g);
                let bv = ctx.value(ib).view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let mut out = Vec::with_capacity(2);
                if ctx.needs(ia) {
                    out.push((ia, (&g2 * &bv).into_dyn()));
                }
                if ctx.needs(ib) {
                    let prod = &g2 * &as2(ctx.value(ia));
                    out.push((ib, prod.sum_axis(ndarray::Axis(0)).into_dyn()));
                }
                out
            }),
        )
    }

    /// `x[k, in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    // ---- convolution -------------------------------------------------------

    /// Single-image 2-d convolution (cross-correlation): `x[C,H,W]`,
    /// `w[O,C,kh,kw]`, optional bias `b[O]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let mut value = conv_forward(&self.values[x.0], &self.values[w.0], stride, pad);
        if let Some(b) = b {
            let bv = &self.values[b.0];
            for (o, mut plane) in value.outer_iter_mut().enumerate() {
                plane += bv[[o]];
            }
        }
        let (ix, iw) = (x.0, w.0);
        let ib = b.map(|b| b.0);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(
            value,
            &parents,
            Box::new(move |g, ctx| {
                let xv = ctx.value(ix);
                let wv = ctx.value(iw);
                let mut out = Vec::with_capacity(3);
                if ctx.needs(ix) {
                    out.push((ix, conv_input_grad(wv, g, xv.shape(), stride, pad)));
                }
                if ctx.needs(iw) {
                    let (kh, kw) = (wv.shape()[2], wv.shape()[3]);
                    out.push((iw, conv_weight_grad(xv, g, kh, kw, stride, pad)));
                }
                if let Some(ib) = ib {
                    if ctx.needs(ib) {
                        let db: Vec<f64> = g.outer_iter().map(|p| p.sum()).collect();
                        out.push((ib, ArrayD::from_shape_vec(IxDyn(&[db.len()]), db).unwrap()));
                    }
                }
                out
            }),
        )
    }

    /// Gradient of a convolution with respect to its filter, as a
    /// differentiable operation: `x[C,H,W]`, `d[O,Ho,Wo]` → `[O,C,kh,kw]`.
    pub fn filter_correlation(&mut self, x: Var, d: Var, kernel: (usize, usize), stride: usize, pad: usize) -> Var {
        let value = conv_weight_grad(&self.values[x.0], &self.values[d.0], kernel.0, kernel.1, stride, pad);
        let (ix, id) = (x.0, d.0);
        self.push(
            value,
            &[x, d],
            Box::new(move |g, ctx| {
                let xv = ctx.value(ix);
                let mut out = Vec::with_capacity(2);
                if ctx.needs(id) {
                    out.push((id, conv_forward(xv, g, stride, pad)));
                }
                if ctx.needs(ix) {
                    out.push((ix, conv_input_grad(g, ctx.value(id), xv.shape(), stride, pad)));
                }
                out
            }),
        )
    }

    // ---- region pooling ----------------------------------------------------

    /// Precise region pooling: bins of each box are averaged from a dense
    /// `samples × samples` grid of bilinearly interpolated feature values.
    ///
    /// `feat[C,H,W]` has cell `(i, j)` centred at `(j + 0.5, i + 0.5)`;
    /// `boxes[K,4]` holds `(x1, y1, x2, y2)` in the same cell units. Values
    /// outside the map are zero. Output is `[K, C, bins, bins]`, and the
    /// operation is differentiable with respect to both inputs.
    pub fn prpool(&mut self, feat: Var, boxes: Var, bins: usize, samples: usize) -> Var {
        let value = prpool_forward(&self.values[feat.0], &self.values[boxes.0], bins, samples);
        let (ifeat, ibox) = (feat.0, boxes.0);
        self.push(
            value,
            &[feat, boxes],
            Box::new(move |g, ctx| {
                let (dfeat, dbox) = prpool_backward(
                    ctx.value(ifeat),
                    ctx.value(ibox),
                    g,
                    bins,
                    samples,
                    ctx.needs(ifeat),
                    ctx.needs(ibox),
                );
                let mut out = Vec::with_capacity(2);
                if let Some(d) = dfeat {
                    out.push((ifeat, d));
                }
                if let Some(d) = dbox {
                    out.push((ibox, d));
                }
                out
            }),
        )
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

// ---- convolution kernels ---------------------------------------------------

fn out_size(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(n + 2 * pad >= k, "kernel larger than padded input");
    (n + 2 * pad - k) / stride + 1
}

pub(crate) fn im2col(x: &Tensor, kh: usize, kw: usize, stride: usize, pad: usize) -> (Array2<f64>, usize, usize) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ho, wo) = (out_size(h, kh, stride, pad), out_size(w, kw, stride, pad));
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().unwrap();
    let mut cols = Array2::<f64>::zeros((c * kh * kw, ho * wo));
    {
        let cs = cols.as_slice_mut().unwrap();
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    let base = row * ho * wo;
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = ci * h * w + iy as usize * w;
                        for ox in 0..wo {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                cs[base + oy * wo + ox] = xs[src + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &Array2<f64>, c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Tensor {
    let (ho, wo) = (out_size(h, kh, stride, pad), out_size(w, kw, stride, pad));
    let mut x = vec![0.0; c * h * w];
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().unwrap();
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let base = row * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = ci * h * w + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[dst + ix as usize] += cs[base + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[c, h, w]), x).unwrap()
}

fn filter_matrix(w: ndarray::ArrayViewD<'_, f64>) -> ArrayView2<'_, f64> {
    let o = w.shape()[0];
    let rest: usize = w.shape()[1..].iter().product();
    w.into_shape_with_order((o, rest)).expect("filter must be contiguous")
}

/// Plain convolution forward pass (no bias).
pub fn conv_forward(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    assert_eq!(x.ndim(), 3, "conv input must be [C,H,W]");
    assert_eq!(w.ndim(), 4, "conv filter must be [O,C,kh,kw]");
    assert_eq!(x.shape()[0], w.shape()[1], "conv channel mismatch");
    let (kh, kw) = (w.shape()[2], w.shape()[3]);
    let (cols, ho, wo) = im2col(x, kh, kw, stride, pad);
    let ws = w.as_standard_layout();
    let y = filter_matrix(ws.view()).dot(&cols);
    y.into_shape_with_order((w.shape()[0], ho, wo)).unwrap().into_dyn()
}

fn conv_input_grad(w: &Tensor, dy: &Tensor, x_shape: &[usize], stride: usize, pad: usize) -> Tensor {
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ws = w.as_standard_layout();
    let dys = dy.as_standard_layout();
    let dy2 = dys.view().into_shape_with_order((o, dy.len() / o)).unwrap();
    let dcols = filter_matrix(ws.view()).t().dot(&dy2);
    col2im(&dcols, x_shape[0], x_shape[1], x_shape[2], kh, kw, stride, pad)
}

fn conv_weight_grad(x: &Tensor, dy: &Tensor, kh: usize, kw: usize, stride: usize, pad: usize) -> Tensor {
    let (cols, _, _) = im2col(x, kh, kw, stride, pad);
    let o = dy.shape()[0];
    let dys = dy.as_standard_layout();
    let dy2 = dys.view().into_shape_with_order((o, dy.len() / o)).unwrap();
    let dw = dy2.dot(&cols.t());
    dw.into_shape_with_order(IxDyn(&[o, x.shape()[0], kh, kw])).unwrap()
}

// ---- precise region pooling kernels ----------------------------------------

struct Tap {
    /// Flat spatial index and bilinear weight for up to four neighbours.
    idx: [usize; 4],
    wt: [f64; 4],
    valid: [bool; 4],
    /// d(value)/du and d(value)/dv need the neighbour layout.
    i0: isize,
    j0: isize,
    tx: f64,
    ty: f64,
}

fn tap(u: f64, v: f64, h: usize, w: usize) -> Tap {
    let px = u - 0.5;
    let py = v - 0.5;
    let j0 = px.floor();
    let i0 = py.floor();
    let tx = px - j0;
    let ty = py - i0;
    let (i0, j0) = (i0 as isize, j0 as isize);
    let mut t = Tap {
        idx: [0; 4],
        wt: [(1.0 - ty) * (1.0 - tx), (1.0 - ty) * tx, ty * (1.0 - tx), ty * tx],
        valid: [false; 4],
        i0,
        j0,
        tx,
        ty,
    };
    let corners = [(i0, j0), (i0, j0 + 1), (i0 + 1, j0), (i0 + 1, j0 + 1)];
    for (k, (i, j)) in corners.into_iter().enumerate() {
        if i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w {
            t.valid[k] = true;
            t.idx[k] = i as usize * w + j as usize;
        }
    }
    t
}

fn sample_fraction(bin: usize, s: usize, samples: usize, bins: usize) -> f64 {
    (bin as f64 + (s as f64 + 0.5) / samples as f64) / bins as f64
}

fn prpool_forward(feat: &Tensor, boxes: &Tensor, bins: usize, samples: usize) -> Tensor {
    let (c, h, w) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
    let k = boxes.shape()[0];
    assert_eq!(boxes.shape()[1], 4, "boxes must be [K,4]");
    let fs = feat.as_standard_layout();
    let fs = fs.as_slice().unwrap();
    let bx = boxes.as_standard_layout();
    let bx = bx.as_slice().unwrap();
    let mut out = vec![0.0; k * c * bins * bins];
    let norm = 1.0 / (samples * samples) as f64;
    for kk in 0..k {
        let (x1, y1, x2, y2) = (bx[kk * 4], bx[kk * 4 + 1], bx[kk * 4 + 2], bx[kk * 4 + 3]);
        for by in 0..bins {
            for bxi in 0..bins {
                for sy in 0..samples {
                    let v = y1 + sample_fraction(by, sy, samples, bins) * (y2 - y1);
                    for sx in 0..samples {
                        let u = x1 + sample_fraction(bxi, sx, samples, bins) * (x2 - x1);
                        let t = tap(u, v, h, w);
                        for ch in 0..c {
                            let plane = &fs[ch * h * w..(ch + 1) * h * w];
                            let mut val = 0.0;
                            for q in 0..4 {
                                if t.valid[q] {
                                    val += t.wt[q] * plane[t.idx[q]];
                                }
                            }
                            out[((kk * c + ch) * bins + by) * bins + bxi] += val * norm;
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[k, c, bins, bins]), out).unwrap()
}

fn prpool_backward(
    feat: &Tensor,
    boxes: &Tensor,
    g: &Tensor,
    bins: usize,
    samples: usize,
    need_feat: bool,
    need_box: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (c, h, w) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
    let k = boxes.shape()[0];
    let fs = feat.as_standard_layout();
    let fs = fs.as_slice().unwrap();
    let bx = boxes.as_standard_layout();
    let bx = bx.as_slice().unwrap();
    let gs = g.as_standard_layout();
    let gs = gs.as_slice().unwrap();
    let mut dfeat = if need_feat { vec![0.0; c * h * w] } else { Vec::new() };
    let mut dbox = vec![0.0; k * 4];
    let norm = 1.0 / (samples * samples) as f64;
    let at = |ch: usize, i: isize, j: isize| -> f64 {
        if i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w {
            fs[ch * h * w + i as usize * w + j as usize]
        } else {
            0.0
        }
    };
    for kk in 0..k {
        let (x1, y1, x2, y2) = (bx[kk * 4], bx[kk * 4 + 1], bx[kk * 4 + 2], bx[kk * 4 + 3]);
        for by in 0..bins {
            for bxi in 0..bins {
                for sy in 0..samples {
                    let fy = sample_fraction(by, sy, samples, bins);
                    let v = y1 + fy * (y2 - y1);
                    for sx in 0..samples {
                        let fx = sample_fraction(bxi, sx, samples, bins);
                        let u = x1 + fx * (x2 - x1);
                        let t = tap(u, v, h, w);
                        let mut du = 0.0;
                        let mut dv = 0.0;
                        for ch in 0..c {
                            let go = gs[((kk * c + ch) * bins + by) * bins + bxi] * norm;
                            if go == 0.0 {
                                continue;
                            }
                            if need_feat {
                                let plane = &mut dfeat[ch * h * w..(ch + 1) * h * w];
                                for q in 0..4 {
                                    if t.valid[q] {
                                        plane[t.idx[q]] += t.wt[q] * go;
                                    }
                                }
                            }
                            if need_box {
                                let (i0, j0) = (t.i0, t.j0);
                                let f00 = at(ch, i0, j0);
                                let f01 = at(ch, i0, j0 + 1);
                                let f10 = at(ch, i0 + 1, j0);
                                let f11 = at(ch, i0 + 1, j0 + 1);
                                du += go * ((1.0 - t.ty) * (f01 - f00) + t.ty * (f11 - f10));
                                dv += go * ((1.0 - t.tx) * (f10 - f00) + t.tx * (f11 - f01));
                            }
                        }
                        if need_box {
                            dbox[kk * 4] += du * (1.0 - fx);
                            dbox[kk * 4 + 2] += du * fx;
                            dbox[kk * 4 + 1] += dv * (1.0 - fy);
                            dbox[kk * 4 + 3] += dv * fy;
                        }
                    }
                }
            }
        }
    }
    let dfeat = need_feat.then(|| ArrayD::from_shape_vec(IxDyn(&[c, h, w]), dfeat).unwrap());
    let dbox = need_box.then(|| ArrayD::from_shape_vec(IxDyn(&[k, 4]), dbox).unwrap());
    (dfeat, dbox)
}
