//! A small reverse-mode automatic differentiation tape over [`Tensor`]s.
//!
//! Every operation appends a node holding its value and, when any input
//! requires a gradient, a closure mapping the output gradient onto its
//! inputs. Node ids are allocated in evaluation order, so walking the tape
//! backwards from the root is a valid topological order.
//!
//! Image-like values use channel-major `[C, H, W]` layout; matrices are
//! `[rows, cols]`.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of one scalar root with respect to every leaf parameter.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<Tensor> {
        self.grads[var.id]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[var.id], g.clone()).expect("gradient shape"))
    }

    /// Like [`Gradients::get`] but returns zeros for parameters that did not
    /// influence the root.
    pub fn get_or_zero(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf whose gradient is tracked.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(Rc::new(value), true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(Rc::new(value), false)
    }

    pub fn constant_rc(&self, value: Rc<Tensor>) -> Var<'_> {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Rc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push<F>(&self, value: Tensor, parents: &[Var<'_>], backward: F) -> Var<'_>
    where
        F: Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        let (parents, backward): (Vec<usize>, Option<BackwardFn>) = if requires_grad {
            (
                parents.iter().map(|p| p.id).collect(),
                Some(Box::new(backward)),
            )
        } else {
            (Vec::new(), None)
        };
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents,
            backward,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Back-propagates from a scalar `root`.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.numel(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&g, &needs);
            for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                if !need {
                    continue;
                }
                let Some(pg) = pg else { continue };
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Gradients { grads, shapes }
    }
}

/// How a convolution input is extended past its borders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Replicate,
}

fn ensure_same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn chw(t: &Tensor, op: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::shape(format!("{op}: expected [C, H, W], got {s:?}"))),
    }
}

fn mat(t: &Tensor, op: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        ref s => Err(Error::shape(format!("{op}: expected a matrix, got {s:?}"))),
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    fn unary(
        self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let out = (*y).clone();
        self.tape.push(out, &[self], move |g, _| {
            let dx = x
                .data()
                .iter()
                .zip(y.data())
                .zip(g)
                .map(|((&x, &y), &g)| g * df(x, y))
                .collect();
            vec![Some(dx)]
        })
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        ensure_same_shape(&a, &b, "add")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(a.shape(), data)?;
        Ok(self
            .tape
            .push(out, &[self, other], |g, _| vec![Some(g.to_vec()), Some(g.to_vec())]))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        ensure_same_shape(&a, &b, "sub")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(a.shape(), data)?;
        Ok(self.tape.push(out, &[self, other], |g, _| {
            vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
        }))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        ensure_same_shape(&a, &b, "mul")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(a.shape(), data)?;
        Ok(self.tape.push(out, &[self, other], move |g, needs| {
            let da = needs[0].then(|| g.iter().zip(b.data()).map(|(g, y)| g * y).collect());
            let db = needs[1].then(|| g.iter().zip(a.data()).map(|(g, x)| g * x).collect());
            vec![da, db]
        }))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// Multiplies every element by the single-element variable `s`.
    pub fn mul_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        let (x, sv) = (self.value(), s.value());
        if sv.numel() != 1 {
            return Err(Error::shape(format!(
                "mul_scalar: expected a scalar, got {:?}",
                sv.shape()
            )));
        }
        let c = sv.item();
        let out = x.map(|v| v * c);
        Ok(self.tape.push(out, &[self, s], move |g, needs| {
            let dx = needs[0].then(|| g.iter().map(|g| g * c).collect());
            let ds = needs[1].then(|| vec![g.iter().zip(x.data()).map(|(g, x)| g * x).sum()]);
            vec![dx, ds]
        }))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// Square root whose derivative is taken as zero where the output is zero.
    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }

    pub fn recip(self) -> Var<'t> {
        self.unary(|x| 1.0 / x, |_, y| -y * y)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// `ln(1 + e^(βx)) / β`: a ReLU with its corner rounded off over a
    /// width of about `1/β`. Never negative.
    pub fn softplus(self, beta: f64) -> Var<'t> {
        self.unary(
            move |x| x.max(0.0) + (-(beta * x).abs()).exp().ln_1p() / beta,
            move |x, _| logistic(beta * x),
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(logistic, |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        self.unary(gelu, |x, _| gelu_grad(x))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    /// Elementwise smooth-L1 (Huber with unit knee): `0.5 x²` for `|x| < 1`,
    /// `|x| - 0.5` otherwise.
    pub fn smooth_l1(self) -> Var<'t> {
        self.unary(
            |x| {
                if x.abs() < 1.0 {
                    0.5 * x * x
                } else {
                    x.abs() - 0.5
                }
            },
            |x, _| if x.abs() < 1.0 { x } else { x.signum() },
        )
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let n = x.numel();
        let out = Tensor::scalar(x.data().iter().sum());
        self.tape
            .push(out, &[self], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = (*self.value()).clone().reshape(shape)?;
        Ok(self
            .tape
            .push(out, &[self], |g, _| vec![Some(g.to_vec())]))
    }

    /// `out[i] = x[index[i]]`, or zero where the index is `None`.
    pub fn gather(self, shape: &[usize], index: Vec<Option<usize>>) -> Result<Var<'t>> {
        let x = self.value();
        let numel: usize = shape.iter().product();
        if numel != index.len() {
            return Err(Error::shape(format!(
                "gather: shape {shape:?} vs {} indices",
                index.len()
            )));
        }
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= x.numel()) {
            return Err(Error::shape(format!(
                "gather: index {bad} out of bounds for {} elements",
                x.numel()
            )));
        }
        let data = index
            .iter()
            .map(|i| i.map_or(0.0, |i| x.data()[i]))
            .collect();
        let out = Tensor::new(shape, data)?;
        let n_in = x.numel();
        Ok(self.tape.push(out, &[self], move |g, _| {
            let mut dx = vec![0.0; n_in];
            for (gi, i) in g.iter().zip(&index) {
                if let Some(i) = i {
                    dx[*i] += gi;
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Sparse linear map: `out[i] = Σ w · x[j]` over the taps of output `i`.
    pub fn sparse_map(self, shape: &[usize], taps: Vec<Vec<(usize, f64)>>) -> Result<Var<'t>> {
        let x = self.value();
        let numel: usize = shape.iter().product();
        if numel != taps.len() {
            return Err(Error::shape("sparse_map: tap count does not match shape"));
        }
        let data = taps
            .iter()
            .map(|t| t.iter().map(|&(j, w)| w * x.data()[j]).sum())
            .collect();
        let out = Tensor::new(shape, data)?;
        let n_in = x.numel();
        Ok(self.tape.push(out, &[self], move |g, _| {
            let mut dx = vec![0.0; n_in];
            for (gi, t) in g.iter().zip(&taps) {
                for &(j, w) in t {
                    dx[j] += w * gi;
                }
            }
            vec![Some(dx)]
        }))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let (r, c) = mat(&self.value(), "transpose")?;
        let index = (0..r * c)
            .map(|k| {
                let (i, j) = (k / r, k % r);
                Some(j * c + i)
            })
            .collect();
        self.gather(&[c, r], index)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = mat(&a, "matmul")?;
        let (k2, n) = mat(&b, "matmul")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul: [{m}, {k}] x [{k2}, {n}]"
            )));
        }
        let out = Tensor::new(&[m, n], matmul_raw(a.data(), b.data(), m, k, n))?;
        Ok(self.tape.push(out, &[self, other], move |g, needs| {
            // dA = G Bᵀ, dB = Aᵀ G
            let da = needs[0].then(|| {
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * b.data()[p * n + j];
                        }
                        da[i * k + p] = s;
                    }
                }
                da
            });
            let db = needs[1].then(|| {
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = a.data()[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += av * g[i * n + j];
                        }
                    }
                }
                db
            });
            vec![da, db]
        }))
    }

    /// Adds `bias[j]` to column `j` of an `[N, D]` matrix.
    pub fn add_row_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, b) = (self.value(), bias.value());
        let (n, d) = mat(&x, "add_row_bias")?;
        if b.numel() != d {
            return Err(Error::shape(format!(
                "add_row_bias: width {d} vs bias {}",
                b.numel()
            )));
        }
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b.data()[i % d])
            .collect();
        let out = Tensor::new(&[n, d], data)?;
        Ok(self.tape.push(out, &[self, bias], move |g, _| {
            let mut db = vec![0.0; d];
            for (i, gi) in g.iter().enumerate() {
                db[i % d] += gi;
            }
            vec![Some(g.to_vec()), Some(db)]
        }))
    }

    /// Column means of an `[N, D]` matrix, as `[1, D]`.
    pub fn mean_rows(self) -> Result<Var<'t>> {
        let (n, d) = mat(&self.value(), "mean_rows")?;
        let tape = self.tape;
        let ones = tape.constant(Tensor::full(&[1, n], 1.0 / n as f64));
        let out = ones.matmul(self)?;
        debug_assert_eq!(out.shape(), vec![1, d]);
        Ok(out)
    }

    /// `x[c] * gamma[c] + beta[c]` for each channel of a `[C, H, W]` tensor.
    pub fn channel_affine(self, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
        let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
        let (c, h, w) = chw(&x, "channel_affine")?;
        if gm.numel() != c || bt.numel() != c {
            return Err(Error::shape(format!(
                "channel_affine: {c} channels vs gamma {} / beta {}",
                gm.numel(),
                bt.numel()
            )));
        }
        let hw = h * w;
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * gm.data()[i / hw] + bt.data()[i / hw])
            .collect();
        let out = Tensor::new(&[c, h, w], data)?;
        Ok(self.tape.push(out, &[self, gamma, beta], move |g, needs| {
            let dx = needs[0].then(|| {
                g.iter()
                    .enumerate()
                    .map(|(i, g)| g * gm.data()[i / hw])
                    .collect()
            });
            let mut dg = vec![0.0; c];
            let mut db = vec![0.0; c];
            for (i, gi) in g.iter().enumerate() {
                dg[i / hw] += gi * x.data()[i];
                db[i / hw] += gi;
            }
            vec![dx, Some(dg), Some(db)]
        }))
    }

    pub fn add_channel_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let c = self.shape()[0];
        let ones = self.tape.constant(Tensor::full(&[c], 1.0));
        self.channel_affine(ones, bias)
    }

    /// Pads the spatial dims of a `[C, H, W]` tensor by `p` on every side.
    pub fn pad(self, p: usize, mode: PadMode) -> Result<Var<'t>> {
        let (c, h, w) = chw(&self.value(), "pad")?;
        if p == 0 {
            return Ok(self);
        }
        let (ph, pw) = (h + 2 * p, w + 2 * p);
        let mut index = Vec::with_capacity(c * ph * pw);
        for ch in 0..c {
            for y in 0..ph {
                for x in 0..pw {
                    let sy = y as isize - p as isize;
                    let sx = x as isize - p as isize;
                    let inside = sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize;
                    let src = match mode {
                        PadMode::Zero if !inside => None,
                        _ => {
                            let sy = sy.clamp(0, h as isize - 1) as usize;
                            let sx = sx.clamp(0, w as isize - 1) as usize;
                            Some(ch * h * w + sy * w + sx)
                        }
                    };
                    index.push(src);
                }
            }
        }
        self.gather(&[c, ph, pw], index)
    }

    /// Valid (unpadded) 2-D convolution of `[C, H, W]` by `[O, C, KH, KW]`.
    pub fn conv2d(self, weight: Var<'t>, stride: usize) -> Result<Var<'t>> {
        let (x, wt) = (self.value(), weight.value());
        let (c, h, w) = chw(&x, "conv2d")?;
        let [o, wc, kh, kw] = *wt.shape() else {
            return Err(Error::shape(format!(
                "conv2d: kernel must be [O, C, KH, KW], got {:?}",
                wt.shape()
            )));
        };
        if wc != c {
            return Err(Error::shape(format!(
                "conv2d: input has {c} channels, kernel expects {wc}"
            )));
        }
        if kh > h || kw > w || stride == 0 {
            return Err(Error::arg(format!(
                "conv2d: {kh}x{kw} kernel (stride {stride}) does not fit {h}x{w} input"
            )));
        }
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;
        let geom = ConvGeom {
            c,
            h,
            w,
            o,
            kh,
            kw,
            oh,
            ow,
            stride,
        };
        let out = Tensor::new(&[o, oh, ow], geom.forward(x.data(), wt.data()))?;
        Ok(self.tape.push(out, &[self, weight], move |g, needs| {
            let dx = needs[0].then(|| geom.backward_input(g, wt.data()));
            let dw = needs[1].then(|| geom.backward_weight(g, x.data()));
            vec![dx, dw]
        }))
    }

    /// 3×3 max pooling at stride 1 over a replicate-padded input, keeping the
    /// spatial size. Gradient flows to the first maximal tap.
    pub fn max_pool3_same(self) -> Result<Var<'t>> {
        let (c, h, w) = chw(&self.value(), "max_pool3_same")?;
        let x = self.value();
        let mut index = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let mut best = usize::MAX;
                    let mut best_v = f64::NEG_INFINITY;
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                            let sx = (xx as isize + dx).clamp(0, w as isize - 1) as usize;
                            let i = ch * h * w + sy * w + sx;
                            if x.data()[i] > best_v {
                                best_v = x.data()[i];
                                best = i;
                            }
                        }
                    }
                    index.push(Some(best));
                }
            }
        }
        self.gather(&[c, h, w], index)
    }

    /// Bilinear resampling of `[C, H, W]` to `[C, oh, ow]` with half-pixel
    /// centres and edge clamping (no antialiasing).
    pub fn resize_bilinear(self, oh: usize, ow: usize) -> Result<Var<'t>> {
        let (c, h, w) = chw(&self.value(), "resize_bilinear")?;
        let taps = bilinear_taps(c, h, w, oh, ow);
        self.sparse_map(&[c, oh, ow], taps)
    }

    /// Concatenates along the leading axis.
    pub fn concat(vars: &[Var<'t>]) -> Result<Var<'t>> {
        let first = vars
            .first()
            .ok_or_else(|| Error::arg("concat of zero tensors"))?;
        let tape = first.tape;
        let values: Vec<Rc<Tensor>> = vars.iter().map(|v| v.value()).collect();
        let tail = &values[0].shape()[1..];
        let mut lead = 0;
        for v in &values {
            if &v.shape()[1..] != tail {
                return Err(Error::shape("concat: trailing dims differ"));
            }
            lead += v.shape()[0];
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        let data: Vec<f64> = values.iter().flat_map(|v| v.data().iter().copied()).collect();
        let sizes: Vec<usize> = values.iter().map(|v| v.numel()).collect();
        let out = Tensor::new(&shape, data)?;
        Ok(tape.push(out, vars, move |g, _| {
            let mut off = 0;
            sizes
                .iter()
                .map(|&n| {
                    let part = g[off..off + n].to_vec();
                    off += n;
                    Some(part)
                })
                .collect()
        }))
    }

    /// Rows `[start, start + len)` of the leading axis.
    pub fn narrow(self, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if start + len > shape[0] {
            return Err(Error::shape(format!(
                "narrow: [{start}, {}) outside leading dim {}",
                start + len,
                shape[0]
            )));
        }
        let inner: usize = shape[1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[0] = len;
        let index = (start * inner..(start + len) * inner).map(Some).collect();
        self.gather(&out_shape, index)
    }

    /// Separable kernel-density histogram over a 2-D grid.
    ///
    /// `out[i, j] = Σ_n w[n] · k(u[n] - centers[i]) · k(v[n] - centers[j])`
    /// with the inverse-quadratic kernel `k(d) = 1 / (1 + (d / tau)²)`.
    pub fn kernel_histogram2d(
        u: Var<'t>,
        v: Var<'t>,
        weight: Var<'t>,
        centers: Rc<Vec<f64>>,
        tau: f64,
    ) -> Result<Var<'t>> {
        let (uv, vv, wv) = (u.value(), v.value(), weight.value());
        let n = uv.numel();
        if vv.numel() != n || wv.numel() != n {
            return Err(Error::shape("kernel_histogram2d: u, v, weight lengths differ"));
        }
        let bins = centers.len();
        let kernel = move |d: f64| 1.0 / (1.0 + (d / tau) * (d / tau));
        let mut hist = vec![0.0; bins * bins];
        let mut ku = vec![0.0; bins];
        let mut kv = vec![0.0; bins];
        for p in 0..n {
            let wp = wv.data()[p];
            if wp == 0.0 {
                continue;
            }
            for (i, c) in centers.iter().enumerate() {
                ku[i] = wp * kernel(uv.data()[p] - c);
                kv[i] = kernel(vv.data()[p] - c);
            }
            for i in 0..bins {
                let a = ku[i];
                let row = &mut hist[i * bins..(i + 1) * bins];
                for (h, b) in row.iter_mut().zip(&kv) {
                    *h += a * b;
                }
            }
        }
        let out = Tensor::new(&[bins, bins], hist)?;
        let tau2 = tau * tau;
        Ok(u.tape.push(out, &[u, v, weight], move |g, _| {
            let mut du = vec![0.0; n];
            let mut dv = vec![0.0; n];
            let mut dw = vec![0.0; n];
            let mut ku = vec![0.0; bins];
            let mut dku = vec![0.0; bins];
            let mut kv = vec![0.0; bins];
            let mut dkv = vec![0.0; bins];
            let mut g_kv = vec![0.0; bins];
            let mut gt_ku = vec![0.0; bins];
            for p in 0..n {
                for (i, c) in centers.iter().enumerate() {
                    let d = uv.data()[p] - c;
                    let k = kernel(d);
                    ku[i] = k;
                    dku[i] = -2.0 * d / tau2 * k * k;
                    let d = vv.data()[p] - c;
                    let k = kernel(d);
                    kv[i] = k;
                    dkv[i] = -2.0 * d / tau2 * k * k;
                }
                gt_ku.iter_mut().for_each(|x| *x = 0.0);
                for i in 0..bins {
                    let row = &g[i * bins..(i + 1) * bins];
                    let mut s = 0.0;
                    for (gij, kvj) in row.iter().zip(&kv) {
                        s += gij * kvj;
                    }
                    g_kv[i] = s;
                    let kui = ku[i];
                    for (acc, gij) in gt_ku.iter_mut().zip(row) {
                        *acc += gij * kui;
                    }
                }
                let wp = wv.data()[p];
                dw[p] = ku.iter().zip(&g_kv).map(|(a, b)| a * b).sum();
                du[p] = wp * dku.iter().zip(&g_kv).map(|(a, b)| a * b).sum::<f64>();
                dv[p] = wp * dkv.iter().zip(&gt_ku).map(|(a, b)| a * b).sum::<f64>();
            }
            vec![Some(du), Some(dv), Some(dw)]
        }))
    }
}

pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Bilinear taps mapping a `[C, H, W]` input onto `[C, oh, ow]`.
pub(crate) fn bilinear_taps(
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<Vec<(usize, f64)>> {
    let axis = |out_len: usize, in_len: usize| -> Vec<(usize, usize, f64)> {
        let scale = in_len as f64 / out_len as f64;
        (0..out_len)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(in_len - 1);
                let i1 = (i0 + 1).min(in_len - 1);
                let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
                (i0, i1, frac)
            })
            .collect()
    };
    let ys = axis(oh, h);
    let xs = axis(ow, w);
    let mut taps = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let mut t = Vec::with_capacity(4);
                for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                    for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                        let wgt = wy * wx;
                        if wgt != 0.0 {
                            t.push((base + yy * w + xx, wgt));
                        }
                    }
                }
                taps.push(t);
            }
        }
    }
    taps
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
}

impl ConvGeom {
    fn forward(&self, x: &[f64], wt: &[f64]) -> Vec<f64> {
        let Self {
            c,
            h,
            w,
            o,
            kh,
            kw,
            oh,
            ow,
            stride,
        } = *self;
        let mut out = vec![0.0; o * oh * ow];
        for oc in 0..o {
            let dst = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
            for ic in 0..c {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wt[((oc * c + ic) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let src = ic * h * w + (oy * stride + ky) * w + kx;
                            let row = &mut dst[oy * ow..(oy + 1) * ow];
                            for (ox, d) in row.iter_mut().enumerate() {
                                *d += wv * x[src + ox * stride];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn backward_input(&self, g: &[f64], wt: &[f64]) -> Vec<f64> {
        let Self {
            c,
            h,
            w,
            o,
            kh,
            kw,
            oh,
            ow,
            stride,
        } = *self;
        let mut dx = vec![0.0; c * h * w];
        for oc in 0..o {
            let gsrc = &g[oc * oh * ow..(oc + 1) * oh * ow];
            for ic in 0..c {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wt[((oc * c + ic) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let dst = ic * h * w + (oy * stride + ky) * w + kx;
                            for ox in 0..ow {
                                dx[dst + ox * stride] += wv * gsrc[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    fn backward_weight(&self, g: &[f64], x: &[f64]) -> Vec<f64> {
        let Self {
            c,
            h,
            w,
            o,
            kh,
            kw,
            oh,
            ow,
            stride,
        } = *self;
        let mut dw = vec![0.0; o * c * kh * kw];
        for oc in 0..o {
            let gsrc = &g[oc * oh * ow..(oc + 1) * oh * ow];
            for ic in 0..c {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut s = 0.0;
                        for oy in 0..oh {
                            let src = ic * h * w + (oy * stride + ky) * w + kx;
                            for ox in 0..ow {
                                s += gsrc[oy * ow + ox] * x[src + ox * stride];
                            }
                        }
                        dw[((oc * c + ic) * kh + ky) * kw + kx] = s;
                    }
                }
            }
        }
        dw
    }
}
