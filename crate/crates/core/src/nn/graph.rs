//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes; [`Graph::backward`]
//! walks the tape in reverse. Nodes built while gradients are disabled, or
//! that do not depend on any trainable leaf, are skipped during the reverse
//! pass.

use super::conv::{self, ConvGeom};
use super::factorized::{ChannelPrior, PARAM_TENSORS};
use super::special::{gaussian_bin, softplus, sigmoid};
use super::tensor::{gemm, Scalar, Tensor};
use crate::error::{Result, SelicError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    LeakyRelu { x: Var, slope: F },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Concat(Vec<Var>),
    Narrow { x: Var, start: usize },
    Linear { x: Var, w: Var, b: Var },
    Broadcast { x: Var },
    Softplus(Var),
    ClampMin { x: Var, min: F },
    GaussianLikelihood { v: Var, mu: Var, sigma: Var, floor: f64 },
    FactorizedLikelihood { z: Var, params: Vec<Var>, floor: f64 },
    NegLog2Sum(Var),
    Mse(Var, Var),
    Affine(Vec<(Var, f64)>),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
}

/// Gradients of a scalar root with respect to every node that needed one.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, what: &str) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(SelicError::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())))
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new(grad_enabled: bool) -> Self {
        Self { nodes: Vec::new(), grad_enabled }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// A leaf; `trainable` leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor<F>, trainable: bool) -> Var {
        let needs_grad = trainable && self.grad_enabled;
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var> {
        let out = conv::conv2d(self.value(x), self.value(w), self.value(b), geom)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, &[x, w, b]))
    }

    /// Transposed convolution; the output padding is chosen so that the
    /// result is exactly `stride` times larger.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var> {
        let out_pad = geom.stride + 2 * geom.pad - geom.kernel;
        let out = conv::conv_transpose2d(self.value(x), self.value(w), self.value(b), geom, out_pad)?;
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, geom }, &[x, w, b]))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = F::from_f64(slope);
        let out = self.value(x).map(|v| if v > F::zero() { v } else { v * s });
        self.push(out, Op::LeakyRelu { x, slope: s }, &[x])
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, what)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |p, q| p + q)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "sub", |p, q| p - q)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |p, q| p * q)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<F>> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_channels(&tensors)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).narrow_channels(start, len)?;
        Ok(self.push(out, Op::Narrow { x, start }, &[x]))
    }

    /// `x [batch, in] * w[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (bn, din) = match tx.shape() {
            &[bn, d] => (bn, d),
            s => return Err(SelicError::Shape(format!("linear: expected [batch, in], got {s:?}"))),
        };
        let dout = tw.shape()[0];
        if tw.shape() != [dout, din] || tb.shape() != [dout] {
            return Err(SelicError::Shape(format!(
                "linear: input width {din} incompatible with weight {:?}",
                tw.shape()
            )));
        }
        let mut out = Tensor::zeros(&[bn, dout]);
        gemm(false, true, bn, din, dout, tx.data(), tw.data(), out.data_mut(), false);
        for row in out.data_mut().chunks_mut(dout) {
            for (o, &bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// `[batch, c]` to `[batch, c, h, w]` by spatial replication.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let tx = self.value(x);
        let (bn, c) = match tx.shape() {
            &[bn, c] => (bn, c),
            s => return Err(SelicError::Shape(format!("broadcast: expected [batch, c], got {s:?}"))),
        };
        if h == 0 || w == 0 {
            return Err(SelicError::Shape("broadcast: spatial dims must be >= 1".into()));
        }
        let mut data = Vec::with_capacity(bn * c * h * w);
        for &v in tx.data() {
            data.extend(std::iter::repeat_n(v, h * w));
        }
        let out = Tensor::new(&[bn, c, h, w], data)?;
        Ok(self.push(out, Op::Broadcast { x }, &[x]))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| F::from_f64(softplus(v.as_f64())));
        self.push(out, Op::Softplus(x), &[x])
    }

    pub fn clamp_min(&mut self, x: Var, min: f64) -> Var {
        let m = F::from_f64(min);
        let out = self.value(x).map(|v| if v > m { v } else { m });
        self.push(out, Op::ClampMin { x, min: m }, &[x])
    }

    /// Per-element probability of the unit bin around `v` under
    /// `N(mu, sigma^2)`, floored at `floor`.
    pub fn gaussian_likelihood(&mut self, v: Var, mu: Var, sigma: Var, floor: f64) -> Result<Var> {
        let (tv, tm, ts) = (self.value(v), self.value(mu), self.value(sigma));
        same_shape(tv, tm, "likelihood mu")?;
        same_shape(tv, ts, "likelihood sigma")?;
        let data = tv
            .data()
            .iter()
            .zip(tm.data())
            .zip(ts.data())
            .map(|((&x, &m), &s)| F::from_f64(gaussian_bin(x.as_f64(), m.as_f64(), s.as_f64()).0.max(floor)))
            .collect();
        let out = Tensor::new(tv.shape(), data)?;
        Ok(self.push(out, Op::GaussianLikelihood { v, mu, sigma, floor }, &[v, mu, sigma]))
    }

    /// Per-element bin probability under the learned per-channel CDF.
    /// `params` are the prior tensors in the order of
    /// [`super::factorized::param_shapes`].
    pub fn factorized_likelihood(&mut self, z: Var, params: &[Var], floor: f64) -> Result<Var> {
        if params.len() != PARAM_TENSORS {
            return Err(SelicError::Shape(format!("factorized prior needs {PARAM_TENSORS} tensors")));
        }
        let (bn, c, h, w) = self.value(z).dims4()?;
        if self.value(params[0]).shape()[0] != c {
            return Err(SelicError::Shape(format!(
                "factorized prior has {} channels, input has {c}",
                self.value(params[0]).shape()[0]
            )));
        }
        let pdata: Vec<Vec<f64>> =
            params.iter().map(|&p| self.value(p).data().iter().map(|v| v.as_f64()).collect()).collect();
        let prefs: Vec<&[f64]> = pdata.iter().map(|v| v.as_slice()).collect();
        let tz = self.value(z);
        let plane = h * w;
        let mut out = vec![F::zero(); tz.numel()];
        for ch in 0..c {
            let prior = ChannelPrior::from_params(&prefs, ch);
            for bi in 0..bn {
                let base = (bi * c + ch) * plane;
                for i in base..base + plane {
                    out[i] = F::from_f64(prior.bin(tz.data()[i].as_f64()).0.max(floor));
                }
            }
        }
        let out = Tensor::new(&[bn, c, h, w], out)?;
        let mut inputs = vec![z];
        inputs.extend_from_slice(params);
        Ok(self.push(out, Op::FactorizedLikelihood { z, params: params.to_vec(), floor }, &inputs))
    }

    /// `-sum(log2 x)` as a `[1]` tensor.
    pub fn neg_log2_sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| -v.as_f64().log2()).sum();
        self.push(Tensor::scalar(F::from_f64(s)), Op::NegLog2Sum(x), &[x])
    }

    /// Mean squared difference as a `[1]` tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "mse")?;
        let n = ta.numel().max(1) as f64;
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&p, &q)| {
                let d = (p - q).as_f64();
                d * d
            })
            .sum();
        Ok(self.push(Tensor::scalar(F::from_f64(s / n)), Op::Mse(a, b), &[a, b]))
    }

    /// Weighted sum of `[1]` tensors.
    pub fn affine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for &(v, c) in terms {
            let t = self.value(v);
            if t.numel() != 1 {
                return Err(SelicError::Shape(format!("affine expects scalars, got {:?}", t.shape())));
            }
            s += c * t.item().as_f64();
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(Tensor::scalar(F::from_f64(s)), Op::Affine(terms.to_vec()), &inputs))
    }

    /// Gradients of the scalar `root` with respect to all nodes.
    pub fn backward(&self, root: Var) -> Result<Gradients<F>> {
        if self.value(root).numel() != 1 {
            return Err(SelicError::Shape("backward root must be a scalar".into()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), F::one()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop_node(node, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node<F>, gy: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        let mut acc = |v: Var, g: Tensor<F>| {
            if !self.wants(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let g = conv::conv2d_backward(self.value(*x), self.value(*w), gy, *geom, self.wants(*x))?;
                if let Some(dx) = g.dx {
                    acc(*x, dx);
                }
                acc(*w, g.dw);
                acc(*b, g.db);
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let g = conv::conv_transpose2d_backward(self.value(*x), self.value(*w), gy, *geom, self.wants(*x))?;
                if let Some(dx) = g.dx {
                    acc(*x, dx);
                }
                acc(*w, g.dw);
                acc(*b, g.db);
            }
            Op::LeakyRelu { x, slope } => {
                let tx = self.value(*x);
                let data = tx
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&v, &g)| if v > F::zero() { g } else { g * *slope })
                    .collect();
                acc(*x, Tensor::new(tx.shape(), data)?);
            }
            Op::Add(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.map(|g| -g));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = gy.data().iter().zip(tb.data()).map(|(&g, &q)| g * q).collect();
                    acc(*a, Tensor::new(ta.shape(), d)?);
                }
                if self.wants(*b) {
                    let d = gy.data().iter().zip(ta.data()).map(|(&g, &p)| g * p).collect();
                    acc(*b, Tensor::new(tb.shape(), d)?);
                }
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = self.value(p).shape()[1];
                    if self.wants(p) {
                        acc(p, gy.narrow_channels(start, c)?);
                    }
                    start += c;
                }
            }
            Op::Narrow { x, start } => {
                let tx = self.value(*x);
                let (bn, c, h, w) = tx.dims4()?;
                let len = gy.shape()[1];
                let plane = h * w;
                let mut d = Tensor::zeros(tx.shape());
                for bi in 0..bn {
                    let dst = (bi * c + start) * plane;
                    d.data_mut()[dst..dst + len * plane]
                        .copy_from_slice(&gy.data()[bi * len * plane..(bi + 1) * len * plane]);
                }
                acc(*x, d);
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (bn, din) = (tx.shape()[0], tx.shape()[1]);
                let dout = tw.shape()[0];
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(tx.shape());
                    gemm(false, false, bn, dout, din, gy.data(), tw.data(), dx.data_mut(), false);
                    acc(*x, dx);
                }
                let mut dw = Tensor::zeros(tw.shape());
                gemm(true, false, dout, bn, din, gy.data(), tx.data(), dw.data_mut(), false);
                acc(*w, dw);
                let mut db = Tensor::zeros(&[dout]);
                for row in gy.data().chunks(dout) {
                    for (d, &g) in db.data_mut().iter_mut().zip(row) {
                        *d += g;
                    }
                }
                acc(*b, db);
            }
            Op::Broadcast { x } => {
                let tx = self.value(*x);
                let (_, _, h, w) = gy.dims4()?;
                let plane = h * w;
                let d = (0..tx.numel())
                    .map(|i| gy.data()[i * plane..(i + 1) * plane].iter().copied().sum::<F>())
                    .collect();
                acc(*x, Tensor::new(tx.shape(), d)?);
            }
            Op::Softplus(x) => {
                let tx = self.value(*x);
                let d = tx
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&v, &g)| g * F::from_f64(sigmoid(v.as_f64())))
                    .collect();
                acc(*x, Tensor::new(tx.shape(), d)?);
            }
            Op::ClampMin { x, min } => {
                let tx = self.value(*x);
                let d = tx
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&v, &g)| if v > *min { g } else { F::zero() })
                    .collect();
                acc(*x, Tensor::new(tx.shape(), d)?);
            }
            Op::GaussianLikelihood { v, mu, sigma, floor } => {
                let (tv, tm, ts) = (self.value(*v), self.value(*mu), self.value(*sigma));
                let n = tv.numel();
                let (mut dv, mut dm, mut ds) = (vec![F::zero(); n], vec![F::zero(); n], vec![F::zero(); n]);
                for i in 0..n {
                    let (p, d) = gaussian_bin(tv.data()[i].as_f64(), tm.data()[i].as_f64(), ts.data()[i].as_f64());
                    if p <= *floor {
                        continue;
                    }
                    let g = gy.data()[i].as_f64();
                    dv[i] = F::from_f64(g * d[0]);
                    dm[i] = F::from_f64(g * d[1]);
                    ds[i] = F::from_f64(g * d[2]);
                }
                acc(*v, Tensor::new(tv.shape(), dv)?);
                acc(*mu, Tensor::new(tm.shape(), dm)?);
                acc(*sigma, Tensor::new(ts.shape(), ds)?);
            }
            Op::FactorizedLikelihood { z, params, floor } => {
                let tz = self.value(*z);
                let (bn, c, h, w) = tz.dims4()?;
                let plane = h * w;
                let pdata: Vec<Vec<f64>> =
                    params.iter().map(|&p| self.value(p).data().iter().map(|v| v.as_f64()).collect()).collect();
                let prefs: Vec<&[f64]> = pdata.iter().map(|v| v.as_slice()).collect();
                let mut pgrads: Vec<Vec<f64>> = pdata.iter().map(|p| vec![0.0; p.len()]).collect();
                let mut dz = vec![F::zero(); tz.numel()];
                {
                    let mut views: Vec<&mut [f64]> = pgrads.iter_mut().map(|g| g.as_mut_slice()).collect();
                    for ch in 0..c {
                        let prior = ChannelPrior::from_params(&prefs, ch);
                        for bi in 0..bn {
                            let base = (bi * c + ch) * plane;
                            for i in base..base + plane {
                                let (p, dpu, dpl, tu, tl) = prior.bin(tz.data()[i].as_f64());
                                if p <= *floor {
                                    continue;
                                }
                                let g = gy.data()[i].as_f64();
                                let gu = prior.backward(&tu, g * dpu, &mut views, ch);
                                let gl = prior.backward(&tl, g * dpl, &mut views, ch);
                                dz[i] = F::from_f64(gu + gl);
                            }
                        }
                    }
                }
                acc(*z, Tensor::new(tz.shape(), dz)?);
                for (&p, g) in params.iter().zip(pgrads) {
                    let shape = self.value(p).shape().to_vec();
                    acc(p, Tensor::new(&shape, g.into_iter().map(F::from_f64).collect())?);
                }
            }
            Op::NegLog2Sum(x) => {
                let g = gy.item().as_f64();
                let tx = self.value(*x);
                acc(*x, tx.map(|v| F::from_f64(-g / (v.as_f64() * std::f64::consts::LN_2))));
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let scale = 2.0 * gy.item().as_f64() / ta.numel().max(1) as f64;
                let d: Vec<F> =
                    ta.data().iter().zip(tb.data()).map(|(&p, &q)| F::from_f64(scale * (p - q).as_f64())).collect();
                if self.wants(*b) {
                    acc(*b, Tensor::new(tb.shape(), d.iter().map(|&v| -v).collect())?);
                }
                acc(*a, Tensor::new(ta.shape(), d)?);
            }
            Op::Affine(terms) => {
                let g = gy.item().as_f64();
                for &(v, c) in terms {
                    acc(v, Tensor::scalar(F::from_f64(g * c)));
                }
            }
        }
        Ok(())
    }
}
