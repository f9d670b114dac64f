//! Layer sequences with exact reverse-mode gradients.
//!
//! A [`Network`] is a flat list of [`LayerSpec`]s. Activations flow from one
//! layer to the next; a [`LayerKind::ResidualGate`] additionally reads the
//! input of an earlier layer as its skip stream. Layers that take a
//! conditioning matrix (adaLN modulation and residual gates) all read the same
//! one, supplied alongside the inputs.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore};
use crate::error::{Error, Result};
use crate::linalg::{gemm, Matrix};

const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Dense,
    /// Layer norm without learned scale or shift.
    LayerNorm,
    Silu,
    Softplus,
    /// `x * (1 + scale(c)) + shift(c)` where `[shift, scale] = c W + b`.
    AdaLnModulation,
    /// `skip + gate(c) * x`, with `skip` the input of layer `skip_from`.
    ResidualGate {
        skip_from: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    /// Width of the conditioning vector; zero for unconditioned layers.
    pub cond_dim: usize,
    /// Initialize this layer's parameters to zero instead of Glorot-uniform.
    pub zero_init: bool,
}

impl LayerSpec {
    pub fn dense(in_dim: usize, out_dim: usize) -> Self {
        Self::new(LayerKind::Dense, in_dim, out_dim, 0)
    }

    pub fn layer_norm(dim: usize) -> Self {
        Self::new(LayerKind::LayerNorm, dim, dim, 0)
    }

    pub fn silu(dim: usize) -> Self {
        Self::new(LayerKind::Silu, dim, dim, 0)
    }

    pub fn softplus(dim: usize) -> Self {
        Self::new(LayerKind::Softplus, dim, dim, 0)
    }

    pub fn adaln(dim: usize, cond_dim: usize) -> Self {
        Self::new(LayerKind::AdaLnModulation, dim, dim, cond_dim)
    }

    /// Gates start at zero so the enclosing block is the identity at init.
    pub fn residual_gate(dim: usize, cond_dim: usize, skip_from: usize) -> Self {
        Self::new(LayerKind::ResidualGate { skip_from }, dim, dim, cond_dim).zeroed()
    }

    pub fn zeroed(mut self) -> Self {
        self.zero_init = true;
        self
    }

    fn new(kind: LayerKind, in_dim: usize, out_dim: usize, cond_dim: usize) -> Self {
        Self {
            kind,
            in_dim,
            out_dim,
            cond_dim,
            zero_init: false,
        }
    }

    fn has_params(&self) -> bool {
        matches!(
            self.kind,
            LayerKind::Dense | LayerKind::AdaLnModulation | LayerKind::ResidualGate { .. }
        )
    }

    /// Shape of the weight matrix, stored as (fan_in, fan_out).
    fn weight_shape(&self) -> (usize, usize) {
        match self.kind {
            LayerKind::Dense => (self.in_dim, self.out_dim),
            LayerKind::AdaLnModulation => (self.cond_dim, 2 * self.out_dim),
            LayerKind::ResidualGate { .. } => (self.cond_dim, self.out_dim),
            _ => (0, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    name: String,
    layers: Vec<LayerSpec>,
}

/// Cached activations from a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// `acts[k]` is the input of layer `k`; the last entry is the output.
    acts: Vec<Matrix>,
    aux: Vec<Aux>,
}

impl Tape {
    pub fn output(&self) -> &Matrix {
        self.acts.last().expect("tape holds at least the input")
    }
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    Norm {
        inv_std: Vec<f64>,
    },
    /// `1 + scale` for modulation layers.
    Scale(Matrix),
    Gate(Matrix),
}

pub struct Backprop {
    pub input_grad: Matrix,
    pub cond_grad: Option<Matrix>,
}

impl Network {
    pub fn new(name: impl Into<String>, layers: Vec<LayerSpec>) -> Result<Self> {
        let net = Self {
            name: name.into(),
            layers,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    /// Conditioning width, if any layer consumes conditioning.
    pub fn cond_dim(&self) -> Option<usize> {
        self.layers
            .iter()
            .find(|l| l.cond_dim > 0)
            .map(|l| l.cond_dim)
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.{layer}.w", self.name)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.{layer}.b", self.name)
    }

    fn validate(&self) -> Result<()> {
        let ctx = |k: usize| format!("network {} layer {k}", self.name);
        if self.layers.is_empty() {
            return Err(Error::Config(format!(
                "network {} has no layers",
                self.name
            )));
        }
        let cond = self.cond_dim();
        for (k, l) in self.layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(Error::Config(format!("{}: zero dimension", ctx(k))));
            }
            if k > 0 && self.layers[k - 1].out_dim != l.in_dim {
                return Err(Error::shape(ctx(k), self.layers[k - 1].out_dim, l.in_dim));
            }
            if l.kind != LayerKind::Dense && l.in_dim != l.out_dim {
                return Err(Error::shape(ctx(k), l.in_dim, l.out_dim));
            }
            let needs_cond = matches!(
                l.kind,
                LayerKind::AdaLnModulation | LayerKind::ResidualGate { .. }
            );
            if needs_cond != (l.cond_dim > 0) {
                return Err(Error::Config(format!(
                    "{}: conditioning width {} inconsistent with {:?}",
                    ctx(k),
                    l.cond_dim,
                    l.kind
                )));
            }
            if needs_cond && Some(l.cond_dim) != cond {
                return Err(Error::Config(format!(
                    "{}: all conditioned layers must share one conditioning width",
                    ctx(k)
                )));
            }
            if let LayerKind::ResidualGate { skip_from } = l.kind {
                if skip_from >= k {
                    return Err(Error::Config(format!(
                        "{}: skip source {skip_from} must precede the gate",
                        ctx(k)
                    )));
                }
                if self.layers[skip_from].in_dim != l.out_dim {
                    return Err(Error::shape(
                        format!("{} skip stream", ctx(k)),
                        l.out_dim,
                        self.layers[skip_from].in_dim,
                    ));
                }
            }
        }
        Ok(())
    }

    /// Adds this network's parameters to `store`: Glorot-uniform weights and
    /// zero biases, or all zeros for layers marked `zero_init`.
    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for (k, l) in self.layers.iter().enumerate() {
            if !l.has_params() {
                continue;
            }
            let (fan_in, fan_out) = l.weight_shape();
            let mut w = Matrix::zeros(fan_in, fan_out);
            if !l.zero_init {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit);
                for v in w.as_mut_slice() {
                    *v = dist.sample(rng);
                }
            }
            store.insert(self.weight_name(k), w);
            store.insert(self.bias_name(k), Matrix::zeros(1, fan_out));
        }
    }

    pub fn forward(
        &self,
        params: &ParamStore,
        inputs: &Matrix,
        cond: Option<&Matrix>,
    ) -> Result<Matrix> {
        let tape = self.forward_tape(params, inputs, cond)?;
        Ok(tape.acts.into_iter().next_back().expect("non-empty tape"))
    }

    pub fn forward_tape(
        &self,
        params: &ParamStore,
        inputs: &Matrix,
        cond: Option<&Matrix>,
    ) -> Result<Tape> {
        self.check_inputs(inputs, cond)?;
        let batch = inputs.rows();
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut aux = Vec::with_capacity(self.layers.len());
        acts.push(inputs.clone());
        for (k, l) in self.layers.iter().enumerate() {
            let x = &acts[k];
            let (y, a) = match l.kind {
                LayerKind::Dense => {
                    let (w, b) = self.wb(params, k)?;
                    let mut y = Matrix::zeros(batch, l.out_dim);
                    broadcast_rows(&mut y, b);
                    gemm(x, false, w, false, 1.0, &mut y);
                    (y, Aux::None)
                }
                LayerKind::LayerNorm => {
                    let mut y = x.clone();
                    let mut inv_std = Vec::with_capacity(batch);
                    for i in 0..batch {
                        let r = y.row_mut(i);
                        let n = r.len() as f64;
                        let mean = r.iter().sum::<f64>() / n;
                        let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        for v in r.iter_mut() {
                            *v = (*v - mean) * s;
                        }
                        inv_std.push(s);
                    }
                    (y, Aux::Norm { inv_std })
                }
                LayerKind::Silu => (x.map(silu), Aux::None),
                LayerKind::Softplus => (x.map(softplus), Aux::None),
                LayerKind::AdaLnModulation => {
                    let c = cond.expect("checked by check_inputs");
                    let m = self.affine_cond(params, k, c)?;
                    let d = l.out_dim;
                    let mut y = Matrix::zeros(batch, d);
                    let mut scale = Matrix::zeros(batch, d);
                    for i in 0..batch {
                        let (mr, xr) = (m.row(i), x.row(i));
                        let (shift, sc) = mr.split_at(d);
                        let sr = scale.row_mut(i);
                        for j in 0..d {
                            sr[j] = 1.0 + sc[j];
                        }
                        let yr = y.row_mut(i);
                        for j in 0..d {
                            yr[j] = xr[j] * sr[j] + shift[j];
                        }
                    }
                    (y, Aux::Scale(scale))
                }
                LayerKind::ResidualGate { skip_from } => {
                    let c = cond.expect("checked by check_inputs");
                    let g = self.affine_cond(params, k, c)?;
                    let mut y = acts[skip_from].clone();
                    for ((yv, gv), xv) in y
                        .as_mut_slice()
                        .iter_mut()
                        .zip(g.as_slice())
                        .zip(x.as_slice())
                    {
                        *yv += gv * xv;
                    }
                    (y, Aux::Gate(g))
                }
            };
            acts.push(y);
            aux.push(a);
        }
        Ok(Tape { acts, aux })
    }

    /// Reverse pass over a recorded tape. Parameter gradients are added into `grads`.
    pub fn backward(
        &self,
        params: &ParamStore,
        tape: &Tape,
        cond: Option<&Matrix>,
        output_grad: &Matrix,
        grads: &mut Gradients,
    ) -> Result<Backprop> {
        let out = tape.output();
        if output_grad.shape() != out.shape() {
            return Err(Error::shape(
                format!("{} output gradient", self.name),
                format!("{}x{}", out.rows(), out.cols()),
                format!("{}x{}", output_grad.rows(), output_grad.cols()),
            ));
        }
        let batch = out.rows();
        let mut cond_grad = cond.map(|c| Matrix::zeros(c.rows(), c.cols()));
        let mut pending: Vec<Option<Matrix>> = vec![None; self.layers.len()];
        let mut dy = output_grad.clone();

        for k in (0..self.layers.len()).rev() {
            let l = &self.layers[k];
            let x = &tape.acts[k];
            let mut dx = match (&l.kind, &tape.aux[k]) {
                (LayerKind::Dense, _) => {
                    let (w, _) = self.wb(params, k)?;
                    let (wid, bid) = self.param_ids(params, k)?;
                    gemm(x, true, &dy, false, 1.0, grads.get_mut(wid));
                    add_col_sums(grads.get_mut(bid), &dy);
                    let mut dx = Matrix::zeros(batch, l.in_dim);
                    gemm(&dy, false, w, true, 0.0, &mut dx);
                    dx
                }
                (LayerKind::LayerNorm, Aux::Norm { inv_std }) => {
                    let y = &tape.acts[k + 1];
                    let mut dx = Matrix::zeros(batch, l.in_dim);
                    let n = l.in_dim as f64;
                    for i in 0..batch {
                        let (dyr, yr) = (dy.row(i), y.row(i));
                        let mean_dy = dyr.iter().sum::<f64>() / n;
                        let mean_dyy = dyr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                        let s = inv_std[i];
                        for ((d, &g), &yh) in dx.row_mut(i).iter_mut().zip(dyr).zip(yr) {
                            *d = s * (g - mean_dy - yh * mean_dyy);
                        }
                    }
                    dx
                }
                (LayerKind::Silu, _) => elementwise_grad(&dy, x, silu_grad),
                (LayerKind::Softplus, _) => elementwise_grad(&dy, x, sigmoid),
                (LayerKind::AdaLnModulation, Aux::Scale(scale)) => {
                    let d = l.out_dim;
                    let mut dm = Matrix::zeros(batch, 2 * d);
                    let mut dx = Matrix::zeros(batch, d);
                    for i in 0..batch {
                        let (dyr, xr, sr) = (dy.row(i), x.row(i), scale.row(i));
                        let dmr = dm.row_mut(i);
                        for j in 0..d {
                            dmr[j] = dyr[j];
                            dmr[d + j] = dyr[j] * xr[j];
                        }
                        let dxr = dx.row_mut(i);
                        for j in 0..d {
                            dxr[j] = dyr[j] * sr[j];
                        }
                    }
                    self.affine_cond_backward(params, k, cond, &dm, grads, cond_grad.as_mut())?;
                    dx
                }
                (LayerKind::ResidualGate { skip_from }, Aux::Gate(g)) => {
                    let mut dg = dy.clone();
                    for (v, xv) in dg.as_mut_slice().iter_mut().zip(x.as_slice()) {
                        *v *= xv;
                    }
                    self.affine_cond_backward(params, k, cond, &dg, grads, cond_grad.as_mut())?;
                    match &mut pending[*skip_from] {
                        Some(p) => p.add_scaled(&dy, 1.0),
                        slot @ None => *slot = Some(dy.clone()),
                    }
                    let mut dx = dy.clone();
                    for (v, gv) in dx.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *v *= gv;
                    }
                    dx
                }
                _ => unreachable!("tape aux does not match layer kind"),
            };
            if let Some(p) = pending[k].take() {
                dx.add_scaled(&p, 1.0);
            }
            dy = dx;
        }
        Ok(Backprop {
            input_grad: dy,
            cond_grad,
        })
    }

    fn check_inputs(&self, inputs: &Matrix, cond: Option<&Matrix>) -> Result<()> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::shape(
                format!("{} input columns", self.name),
                self.input_dim(),
                inputs.cols(),
            ));
        }
        match (self.cond_dim(), cond) {
            (Some(w), Some(c)) => {
                if c.cols() != w || c.rows() != inputs.rows() {
                    return Err(Error::shape(
                        format!("{} conditioning", self.name),
                        format!("{}x{w}", inputs.rows()),
                        format!("{}x{}", c.rows(), c.cols()),
                    ));
                }
            }
            (Some(w), None) => {
                return Err(Error::shape(
                    format!("{} conditioning", self.name),
                    format!("{w} columns"),
                    "none",
                ))
            }
            (None, Some(_)) => {
                return Err(Error::shape(
                    format!("{} conditioning", self.name),
                    "none",
                    "a conditioning matrix",
                ))
            }
            (None, None) => {}
        }
        Ok(())
    }

    fn param_ids(&self, params: &ParamStore, k: usize) -> Result<(usize, usize)> {
        let w = self.weight_name(k);
        let b = self.bias_name(k);
        let wid = params
            .id(&w)
            .ok_or_else(|| Error::Config(format!("missing parameter {w}")))?;
        let bid = params
            .id(&b)
            .ok_or_else(|| Error::Config(format!("missing parameter {b}")))?;
        Ok((wid, bid))
    }

    fn wb<'p>(&self, params: &'p ParamStore, k: usize) -> Result<(&'p Matrix, &'p Matrix)> {
        let (wid, bid) = self.param_ids(params, k)?;
        let (w, b) = (params.value(wid), params.value(bid));
        let expected = self.layers[k].weight_shape();
        if w.shape() != expected || b.shape() != (1, expected.1) {
            return Err(Error::shape(
                self.weight_name(k),
                format!("{}x{}", expected.0, expected.1),
                format!("{}x{}", w.rows(), w.cols()),
            ));
        }
        Ok((w, b))
    }

    fn affine_cond(&self, params: &ParamStore, k: usize, c: &Matrix) -> Result<Matrix> {
        let (w, b) = self.wb(params, k)?;
        let mut m = Matrix::zeros(c.rows(), w.cols());
        broadcast_rows(&mut m, b);
        gemm(c, false, w, false, 1.0, &mut m);
        Ok(m)
    }

    fn affine_cond_backward(
        &self,
        params: &ParamStore,
        k: usize,
        cond: Option<&Matrix>,
        dm: &Matrix,
        grads: &mut Gradients,
        cond_grad: Option<&mut Matrix>,
    ) -> Result<()> {
        let c = cond.expect("conditioned layer without conditioning");
        let (w, _) = self.wb(params, k)?;
        let (wid, bid) = self.param_ids(params, k)?;
        gemm(c, true, dm, false, 1.0, grads.get_mut(wid));
        add_col_sums(grads.get_mut(bid), dm);
        if let Some(cg) = cond_grad {
            gemm(dm, false, w, true, 1.0, cg);
        }
        Ok(())
    }
}

/// Forward + backward in one call, for callers that did not keep a tape.
pub fn backward(
    net: &Network,
    params: &ParamStore,
    inputs: &Matrix,
    cond: Option<&Matrix>,
    output_grad: &Matrix,
) -> Result<(Gradients, Backprop)> {
    let tape = net.forward_tape(params, inputs, cond)?;
    let mut grads = Gradients::zeros_like(params);
    let bp = net.backward(params, &tape, cond, output_grad, &mut grads)?;
    Ok((grads, bp))
}

fn broadcast_rows(m: &mut Matrix, bias: &Matrix) {
    let b = bias.row(0);
    for i in 0..m.rows() {
        m.row_mut(i).copy_from_slice(b);
    }
}

fn add_col_sums(acc: &mut Matrix, dy: &Matrix) {
    let a = acc.row_mut(0);
    for r in dy.row_iter() {
        for (o, v) in a.iter_mut().zip(r) {
            *o += v;
        }
    }
}

fn elementwise_grad(dy: &Matrix, x: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    let mut dx = dy.clone();
    for (d, &xv) in dx.as_mut_slice().iter_mut().zip(x.as_slice()) {
        *d *= f(xv);
    }
    dx
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}
