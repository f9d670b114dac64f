//! Velocity-field networks and reweighting heads.
//!
//! Both families embed time (sinusoidal features, then a two-layer MLP) and the
//! source point (two-layer MLP) separately. The MLP family also embeds the
//! current state and runs a plain MLP on the concatenation. The adaLN family
//! projects the state and runs residual blocks whose layer-norm scale and shift
//! and residual gate are regressed from the concatenated time and source
//! embeddings. Output heads and gates start at zero, so a fresh field is
//! identically zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{Gradients, LayerSpec, Network, ParamStore, Tape};

pub const TIME_FEATURES: usize = 64;
// Kept low so a 50-step RK4 push-forward resolves the time dependence.
const TIME_FREQ_MAX: f64 = 2.0 * std::f64::consts::PI;
const REWEIGHT_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    MlpSmall,
    MlpMedium,
    MlpLarge,
    AdalnSmall,
    AdalnMedium,
    AdalnLarge,
}

impl Arch {
    pub const ALL: [Arch; 6] = [
        Arch::MlpSmall,
        Arch::MlpMedium,
        Arch::MlpLarge,
        Arch::AdalnSmall,
        Arch::AdalnMedium,
        Arch::AdalnLarge,
    ];

    /// `(layers N, hidden size d)`.
    pub fn dims(self) -> (usize, usize) {
        match self {
            Arch::MlpSmall => (4, 256),
            Arch::MlpMedium => (6, 512),
            Arch::MlpLarge => (8, 1680),
            Arch::AdalnSmall => (5, 128),
            Arch::AdalnMedium => (7, 256),
            Arch::AdalnLarge => (8, 1024),
        }
    }

    pub fn is_adaln(self) -> bool {
        matches!(
            self,
            Arch::AdalnSmall | Arch::AdalnMedium | Arch::AdalnLarge
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::MlpSmall => "mlp_small",
            Arch::MlpMedium => "mlp_medium",
            Arch::MlpLarge => "mlp_large",
            Arch::AdalnSmall => "adaln_small",
            Arch::AdalnMedium => "adaln_medium",
            Arch::AdalnLarge => "adaln_large",
        }
    }

    fn code(self) -> f64 {
        Arch::ALL.iter().position(|&a| a == self).expect("listed") as f64
    }

    fn from_code(c: f64) -> Option<Arch> {
        (c >= 0.0 && c.fract() == 0.0)
            .then(|| Arch::ALL.get(c as usize).copied())
            .flatten()
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .iter()
            .copied()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Input(format!("unknown architecture {s:?}")))
    }
}

/// `[sin(ω_k t), cos(ω_k t)]` with 32 frequencies spaced geometrically in [1, 2π].
pub fn time_features(t: &[f64]) -> Matrix {
    let half = TIME_FEATURES / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| TIME_FREQ_MAX.powf(k as f64 / (half - 1) as f64))
        .collect();
    Matrix::from_fn(t.len(), TIME_FEATURES, |i, j| {
        if j < half {
            (freqs[j] * t[i]).sin()
        } else {
            (freqs[j - half] * t[i]).cos()
        }
    })
}

fn embedding(name: &str, input: usize, width: usize) -> Result<Network> {
    Network::new(
        name,
        vec![
            LayerSpec::dense(input, width),
            LayerSpec::silu(width),
            LayerSpec::dense(width, width),
            LayerSpec::silu(width),
        ],
    )
}

fn mlp_trunk(input: usize, layers: usize, d: usize, out: usize) -> Result<Network> {
    let mut specs = vec![LayerSpec::dense(input, d), LayerSpec::silu(d)];
    for _ in 1..layers {
        specs.push(LayerSpec::dense(d, d));
        specs.push(LayerSpec::silu(d));
    }
    specs.push(LayerSpec::dense(d, out).zeroed());
    Network::new("vf.trunk", specs)
}

fn adaln_trunk(input: usize, blocks: usize, d: usize, cond: usize, out: usize) -> Result<Network> {
    let mut specs = vec![LayerSpec::dense(input, d), LayerSpec::silu(d)];
    for _ in 0..blocks {
        let start = specs.len();
        specs.extend([
            LayerSpec::layer_norm(d),
            LayerSpec::adaln(d, cond),
            LayerSpec::dense(d, d),
            LayerSpec::silu(d),
            LayerSpec::residual_gate(d, cond, start),
        ]);
    }
    specs.extend([
        LayerSpec::layer_norm(d),
        LayerSpec::adaln(d, cond),
        LayerSpec::dense(d, out).zeroed(),
    ]);
    Network::new("vf.trunk", specs)
}

/// Conditional velocity field `v_t(y | x)` from target space to target space.
#[derive(Debug, Clone)]
pub struct VelocityField {
    arch: Arch,
    source_dim: usize,
    target_dim: usize,
    time_net: Network,
    source_net: Network,
    /// State embedding, MLP family only.
    state_net: Option<Network>,
    trunk: Network,
    params: ParamStore,
}

/// Activations of one field evaluation.
pub struct FieldTape {
    time: Tape,
    source: Tape,
    state: Option<Tape>,
    cond: Option<Matrix>,
    trunk: Tape,
}

impl FieldTape {
    pub fn output(&self) -> &Matrix {
        self.trunk.output()
    }
}

impl VelocityField {
    pub fn new(
        arch: Arch,
        source_dim: usize,
        target_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut vf = Self::skeleton(arch, source_dim, target_dim)?;
        for net in vf.networks() {
            net.init_params(&mut vf.params, rng);
        }
        Ok(vf)
    }

    fn skeleton(arch: Arch, source_dim: usize, target_dim: usize) -> Result<Self> {
        if source_dim == 0 || target_dim == 0 {
            return Err(Error::Config(
                "velocity field dimensions must be positive".into(),
            ));
        }
        let (layers, d) = arch.dims();
        let time_net = embedding("vf.time", TIME_FEATURES, d)?;
        let source_net = embedding("vf.source", source_dim, d)?;
        let (state_net, trunk) = if arch.is_adaln() {
            (None, adaln_trunk(target_dim, layers, d, 2 * d, target_dim)?)
        } else {
            (
                Some(embedding("vf.state", target_dim, d)?),
                mlp_trunk(3 * d, layers, d, target_dim)?,
            )
        };
        Ok(Self {
            arch,
            source_dim,
            target_dim,
            time_net,
            source_net,
            state_net,
            trunk,
            params: ParamStore::new(),
        })
    }

    fn networks(&self) -> Vec<Network> {
        let mut nets = vec![self.time_net.clone(), self.source_net.clone()];
        nets.extend(self.state_net.clone());
        nets.push(self.trunk.clone());
        nets
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn source_dim(&self) -> usize {
        self.source_dim
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Width of the conditioning vector seen by adaLN layers.
    pub fn cond_dim(&self) -> Option<usize> {
        self.trunk.cond_dim()
    }

    fn check(&self, state: &Matrix, t: &[f64], x: &Matrix) -> Result<()> {
        let b = state.rows();
        if state.cols() != self.target_dim {
            return Err(Error::shape(
                "velocity field state columns",
                self.target_dim,
                state.cols(),
            ));
        }
        if x.cols() != self.source_dim {
            return Err(Error::shape(
                "velocity field source columns",
                self.source_dim,
                x.cols(),
            ));
        }
        if x.rows() != b || t.len() != b {
            return Err(Error::shape(
                "velocity field batch",
                b,
                format!("{} sources and {} times", x.rows(), t.len()),
            ));
        }
        Ok(())
    }

    pub fn forward_tape(&self, state: &Matrix, t: &[f64], x: &Matrix) -> Result<FieldTape> {
        self.check(state, t, x)?;
        let p = &self.params;
        let time_in = time_features(t);
        let time = self.time_net.forward_tape(p, &time_in, None)?;
        let source = self.source_net.forward_tape(p, x, None)?;
        let (state_tape, trunk_in, cond) = match &self.state_net {
            Some(net) => {
                let st = net.forward_tape(p, state, None)?;
                let input = Matrix::hstack(&[time.output(), source.output(), st.output()])?;
                (Some(st), input, None)
            }
            None => {
                let cond = Matrix::hstack(&[time.output(), source.output()])?;
                (None, state.clone(), Some(cond))
            }
        };
        let trunk = self.trunk.forward_tape(p, &trunk_in, cond.as_ref())?;
        Ok(FieldTape {
            time,
            source,
            state: state_tape,
            cond,
            trunk,
        })
    }

    /// Velocity at `state` for times `t` conditioned on sources `x`, row by row.
    pub fn forward(&self, state: &Matrix, t: &[f64], x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_tape(state, t, x)?.trunk.output().clone())
    }

    /// Accumulates parameter gradients for `output_grad` into `grads`.
    pub fn backward(
        &self,
        tape: &FieldTape,
        output_grad: &Matrix,
        grads: &mut Gradients,
    ) -> Result<()> {
        let p = &self.params;
        let bp = self
            .trunk
            .backward(p, &tape.trunk, tape.cond.as_ref(), output_grad, grads)?;
        let d = self.arch.dims().1;
        let (d_time, d_source, d_state) = match &self.state_net {
            Some(_) => {
                let g = &bp.input_grad;
                (
                    g.column_block(0, d),
                    g.column_block(d, d),
                    Some(g.column_block(2 * d, d)),
                )
            }
            None => {
                let g = bp
                    .cond_grad
                    .as_ref()
                    .expect("adaLN trunk returns a conditioning gradient");
                (g.column_block(0, d), g.column_block(d, d), None)
            }
        };
        self.time_net
            .backward(p, &tape.time, None, &d_time, grads)?;
        self.source_net
            .backward(p, &tape.source, None, &d_source, grads)?;
        if let (Some(net), Some(tp), Some(g)) = (&self.state_net, &tape.state, d_state) {
            net.backward(p, tp, None, &g, grads)?;
        }
        Ok(())
    }

    /// Parameters as named tensors, preceded by a `meta` tensor
    /// `[arch, source_dim, target_dim]`.
    pub fn tensors(&self) -> Vec<(String, Matrix)> {
        let meta = Matrix::from_vec(
            1,
            3,
            vec![
                self.arch.code(),
                self.source_dim as f64,
                self.target_dim as f64,
            ],
        )
        .expect("3 values");
        let mut out = vec![("meta".to_owned(), meta)];
        out.extend(self.params.iter().map(|(n, m)| (n.to_owned(), m.clone())));
        out
    }

    /// Rebuilds a field from [`VelocityField::tensors`]; tensors of other
    /// components (such as `rw.*`) are ignored.
    pub fn from_tensors(tensors: &[(String, Matrix)]) -> Result<Self> {
        let meta = tensors
            .iter()
            .find(|(n, _)| n == "meta")
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Input("checkpoint has no meta tensor".into()))?;
        if meta.shape() != (1, 3) {
            return Err(Error::shape(
                "checkpoint meta",
                "1x3",
                format!("{:?}", meta.shape()),
            ));
        }
        let arch = Arch::from_code(meta[(0, 0)]).ok_or_else(|| {
            Error::Input(format!(
                "checkpoint has unknown architecture code {}",
                meta[(0, 0)]
            ))
        })?;
        let dim = |v: f64| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Input(format!(
                    "checkpoint has invalid dimension {v}"
                )))
            }
        };
        let mut vf = Self::skeleton(arch, dim(meta[(0, 1)])?, dim(meta[(0, 2)])?)?;
        let mut expected = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for net in vf.networks() {
            net.init_params(&mut expected, &mut rng);
        }
        for (name, shape_ref) in expected.iter() {
            let value = tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, m)| m)
                .ok_or_else(|| Error::Input(format!("checkpoint is missing parameter {name}")))?;
            if value.shape() != shape_ref.shape() {
                return Err(Error::shape(
                    format!("checkpoint parameter {name}"),
                    format!("{:?}", shape_ref.shape()),
                    format!("{:?}", value.shape()),
                ));
            }
            vf.params.insert(name, value.clone());
        }
        Ok(vf)
    }
}

/// Positive mass estimates `η(x)` and `ξ(y)` for the unbalanced objective.
#[derive(Debug, Clone)]
pub struct ReweightingNets {
    eta: Network,
    xi: Network,
    params: ParamStore,
}

fn reweight_net(name: &str, input: usize) -> Result<Network> {
    let h = REWEIGHT_HIDDEN;
    Network::new(
        name,
        vec![
            LayerSpec::dense(input, h),
            LayerSpec::silu(h),
            LayerSpec::dense(h, h),
            LayerSpec::silu(h),
            LayerSpec::dense(h, 1),
            LayerSpec::softplus(1),
        ],
    )
}

impl ReweightingNets {
    pub fn new(source_dim: usize, target_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let eta = reweight_net("rw.eta", source_dim)?;
        let xi = reweight_net("rw.xi", target_dim)?;
        let mut params = ParamStore::new();
        eta.init_params(&mut params, rng);
        xi.init_params(&mut params, rng);
        Ok(Self { eta, xi, params })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn eta(&self, x: &Matrix) -> Result<Vec<f64>> {
        Ok(self.eta.forward(&self.params, x, None)?.into_vec())
    }

    pub fn xi(&self, y: &Matrix) -> Result<Vec<f64>> {
        Ok(self.xi.forward(&self.params, y, None)?.into_vec())
    }

    /// Mean of `(η(x_k) - w_x,k)² + (ξ(y_k) - w_y,k)²`, with gradients added into `grads`.
    pub(crate) fn loss(
        &self,
        x: &Matrix,
        y: &Matrix,
        wx: &[f64],
        wy: &[f64],
        grads: &mut Gradients,
    ) -> Result<f64> {
        let b = x.rows() as f64;
        let mut total = 0.0;
        for (net, input, w) in [(&self.eta, x, wx), (&self.xi, y, wy)] {
            let tape = net.forward_tape(&self.params, input, None)?;
            let out = tape.output();
            let mut d = Matrix::zeros(out.rows(), 1);
            for (k, (&o, &target)) in out.as_slice().iter().zip(w).enumerate() {
                let r = o - target;
                total += r * r / b;
                d[(k, 0)] = 2.0 * r / b;
            }
            net.backward(&self.params, &tape, None, &d, grads)?;
        }
        Ok(total)
    }

    pub fn tensors(&self) -> Vec<(String, Matrix)> {
        self.params
            .iter()
            .map(|(n, m)| (n.to_owned(), m.clone()))
            .collect()
    }
}
