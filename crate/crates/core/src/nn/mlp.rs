use std::cell::Cell;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::{Error, Result};

const WEIGHTS_MAGIC: &[u8; 8] = b"PDNNWGT\0";
const WEIGHTS_VERSION: u32 = 1;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

thread_local! {
    static FORWARD_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Forward passes (recorded or not) run on the calling thread so far.
pub fn forward_calls() -> u64 {
    FORWARD_CALLS.with(|c| c.get())
}

fn count_forward() {
    FORWARD_CALLS.with(|c| c.set(c.get() + 1));
}

/// Hidden-layer nonlinearity. The output layer is always linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// tanh-approximated Gaussian error linear unit.
    Gelu,
    Tanh,
    Identity,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
                let th = u.tanh();
                let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
                0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    fn tag(self) -> u32 {
        match self {
            Activation::Gelu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Gelu),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Identity),
            t => Err(Error::Format(format!("unknown activation tag {t}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApproximatorSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub init_seed: u64,
}

impl ApproximatorSpec {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        output_dim: usize,
        activation: Activation,
        init_seed: u64,
    ) -> Self {
        Self {
            input_dim,
            hidden_dims,
            output_dim,
            activation,
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidConfig("network dims must be >= 1".into()));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidConfig(
                "hidden_dims must be nonempty with entries >= 1".into(),
            ));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` per layer.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Activation record of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    weights_id: u64,
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Vec<f64>>,
}

/// Parameters of a feed-forward network, stored flat. Layer `l` occupies a
/// row-major `fan_out x fan_in` weight block followed by its bias.
#[derive(Debug, Clone)]
pub struct ApproximatorWeights {
    spec: ApproximatorSpec,
    params: Vec<f64>,
    offsets: Vec<usize>,
    id: u64,
}

impl PartialEq for ApproximatorWeights {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.params == other.params
    }
}

fn layer_offsets(spec: &ApproximatorSpec) -> Vec<usize> {
    let mut offsets = Vec::new();
    let mut at = 0;
    for (i, o) in spec.layers() {
        offsets.push(at);
        at += i * o + o;
    }
    offsets
}

impl ApproximatorWeights {
    /// Deterministic fan-in scaled init: weights uniform with variance
    /// `1 / fan_in`, biases zero.
    pub fn init(spec: &ApproximatorSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let mut params = Vec::with_capacity(spec.num_params());
        for (fan_in, fan_out) in spec.layers() {
            let bound = (3.0 / fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(rng.random_range(-bound..bound));
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Self::from_params(spec.clone(), params)
    }

    pub fn zeros(spec: &ApproximatorSpec) -> Result<Self> {
        spec.validate()?;
        Self::from_params(spec.clone(), vec![0.0; spec.num_params()])
    }

    pub fn from_params(spec: ApproximatorSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.num_params() {
            return Err(Error::Shape(format!(
                "{} parameters for a network with {}",
                params.len(),
                spec.num_params()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("network parameters".into()));
        }
        let offsets = layer_offsets(&spec);
        Ok(Self {
            spec,
            params,
            offsets,
            id: fresh_id(),
        })
    }

    pub fn spec(&self) -> &ApproximatorSpec {
        &self.spec
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access invalidates every tape recorded so far.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.id = fresh_id();
        &mut self.params
    }

    fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (fan_in, fan_out) = self.spec.layers()[l];
        let start = self.offsets[l];
        let w = &self.params[start..start + fan_in * fan_out];
        let b = &self.params[start + fan_in * fan_out..start + fan_in * fan_out + fan_out];
        (w, b)
    }

    /// Overwrites one layer; used to build hand-specified networks.
    pub fn set_layer(&mut self, l: usize, weight: &[f64], bias: &[f64]) -> Result<()> {
        let (fan_in, fan_out) = *self
            .spec
            .layers()
            .get(l)
            .ok_or_else(|| Error::OutOfRange(format!("layer {l}")))?;
        if weight.len() != fan_in * fan_out || bias.len() != fan_out {
            return Err(Error::Shape(format!("layer {l} is {fan_out}x{fan_in}")));
        }
        let start = self.offsets[l];
        let params = self.params_mut();
        params[start..start + fan_in * fan_out].copy_from_slice(weight);
        params[start + fan_in * fan_out..start + fan_in * fan_out + fan_out].copy_from_slice(bias);
        Ok(())
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "input has {} entries, network expects {}",
                input.len(),
                self.spec.input_dim
            )));
        }
        Ok(())
    }

    fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
        let n = x.len();
        b.iter()
            .enumerate()
            .map(|(r, bias)| {
                let row = &w[r * n..(r + 1) * n];
                bias + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
            })
            .collect()
    }

    /// Forward pass without recording.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        count_forward();
        let act = self.spec.activation;
        let n_layers = self.offsets.len();
        let mut x = input.to_vec();
        for l in 0..n_layers {
            let (w, b) = self.layer(l);
            let mut z = Self::affine(w, b, &x);
            if l + 1 < n_layers {
                z.iter_mut().for_each(|v| *v = act.apply(*v));
            }
            x = z;
        }
        Ok(x)
    }

    /// Forward pass recording what [`Self::backward`] needs.
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        self.check_input(input)?;
        count_forward();
        let act = self.spec.activation;
        let n_layers = self.offsets.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers - 1);
        let mut x = input.to_vec();
        for l in 0..n_layers {
            let (w, b) = self.layer(l);
            let z = Self::affine(w, b, &x);
            inputs.push(x);
            if l + 1 < n_layers {
                x = z.iter().map(|&v| act.apply(v)).collect();
                pre.push(z);
            } else {
                x = z;
            }
        }
        Ok((
            x,
            Tape {
                weights_id: self.id,
                inputs,
                pre,
            },
        ))
    }

    /// Reverse pass: adds `d(output . grad_output)/d params` into
    /// `param_grads` and returns the gradient with respect to the input.
    pub fn backward_accumulate(
        &self,
        tape: &Tape,
        grad_output: &[f64],
        param_grads: &mut [f64],
    ) -> Result<Vec<f64>> {
        if tape.weights_id != self.id {
            return Err(Error::StaleTape);
        }
        if grad_output.len() != self.spec.output_dim || param_grads.len() != self.params.len() {
            return Err(Error::Shape("gradient buffer sizes".into()));
        }
        let act = self.spec.activation;
        let layers = self.spec.layers();
        let mut delta = grad_output.to_vec();
        for l in (0..layers.len()).rev() {
            let (fan_in, fan_out) = layers[l];
            let start = self.offsets[l];
            let x = &tape.inputs[l];
            let (w, _) = self.layer(l);
            {
                let (gw, gb) = param_grads[start..start + fan_in * fan_out + fan_out]
                    .split_at_mut(fan_in * fan_out);
                for r in 0..fan_out {
                    let d = delta[r];
                    if d != 0.0 {
                        let row = &mut gw[r * fan_in..(r + 1) * fan_in];
                        row.iter_mut().zip(x).for_each(|(g, xi)| *g += d * xi);
                    }
                    gb[r] += d;
                }
            }
            let mut prev = vec![0.0; fan_in];
            for r in 0..fan_out {
                let d = delta[r];
                if d != 0.0 {
                    let row = &w[r * fan_in..(r + 1) * fan_in];
                    prev.iter_mut().zip(row).for_each(|(p, wi)| *p += d * wi);
                }
            }
            if l > 0 {
                prev.iter_mut()
                    .zip(&tape.pre[l - 1])
                    .for_each(|(p, z)| *p *= act.derivative(*z));
            }
            delta = prev;
        }
        Ok(delta)
    }

    /// Reverse pass returning fresh `(param_grads, input_grad)`.
    pub fn backward(&self, tape: &Tape, grad_output: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut grads = vec![0.0; self.params.len()];
        let input_grad = self.backward_accumulate(tape, grad_output, &mut grads)?;
        Ok((grads, input_grad))
    }

    /// `self <- mu * self + (1 - mu) * other`, elementwise.
    pub fn ema_toward(&mut self, other: &ApproximatorWeights, mu: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&mu) {
            return Err(Error::InvalidConfig(format!(
                "EMA rate {mu} outside [0, 1]"
            )));
        }
        if self.spec != other.spec {
            return Err(Error::Shape("EMA between different architectures".into()));
        }
        let src = other.params.clone();
        if mu == 1.0 {
            return Ok(());
        }
        for (t, s) in self.params_mut().iter_mut().zip(&src) {
            *t = if mu == 0.0 {
                *s
            } else {
                mu * *t + (1.0 - mu) * s
            };
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        codec::write_header(w, WEIGHTS_MAGIC, WEIGHTS_VERSION)?;
        let s = &self.spec;
        codec::write_u32(w, s.input_dim as u32)?;
        codec::write_u32(w, s.hidden_dims.len() as u32)?;
        for &h in &s.hidden_dims {
            codec::write_u32(w, h as u32)?;
        }
        codec::write_u32(w, s.output_dim as u32)?;
        codec::write_u32(w, s.activation.tag())?;
        codec::write_u64(w, s.init_seed)?;
        codec::write_f64s(w, &self.params)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        codec::read_header(r, WEIGHTS_MAGIC, WEIGHTS_VERSION)?;
        let input_dim = codec::read_u32(r)? as usize;
        let n_hidden = codec::read_u32(r)? as usize;
        if n_hidden > 64 {
            return Err(Error::Format(format!("{n_hidden} hidden layers")));
        }
        let hidden_dims = (0..n_hidden)
            .map(|_| codec::read_u32(r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let output_dim = codec::read_u32(r)? as usize;
        let activation = Activation::from_tag(codec::read_u32(r)?)?;
        let init_seed = codec::read_u64(r)?;
        let spec = ApproximatorSpec::new(input_dim, hidden_dims, output_dim, activation, init_seed);
        spec.validate()?;
        let params = codec::read_f64s(r, Some(spec.num_params()))?;
        Self::from_params(spec, params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> ApproximatorSpec {
        ApproximatorSpec::new(4, vec![16], 3, Activation::Gelu, seed)
    }

    #[test]
    fn parameter_count_by_shape() {
        assert_eq!(spec(0).num_params(), 4 * 16 + 16 + 16 * 3 + 3);
        assert_eq!(spec(0).num_params(), 131);
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = ApproximatorWeights::init(&spec(1)).unwrap();
        let b = ApproximatorWeights::init(&spec(1)).unwrap();
        let c = ApproximatorWeights::init(&spec(2)).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let w = ApproximatorWeights::zeros(&spec(0)).unwrap();
        assert_eq!(w.predict(&[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn identity_passthrough() {
        let s = ApproximatorSpec::new(3, vec![3], 3, Activation::Identity, 0);
        let mut w = ApproximatorWeights::zeros(&s).unwrap();
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        w.set_layer(0, &eye, &[0.0; 3]).unwrap();
        w.set_layer(1, &eye, &[0.0; 3]).unwrap();
        let x = [0.3, -1.5, 2.25];
        assert_eq!(w.predict(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn forward_matches_predict() {
        let w = ApproximatorWeights::init(&spec(3)).unwrap();
        let x = [0.1, 0.2, -0.3, 0.9];
        assert_eq!(w.forward(&x).unwrap().0, w.predict(&x).unwrap());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero() {
        let w = ApproximatorWeights::init(&spec(3)).unwrap();
        let (_, tape) = w.forward(&[0.1, 0.2, -0.3, 0.9]).unwrap();
        let (g, gi) = w.backward(&tape, &[0.0; 3]).unwrap();
        assert!(g.iter().chain(&gi).all(|&v| v == 0.0));
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let w = ApproximatorWeights::init(&spec(4)).unwrap();
        let (_, tape) = w.forward(&[0.1, 0.2, -0.3, 0.9]).unwrap();
        let (g1, i1) = w.backward(&tape, &[0.5, -1.0, 2.0]).unwrap();
        let (g2, i2) = w.backward(&tape, &[1.0, -2.0, 4.0]).unwrap();
        for (a, b) in g1.iter().chain(&i1).zip(g2.iter().chain(&i2)) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut w = ApproximatorWeights::init(&spec(4)).unwrap();
        let (_, tape) = w.forward(&[0.1, 0.2, -0.3, 0.9]).unwrap();
        w.params_mut()[0] += 1.0;
        assert!(matches!(
            w.backward(&tape, &[1.0; 3]),
            Err(Error::StaleTape)
        ));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let w = ApproximatorWeights::init(&spec(4)).unwrap();
        assert!(matches!(w.predict(&[1.0; 5]), Err(Error::Shape(_))));
    }

    #[test]
    fn ema_endpoints_and_midpoint() {
        let s = ApproximatorSpec::new(1, vec![1], 1, Activation::Identity, 0);
        let mut target = ApproximatorWeights::from_params(s.clone(), vec![1.0; 4]).unwrap();
        let online = ApproximatorWeights::from_params(s.clone(), vec![0.0; 4]).unwrap();
        target.ema_toward(&online, 0.95).unwrap();
        assert!(target.params().iter().all(|&v| (v - 0.95).abs() < 1e-15));
        let mut t1 = ApproximatorWeights::from_params(s.clone(), vec![1.0; 4]).unwrap();
        t1.ema_toward(&online, 1.0).unwrap();
        assert_eq!(t1.params(), &[1.0; 4]);
        t1.ema_toward(&online, 0.0).unwrap();
        assert_eq!(t1.params(), &[0.0; 4]);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let w = ApproximatorWeights::init(&spec(9)).unwrap();
        let mut buf = Vec::new();
        w.write_to(&mut buf).unwrap();
        let back = ApproximatorWeights::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(w, back);
    }
}
