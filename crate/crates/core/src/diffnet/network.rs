//! Network configuration, parameter layout, initialization and the
//! scalar (per-point) evaluation path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::jet::{snake, Jet2, Scalar};
use crate::{Error, Result};

/// Hidden-layer nonlinearity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Snake,
    /// Affine network; only useful for tests.
    Identity,
}

/// Architecture of the field estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Hidden width.
    pub n_f: usize,
    /// Number of residual blocks.
    pub n_b: usize,
    /// FC+activation pairs inside each residual block.
    pub fc_per_block: usize,
    /// Standard deviation of the Fourier-feature frequencies.
    pub ffe_sigma: f64,
    /// Frequencies per input coordinate.
    pub ffe_size: usize,
    /// Output scale in velocity-potential units.
    pub xi: f64,
    pub snake_a: f64,
    pub seed: u64,
    pub activation: Activation,
    /// Spatial extent mapped onto [-1, 1].
    pub length: f64,
    /// Temporal extent mapped onto [-1, 1].
    pub period: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            n_f: 200,
            n_b: 5,
            fc_per_block: 3,
            ffe_sigma: 0.1,
            ffe_size: 50,
            xi: 1e-2,
            snake_a: 1.0,
            seed: 0,
            activation: Activation::Snake,
            length: 1.0,
            period: 1.0 / 261.6,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("network: {m}")));
        if self.n_f == 0 || self.n_b == 0 || self.ffe_size == 0 || self.fc_per_block == 0 {
            return bad("n_f, n_b, fc_per_block and ffe_size must be at least 1");
        }
        if !(self.ffe_sigma > 0.0 && self.ffe_sigma.is_finite()) {
            return bad("ffe_sigma must be positive");
        }
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return bad("xi must be positive");
        }
        if !(self.snake_a > 0.0 && self.snake_a.is_finite()) {
            return bad("snake_a must be positive");
        }
        if !(self.length > 0.0 && self.period > 0.0) {
            return bad("length and period must be positive");
        }
        Ok(())
    }

    /// Width of the Fourier-feature vector.
    pub fn feature_dim(&self) -> usize {
        4 * self.ffe_size
    }
}

/// One fully connected layer inside the flat parameter vector.
/// Weights are row-major `out × in`, followed by `out` biases.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense {
    pub fan_in: usize,
    pub fan_out: usize,
    pub offset: usize,
}

impl Dense {
    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }
    pub fn bias_range(&self) -> std::ops::Range<usize> {
        let b = self.offset + self.fan_in * self.fan_out;
        b..b + self.fan_out
    }
    fn len(&self) -> usize {
        (self.fan_in + 1) * self.fan_out
    }
}

/// Config plus the derived layer layout. Layers are stored in evaluation
/// order: input layer, then `n_b * fc_per_block` hidden layers, then the
/// output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub config: NetworkConfig,
    layers: Vec<Dense>,
    n_params: usize,
}

impl Architecture {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        let mut offset = 0;
        let mut push = |fan_in, fan_out| {
            let d = Dense { fan_in, fan_out, offset };
            offset += d.len();
            layers.push(d);
        };
        push(config.feature_dim(), config.n_f);
        for _ in 0..config.n_b * config.fc_per_block {
            push(config.n_f, config.n_f);
        }
        push(config.n_f, 1);
        Ok(Self { config, layers, n_params: offset })
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn input_layer(&self) -> &Dense {
        &self.layers[0]
    }

    pub fn output_layer(&self) -> &Dense {
        self.layers.last().expect("at least two layers")
    }

    /// Hidden layers of block `b`.
    pub fn block(&self, b: usize) -> &[Dense] {
        let k = self.config.fc_per_block;
        &self.layers[1 + b * k..1 + (b + 1) * k]
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Human-readable layer name used in error messages.
    pub fn layer_name(&self, index: usize) -> String {
        let k = self.config.fc_per_block;
        if index == 0 {
            "input layer".into()
        } else if index + 1 == self.layers.len() {
            "output layer".into()
        } else {
            format!("block {} layer {}", (index - 1) / k + 1, (index - 1) % k + 1)
        }
    }
}

/// Frozen Fourier-feature frequencies plus the trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub arch: Architecture,
    /// `ffe_size × 2`, row-major: row `k` holds the x and t frequencies.
    pub ffe_matrix: Vec<f64>,
    /// Every trainable scalar, laid out as in [`Architecture`].
    pub weights: Vec<f64>,
}

impl NetworkParams {
    pub fn config(&self) -> &NetworkConfig {
        &self.arch.config
    }

    pub fn n_trainable(&self) -> usize {
        self.weights.len()
    }

    /// Parameters with a different weight vector and the same frozen parts.
    pub fn with_weights(&self, weights: Vec<f64>) -> Self {
        assert_eq!(weights.len(), self.weights.len());
        Self { arch: self.arch.clone(), ffe_matrix: self.ffe_matrix.clone(), weights }
    }
}

/// Glorot-uniform weights, zero biases, Normal(0, ffe_sigma²) frequencies.
/// The frequencies are drawn first, then the layers in evaluation order.
pub fn init_params(config: &NetworkConfig) -> Result<NetworkParams> {
    let arch = Architecture::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, config.ffe_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let ffe_matrix = (0..2 * config.ffe_size).map(|_| normal.sample(&mut rng)).collect();
    let mut weights = vec![0.0; arch.n_params()];
    for d in arch.layers() {
        let limit = (6.0 / (d.fan_in + d.fan_out) as f64).sqrt();
        for w in &mut weights[d.weight_range()] {
            *w = rng.gen_range(-limit..=limit);
        }
    }
    Ok(NetworkParams { arch, ffe_matrix, weights })
}

/// Affine map of `[0, L] × [0, T]` onto `[-1, 1]²`.
pub fn normalize_inputs(x: f64, t: f64, length: f64, period: f64) -> (f64, f64) {
    (2.0 * x / length - 1.0, 2.0 * t / period - 1.0)
}

/// Fourier features of normalized inputs, in the order
/// `[sin(2π f_x x̃)…, cos(2π f_x x̃)…, sin(2π f_t t̃)…, cos(2π f_t t̃)…]`.
pub fn ffe_encode<S: Scalar>(ffe_matrix: &[f64], xn: S, tn: S) -> Vec<S> {
    let m = ffe_matrix.len() / 2;
    let mut out = Vec::with_capacity(4 * m);
    for (col, v) in [(0, xn), (1, tn)] {
        let args: Vec<S> = (0..m).map(|k| v.scale(2.0 * std::f64::consts::PI * ffe_matrix[2 * k + col])).collect();
        out.extend(args.iter().map(|a| a.sin()));
        out.extend(args.iter().map(|a| a.cos()));
    }
    out
}

fn dense<S: Scalar>(d: &Dense, w: &[f64], input: &[S]) -> Vec<S> {
    let wm = &w[d.weight_range()];
    let b = &w[d.bias_range()];
    (0..d.fan_out)
        .map(|i| {
            let row = &wm[i * d.fan_in..(i + 1) * d.fan_in];
            row.iter().zip(input).fold(S::constant(b[i]), |acc, (&wij, &h)| acc + h.scale(wij))
        })
        .collect()
}

fn check<S: Scalar>(arch: &Architecture, layer: usize, v: &[S]) -> Result<()> {
    if v.iter().all(|s| s.value().is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { location: arch.layer_name(layer) })
    }
}

/// Scalar-path evaluation at normalized inputs carrying any [`Scalar`].
/// The result includes the output scale ξ.
pub fn forward_generic<S: Scalar>(params: &NetworkParams, xn: S, tn: S) -> Result<S> {
    let arch = &params.arch;
    let cfg = &arch.config;
    let w = &params.weights;
    let act = |z: S| match cfg.activation {
        Activation::Snake => snake(z, cfg.snake_a),
        Activation::Identity => z,
    };
    let features = ffe_encode(&params.ffe_matrix, xn, tn);
    let mut y = dense(arch.input_layer(), w, &features);
    check(arch, 0, &y)?;
    let mut index = 1;
    for b in 0..cfg.n_b {
        let mut h = y.clone();
        for d in arch.block(b) {
            h = dense(d, w, &h).into_iter().map(act).collect();
            check(arch, index, &h)?;
            index += 1;
        }
        y = y.into_iter().zip(h).map(|(a, b)| a + b).collect();
    }
    let out = dense(arch.output_layer(), w, &y)[0].scale(cfg.xi);
    check(arch, index, &[out])?;
    Ok(out)
}

/// Physical axis for jet evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    T,
}

/// Value, first and second derivative of φ̂ along `axis`, with respect to
/// the physical coordinate.
pub fn forward_with_jets(params: &NetworkParams, x: f64, t: f64, axis: Axis) -> Result<Jet2> {
    let cfg = params.config();
    let (xn, tn) = normalize_inputs(x, t, cfg.length, cfg.period);
    let (xj, tj) = match axis {
        Axis::X => (Jet2::new(xn, 2.0 / cfg.length, 0.0), Jet2::constant(tn)),
        Axis::T => (Jet2::constant(xn), Jet2::new(tn, 2.0 / cfg.period, 0.0)),
    };
    forward_generic(params, xj, tj)
}

/// Mixed derivative φ̂_xt through nested jets.
pub fn forward_mixed(params: &NetworkParams, x: f64, t: f64) -> Result<f64> {
    let cfg = params.config();
    let (xn, tn) = normalize_inputs(x, t, cfg.length, cfg.period);
    let zero = Jet2::constant(0.0);
    let xj = Jet2::new(Jet2::constant(xn), Jet2::constant(2.0 / cfg.length), zero);
    let tj = Jet2::new(Jet2::new(tn, 2.0 / cfg.period, 0.0), zero, zero);
    Ok(forward_generic(params, xj, tj)?.d1.d1)
}
