//! MLP encoder, Adam, and the training loop minimising the Cliff loss.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::criterion::{total_loss, CliffLossReport, CliffWeights};
use crate::diffgraph::{Graph, Var};
use crate::error::{Error, Result};
use crate::io::fmt_float;
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSpec {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    /// Leave the last layer without an activation.
    pub final_linear: bool,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            layer_dims: vec![2, 50, 100, 50, 2],
            activation: Activation::Tanh,
            final_linear: true,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 || self.layer_dims.contains(&0) {
            return Err(Error::Config(format!(
                "layer_dims needs ≥ 2 positive entries, got {:?}",
                self.layer_dims
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layer_dims[self.layer_dims.len() - 1]
    }
}

/// One affine layer; `weights` is `fan_in × fan_out`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub spec: EncoderSpec,
    pub layers: Vec<Layer>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsFile {
    spec: EncoderSpec,
    init: String,
    layers: Vec<LayerFile>,
}

pub const INIT_SCHEME: &str = "uniform(±1/sqrt(fan_in)) weights, zero biases";

impl Params {
    /// Weights uniform in `±1/√fan_in`, zero biases.
    pub fn init(spec: &EncoderSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                Layer {
                    fan_in,
                    fan_out,
                    weights: (0..fan_in * fan_out)
                        .map(|_| rng.random_range(-bound..=bound))
                        .collect(),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Params {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn zeros(spec: &EncoderSpec) -> Result<Self> {
        let mut p = Params::init(spec, 0)?;
        p.tensors_mut().for_each(|t| t.iter_mut().for_each(|v| *v = 0.0));
        Ok(p)
    }

    /// Weight and bias buffers in layer order (w₀, b₀, w₁, b₁, …).
    pub fn tensors(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.layers.iter().flat_map(|l| [&l.weights, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weights, &mut l.bias])
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let dims = &self.spec.layer_dims;
        if self.layers.len() != dims.len() - 1 {
            return Err(Error::Config(format!(
                "{} layers for layer_dims {dims:?}",
                self.layers.len()
            )));
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.fan_in != dims[k]
                || l.fan_out != dims[k + 1]
                || l.weights.len() != l.fan_in * l.fan_out
                || l.bias.len() != l.fan_out
            {
                return Err(Error::Config(format!(
                    "layer {k} does not match layer_dims {dims:?}"
                )));
            }
        }
        if self.tensors().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("parameters contain non-finite values".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ParamsFile {
            spec: self.spec.clone(),
            init: INIT_SCHEME.into(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerFile {
                    weights: l.weights.chunks(l.fan_out).map(<[f64]>::to_vec).collect(),
                    bias: l.bias.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ParamsFile =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("params: {e}")))?;
        let layers = file
            .layers
            .into_iter()
            .map(|l| Layer {
                fan_in: l.weights.len(),
                fan_out: l.bias.len(),
                weights: l.weights.into_iter().flatten().collect(),
                bias: l.bias,
            })
            .collect();
        let p = Params {
            spec: file.spec,
            layers,
        };
        p.validate()?;
        Ok(p)
    }

    /// Graph leaves for every parameter tensor, in [`tensors`](Self::tensors) order.
    pub fn bind(&self, g: &mut Graph) -> Result<Vec<Var>> {
        let mut vars = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            vars.push(g.variable(l.weights.clone(), &[l.fan_in, l.fan_out])?);
            vars.push(g.variable(l.bias.clone(), &[1, l.fan_out])?);
        }
        Ok(vars)
    }

    /// Forward pass outside the graph.
    pub fn encode_plain(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x.cols)?;
        let mut h = x.data.clone();
        let n = x.rows;
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; n * l.fan_out];
            for r in 0..n {
                let row = &h[r * l.fan_in..(r + 1) * l.fan_in];
                for c in 0..l.fan_out {
                    let mut acc = l.bias[c];
                    for (i, &v) in row.iter().enumerate() {
                        acc += v * l.weights[i * l.fan_out + c];
                    }
                    out[r * l.fan_out + c] = if k == last && self.spec.final_linear {
                        acc
                    } else {
                        acc.tanh()
                    };
                }
            }
            h = out;
        }
        Matrix::new(n, self.spec.output_dim(), h)
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.spec.input_dim() {
            return Err(Error::Dimension(format!(
                "input has {cols} columns, encoder expects {}",
                self.spec.input_dim()
            )));
        }
        Ok(())
    }
}

/// Differentiable forward pass of `x` (`n × D`) through bound parameters.
pub fn encode(g: &mut Graph, params: &Params, vars: &[Var], x: Var) -> Result<Var> {
    let n = match g.shape(x) {
        [n, cols] => {
            params.check_input(*cols)?;
            *n
        }
        s => {
            return Err(Error::InvalidShape {
                op: "encode",
                detail: format!("expected n×D input, got {s:?}"),
            })
        }
    };
    let last = params.layers.len() - 1;
    let mut h = x;
    for (k, l) in params.layers.iter().enumerate() {
        let (w, b) = (vars[2 * k], vars[2 * k + 1]);
        let xw = g.matmul(h, w)?;
        let bb = g.broadcast(b, &[n, l.fan_out])?;
        let pre = g.add(xw, bb)?;
        h = if k == last && params.spec.final_linear {
            pre
        } else {
            match params.spec.activation {
                Activation::Tanh => g.tanh(pre),
            }
        };
    }
    Ok(h)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weights: CliffWeights,
    pub init_seed: u64,
    /// Seeds conditioning-row draws and mini-batch shuffling.
    pub zeta_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.002,
            batch_size: 5000,
            epochs: 1000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weights: CliffWeights::default(),
            init_seed: 0,
            zeta_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be ≥ 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be > 0".into()));
        }
        if self.batch_size < 2 || self.batch_size < self.weights.m_conditioning {
            return Err(Error::Config(format!(
                "batch_size must be ≥ 2 and ≥ m_conditioning ({}), got {}",
                self.weights.m_conditioning, self.batch_size
            )));
        }
        self.weights.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().map(|t| vec![0.0; t.len()]).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update of every tensor.
pub fn adam_step(
    params: &mut Params,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    let shapes_match = grads.len() == state.m.len()
        && params.tensors().zip(grads).all(|(p, g)| p.len() == g.len())
        && state.m.iter().zip(grads).all(|(m, g)| m.len() == g.len());
    if !shapes_match {
        return Err(Error::Dimension(
            "gradient/state shapes do not match parameters".into(),
        ));
    }
    for (t, g) in grads.iter().enumerate() {
        if let Some(c) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("gradient of parameter tensor {t}"),
                coordinate: c,
            });
        }
    }
    state.step += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (((p, g), m), v) in params
        .tensors_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for k in 0..p.len() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_uni: f64,
    pub l_biv: f64,
    pub l_kl_uni: f64,
    pub total: f64,
}

impl EpochMetrics {
    fn mean_of(epoch: usize, reports: &[CliffLossReport]) -> Self {
        let k = reports.len() as f64;
        let mean = |f: fn(&CliffLossReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
        EpochMetrics {
            epoch,
            l_uni: mean(|r| r.l_uni),
            l_biv: mean(|r| r.l_biv),
            l_kl_uni: mean(|r| r.l_kl_uni),
            total: mean(|r| r.total),
        }
    }
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,l_uni,l_biv,l_kl_uni,total\n");
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            m.epoch,
            fmt_float(m.l_uni),
            fmt_float(m.l_biv),
            fmt_float(m.l_kl_uni),
            fmt_float(m.total)
        ));
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub initial: Params,
    pub params: Params,
    /// Loss at the start of each epoch (before that epoch's updates).
    pub metrics: Vec<EpochMetrics>,
}

/// Failure inside training, with everything logged up to that point.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub metrics: Vec<EpochMetrics>,
    pub last_good: Option<Params>,
}

/// Rows of each mini-batch of one epoch. A full batch keeps the data order;
/// otherwise rows are shuffled and batches too small for the loss are dropped.
fn epoch_batches<R: Rng>(n: usize, cfg: &TrainConfig, rng: &mut R) -> Vec<Vec<usize>> {
    if cfg.batch_size >= n {
        return vec![(0..n).collect()];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let min = cfg.weights.m_conditioning.max(2);
    order
        .chunks(cfg.batch_size)
        .filter(|c| c.len() >= min)
        .map(<[usize]>::to_vec)
        .collect()
}

/// RNG stream used for conditioning rows and shuffling.
pub fn zeta_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    rng
}

/// Loss and parameter gradients for one batch.
pub fn batch_loss(
    params: &Params,
    x: &Matrix,
    weights: &CliffWeights,
    rng: &mut ChaCha8Rng,
) -> Result<(CliffLossReport, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g)?;
    let input = g.constant(x.data.clone(), &[x.rows, x.cols])?;
    let z = encode(&mut g, params, &vars, input)?;
    let loss = total_loss(&mut g, z, weights, rng)?;
    g.backward(loss.total)?;
    let grads = vars.iter().map(|&v| g.grad(v).to_vec()).collect();
    Ok((loss.report, grads))
}

/// Full training run; `on_epoch` sees each epoch's metrics as they are produced.
pub fn train_with<F: FnMut(&EpochMetrics)>(
    x: &Matrix,
    initial: Params,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> std::result::Result<TrainResult, TrainFailure> {
    let fail = |error, metrics, last_good| TrainFailure {
        error,
        metrics,
        last_good,
    };
    if let Err(e) = cfg.validate().and_then(|_| initial.validate()) {
        return Err(fail(e, Vec::new(), None));
    }
    if x.rows < 2 || x.cols != initial.spec.input_dim() {
        let e = Error::Dimension(format!(
            "dataset is {}×{}, encoder expects D = {} and at least 2 rows",
            x.rows,
            x.cols,
            initial.spec.input_dim()
        ));
        return Err(fail(e, Vec::new(), None));
    }
    let mut rng = zeta_rng(cfg.zeta_seed);
    let mut params = initial.clone();
    let mut state = AdamState::new(&params);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(x.rows, cfg, &mut rng);
        let mut reports = Vec::with_capacity(batches.len());
        let before = params.clone();
        for rows in &batches {
            let xb = if rows.len() == x.rows {
                x.clone()
            } else {
                x.select_rows(rows)
            };
            let step = batch_loss(&params, &xb, &cfg.weights, &mut rng).and_then(|(report, grads)| {
                if !report.total.is_finite() {
                    return Err(Error::NonFinite {
                        context: "loss".into(),
                        coordinate: 0,
                    });
                }
                adam_step(&mut params, &grads, &mut state, cfg)?;
                Ok(report)
            });
            match step {
                Ok(r) => reports.push(r),
                Err(e) => {
                    let last_good = epoch.checked_sub(1);
                    let error = if e.is_numerical() {
                        Error::NumericalAbort {
                            epoch,
                            last_good,
                            reason: e.to_string(),
                        }
                    } else {
                        e
                    };
                    return Err(fail(error, metrics, Some(before)));
                }
            }
        }
        if reports.is_empty() {
            let e = Error::Config("no mini-batch is large enough for the loss".into());
            return Err(fail(e, metrics, Some(before)));
        }
        let m = EpochMetrics::mean_of(epoch, &reports);
        on_epoch(&m);
        metrics.push(m);
    }
    Ok(TrainResult {
        initial,
        params,
        metrics,
    })
}

pub fn train(
    x: &Matrix,
    enc: &EncoderSpec,
    cfg: &TrainConfig,
) -> std::result::Result<TrainResult, TrainFailure> {
    let initial = match Params::init(enc, cfg.init_seed) {
        Ok(p) => p,
        Err(error) => {
            return Err(TrainFailure {
                error,
                metrics: Vec::new(),
                last_good: None,
            })
        }
    };
    train_with(x, initial, cfg, |_| {})
}
