//! The two forecasting architectures and their checkpoint file.
//!
//! - Dense baseline: a ReLU chain `[in, 350, 500, 350, 24]`, ReLU on every
//!   layer including the last.
//! - GRU forecaster: one GRU subnet per upstream block plus one for the
//!   sensor's own history, a dense subnet over the precipitation block, and a
//!   ReLU head over the concatenated subnet outputs.
//!
//! A GRU subnet maps a 24-step series to 10 features: a shared scalar-to-`E`
//! linear embedding per step, a GRU of width `H` from a zero state, an
//! elementwise tanh, a max over time, and a linear `H -> 10` output layer.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{DatasetVariant, OUTPUT_LEN};
use crate::neural::{
    maxpool_time_backward, maxpool_time_forward, relu, relu_backward, tanh, tanh_backward,
    AdamConfig, AdamState, Dense, Gru, GruStep, MaxPoolCache, NeuralError, ParamSet, Tensor,
};
use crate::sensor_network::IoError;

pub const CHECKPOINT_MAGIC: &[u8] = b"STAGECAST-CKPT v1\n";

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint holds `{found}`, expected `{expected}`")]
    ConfigMismatch { expected: String, found: String },
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Io(#[from] IoError),
}

impl From<std::io::Error> for ModelError {
    fn from(e: std::io::Error) -> Self {
        ModelError::Io(IoError(e))
    }
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FcNetConfig {
    pub widths: Vec<usize>,
}

impl FcNetConfig {
    /// `[input, 350, 500, 350, 24]` with the input width of `variant`.
    pub fn paper(variant: DatasetVariant) -> Self {
        FcNetConfig {
            widths: vec![variant.input_len(), 350, 500, 350, OUTPUT_LEN],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GruSubnetConfig {
    pub seq_len: usize,
    pub embed: usize,
    pub hidden: usize,
    pub out: usize,
}

impl Default for GruSubnetConfig {
    fn default() -> Self {
        GruSubnetConfig {
            seq_len: 24,
            embed: 400,
            hidden: 400,
            out: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FcSubnetConfig {
    pub widths: Vec<usize>,
}

impl Default for FcSubnetConfig {
    fn default() -> Self {
        FcSubnetConfig {
            widths: vec![40, 100, 200, 100, 30],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecasterConfig {
    pub upstream_count: usize,
    pub gru: GruSubnetConfig,
    pub precip: FcSubnetConfig,
    pub head: Vec<usize>,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        ForecasterConfig {
            upstream_count: 4,
            gru: GruSubnetConfig::default(),
            precip: FcSubnetConfig::default(),
            head: vec![80, 200, OUTPUT_LEN],
        }
    }
}

impl ForecasterConfig {
    /// Default layout with GRU embedding and state width `width`.
    pub fn with_gru_width(width: usize) -> Self {
        let mut c = Self::default();
        c.gru.embed = width;
        c.gru.hidden = width;
        c
    }

    pub fn concat_width(&self) -> usize {
        (self.upstream_count + 1) * self.gru.out + self.precip.widths.last().copied().unwrap_or(0)
    }

    pub fn input_len(&self) -> usize {
        (self.upstream_count + 1) * self.gru.seq_len + self.precip.widths.first().copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelConfig {
    Fc(FcNetConfig),
    Gru(ForecasterConfig),
}

fn check_widths(what: &str, w: &[usize]) -> Result<()> {
    if w.len() < 2 || w.contains(&0) {
        return Err(ModelError::InvalidConfig(format!(
            "{what} widths {w:?} need at least two positive entries"
        )));
    }
    Ok(())
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Fc(c) => check_widths("fc", &c.widths)?,
            ModelConfig::Gru(c) => {
                let g = &c.gru;
                if g.seq_len == 0 || g.embed == 0 || g.hidden == 0 || g.out == 0 {
                    return Err(ModelError::InvalidConfig(format!("gru subnet {g:?} has a zero width")));
                }
                check_widths("precip", &c.precip.widths)?;
                check_widths("head", &c.head)?;
                if c.head[0] != c.concat_width() {
                    return Err(ModelError::InvalidConfig(format!(
                        "head input {} does not match concatenated width {}",
                        c.head[0],
                        c.concat_width()
                    )));
                }
            }
        }
        if self.output_len() != OUTPUT_LEN {
            return Err(ModelError::InvalidConfig(format!(
                "output width {} is not {OUTPUT_LEN}",
                self.output_len()
            )));
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        match self {
            ModelConfig::Fc(c) => c.widths[0],
            ModelConfig::Gru(c) => c.input_len(),
        }
    }

    pub fn output_len(&self) -> usize {
        match self {
            ModelConfig::Fc(c) => *c.widths.last().unwrap_or(&0),
            ModelConfig::Gru(c) => *c.head.last().unwrap_or(&0),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ModelConfig::Fc(_) => "fc",
            ModelConfig::Gru(_) => "gru",
        }
    }

    /// SHA-256 of the canonical text form.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_string().as_bytes()).into()
    }
}

fn join(w: &[usize]) -> String {
    w.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Canonical one-line form, e.g. `fc widths=39,350,500,350,24`.
impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelConfig::Fc(c) => write!(f, "fc widths={}", join(&c.widths)),
            ModelConfig::Gru(c) => write!(
                f,
                "gru upstream={} seq={} embed={} hidden={} out={} precip={} head={}",
                c.upstream_count,
                c.gru.seq_len,
                c.gru.embed,
                c.gru.hidden,
                c.gru.out,
                join(&c.precip.widths),
                join(&c.head)
            ),
        }
    }
}

impl FromStr for ModelConfig {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |m: &str| ModelError::InvalidConfig(format!("{m} in `{s}`"));
        let mut words = s.split(' ');
        let kind = words.next().ok_or_else(|| bad("empty"))?;
        let mut fields = Vec::new();
        for w in words {
            let (k, v) = w.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            let v: Vec<usize> = v
                .split(',')
                .map(|x| x.parse().map_err(|_| bad("bad number")))
                .collect::<Result<_>>()?;
            fields.push((k, v));
        }
        let keys: Vec<&str> = fields.iter().map(|(k, _)| *k).collect();
        let scalar = |i: usize| -> Result<usize> {
            match fields[i].1.as_slice() {
                [x] => Ok(*x),
                _ => Err(bad("expected a single number")),
            }
        };
        let cfg = match kind {
            "fc" if keys == ["widths"] => ModelConfig::Fc(FcNetConfig {
                widths: fields[0].1.clone(),
            }),
            "gru" if keys == ["upstream", "seq", "embed", "hidden", "out", "precip", "head"] => {
                ModelConfig::Gru(ForecasterConfig {
                    upstream_count: scalar(0)?,
                    gru: GruSubnetConfig {
                        seq_len: scalar(1)?,
                        embed: scalar(2)?,
                        hidden: scalar(3)?,
                        out: scalar(4)?,
                    },
                    precip: FcSubnetConfig {
                        widths: fields[5].1.clone(),
                    },
                    head: fields[6].1.clone(),
                })
            }
            _ => return Err(bad("unknown layout")),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Dense layers with ReLU after each one, parameters `<prefix>.l<i>.{w,b}`.
#[derive(Debug, Clone)]
pub struct ReluChain {
    layers: Vec<Dense>,
}

#[derive(Debug, Clone)]
pub struct ReluChainCache {
    inputs: Vec<Tensor>,
    pre: Vec<Tensor>,
}

impl ReluChain {
    pub fn register(params: &mut ParamSet, prefix: &str, widths: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::register(params, &format!("{prefix}.l{i}"), w[0], w[1], rng))
            .collect::<Result<_, _>>()?;
        Ok(ReluChain { layers })
    }

    pub fn forward(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(params, x)?.0)
    }

    pub fn forward_cached(&self, params: &ParamSet, x: &Tensor) -> Result<(Tensor, ReluChainCache)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for l in &self.layers {
            let y = l.forward(params, &a)?;
            inputs.push(std::mem::replace(&mut a, relu(&y)));
            pre.push(y);
        }
        Ok((a, ReluChainCache { inputs, pre }))
    }

    /// Accumulates parameter gradients; returns `dL/dx`.
    pub fn backward(&self, params: &mut ParamSet, cache: &ReluChainCache, dy: &Tensor) -> Tensor {
        let mut g = dy.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let da = relu_backward(&cache.pre[i], &g);
            g = l.backward(params, &cache.inputs[i], &da);
        }
        g
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w: Vec<usize> = self.layers.iter().map(|l| l.n_in).collect();
        w.extend(self.layers.last().map(|l| l.n_out));
        w
    }
}

/// Series `[batch, seq_len]` to features `[batch, out]`.
#[derive(Debug, Clone)]
pub struct GruSubnet {
    config: GruSubnetConfig,
    embed: Dense,
    gru: Gru,
    out: Dense,
}

#[derive(Debug, Clone)]
pub struct GruSubnetCache {
    xs: Vec<Tensor>,
    steps: Vec<GruStep>,
    acts: Vec<Tensor>,
    pool: MaxPoolCache,
    pooled: Tensor,
}

impl GruSubnet {
    pub fn register(params: &mut ParamSet, prefix: &str, config: &GruSubnetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let embed = Dense::register(params, &format!("{prefix}.embed"), 1, config.embed, rng)?;
        let gru = Gru::register(params, &format!("{prefix}.gru"), config.embed, config.hidden, rng)?;
        let out = Dense::register(params, &format!("{prefix}.out"), config.hidden, config.out, rng)?;
        Ok(GruSubnet {
            config: config.clone(),
            embed,
            gru,
            out,
        })
    }

    pub fn forward(&self, params: &ParamSet, series: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(params, series)?.0)
    }

    pub fn forward_cached(&self, params: &ParamSet, series: &Tensor) -> Result<(Tensor, GruSubnetCache)> {
        let n = self.config.seq_len;
        if series.cols() != n || series.shape().len() > 2 {
            return Err(NeuralError::ShapeMismatch {
                op: "gru subnet input",
                expected: vec![series.rows(), n],
                found: series.shape().to_vec(),
            }
            .into());
        }
        let xs: Vec<Tensor> = (0..n).map(|t| series.columns(t, t + 1)).collect();
        let embedded = xs
            .iter()
            .map(|x| self.embed.forward(params, x))
            .collect::<Result<Vec<_>, _>>()?;
        let s0 = Tensor::zeros(&[series.rows(), self.config.hidden]);
        let (states, steps) = self.gru.sequence_forward(params, &embedded, &s0)?;
        let acts: Vec<Tensor> = states.iter().map(tanh).collect();
        let (pooled, pool) = maxpool_time_forward(&acts)?;
        let y = self.out.forward(params, &pooled)?;
        Ok((
            y,
            GruSubnetCache {
                xs,
                steps,
                acts,
                pool,
                pooled,
            },
        ))
    }

    pub fn backward(&self, params: &mut ParamSet, cache: &GruSubnetCache, dy: &Tensor) {
        let d_pooled = self.out.backward(params, &cache.pooled, dy);
        let d_acts = maxpool_time_backward(&cache.pool, &d_pooled);
        let d_states: Vec<Tensor> = cache
            .acts
            .iter()
            .zip(&d_acts)
            .map(|(a, g)| tanh_backward(a, g))
            .collect();
        let (d_embedded, _) = self.gru.sequence_backward(params, &cache.steps, &d_states);
        for (x, g) in cache.xs.iter().zip(&d_embedded) {
            self.embed.backward(params, x, g);
        }
    }
}

/// Composite network over a larger-layout input.
#[derive(Debug, Clone)]
pub struct Forecaster {
    config: ForecasterConfig,
    subnets: Vec<GruSubnet>,
    precip: ReluChain,
    head: ReluChain,
}

#[derive(Debug, Clone)]
pub struct ForecasterCache {
    subnets: Vec<GruSubnetCache>,
    precip: ReluChainCache,
    head: ReluChainCache,
}

impl Forecaster {
    /// Subnets are named `up0 ... up{k-1}` and `self`, then `precip`, `head`.
    pub fn register(params: &mut ParamSet, config: &ForecasterConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut subnets = Vec::with_capacity(config.upstream_count + 1);
        for i in 0..=config.upstream_count {
            let prefix = if i == config.upstream_count {
                "self".to_string()
            } else {
                format!("up{i}")
            };
            subnets.push(GruSubnet::register(params, &prefix, &config.gru, rng)?);
        }
        let precip = ReluChain::register(params, "precip", &config.precip.widths, rng)?;
        let head = ReluChain::register(params, "head", &config.head, rng)?;
        Ok(Forecaster {
            config: config.clone(),
            subnets,
            precip,
            head,
        })
    }

    pub fn forward(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(params, x)?.0)
    }

    pub fn forward_cached(&self, params: &ParamSet, x: &Tensor) -> Result<(Tensor, ForecasterCache)> {
        let len = self.config.input_len();
        if x.cols() != len || x.shape().len() > 2 {
            return Err(NeuralError::ShapeMismatch {
                op: "forecaster input",
                expected: vec![x.rows(), len],
                found: x.shape().to_vec(),
            }
            .into());
        }
        let n = self.config.gru.seq_len;
        let mut feats = Vec::with_capacity(self.subnets.len() + 1);
        let mut caches = Vec::with_capacity(self.subnets.len());
        for (i, sub) in self.subnets.iter().enumerate() {
            let (y, c) = sub.forward_cached(params, &x.columns(i * n, (i + 1) * n))?;
            feats.push(y);
            caches.push(c);
        }
        let p0 = self.subnets.len() * n;
        let (py, pc) = self.precip.forward_cached(params, &x.columns(p0, len))?;
        feats.push(py);
        let refs: Vec<&Tensor> = feats.iter().collect();
        let (y, hc) = self.head.forward_cached(params, &Tensor::hcat(&refs))?;
        Ok((
            y,
            ForecasterCache {
                subnets: caches,
                precip: pc,
                head: hc,
            },
        ))
    }

    pub fn backward(&self, params: &mut ParamSet, cache: &ForecasterCache, dy: &Tensor) {
        let d_cat = self.head.backward(params, &cache.head, dy);
        let w = self.config.gru.out;
        for (i, (sub, c)) in self.subnets.iter().zip(&cache.subnets).enumerate() {
            sub.backward(params, c, &d_cat.columns(i * w, (i + 1) * w));
        }
        let p0 = self.subnets.len() * w;
        self.precip
            .backward(params, &cache.precip, &d_cat.columns(p0, d_cat.cols()));
    }
}

#[derive(Debug, Clone)]
enum Arch {
    Fc(ReluChain),
    Gru(Forecaster),
}

/// Opaque forward intermediates for [`Network::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache(CacheInner);

impl ForwardCache {
    /// Final layer output before its ReLU, `[batch, 24]`.
    pub fn output_preactivation(&self) -> &Tensor {
        let pre = match &self.0 {
            CacheInner::Fc(c) => &c.pre,
            CacheInner::Gru(c) => &c.head.pre,
        };
        pre.last().expect("at least one layer")
    }
}

#[derive(Debug, Clone)]
enum CacheInner {
    Fc(ReluChainCache),
    Gru(ForecasterCache),
}

/// A configured model together with its parameters.
#[derive(Debug, Clone)]
pub struct Network {
    config: ModelConfig,
    params: ParamSet,
    arch: Arch,
}

impl Network {
    /// Builds the model with weights drawn from a ChaCha8 stream seeded by
    /// `seed`, biases zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let arch = match &config {
            ModelConfig::Fc(c) => Arch::Fc(ReluChain::register(&mut params, "fc", &c.widths, &mut rng)?),
            ModelConfig::Gru(c) => Arch::Gru(Forecaster::register(&mut params, c, &mut rng)?),
        };
        Ok(Network { config, params, arch })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn input_len(&self) -> usize {
        self.config.input_len()
    }

    pub fn output_len(&self) -> usize {
        self.config.output_len()
    }

    /// `x: [batch, input_len]` (or a single vector) to `[batch, 24]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_train(x)?.0)
    }

    pub fn forward_train(&self, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
        let len = self.input_len();
        if x.cols() != len || x.shape().len() > 2 {
            return Err(NeuralError::ShapeMismatch {
                op: "network input",
                expected: vec![x.rows(), len],
                found: x.shape().to_vec(),
            }
            .into());
        }
        let x = if x.shape().len() == 1 {
            x.clone().reshape(&[1, len])?
        } else {
            x.clone()
        };
        Ok(match &self.arch {
            Arch::Fc(m) => {
                let (y, c) = m.forward_cached(&self.params, &x)?;
                (y, ForwardCache(CacheInner::Fc(c)))
            }
            Arch::Gru(f) => {
                let (y, c) = f.forward_cached(&self.params, &x)?;
                (y, ForwardCache(CacheInner::Gru(c)))
            }
        })
    }

    /// Adds `dL/dparams` for the batch in `cache` into the parameter
    /// gradients.
    pub fn backward(&mut self, cache: &ForwardCache, dy: &Tensor) {
        match (&self.arch, &cache.0) {
            (Arch::Fc(m), CacheInner::Fc(c)) => {
                m.backward(&mut self.params, c, dy);
            }
            (Arch::Gru(f), CacheInner::Gru(c)) => f.backward(&mut self.params, c, dy),
            _ => panic!("forward cache from a different architecture"),
        }
    }

    /// Name of the last layer's bias.
    pub fn output_bias_name(&self) -> String {
        match &self.config {
            ModelConfig::Fc(c) => format!("fc.l{}.b", c.widths.len() - 2),
            ModelConfig::Gru(c) => format!("head.l{}.b", c.head.len() - 2),
        }
    }

    /// Snapshot of values and optimizer state; gradients are not kept.
    pub fn checkpoint(&self, adam: &AdamState) -> Checkpoint {
        let mut params = self.params.clone();
        params.zero_grad();
        Checkpoint {
            config: self.config.clone(),
            params,
            adam: adam.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut net = Network::new(ckpt.config.clone(), 0)?;
        net.params
            .load_values(&ckpt.params)
            .map_err(|e| ModelError::CorruptCheckpoint(e.to_string()))?;
        Ok(net)
    }
}

/// Parameters, optimizer state and the config that produced them.
///
/// File layout, all integers little-endian:
///
/// ```text
/// magic "STAGECAST-CKPT v1\n"
/// config:  u32 len, canonical config text, 32-byte SHA-256 of that text
/// tensors: u32 count, then per tensor
///          u32 name len, name, u32 rank, u64 dims..., f64 data...
/// adam:    f64 lr, beta1, beta2, eps, u64 step, u8 has_moments,
///          then m and v (f64 data in tensor order) if has_moments = 1
/// trailer: 32-byte SHA-256 of everything above
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub adam: AdamState,
}

fn put_u32(b: &mut Vec<u8>, v: usize) {
    b.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(b: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        b.extend_from_slice(&x.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(ModelError::CorruptCheckpoint("truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| ModelError::CorruptCheckpoint("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn str(&mut self) -> Result<&'a str> {
        let n = self.u32()?;
        std::str::from_utf8(self.take(n)?).map_err(|_| ModelError::CorruptCheckpoint("non-UTF-8 text".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = CHECKPOINT_MAGIC.to_vec();
        let text = self.config.to_string();
        put_u32(&mut b, text.len());
        b.extend_from_slice(text.as_bytes());
        b.extend_from_slice(&self.config.digest());
        put_u32(&mut b, self.params.len());
        for p in self.params.iter() {
            put_u32(&mut b, p.name.len());
            b.extend_from_slice(p.name.as_bytes());
            put_u32(&mut b, p.value.shape().len());
            for &d in p.value.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut b, p.value.data());
        }
        let a = &self.adam;
        put_f64s(&mut b, &[a.config.lr, a.config.beta1, a.config.beta2, a.config.eps]);
        b.extend_from_slice(&a.step.to_le_bytes());
        let has_moments = !a.m.is_empty();
        b.push(has_moments as u8);
        if has_moments {
            for t in a.m.iter().chain(&a.v) {
                put_f64s(&mut b, t.data());
            }
        }
        let sum = Sha256::digest(&b);
        b.extend_from_slice(&sum);
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| ModelError::CorruptCheckpoint(m.to_string());
        if !bytes.starts_with(CHECKPOINT_MAGIC) {
            return Err(corrupt("bad magic or version"));
        }
        if bytes.len() < CHECKPOINT_MAGIC.len() + 32 {
            return Err(corrupt("truncated"));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(corrupt("checksum mismatch"));
        }
        let mut c = Cursor {
            buf: body,
            pos: CHECKPOINT_MAGIC.len(),
        };
        let text = c.str()?;
        let digest = c.take(32)?;
        if Sha256::digest(text.as_bytes()).as_slice() != digest {
            return Err(corrupt("config digest mismatch"));
        }
        let config: ModelConfig = text.parse().map_err(|e: ModelError| corrupt(&e.to_string()))?;
        let mut params = ParamSet::new();
        for _ in 0..c.u32()? {
            let name = c.str()?.to_string();
            let rank = c.u32()?;
            let dims = (0..rank)
                .map(|_| c.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("size overflow"))?;
            let t = Tensor::new(dims, c.f64s(n)?).map_err(|e| corrupt(&e.to_string()))?;
            params.add(name, t).map_err(|e| corrupt(&e.to_string()))?;
        }
        let adam_cfg = AdamConfig {
            lr: c.f64()?,
            beta1: c.f64()?,
            beta2: c.f64()?,
            eps: c.f64()?,
        };
        let step = c.u64()?;
        let mut adam = AdamState::uninitialized(adam_cfg);
        adam.step = step;
        match c.u8()? {
            0 => {}
            1 => {
                let mut read = || {
                    params
                        .iter()
                        .map(|p| Tensor::new(p.value.shape().to_vec(), c.f64s(p.value.len())?).map_err(ModelError::from))
                        .collect::<Result<Vec<_>>>()
                };
                adam.m = read()?;
                adam.v = read()?;
            }
            _ => return Err(corrupt("bad optimizer flag")),
        }
        if c.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        let ckpt = Checkpoint { config, params, adam };
        Network::from_checkpoint(&ckpt)?;
        Ok(ckpt)
    }

    /// Like [`Checkpoint::from_bytes`], rejecting any config other than
    /// `expected`.
    pub fn from_bytes_expecting(bytes: &[u8], expected: &ModelConfig) -> Result<Self> {
        let ckpt = Self::from_bytes(bytes)?;
        if &ckpt.config != expected {
            return Err(ModelError::ConfigMismatch {
                expected: expected.to_string(),
                found: ckpt.config.to_string(),
            });
        }
        Ok(ckpt)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{finite_diff_grad, mse, relative_error};
    use proptest::prelude::*;
    use rand::Rng;

    fn small_fc() -> ModelConfig {
        ModelConfig::Fc(FcNetConfig {
            widths: vec![39, 7, 9, 5, 24],
        })
    }

    fn small_gru() -> ModelConfig {
        ModelConfig::Gru(ForecasterConfig {
            upstream_count: 4,
            gru: GruSubnetConfig {
                seq_len: 24,
                embed: 3,
                hidden: 4,
                out: 2,
            },
            precip: FcSubnetConfig {
                widths: vec![40, 5, 6, 3],
            },
            head: vec![13, 6, 24],
        })
    }

    fn random_batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn grad_check(config: ModelConfig, seed: u64) -> f64 {
        let mut net = Network::new(config, seed).unwrap();
        // positive biases keep the output ReLUs active so the check is not vacuous
        for p in net.params_mut().iter_mut() {
            if p.name.ends_with(".b") {
                p.value.fill(0.1);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let x = random_batch(&mut rng, 3, net.input_len());
        let target = random_batch(&mut rng, 3, 24);
        net.params_mut().zero_grad();
        let (y, cache) = net.forward_train(&x).unwrap();
        let (_, dy) = mse(&y, &target).unwrap();
        net.backward(&cache, &dy);
        let probe = net.clone();
        let numeric = finite_diff_grad(
            |p| {
                let mut n = probe.clone();
                n.params_mut().load_values(p).unwrap();
                mse(&n.forward(&x).unwrap(), &target).unwrap().0
            },
            net.params(),
            1e-6,
        );
        net.params()
            .iter()
            .zip(&numeric)
            .map(|(p, g)| relative_error(p.grad.data(), g.data()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn fc_parameter_count_matches_closed_form() {
        let net = Network::new(ModelConfig::Fc(FcNetConfig::paper(DatasetVariant::Smaller)), 0).unwrap();
        let closed = 39 * 350 + 350 + 350 * 500 + 500 + 500 * 350 + 350 + 350 * 24 + 24;
        assert_eq!(closed, 14_000 + 175_500 + 175_350 + 8_424);
        assert_eq!(closed, 373_274);
        assert_eq!(net.params().num_scalars(), closed);
    }

    #[test]
    fn paper_forecaster_widths() {
        let c = ForecasterConfig::default();
        assert_eq!(c.concat_width(), 80);
        assert_eq!(c.input_len(), 160);
        assert_eq!(c.input_len(), DatasetVariant::Larger.input_len());
        assert_eq!(
            FcNetConfig::paper(DatasetVariant::Larger).widths,
            vec![160, 350, 500, 350, 24]
        );
    }

    #[test]
    fn fc_subnet_intermediate_shapes() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let chain = ReluChain::register(&mut params, "p", &FcSubnetConfig::default().widths, &mut rng).unwrap();
        let (y, cache) = chain.forward_cached(&params, &Tensor::zeros(&[2, 40])).unwrap();
        let widths: Vec<usize> = cache.pre.iter().map(|t| t.cols()).collect();
        assert_eq!(widths, vec![100, 200, 100, 30]);
        assert_eq!(y.shape(), &[2, 30]);
        // zero rain reads the bias path: with zero biases that is exactly zero
        assert!(y.data().iter().all(|&v| v == 0.0));
        for p in params.iter_mut() {
            if p.name.ends_with(".b") {
                p.value.fill(0.5);
            }
        }
        let y = chain.forward(&params, &Tensor::zeros(&[1, 40])).unwrap();
        let mut expect = Tensor::zeros(&[1, 40]);
        for i in 0..4 {
            let w = params.get(&format!("p.l{i}.w")).unwrap().value.clone();
            expect = relu(&crate::neural::dense(&expect, &w, &Tensor::filled(&[w.cols()], 0.5)).unwrap());
        }
        assert_eq!(y, expect);
    }

    #[test]
    fn zero_params_give_zero_output() {
        for cfg in [ModelConfig::Fc(FcNetConfig::paper(DatasetVariant::Smaller)), small_gru()] {
            let mut net = Network::new(cfg, 3).unwrap();
            net.params_mut().zero_values();
            let y = net.forward(&Tensor::zeros(&[1, net.input_len()])).unwrap();
            assert_eq!(y.shape(), &[1, 24]);
            assert!(y.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn gru_subnet_zero_series_zero_params() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sub = GruSubnet::register(&mut params, "g", &GruSubnetConfig::default(), &mut rng).unwrap();
        params.zero_values();
        let y = sub.forward(&params, &Tensor::zeros(&[1, 24])).unwrap();
        assert_eq!(y.shape(), &[1, 10]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_subnet_rejects_wrong_length() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sub = GruSubnet::register(&mut params, "g", &GruSubnetConfig::default(), &mut rng).unwrap();
        assert!(matches!(
            sub.forward(&params, &Tensor::zeros(&[1, 23])),
            Err(ModelError::Neural(NeuralError::ShapeMismatch { .. }))
        ));
    }

    #[test]
    fn network_rejects_wrong_input_width() {
        let net = Network::new(small_gru(), 0).unwrap();
        assert!(matches!(
            net.forward(&Tensor::zeros(&[1, 39])),
            Err(ModelError::Neural(NeuralError::ShapeMismatch { .. }))
        ));
    }

    #[test]
    fn gru_subnet_constant_series_pools_identical_steps() {
        // With zero recurrent weights and zero update gate bias the state is
        // the same at every step, so the pool choice cannot matter.
        let cfg = GruSubnetConfig {
            seq_len: 24,
            embed: 5,
            hidden: 6,
            out: 10,
        };
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sub = GruSubnet::register(&mut params, "g", &cfg, &mut rng).unwrap();
        for p in params.iter_mut() {
            if p.name.starts_with("g.gru.w") {
                p.value.fill(0.0);
            }
            if p.name == "g.gru.uz" {
                p.value.fill(0.0);
            }
            if p.name == "g.gru.bz" {
                p.value.fill(-1e3);
            }
        }
        let x = Tensor::filled(&[1, 24], 0.7);
        let (y, cache) = sub.forward_cached(&params, &x).unwrap();
        for a in &cache.acts[1..] {
            assert_eq!(a, &cache.acts[0]);
        }
        let direct = sub.out.forward(&params, &cache.acts[23]).unwrap();
        assert_eq!(y, direct);
    }

    #[test]
    fn end_to_end_gradients_fc_clone() {
        for seed in 0..5 {
            let e = grad_check(small_fc(), seed);
            assert!(e < 1e-5, "seed {seed}: {e}");
        }
    }

    #[test]
    fn end_to_end_gradients_gru_clone() {
        for seed in 0..3 {
            let e = grad_check(small_gru(), seed);
            assert!(e < 1e-5, "seed {seed}: {e}");
        }
    }

    #[test]
    fn upstream_block_symmetry() {
        let cfg = small_gru();
        let net = Network::new(cfg, 11).unwrap();
        let mut swapped = net.clone();
        let names: Vec<String> = net.params().iter().map(|p| p.name.clone()).collect();
        for name in names.iter().filter(|n| n.starts_with("up0.")) {
            let other = name.replacen("up0.", "up1.", 1);
            let a = net.params().get(name).unwrap().value.clone();
            let b = net.params().get(&other).unwrap().value.clone();
            let ps = swapped.params_mut();
            *ps.value_mut(ps.id(name).unwrap()) = b;
            *ps.value_mut(ps.id(&other).unwrap()) = a;
        }
        // the head sees subnet outputs in block order, so its input rows swap too
        let ps = swapped.params_mut();
        let id = ps.id("head.l0.w").unwrap();
        let w = ps.value_mut(id);
        let c = w.cols();
        for r in 0..2 {
            for j in 0..c {
                w.data_mut().swap(r * c + j, (r + 2) * c + j);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_batch(&mut rng, 2, 160);
        let mut xs = x.clone();
        for r in 0..2 {
            for j in 0..24 {
                xs.data_mut().swap(r * 160 + j, r * 160 + 24 + j);
            }
        }
        let a = net.forward(&x).unwrap();
        let b = swapped.forward(&xs).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn config_text_round_trip() {
        for c in [
            small_fc(),
            small_gru(),
            ModelConfig::Gru(ForecasterConfig::default()),
            ModelConfig::Fc(FcNetConfig::paper(DatasetVariant::Larger)),
        ] {
            assert_eq!(c.to_string().parse::<ModelConfig>().unwrap(), c);
        }
        assert_eq!(
            ModelConfig::Gru(ForecasterConfig::default()).to_string(),
            "gru upstream=4 seq=24 embed=400 hidden=400 out=10 precip=40,100,200,100,30 head=80,200,24"
        );
        assert!("fc widths=39,0,24".parse::<ModelConfig>().is_err());
        assert!("gru widths=1".parse::<ModelConfig>().is_err());
    }

    #[test]
    fn bad_head_width_rejected() {
        let mut c = ForecasterConfig::default();
        c.head[0] = 81;
        assert!(matches!(
            Network::new(ModelConfig::Gru(c), 0),
            Err(ModelError::InvalidConfig(_))
        ));
    }

    fn trained_checkpoint() -> Checkpoint {
        let mut net = Network::new(small_gru(), 2).unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), net.params());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_batch(&mut rng, 2, 160);
        let t = random_batch(&mut rng, 2, 24);
        for _ in 0..2 {
            net.params_mut().zero_grad();
            let (y, c) = net.forward_train(&x).unwrap();
            let (_, dy) = mse(&y, &t).unwrap();
            net.backward(&c, &dy);
            crate::neural::adam_step(net.params_mut(), &mut adam).unwrap();
        }
        net.checkpoint(&adam)
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let ckpt = trained_checkpoint();
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        for (a, b) in ckpt.params.iter().zip(back.params.iter()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        assert_eq!(back.adam, ckpt.adam);
        assert_eq!(back.to_bytes(), bytes);
        let net = Network::from_checkpoint(&back).unwrap();
        assert_eq!(net.params().get("head.l0.w").unwrap().value, ckpt.params.get("head.l0.w").unwrap().value);
    }

    #[test]
    fn checkpoint_file_round_trip() {
        let ckpt = trained_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
    }

    #[test]
    fn truncated_checkpoint_is_corrupt() {
        let bytes = trained_checkpoint().to_bytes();
        for cut in [0, 5, CHECKPOINT_MAGIC.len() + 3, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut]),
                Err(ModelError::CorruptCheckpoint(_))
            ));
        }
    }

    #[test]
    fn flipped_byte_is_corrupt() {
        let mut bytes = trained_checkpoint().to_bytes();
        let i = bytes.len() / 3;
        bytes[i] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(ModelError::CorruptCheckpoint(_))));
    }

    #[test]
    fn version_mismatch_is_corrupt() {
        let mut bytes = trained_checkpoint().to_bytes();
        bytes[CHECKPOINT_MAGIC.len() - 2] = b'2';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(ModelError::CorruptCheckpoint(_))));
    }

    #[test]
    fn other_config_is_mismatch() {
        let bytes = trained_checkpoint().to_bytes();
        let other = ModelConfig::Gru(ForecasterConfig::default());
        assert!(matches!(
            Checkpoint::from_bytes_expecting(&bytes, &other),
            Err(ModelError::ConfigMismatch { .. })
        ));
        assert!(Checkpoint::from_bytes_expecting(&bytes, &small_gru()).is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn outputs_non_negative(seed in 0u64..1000, scale in 0.1f64..50.0) {
            for cfg in [small_fc(), small_gru()] {
                let net = Network::new(cfg, seed).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = random_batch(&mut rng, 2, net.input_len()).map(|v| v * scale);
                let y = net.forward(&x).unwrap();
                prop_assert_eq!(y.shape(), &[2, 24]);
                prop_assert!(y.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
            }
        }

        #[test]
        fn zeroed_subnet_ignores_its_block(seed in 0u64..1000, block in 0usize..4) {
            let mut net = Network::new(small_gru(), seed).unwrap();
            let prefix = format!("up{block}.");
            for p in net.params_mut().iter_mut() {
                if p.name.starts_with(&prefix) {
                    p.value.fill(0.0);
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
            let x = random_batch(&mut rng, 1, 160);
            let mut x2 = x.clone();
            for j in block * 24..(block + 1) * 24 {
                x2.data_mut()[j] = rng.random_range(-10.0..10.0);
            }
            prop_assert_eq!(net.forward(&x).unwrap(), net.forward(&x2).unwrap());
        }
    }
}
