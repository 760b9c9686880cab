//! Two-headed LDR→HDR autoencoder with an optional domain discriminator.
//!
//! Encoder: four stride-2 convolutions (batch norm + ELU), flatten, FC to a
//! 64-d latent. HDR decoder: FC + ELU, reshape, four stride-2 transposed
//! convolutions; each deconvolution input is the previous decoder
//! activation plus the mirrored encoder activation. The last layer has no
//! batch norm and uses `ELU + 1`, so predictions are strictly positive.
//! Elevation head: FC layers with ELU between them, linear scalar output
//! in radians.

pub mod checkpoint;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{BatchStats, Tape, Tensor, Var};
use crate::Real;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

pub const LATENT_DIM: usize = 64;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("io error on {path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
    #[error("{path}: malformed checkpoint: {msg}")]
    Format { path: std::path::PathBuf, msg: String },
    #[error("{path}: checkpoint was trained with a different network config")]
    ConfigMismatch { path: std::path::PathBuf },
}

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub enc_channels: [usize; 4],
    pub kernels: [usize; 4],
    pub latent_dim: usize,
    pub elevation_hidden: Vec<usize>,
    pub domain_hidden: usize,
    pub input_height: usize,
    pub input_width: usize,
    /// Initial bias of the final layer; `ELU(b) + 1 = e^b` for `b < 0`.
    pub output_bias: f64,
    pub bn_eps: f64,
    /// Weight of the old value in running-statistic updates.
    pub bn_momentum: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            enc_channels: [64, 128, 256, 256],
            kernels: [5, 5, 3, 3],
            latent_dim: LATENT_DIM,
            elevation_hidden: vec![32, 16],
            domain_hidden: 32,
            input_height: 64,
            input_width: 128,
            output_bias: -2.0,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
        }
    }
}

impl NetConfig {
    /// Narrow variant sized for single-core training runs.
    pub fn desk() -> Self {
        Self { enc_channels: [16, 32, 64, 64], ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::Config(m));
        if self.latent_dim != LATENT_DIM {
            return bad(format!("latent_dim must be {LATENT_DIM}, got {}", self.latent_dim));
        }
        if self.enc_channels.contains(&0) || self.kernels.contains(&0) {
            return bad("channel widths and kernels must be positive".into());
        }
        if self.input_height == 0 || self.input_height % 16 != 0 || self.input_width != 2 * self.input_height {
            return bad(format!(
                "input must be 2:1 with height divisible by 16, got {}x{}",
                self.input_width, self.input_height
            ));
        }
        if self.elevation_hidden.contains(&0) || self.domain_hidden == 0 {
            return bad("head widths must be positive".into());
        }
        if !(self.bn_eps > 0.0) || !(0.0..1.0).contains(&self.bn_momentum) {
            return bad("bn_eps must be > 0 and bn_momentum in [0, 1)".into());
        }
        if !self.output_bias.is_finite() {
            return bad("output_bias must be finite".into());
        }
        Ok(())
    }

    /// Canonical `key=value` text; the hash and checkpoints are built from it.
    pub fn canonical_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "enc_channels={}", join(&self.enc_channels));
        let _ = writeln!(s, "kernels={}", join(&self.kernels));
        let _ = writeln!(s, "latent_dim={}", self.latent_dim);
        let _ = writeln!(s, "elevation_hidden={}", join(&self.elevation_hidden));
        let _ = writeln!(s, "domain_hidden={}", self.domain_hidden);
        let _ = writeln!(s, "input_height={}", self.input_height);
        let _ = writeln!(s, "input_width={}", self.input_width);
        let _ = writeln!(s, "output_bias={:?}", self.output_bias);
        let _ = writeln!(s, "bn_eps={:?}", self.bn_eps);
        let _ = writeln!(s, "bn_momentum={:?}", self.bn_momentum);
        s
    }

    pub fn parse_canonical(text: &str) -> Result<Self, NetError> {
        let bad = |m: String| NetError::Config(m);
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("malformed line {line:?}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| map.get(k).cloned().ok_or_else(|| bad(format!("missing key {k}")));
        let list = |k: &str| -> Result<Vec<usize>, NetError> {
            let v = get(k)?;
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|x| x.trim().parse().map_err(|_| bad(format!("bad {k}: {v:?}")))).collect()
        };
        let num = |k: &str| -> Result<f64, NetError> { get(k)?.parse().map_err(|_| bad(format!("bad {k}"))) };
        let int = |k: &str| -> Result<usize, NetError> { get(k)?.parse().map_err(|_| bad(format!("bad {k}"))) };
        let four = |k: &str| -> Result<[usize; 4], NetError> {
            list(k)?.try_into().map_err(|_| bad(format!("{k} needs exactly 4 values")))
        };
        let c = Self {
            enc_channels: four("enc_channels")?,
            kernels: four("kernels")?,
            latent_dim: int("latent_dim")?,
            elevation_hidden: list("elevation_hidden")?,
            domain_hidden: int("domain_hidden")?,
            input_height: int("input_height")?,
            input_width: int("input_width")?,
            output_bias: num("output_bias")?,
            bn_eps: num("bn_eps")?,
            bn_momentum: num("bn_momentum")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_text().as_bytes()).into()
    }

    /// Flattened size at the bottleneck: `c4 · (H/16) · (W/16)`.
    pub fn bottleneck_len(&self) -> usize {
        self.enc_channels[3] * (self.input_height / 16) * (self.input_width / 16)
    }

    /// Closed-form count of trainable scalars.
    ///
    /// With `c0 = 3`, widths `c1..c4`, kernels `k1..k4`, bottleneck `F`,
    /// latent `L` and elevation sizes `L = h0, h1, …, hm, 1`:
    /// `Σ (c_{i−1}c_i k_i² + 3c_i)` (encoder convs with BN scale/shift)
    /// `+ 2FL + F + L` (the two FC layers around the latent)
    /// `+ Σ_{i=2..4} (c_i c_{i−1} k_i² + 3c_{i−1}) + 3c1k1² + 3` (decoder)
    /// `+ Σ (h_j h_{j+1} + h_{j+1})` (elevation head)
    /// and, with the discriminator, `+ L·D + D + 2D + 2`.
    pub fn trainable_parameter_count(&self, with_domain: bool) -> usize {
        let c = [3, self.enc_channels[0], self.enc_channels[1], self.enc_channels[2], self.enc_channels[3]];
        let k = self.kernels;
        let (f, l) = (self.bottleneck_len(), self.latent_dim);
        let mut n = 0;
        for i in 1..=4 {
            n += c[i - 1] * c[i] * k[i - 1] * k[i - 1] + 3 * c[i];
        }
        n += 2 * f * l + f + l;
        for i in 2..=4 {
            n += c[i] * c[i - 1] * k[i - 1] * k[i - 1] + 3 * c[i - 1];
        }
        n += c[1] * 3 * k[0] * k[0] + 3;
        let mut sizes = vec![l];
        sizes.extend(&self.elevation_hidden);
        sizes.push(1);
        n += sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum::<usize>();
        if with_domain {
            let d = self.domain_hidden;
            n += l * d + d + 2 * d + 2;
        }
        n
    }
}

/// How an initial value is drawn.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
    Const(f64),
}

struct BlockSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
    trainable: bool,
}

fn layout(cfg: &NetConfig, with_domain: bool) -> Vec<BlockSpec> {
    let mut v = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init, trainable: bool| {
        v.push(BlockSpec { name, shape, init, trainable });
    };
    let bn = |push: &mut dyn FnMut(String, Vec<usize>, Init, bool), p: &str, c: usize| {
        push(format!("{p}.bn.gamma"), vec![c], Init::Const(1.0), true);
        push(format!("{p}.bn.beta"), vec![c], Init::Const(0.0), true);
        push(format!("{p}.bn.running_mean"), vec![c], Init::Const(0.0), false);
        push(format!("{p}.bn.running_var"), vec![c], Init::Const(1.0), false);
    };
    let c = [3, cfg.enc_channels[0], cfg.enc_channels[1], cfg.enc_channels[2], cfg.enc_channels[3]];
    let k = cfg.kernels;
    for i in 1..=4 {
        let fan_in = (c[i - 1] * k[i - 1] * k[i - 1]) as f64;
        push(format!("enc{i}.conv.weight"), vec![c[i], c[i - 1], k[i - 1], k[i - 1]], Init::Normal((2.0 / fan_in).sqrt()), true);
        push(format!("enc{i}.conv.bias"), vec![c[i]], Init::Const(0.0), true);
        bn(&mut push, &format!("enc{i}"), c[i]);
    }
    let (f, l) = (cfg.bottleneck_len(), cfg.latent_dim);
    push("enc.fc.weight".into(), vec![l, f], Init::Normal((1.0 / f as f64).sqrt()), true);
    push("enc.fc.bias".into(), vec![l], Init::Const(0.0), true);
    push("dec.fc.weight".into(), vec![f, l], Init::Normal((2.0 / l as f64).sqrt()), true);
    push("dec.fc.bias".into(), vec![f], Init::Const(0.0), true);
    for j in 1..=4 {
        let (cin, cout, kk) = (c[5 - j], c[4 - j], k[4 - j]);
        // each output sees about cin·k²/4 inputs at stride 2
        let fan_in = (cin * kk * kk) as f64 / 4.0;
        let last = j == 4;
        let std = if last { 0.1 * (1.0 / fan_in).sqrt() } else { (2.0 / fan_in).sqrt() };
        push(format!("dec{j}.deconv.weight"), vec![cin, cout, kk, kk], Init::Normal(std), true);
        let bias = if last { cfg.output_bias } else { 0.0 };
        push(format!("dec{j}.deconv.bias"), vec![cout], Init::Const(bias), true);
        if !last {
            bn(&mut push, &format!("dec{j}"), cout);
        }
    }
    let mut sizes = vec![l];
    sizes.extend(&cfg.elevation_hidden);
    sizes.push(1);
    for (i, w) in sizes.windows(2).enumerate() {
        let gain = if i + 2 == sizes.len() { 1.0 } else { 2.0 };
        push(format!("elev.fc{}.weight", i + 1), vec![w[1], w[0]], Init::Normal((gain / w[0] as f64).sqrt()), true);
        push(format!("elev.fc{}.bias", i + 1), vec![w[1]], Init::Const(0.0), true);
    }
    if with_domain {
        let d = cfg.domain_hidden;
        push("dom.fc1.weight".into(), vec![d, l], Init::Normal((2.0 / l as f64).sqrt()), true);
        push("dom.fc1.bias".into(), vec![d], Init::Const(0.0), true);
        push("dom.fc2.weight".into(), vec![2, d], Init::Normal((1.0 / d as f64).sqrt()), true);
        push("dom.fc2.bias".into(), vec![2], Init::Const(0.0), true);
    }
    v
}

/// One named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock<S = f32> {
    pub name: String,
    pub tensor: Tensor<S>,
    /// Running statistics are stored but not optimised.
    pub trainable: bool,
}

/// Every weight, bias and normalisation statistic of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S = f32> {
    config: NetConfig,
    blocks: Vec<ParamBlock<S>>,
    index: BTreeMap<String, usize>,
}

impl<S: Real> ModelParams<S> {
    /// Seeded random initialisation.
    pub fn init(config: &NetConfig, with_domain: bool, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = layout(config, with_domain)
            .into_iter()
            .map(|b| {
                let n: usize = b.shape.iter().product();
                let data = match b.init {
                    Init::Const(c) => vec![S::lit(c); n],
                    Init::Normal(std) => {
                        let d = Normal::new(0.0, std).expect("finite std");
                        (0..n).map(|_| S::lit(d.sample(&mut rng))).collect()
                    }
                };
                ParamBlock { name: b.name, tensor: Tensor::new(&b.shape, data), trainable: b.trainable }
            })
            .collect();
        Ok(Self::from_blocks(config.clone(), blocks))
    }

    fn from_blocks(config: NetConfig, blocks: Vec<ParamBlock<S>>) -> Self {
        let index = blocks.iter().enumerate().map(|(i, b)| (b.name.clone(), i)).collect();
        Self { config, blocks, index }
    }

    /// Checks names and shapes against the layout implied by `config`.
    pub fn from_parts(config: NetConfig, blocks: Vec<ParamBlock<S>>) -> Result<Self, NetError> {
        config.validate()?;
        let with_domain = blocks.iter().any(|b| b.name.starts_with("dom."));
        let want = layout(&config, with_domain);
        if want.len() != blocks.len() {
            return Err(NetError::Shape(format!("expected {} parameter blocks, got {}", want.len(), blocks.len())));
        }
        for (w, b) in want.iter().zip(&blocks) {
            if w.name != b.name || w.shape != b.tensor.shape() || w.trainable != b.trainable {
                return Err(NetError::Shape(format!(
                    "block {:?} {:?} does not match expected {:?} {:?}",
                    b.name,
                    b.tensor.shape(),
                    w.name,
                    w.shape
                )));
            }
        }
        Ok(Self::from_blocks(config, blocks))
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[ParamBlock<S>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock<S>] {
        &mut self.blocks
    }

    pub fn has_domain_head(&self) -> bool {
        self.index.contains_key("dom.fc1.weight")
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> &Tensor<S> {
        &self.blocks[self.index[name]].tensor
    }

    pub fn trainable_count(&self) -> usize {
        self.blocks.iter().filter(|b| b.trainable).map(|b| b.tensor.numel()).sum()
    }

    pub fn cast<T: Real>(&self) -> ModelParams<T> {
        let blocks = self
            .blocks
            .iter()
            .map(|b| ParamBlock { name: b.name.clone(), tensor: b.tensor.cast(), trainable: b.trainable })
            .collect();
        ModelParams::from_blocks(self.config.clone(), blocks)
    }

    /// Adds a freshly initialised discriminator if missing.
    pub fn with_domain_head(&self, seed: u64) -> Self {
        if self.has_domain_head() {
            return self.clone();
        }
        let fresh = Self::init(&self.config, true, seed).expect("validated config");
        let mut blocks = self.blocks.clone();
        blocks.extend(fresh.blocks.into_iter().filter(|b| b.name.starts_with("dom.")));
        Self::from_blocks(self.config.clone(), blocks)
    }

    /// Drops the discriminator, e.g. before exporting an inference model.
    pub fn without_domain_head(&self) -> Self {
        let blocks = self.blocks.iter().filter(|b| !b.name.starts_with("dom.")).cloned().collect();
        Self::from_blocks(self.config.clone(), blocks)
    }

    /// Folds batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats)]) {
        let m = self.config.bn_momentum;
        for (prefix, s) in stats {
            for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let i = self.index[&format!("{prefix}.bn.{suffix}")];
                for (r, b) in self.blocks[i].tensor.data_mut().iter_mut().zip(batch) {
                    *r = S::lit(m * r.f64() + (1.0 - m) * b);
                }
            }
        }
    }
}

/// Tape handles of the trainable blocks; `None` for running statistics.
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    /// Registers every trainable block; `trainable = false` binds them as constants.
    pub fn new<S: Real>(tape: &mut Tape<S>, params: &ModelParams<S>, trainable: bool) -> Self {
        let vars = params
            .blocks
            .iter()
            .map(|b| {
                b.trainable.then(|| if trainable { tape.param(b.tensor.clone()) } else { tape.constant(b.tensor.clone()) })
            })
            .collect();
        Self { vars }
    }

    pub fn var(&self, i: usize) -> Option<Var> {
        self.vars[i]
    }

    fn get<S: Real>(&self, params: &ModelParams<S>, name: &str) -> Var {
        self.vars[params.index[name]].unwrap_or_else(|| panic!("{name} is not trainable"))
    }
}

/// Batch-norm behaviour for one pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalise with batch statistics and report them.
    Batch,
    /// Normalise with stored running statistics.
    Running,
}

/// Handles to the outputs and the inspectable intermediates of a pass.
pub struct Trace {
    /// `[N, 3, H, W]` tonemapped-domain prediction.
    pub hdr: Var,
    /// `[N, 1]` sun elevation in radians.
    pub elevation: Var,
    pub latent: Var,
    /// Encoder activations, shallowest first.
    pub enc: [Var; 4],
    /// Decoder activation before the skip is added, deepest first.
    pub dec_pre_skip: [Var; 4],
    /// Deconvolution inputs (decoder activation plus skip), deepest first.
    pub dec_in: [Var; 4],
    /// Batch statistics per normalisation layer, keyed by layer prefix.
    pub bn_stats: Vec<(String, BatchStats)>,
}

fn norm_elu<S: Real>(
    tape: &mut Tape<S>,
    params: &ModelParams<S>,
    bound: &Bound,
    x: Var,
    prefix: &str,
    mode: BnMode,
    stats: &mut Vec<(String, BatchStats)>,
) -> Var {
    let g = bound.get(params, &format!("{prefix}.bn.gamma"));
    let b = bound.get(params, &format!("{prefix}.bn.beta"));
    let eps = params.config.bn_eps;
    let y = match mode {
        BnMode::Batch => {
            let (y, s) = tape.batchnorm_train(x, g, b, eps);
            stats.push((prefix.to_string(), s));
            y
        }
        BnMode::Running => {
            let mean = params.get(&format!("{prefix}.bn.running_mean")).data().to_vec();
            let var = params.get(&format!("{prefix}.bn.running_var")).data().to_vec();
            tape.batchnorm_infer(x, g, b, &mean, &var, eps)
        }
    };
    tape.elu(y)
}

/// Encoder pass; returns the latent, the four activations and batch statistics.
pub fn encode<S: Real>(
    tape: &mut Tape<S>,
    params: &ModelParams<S>,
    bound: &Bound,
    x: Var,
    mode: BnMode,
) -> Result<(Var, [Var; 4], Vec<(String, BatchStats)>), NetError> {
    let cfg = &params.config;
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 || shape[1] != 3 || shape[2] != cfg.input_height || shape[3] != cfg.input_width || shape[0] == 0 {
        return Err(NetError::Shape(format!(
            "input must be [N, 3, {}, {}], got {shape:?}",
            cfg.input_height, cfg.input_width
        )));
    }
    let n = shape[0];
    let mut stats = Vec::new();
    let mut h = x;
    let mut enc = [x; 4];
    for (i, slot) in enc.iter_mut().enumerate() {
        let p = format!("enc{}", i + 1);
        let w = bound.get(params, &format!("{p}.conv.weight"));
        let b = bound.get(params, &format!("{p}.conv.bias"));
        let y = tape.conv2d(h, w, b, 2);
        h = norm_elu(tape, params, bound, y, &p, mode, &mut stats);
        *slot = h;
    }
    let flat = tape.reshape(h, &[n, cfg.bottleneck_len()]);
    let latent = tape.linear(flat, bound.get(params, "enc.fc.weight"), bound.get(params, "enc.fc.bias"));
    Ok((latent, enc, stats))
}

/// Full forward pass recorded on `tape`.
pub fn forward_tape<S: Real>(
    tape: &mut Tape<S>,
    params: &ModelParams<S>,
    bound: &Bound,
    x: Var,
    mode: BnMode,
) -> Result<Trace, NetError> {
    let cfg = &params.config;
    let (latent, enc, mut stats) = encode(tape, params, bound, x, mode)?;
    let n = tape.shape(x)[0];
    let d = tape.linear(latent, bound.get(params, "dec.fc.weight"), bound.get(params, "dec.fc.bias"));
    let d = tape.elu(d);
    let mut h = tape.reshape(d, &[n, cfg.enc_channels[3], cfg.input_height / 16, cfg.input_width / 16]);
    let mut dec_pre_skip = [h; 4];
    let mut dec_in = [h; 4];
    for j in 1..=4 {
        dec_pre_skip[j - 1] = h;
        let skip = tape.add(h, enc[4 - j]);
        dec_in[j - 1] = skip;
        let p = format!("dec{j}");
        let w = bound.get(params, &format!("{p}.deconv.weight"));
        let b = bound.get(params, &format!("{p}.deconv.bias"));
        let y = tape.conv_transpose2d(skip, w, b, 2);
        h = if j < 4 {
            norm_elu(tape, params, bound, y, &p, mode, &mut stats)
        } else {
            let e = tape.elu(y);
            tape.add_scalar(e, S::one())
        };
    }
    let mut e = latent;
    let layers = cfg.elevation_hidden.len() + 1;
    for i in 1..=layers {
        e = tape.linear(e, bound.get(params, &format!("elev.fc{i}.weight")), bound.get(params, &format!("elev.fc{i}.bias")));
        if i < layers {
            e = tape.elu(e);
        }
    }
    Ok(Trace { hdr: h, elevation: e, latent, enc, dec_pre_skip, dec_in, bn_stats: stats })
}

/// Discriminator logits `[N, 2]` of a latent routed through gradient reversal.
pub fn domain_tape<S: Real>(tape: &mut Tape<S>, params: &ModelParams<S>, bound: &Bound, latent: Var, lambda: S) -> Var {
    assert!(params.has_domain_head(), "model has no domain head");
    let r = tape.gradient_reversal(latent, lambda);
    let h = tape.linear(r, bound.get(params, "dom.fc1.weight"), bound.get(params, "dom.fc1.bias"));
    let h = tape.elu(h);
    tape.linear(h, bound.get(params, "dom.fc2.weight"), bound.get(params, "dom.fc2.bias"))
}

/// Inference: tonemapped HDR `[N, 3, H, W]` and elevations in radians.
pub fn forward<S: Real>(params: &ModelParams<S>, x: &Tensor<S>) -> Result<(Tensor<S>, Vec<S>), NetError> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params, false);
    let xv = tape.constant(x.clone());
    let tr = forward_tape(&mut tape, params, &bound, xv, BnMode::Running)?;
    Ok((tape.value(tr.hdr).clone(), tape.value(tr.elevation).data().to_vec()))
}

/// Discriminator logits for a batch of latents `[N, 64]`.
pub fn forward_domain<S: Real>(params: &ModelParams<S>, latent: &Tensor<S>, lambda: S) -> Result<Tensor<S>, NetError> {
    if !params.has_domain_head() {
        return Err(NetError::Config("model has no domain head".into()));
    }
    let s = latent.shape();
    if s.len() != 2 || s[1] != params.config.latent_dim {
        return Err(NetError::Shape(format!("latent must be [N, {}], got {s:?}", params.config.latent_dim)));
    }
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params, false);
    let l = tape.constant(latent.clone());
    let y = domain_tape(&mut tape, params, &bound, l, lambda);
    Ok(tape.value(y).clone())
}
