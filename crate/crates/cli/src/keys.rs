//! Config keys per command, their defaults, and typed readers.

use std::path::Path;

use anyhow::Context;
use panohdr::datagen::{gen_keys, GenConfig, LinearizeMode};
use panohdr::kv::KvConfig;
use panohdr::net::NetConfig;
use panohdr::pano::TonemapParams;
use panohdr::training::{LossWeights, RenderDomain, TrainConfig};
use panohdr::transport::SceneSpec;

use crate::failure::{Failure, Fallible};

/// `(key, default)` pairs accepted by one command.
pub type KeyTable = Vec<(&'static str, String)>;

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn tonemap_keys() -> KeyTable {
    let d = TonemapParams::default();
    vec![("tonemap.alpha", d.alpha().to_string()), ("tonemap.gamma", d.gamma().to_string())]
}

fn transport_keys() -> KeyTable {
    let d = SceneSpec::default();
    vec![
        ("transport.resolution", d.resolution.to_string()),
        ("transport.albedo", d.albedo.to_string()),
        ("transport.with_object", d.with_object.to_string()),
    ]
}

fn net_keys() -> KeyTable {
    let d = NetConfig::desk();
    vec![
        ("net.enc_channels", join(&d.enc_channels)),
        ("net.kernels", join(&d.kernels)),
        ("net.elevation_hidden", join(&d.elevation_hidden)),
        ("net.domain_hidden", d.domain_hidden.to_string()),
        ("net.output_bias", d.output_bias.to_string()),
        ("net.bn_eps", d.bn_eps.to_string()),
        ("net.bn_momentum", d.bn_momentum.to_string()),
    ]
}

fn train_keys(d: TrainConfig) -> KeyTable {
    vec![
        ("train.batch_size", d.batch_size.to_string()),
        ("train.lr", d.lr.to_string()),
        ("train.beta1", d.beta1.to_string()),
        ("train.beta2", d.beta2.to_string()),
        ("train.eps", d.eps.to_string()),
        ("train.epochs", d.epochs.to_string()),
        ("train.patience", d.patience.to_string()),
        ("train.lambda_theta", d.weights.theta.to_string()),
        ("train.lambda_render", d.weights.render.to_string()),
        ("train.render_domain", d.render_domain.to_string()),
        ("train.seed", d.seed.to_string()),
    ]
}

fn input_keys() -> KeyTable {
    vec![("data.input_mode", LinearizeMode::Jpg.to_string())]
}

pub fn table(command: &str) -> KeyTable {
    let mut t: KeyTable = Vec::new();
    match command {
        "gen" => t.extend(gen_keys()),
        "train" => {
            t.extend(net_keys());
            t.extend(train_keys(TrainConfig::default()));
            t.extend(input_keys());
            t.extend(tonemap_keys());
            t.extend(transport_keys());
        }
        "finetune" => {
            t.extend(train_keys(TrainConfig::fine_tune()));
            t.extend(input_keys());
            t.extend(tonemap_keys());
            t.extend(transport_keys());
        }
        "train-da" => {
            let d = TrainConfig::default();
            t.extend(net_keys());
            t.extend(train_keys(d.clone()));
            t.push(("train.lambda_grl", d.lambda_grl.to_string()));
            t.push(("train.domain_lr", d.domain_lr.to_string()));
            t.extend(input_keys());
            t.extend(tonemap_keys());
            t.extend(transport_keys());
        }
        "infer" => {
            t.extend(input_keys());
            t.push(("data.crf", "gamma:2.2".into()));
            t.push(("data.wb", "1,1,1".into()));
            t.push(("infer.split", "all".into()));
            t.extend(tonemap_keys());
        }
        "eval" => {
            t.extend(input_keys());
            t.push(("eval.split", "test".into()));
            t.push(("eval.batch_size", TrainConfig::default().batch_size.to_string()));
            t.extend(tonemap_keys());
            t.extend(transport_keys());
        }
        "render" => {
            t.push(("render.exposure", "auto".into()));
            t.extend(transport_keys());
        }
        "match" => {
            t.push(("match.k", "5".into()));
            t.push(("match.intensity", "bright".into()));
            t.push(("match.elevation", "30".into()));
            t.push(("match.weight_intensity", "1".into()));
            t.push(("match.weight_elevation", "1".into()));
            t.extend(tonemap_keys());
        }
        "gradcheck" => {
            t.push(("gradcheck.instances", "20".into()));
            t.push(("gradcheck.seed", "0".into()));
            t.push(("gradcheck.tolerance", "0.001".into()));
        }
        "build-transport" => {
            t.extend(transport_keys());
            t.push(("transport.pano_width", "128".into()));
            t.push(("transport.pano_height", "64".into()));
        }
        _ => {}
    }
    t
}

/// Help epilogue listing every key with its default.
pub fn help_text(command: &str) -> String {
    let t = table(command);
    if t.is_empty() {
        return String::new();
    }
    let width = t.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (--config FILE, --set key=value):\n");
    for (k, v) in t {
        s.push_str(&format!("  {k:<width$}  {v}\n"));
    }
    s
}

/// Resolved configuration of one command: defaults, then file, then overrides.
pub struct Settings {
    kv: KvConfig,
}

impl Settings {
    pub fn load(command: &str, file: Option<&Path>, overrides: &[String]) -> Fallible<Self> {
        let mut kv = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display())).map_err(Failure::usage)?;
                KvConfig::parse(&text).with_context(|| format!("config {}", p.display())).map_err(Failure::usage)?
            }
            None => KvConfig::default(),
        };
        for o in overrides {
            let (k, v) = KvConfig::parse_override(o).map_err(Failure::usage)?;
            kv.set(k, v);
        }
        let allowed = table(command);
        kv.reject_unknown(allowed.iter().map(|(k, _)| *k)).map_err(Failure::usage)?;
        let mut full = KvConfig::default();
        for (k, v) in allowed {
            full.set(k, kv.get(k).map_or(v, str::to_string));
        }
        Ok(Self { kv: full })
    }

    pub fn kv(&self) -> &KvConfig {
        &self.kv
    }

    fn raw(&self, key: &str) -> &str {
        self.kv.get(key).unwrap_or_else(|| panic!("key {key} missing from its command table"))
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Fallible<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw(key);
        v.parse().map_err(|e: T::Err| Failure::usage(anyhow::anyhow!("config key `{key}`: cannot parse {v:?}: {e}")))
    }

    pub fn list<T: std::str::FromStr>(&self, key: &str) -> Fallible<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .split(',')
            .map(|s| s.trim().parse().map_err(|e: T::Err| Failure::usage(anyhow::anyhow!("config key `{key}`: {s:?}: {e}"))))
            .collect()
    }

    fn array4(&self, key: &str) -> Fallible<[usize; 4]> {
        let v: Vec<usize> = self.list(key)?;
        v.try_into().map_err(|_| Failure::usage(anyhow::anyhow!("config key `{key}` needs exactly four values")))
    }

    pub fn tonemap(&self) -> Fallible<TonemapParams> {
        TonemapParams::new(self.get("tonemap.alpha")?, self.get("tonemap.gamma")?).map_err(Failure::usage)
    }

    pub fn scene(&self) -> Fallible<SceneSpec> {
        Ok(SceneSpec {
            resolution: self.get("transport.resolution")?,
            albedo: self.get("transport.albedo")?,
            with_object: self.get("transport.with_object")?,
            ..SceneSpec::default()
        })
    }

    pub fn input_mode(&self) -> Fallible<LinearizeMode> {
        self.get("data.input_mode")
    }

    pub fn gen(&self) -> Fallible<GenConfig> {
        GenConfig::from_kv(&self.kv).map_err(Failure::usage)
    }

    /// Network config for `width x height` inputs.
    pub fn net(&self, width: usize, height: usize) -> Fallible<NetConfig> {
        let cfg = NetConfig {
            enc_channels: self.array4("net.enc_channels")?,
            kernels: self.array4("net.kernels")?,
            elevation_hidden: self.list("net.elevation_hidden")?,
            domain_hidden: self.get("net.domain_hidden")?,
            output_bias: self.get("net.output_bias")?,
            bn_eps: self.get("net.bn_eps")?,
            bn_momentum: self.get("net.bn_momentum")?,
            input_width: width,
            input_height: height,
            ..NetConfig::default()
        };
        cfg.validate().map_err(Failure::usage)?;
        Ok(cfg)
    }

    pub fn train(&self) -> Fallible<TrainConfig> {
        let mut cfg = TrainConfig {
            batch_size: self.get("train.batch_size")?,
            lr: self.get("train.lr")?,
            beta1: self.get("train.beta1")?,
            beta2: self.get("train.beta2")?,
            eps: self.get("train.eps")?,
            epochs: self.get("train.epochs")?,
            patience: self.get("train.patience")?,
            weights: LossWeights { theta: self.get("train.lambda_theta")?, render: self.get("train.lambda_render")? },
            render_domain: self.get::<RenderDomain>("train.render_domain")?,
            tonemap: self.tonemap()?,
            seed: self.get("train.seed")?,
            ..TrainConfig::default()
        };
        if self.kv.get("train.lambda_grl").is_some() {
            cfg.lambda_grl = self.get("train.lambda_grl")?;
            cfg.domain_lr = self.get("train.domain_lr")?;
        }
        cfg.validate().map_err(Failure::usage)?;
        Ok(cfg)
    }
}
