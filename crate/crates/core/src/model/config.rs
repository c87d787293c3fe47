use std::fmt;
use std::str::FromStr;

use crate::config::{join, KeyValues};
use crate::error::{Error, Result};
use crate::tensor::Activation;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionVariant {
    /// Full joint attention over references, search and token.
    Concat,
    /// Three sub-passes sharing one set of projections.
    Separate,
}

impl FromStr for AttentionVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "concat" => Ok(Self::Concat),
            "separate" => Ok(Self::Separate),
            _ => Err(format!("unknown attention variant `{s}` (expected concat|separate)")),
        }
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Concat => "concat",
            Self::Separate => "separate",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Rgb,
    Depth,
    Thermal,
    Event,
}

impl Modality {
    pub const AUX: [Modality; 3] = [Modality::Depth, Modality::Thermal, Modality::Event];

    pub fn channels(self) -> usize {
        match self {
            Modality::Rgb => 3,
            _ => 1,
        }
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rgb" => Ok(Self::Rgb),
            "depth" => Ok(Self::Depth),
            "thermal" => Ok(Self::Thermal),
            "event" => Ok(Self::Event),
            _ => Err(format!("unknown modality `{s}`")),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Rgb => "rgb",
            Self::Depth => "depth",
            Self::Thermal => "thermal",
            Self::Event => "event",
        })
    }
}

/// Tracking task: RGB alone or RGB paired with one auxiliary modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Rgb,
    Rgbd,
    Rgbt,
    Rgbe,
}

impl Task {
    pub fn aux(self) -> Option<Modality> {
        match self {
            Task::Rgb => None,
            Task::Rgbd => Some(Modality::Depth),
            Task::Rgbt => Some(Modality::Thermal),
            Task::Rgbe => Some(Modality::Event),
        }
    }

    pub fn for_aux(aux: Option<Modality>) -> Task {
        match aux {
            None | Some(Modality::Rgb) => Task::Rgb,
            Some(Modality::Depth) => Task::Rgbd,
            Some(Modality::Thermal) => Task::Rgbt,
            Some(Modality::Event) => Task::Rgbe,
        }
    }

    pub fn is_dual(self) -> bool {
        self != Task::Rgb
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rgb" => Ok(Self::Rgb),
            "rgbd" => Ok(Self::Rgbd),
            "rgbt" => Ok(Self::Rgbt),
            "rgbe" => Ok(Self::Rgbe),
            _ => Err(format!("unknown task `{s}` (expected rgb|rgbd|rgbt|rgbe)")),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Rgb => "rgb",
            Self::Rgbd => "rgbd",
            Self::Rgbt => "rgbt",
            Self::Rgbe => "rgbe",
        })
    }
}

fn parse_activation(s: &str) -> std::result::Result<Activation, String> {
    match s {
        "tanh" => Ok(Activation::Tanh),
        "sigmoid" => Ok(Activation::Sigmoid),
        "relu" => Ok(Activation::Relu),
        "gelu" => Ok(Activation::Gelu),
        _ => Err(format!("unknown activation `{s}`")),
    }
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Tanh => "tanh",
        Activation::Sigmoid => "sigmoid",
        Activation::Relu => "relu",
        Activation::Gelu => "gelu",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    pub ref_size: usize,
    pub search_size: usize,
    pub num_refs: usize,
    pub num_search: usize,
    pub token_len: usize,
    pub ref_factor: f64,
    pub search_factor: f64,
    pub attention: AttentionVariant,
    pub gate_layers: Vec<usize>,
    pub gate_activation: Activation,
    pub gmp_layers: usize,
    pub frame_embedding: bool,
    pub dropout: f64,
    pub ln_eps: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            layers: 4,
            mlp_ratio: 4,
            patch: 8,
            ref_size: 32,
            search_size: 64,
            num_refs: 3,
            num_search: 2,
            token_len: 1,
            ref_factor: 2.0,
            search_factor: 5.0,
            attention: AttentionVariant::Concat,
            gate_layers: (0..4).collect(),
            gate_activation: Activation::Tanh,
            gmp_layers: 3,
            frame_embedding: true,
            dropout: 0.0,
            ln_eps: 1e-5,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// ViT-Base sized mirror: 768-wide tokens, 16-pixel patches, 192/384 crops.
    pub fn full_scale() -> Self {
        Self {
            dim: 768,
            heads: 12,
            layers: 12,
            patch: 16,
            ref_size: 192,
            search_size: 384,
            gate_layers: (0..12).collect(),
            ..Self::default()
        }
    }

    pub fn ref_grid(&self) -> usize {
        self.ref_size / self.patch
    }

    pub fn search_grid(&self) -> usize {
        self.search_size / self.patch
    }

    pub fn ref_tokens(&self) -> usize {
        self.ref_grid() * self.ref_grid()
    }

    pub fn search_tokens(&self) -> usize {
        self.search_grid() * self.search_grid()
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.dim % 4 != 0 {
            return fail(format!("dim {} must be divisible by 4 for the head taper", self.dim));
        }
        if self.patch == 0 || self.ref_size % self.patch != 0 || self.search_size % self.patch != 0 {
            return fail(format!(
                "crop sizes {}/{} must be divisible by patch {}",
                self.ref_size, self.search_size, self.patch
            ));
        }
        if self.ref_size == 0 || self.search_size == 0 {
            return fail("crop sizes must be positive".into());
        }
        if self.layers == 0 || self.mlp_ratio == 0 {
            return fail("layers and mlp_ratio must be positive".into());
        }
        if self.num_refs == 0 || self.num_search == 0 || self.token_len == 0 {
            return fail("num_refs, num_search and token_len must be positive".into());
        }
        if self.gmp_layers == 0 {
            return fail("gmp_layers must be at least 1".into());
        }
        if let Some(&bad) = self.gate_layers.iter().find(|&&l| l >= self.layers) {
            return fail(format!("gate layer {bad} outside [0, {})", self.layers));
        }
        if !(self.ref_factor > 0.0 && self.search_factor > 0.0) {
            return fail("crop factors must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.ln_eps > 0.0) {
            return fail("ln_eps must be positive".into());
        }
        Ok(())
    }

    /// Pull model keys out of `kv`, leaving unrelated keys in place.
    pub fn take_from(kv: &mut KeyValues) -> Result<Self> {
        let mut c = Self::default();
        let explicit_gates = kv.contains("gate_layers");
        kv.take("dim", &mut c.dim)?;
        kv.take("heads", &mut c.heads)?;
        kv.take("layers", &mut c.layers)?;
        kv.take("mlp_ratio", &mut c.mlp_ratio)?;
        kv.take("patch", &mut c.patch)?;
        kv.take("ref_size", &mut c.ref_size)?;
        kv.take("search_size", &mut c.search_size)?;
        kv.take("num_refs", &mut c.num_refs)?;
        kv.take("num_search", &mut c.num_search)?;
        kv.take("token_len", &mut c.token_len)?;
        kv.take("ref_factor", &mut c.ref_factor)?;
        kv.take("search_factor", &mut c.search_factor)?;
        kv.take("attention", &mut c.attention)?;
        kv.take("gmp_layers", &mut c.gmp_layers)?;
        kv.take("frame_embedding", &mut c.frame_embedding)?;
        kv.take("dropout", &mut c.dropout)?;
        kv.take("ln_eps", &mut c.ln_eps)?;
        kv.take("init_seed", &mut c.init_seed)?;
        let mut act = activation_name(c.gate_activation).to_string();
        kv.take("gate_activation", &mut act)?;
        c.gate_activation = parse_activation(&act).map_err(Error::Config)?;
        if explicit_gates {
            let mut raw = String::new();
            kv.take("gate_layers", &mut raw)?;
            c.gate_layers = if raw.trim() == "none" {
                Vec::new()
            } else {
                let mut list = Vec::new();
                let mut tmp = KeyValues::default();
                tmp.set("gate_layers", raw);
                tmp.take_list("gate_layers", &mut list)?;
                list
            };
        } else {
            c.gate_layers = (0..c.layers).collect();
        }
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let c = Self::take_from(&mut kv)?;
        kv.finish()?;
        Ok(c)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("dim", self.dim);
        kv.set("heads", self.heads);
        kv.set("layers", self.layers);
        kv.set("mlp_ratio", self.mlp_ratio);
        kv.set("patch", self.patch);
        kv.set("ref_size", self.ref_size);
        kv.set("search_size", self.search_size);
        kv.set("num_refs", self.num_refs);
        kv.set("num_search", self.num_search);
        kv.set("token_len", self.token_len);
        kv.set("ref_factor", self.ref_factor);
        kv.set("search_factor", self.search_factor);
        kv.set("attention", self.attention);
        kv.set(
            "gate_layers",
            if self.gate_layers.is_empty() {
                "none".to_string()
            } else {
                join(&self.gate_layers)
            },
        );
        kv.set("gate_activation", activation_name(self.gate_activation));
        kv.set("gmp_layers", self.gmp_layers);
        kv.set("frame_embedding", self.frame_embedding);
        kv.set("dropout", self.dropout);
        kv.set("ln_eps", self.ln_eps);
        kv.set("init_seed", self.init_seed);
        kv
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_counts() {
        let desk = ModelConfig::default();
        assert_eq!(desk.search_tokens(), 64);
        assert_eq!(desk.ref_tokens(), 16);
        let full = ModelConfig::full_scale();
        full.validate().unwrap();
        assert_eq!(full.search_tokens(), 576);
        assert_eq!(full.ref_tokens(), 144);
    }

    #[test]
    fn text_round_trip() {
        let mut c = ModelConfig::default();
        c.attention = AttentionVariant::Separate;
        c.gate_layers = vec![1, 3];
        c.ref_factor = 2.5;
        let text = c.to_key_values().to_text();
        assert_eq!(ModelConfig::parse(&text).unwrap(), c);
        c.gate_layers.clear();
        assert_eq!(ModelConfig::parse(&c.to_key_values().to_text()).unwrap(), c);
    }

    #[test]
    fn gate_layers_follow_depth_by_default() {
        let c = ModelConfig::parse("layers = 2\n").unwrap();
        assert_eq!(c.gate_layers, vec![0, 1]);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ModelConfig::parse("dim = 30\nheads = 4\n").is_err());
        assert!(ModelConfig::parse("patch = 7\n").is_err());
        assert!(ModelConfig::parse("gate_layers = 9\n").is_err());
        assert!(ModelConfig::parse("attention = sparse\n").is_err());
        assert!(ModelConfig::parse("bogus = 1\n").is_err());
    }
}
