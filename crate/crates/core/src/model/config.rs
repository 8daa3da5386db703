use std::fmt;
use std::str::FromStr;

use crate::config::KeyValues;
use crate::error::{Result, TabsError};

/// Number of encoder levels; the last one is the bottleneck.
pub const DEPTH: usize = 5;
/// Stride-2 stages between consecutive encoder levels.
pub const DOWNSAMPLES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Unet,
    UnetSe,
    ResUnet,
    Tabs,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Tabs, Variant::ResUnet, Variant::UnetSe, Variant::Unet];

    pub fn key(self) -> &'static str {
        match self {
            Variant::Unet => "unet",
            Variant::UnetSe => "unet_se",
            Variant::ResUnet => "resunet",
            Variant::Tabs => "tabs",
        }
    }

    /// Name used in report headers.
    pub fn display_name(self) -> &'static str {
        match self {
            Variant::Unet => "Unet",
            Variant::UnetSe => "Unet-SE",
            Variant::ResUnet => "ResUnet",
            Variant::Tabs => "TABS",
        }
    }

    pub fn is_residual(self) -> bool {
        matches!(self, Variant::ResUnet | Variant::Tabs)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Variant {
    type Err = TabsError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "unet" => Ok(Variant::Unet),
            "unet_se" | "unetse" => Ok(Variant::UnetSe),
            "resunet" => Ok(Variant::ResUnet),
            "tabs" => Ok(Variant::Tabs),
            other => Err(TabsError::config(format!(
                "unknown variant `{other}` (expected unet, unet_se, resunet or tabs)"
            ))),
        }
    }
}

/// Architecture hyperparameters shared by all four variants.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Cube edge length of the input volume.
    pub input_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Channels at the bottleneck level; level `i` has `features / 2^(4-i)`.
    pub features: usize,
    pub depth: usize,
    pub downsamples: usize,
    pub token_dim: usize,
    pub transformer_layers: usize,
    pub transformer_heads: usize,
    pub ffn_dim: usize,
    pub groupnorm_groups: usize,
    pub se_reduction: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Small configuration that trains on one CPU core.
    pub fn desk(variant: Variant) -> Self {
        ModelConfig {
            variant,
            input_size: 32,
            in_channels: 1,
            out_channels: 3,
            features: 16,
            depth: DEPTH,
            downsamples: DOWNSAMPLES,
            token_dim: 32,
            transformer_layers: 2,
            transformer_heads: 4,
            ffn_dim: 128,
            groupnorm_groups: 4,
            se_reduction: 4,
            seed: 0,
        }
    }

    /// Full-size configuration: 192³ input, f = 128, d = 512, 4 layers, 8 heads.
    pub fn paper(variant: Variant) -> Self {
        ModelConfig {
            variant,
            input_size: 192,
            in_channels: 1,
            out_channels: 3,
            features: 128,
            depth: DEPTH,
            downsamples: DOWNSAMPLES,
            token_dim: 512,
            transformer_layers: 4,
            transformer_heads: 8,
            ffn_dim: 2048,
            groupnorm_groups: 8,
            se_reduction: 16,
            seed: 0,
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        ModelConfig {
            variant,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TabsError::config(m));
        if self.depth != DEPTH || self.downsamples != DOWNSAMPLES {
            return fail(format!(
                "depth must be {DEPTH} with {DOWNSAMPLES} downsamples, got {}/{}",
                self.depth, self.downsamples
            ));
        }
        let factor = 1 << self.downsamples;
        if self.input_size == 0 || self.input_size % factor != 0 {
            return fail(format!(
                "input_size {} is not divisible by {factor}",
                self.input_size
            ));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return fail("in_channels and out_channels must be positive".into());
        }
        if self.features == 0 || self.features % factor != 0 {
            return fail(format!("features {} is not divisible by {factor}", self.features));
        }
        if self.groupnorm_groups == 0 || self.features % self.groupnorm_groups != 0 {
            return fail(format!(
                "features {} is not divisible by groupnorm_groups {}",
                self.features, self.groupnorm_groups
            ));
        }
        if self.se_reduction == 0 {
            return fail("se_reduction must be positive".into());
        }
        if self.variant == Variant::Tabs {
            if self.token_dim == 0 || self.transformer_heads == 0 || self.transformer_layers == 0 {
                return fail("token_dim, transformer_heads and transformer_layers must be positive".into());
            }
            if self.token_dim % self.transformer_heads != 0 {
                return fail(format!(
                    "token_dim {} is not divisible by transformer_heads {}",
                    self.token_dim, self.transformer_heads
                ));
            }
            if self.ffn_dim == 0 {
                return fail("ffn_dim must be positive".into());
            }
        }
        Ok(())
    }

    /// Channel count at each encoder level, `[f/16, f/8, f/4, f/2, f]`.
    pub fn channel_schedule(&self) -> [usize; DEPTH] {
        let mut out = [0; DEPTH];
        for (i, c) in out.iter_mut().enumerate() {
            *c = self.features >> (DEPTH - 1 - i);
        }
        out
    }

    /// Spatial edge at the bottleneck, `N / 16`.
    pub fn bottleneck_edge(&self) -> usize {
        self.input_size >> self.downsamples
    }

    pub fn token_count(&self) -> usize {
        self.bottleneck_edge().pow(3)
    }

    /// Group count used for a layer with `channels` channels.
    pub fn groups_for(&self, channels: usize) -> usize {
        gcd(self.groupnorm_groups, channels)
    }

    pub(crate) fn write_kv(&self, out: &mut String) {
        use std::fmt::Write;
        let _ = writeln!(out, "variant = {}", self.variant);
        let _ = writeln!(out, "input_size = {}", self.input_size);
        let _ = writeln!(out, "in_channels = {}", self.in_channels);
        let _ = writeln!(out, "out_channels = {}", self.out_channels);
        let _ = writeln!(out, "features = {}", self.features);
        let _ = writeln!(out, "depth = {}", self.depth);
        let _ = writeln!(out, "downsamples = {}", self.downsamples);
        let _ = writeln!(out, "token_dim = {}", self.token_dim);
        let _ = writeln!(out, "transformer_layers = {}", self.transformer_layers);
        let _ = writeln!(out, "transformer_heads = {}", self.transformer_heads);
        let _ = writeln!(out, "ffn_dim = {}", self.ffn_dim);
        let _ = writeln!(out, "groupnorm_groups = {}", self.groupnorm_groups);
        let _ = writeln!(out, "se_reduction = {}", self.se_reduction);
        let _ = writeln!(out, "seed = {}", self.seed);
    }

    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        self.write_kv(&mut s);
        s
    }

    /// Consumes model keys from `kv`. `preset = desk|paper` selects the base
    /// values; any explicit key overrides it.
    pub fn take_from(kv: &mut KeyValues) -> Result<Self> {
        let variant: Variant = kv.take_str("variant").map_or(Ok(Variant::Tabs), |s| s.parse())?;
        let mut cfg = match kv.take_str("preset").as_deref() {
            None | Some("desk") => ModelConfig::desk(variant),
            Some("paper") => ModelConfig::paper(variant),
            Some(other) => {
                return Err(TabsError::config(format!(
                    "unknown preset `{other}` (expected desk or paper)"
                )))
            }
        };
        cfg.input_size = kv.take_or("input_size", cfg.input_size)?;
        cfg.in_channels = kv.take_or("in_channels", cfg.in_channels)?;
        cfg.out_channels = kv.take_or("out_channels", cfg.out_channels)?;
        cfg.features = kv.take_or("features", cfg.features)?;
        cfg.depth = kv.take_or("depth", cfg.depth)?;
        cfg.downsamples = kv.take_or("downsamples", cfg.downsamples)?;
        let token_dim_given = kv.contains("token_dim");
        cfg.token_dim = kv.take_or("token_dim", cfg.token_dim)?;
        cfg.transformer_layers = kv.take_or("transformer_layers", cfg.transformer_layers)?;
        cfg.transformer_heads = kv.take_or("transformer_heads", cfg.transformer_heads)?;
        cfg.ffn_dim = match kv.take("ffn_dim")? {
            Some(v) => v,
            None if token_dim_given => 4 * cfg.token_dim,
            None => cfg.ffn_dim,
        };
        cfg.groupnorm_groups = kv.take_or("groupnorm_groups", cfg.groupnorm_groups)?;
        cfg.se_reduction = kv.take_or("se_reduction", cfg.se_reduction)?;
        cfg.seed = kv.take_or("seed", cfg.seed)?;
        Ok(cfg)
    }

    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text, "model config")?;
        let cfg = Self::take_from(&mut kv)?;
        kv.finish()?;
        Ok(cfg)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}
