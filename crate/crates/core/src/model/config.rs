//! Architecture hyper-parameters and their plain-text `key = value` form.
//!
//! ```text
//! # comments start with '#'
//! variant = T            # T, S or B; sets the defaults below it
//! channels = 96
//! depths = 2,2,6,2
//! window = 7
//! head_dim = 32
//! mlp_ratio = 4
//! num_classes = 1000
//! in_channels = 3
//! resolution = 224
//! shuffle = long         # none | long | short | random
//! nwc = B                # A | B | C | none
//! nwc_padding = centered # centered | same
//! qkv_bias = true
//! rel_pos_bias = false
//! shuffle_seed = 0       # seeds the random shuffle mode
//! ```
//!
//! Keys may come in any order; `variant` is applied first.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::NwcPadding;
use crate::windowing::ShuffleMode;

/// Where the neighbor-window connection sits inside a block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum NwcPosition {
    /// On the normalized input, before the attention.
    A,
    /// After the attention residual.
    #[default]
    B,
    /// Between the two MLP convolutions, at the hidden width.
    C,
    None,
}

impl NwcPosition {
    pub const ALL: [NwcPosition; 4] = [NwcPosition::None, NwcPosition::A, NwcPosition::B, NwcPosition::C];

    pub fn as_str(self) -> &'static str {
        match self {
            NwcPosition::A => "A",
            NwcPosition::B => "B",
            NwcPosition::C => "C",
            NwcPosition::None => "none",
        }
    }
}

impl fmt::Display for NwcPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NwcPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(NwcPosition::A),
            "B" | "b" => Ok(NwcPosition::B),
            "C" | "c" => Ok(NwcPosition::C),
            "none" | "None" => Ok(NwcPosition::None),
            other => Err(Error::InvalidConfig(format!(
                "unknown NWC position {other:?} (expected A, B, C or none)"
            ))),
        }
    }
}

impl Serialize for NwcPosition {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

/// Hyper-parameters of one block.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockConfig {
    pub channels: usize,
    pub head_dim: usize,
    pub window: usize,
    pub mlp_ratio: usize,
    pub shuffle: ShuffleMode,
    pub nwc: NwcPosition,
    pub nwc_padding: NwcPadding,
    pub qkv_bias: bool,
    pub rel_pos_bias: bool,
}

impl BlockConfig {
    /// Head width 32, MLP ratio 4, no shuffle, NWC at B.
    pub fn new(channels: usize, window: usize) -> Self {
        BlockConfig {
            channels,
            head_dim: 32,
            window,
            mlp_ratio: 4,
            shuffle: ShuffleMode::Identity,
            nwc: NwcPosition::B,
            nwc_padding: NwcPadding::Centered,
            qkv_bias: true,
            rel_pos_bias: false,
        }
    }

    pub fn heads(&self) -> usize {
        self.channels / self.head_dim
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelConfig {
    pub variant: String,
    pub channels: usize,
    pub depths: Vec<usize>,
    pub window: usize,
    pub head_dim: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    pub resolution: usize,
    pub shuffle: ShuffleMode,
    pub nwc: NwcPosition,
    pub nwc_padding: NwcPadding,
    pub qkv_bias: bool,
    pub rel_pos_bias: bool,
    pub shuffle_seed: u64,
}

pub const VARIANTS: [&str; 3] = ["T", "S", "B"];

/// Shuffle-T, -S or -B.
pub fn build_variant(name: &str) -> Result<ModelConfig> {
    let (channels, depths) = match name.trim() {
        "T" | "t" => (96, vec![2, 2, 6, 2]),
        "S" | "s" => (96, vec![2, 2, 18, 2]),
        "B" | "b" => (128, vec![2, 2, 18, 2]),
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown variant {other:?} (valid: {})",
                VARIANTS.join(", ")
            )))
        }
    };
    Ok(ModelConfig {
        variant: name.trim().to_ascii_uppercase(),
        channels,
        depths,
        window: 7,
        head_dim: 32,
        mlp_ratio: 4,
        num_classes: 1000,
        in_channels: 3,
        resolution: 224,
        shuffle: ShuffleMode::LongRange,
        nwc: NwcPosition::B,
        nwc_padding: NwcPadding::Centered,
        qkv_bias: true,
        rel_pos_bias: false,
        shuffle_seed: 0,
    })
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidConfig(format!(
            "{key}: expected true or false, got {v:?}"
        ))),
    }
}

fn parse_num<N: FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse()
        .map_err(|_| Error::InvalidConfig(format!("{key}: expected a non-negative integer, got {v:?}")))
}

impl ModelConfig {
    /// Reduced two-stage configuration used for toy training.
    pub fn toy() -> Self {
        ModelConfig {
            variant: "toy".into(),
            channels: 32,
            depths: vec![2, 2],
            num_classes: 8,
            resolution: 56,
            ..build_variant("T").expect("built-in variant")
        }
    }

    pub fn stages(&self) -> usize {
        self.depths.len()
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.channels << stage
    }

    pub fn stage_heads(&self, stage: usize) -> usize {
        self.stage_channels(stage) / self.head_dim
    }

    pub fn final_channels(&self) -> usize {
        self.stage_channels(self.stages() - 1)
    }

    /// Shuffle of block `index` within its stage: odd blocks shuffle.
    pub fn block_shuffle(&self, index: usize) -> ShuffleMode {
        if index % 2 == 1 {
            self.shuffle
        } else {
            ShuffleMode::Identity
        }
    }

    pub fn block_config(&self, stage: usize, index: usize) -> BlockConfig {
        BlockConfig {
            channels: self.stage_channels(stage),
            head_dim: self.head_dim,
            window: self.window,
            mlp_ratio: self.mlp_ratio,
            shuffle: self.block_shuffle(index),
            nwc: self.nwc,
            nwc_padding: self.nwc_padding,
            qkv_bias: self.qkv_bias,
            rel_pos_bias: self.rel_pos_bias,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.channels == 0 || !self.channels.is_multiple_of(2) {
            return fail(format!(
                "channels must be a positive even number, got {}",
                self.channels
            ));
        }
        if self.head_dim == 0 || !self.channels.is_multiple_of(self.head_dim) {
            return fail(format!(
                "channels {} are not a whole number of {}-wide heads",
                self.channels, self.head_dim
            ));
        }
        if self.depths.is_empty() {
            return fail("at least one stage is required".into());
        }
        if let Some(i) = self.depths.iter().position(|&d| d == 0 || d % 2 != 0) {
            return fail(format!(
                "stage {} depth {} must be a positive even number (blocks come in pairs)",
                i + 1,
                self.depths[i]
            ));
        }
        if self.window == 0 || self.mlp_ratio == 0 || self.num_classes == 0 || self.in_channels == 0 {
            return fail("window, mlp_ratio, num_classes and in_channels must be positive".into());
        }
        if self.nwc != NwcPosition::None {
            self.nwc_padding.resolve(self.window)?;
        }
        Ok(())
    }

    /// Token-grid extent of every stage for a square input, failing with the
    /// offending stage named.
    pub fn stage_resolutions(&self, height: usize, width: usize) -> Result<Vec<(usize, usize)>> {
        if !height.is_multiple_of(4) || !width.is_multiple_of(4) || height == 0 || width == 0 {
            return Err(Error::InvalidShape(format!(
                "token embedding needs an input divisible by 4, got {height}x{width}"
            )));
        }
        let (mut h, mut w) = (height / 4, width / 4);
        let mut out = Vec::with_capacity(self.stages());
        for stage in 0..self.stages() {
            if stage > 0 {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::InvalidShape(format!(
                        "token merging before stage {} needs even extents, got {h}x{w}",
                        stage + 1
                    )));
                }
                h /= 2;
                w /= 2;
            }
            for extent in [h, w] {
                if extent % self.window != 0 {
                    return Err(Error::Partition {
                        extent,
                        window: self.window,
                        context: format!("stage {} at input {height}x{width}", stage + 1),
                    });
                }
            }
            out.push((h, w));
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let depths: Vec<String> = self.depths.iter().map(usize::to_string).collect();
        let rows = [
            ("variant", self.variant.clone()),
            ("channels", self.channels.to_string()),
            ("depths", depths.join(",")),
            ("window", self.window.to_string()),
            ("head_dim", self.head_dim.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("resolution", self.resolution.to_string()),
            ("shuffle", self.shuffle.to_string()),
            ("nwc", self.nwc.to_string()),
            ("nwc_padding", self.nwc_padding.as_str().to_string()),
            ("qkv_bias", self.qkv_bias.to_string()),
            ("rel_pos_bias", self.rel_pos_bias.to_string()),
            ("shuffle_seed", self.shuffle_seed.to_string()),
        ];
        rows.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Parse the `key = value` form; unknown keys and malformed values fail.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::InvalidConfig(format!("line {}: expected key = value", no + 1)));
            };
            let key = k.trim().to_string();
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate key {key:?}")));
            }
        }
        let mut cfg = match entries.remove("variant") {
            Some(v) if VARIANTS.iter().any(|n| n.eq_ignore_ascii_case(&v)) => build_variant(&v)?,
            Some(v) => ModelConfig {
                variant: v,
                ..build_variant("T")?
            },
            None => ModelConfig {
                variant: "custom".into(),
                ..build_variant("T")?
            },
        };
        for (key, v) in &entries {
            let v = v.as_str();
            match key.as_str() {
                "channels" => cfg.channels = parse_num(key, v)?,
                "depths" => cfg.depths = v.split(',').map(|d| parse_num(key, d.trim())).collect::<Result<_>>()?,
                "window" => cfg.window = parse_num(key, v)?,
                "head_dim" => cfg.head_dim = parse_num(key, v)?,
                "mlp_ratio" => cfg.mlp_ratio = parse_num(key, v)?,
                "num_classes" => cfg.num_classes = parse_num(key, v)?,
                "in_channels" => cfg.in_channels = parse_num(key, v)?,
                "resolution" => cfg.resolution = parse_num(key, v)?,
                "shuffle" => cfg.shuffle = v.parse()?,
                "nwc" => cfg.nwc = v.parse()?,
                "nwc_padding" => cfg.nwc_padding = v.parse()?,
                "qkv_bias" => cfg.qkv_bias = parse_bool(key, v)?,
                "rel_pos_bias" => cfg.rel_pos_bias = parse_bool(key, v)?,
                "shuffle_seed" => cfg.shuffle_seed = parse_num(key, v)?,
                other => return Err(Error::InvalidConfig(format!("unknown config key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants() {
        let t = build_variant("T").unwrap();
        let heads: Vec<usize> = (0..4).map(|s| t.stage_heads(s)).collect();
        assert_eq!(heads, [3, 6, 12, 24]);
        let b = build_variant("B").unwrap();
        let ch: Vec<usize> = (0..4).map(|s| b.stage_channels(s)).collect();
        assert_eq!(ch, [128, 256, 512, 1024]);
        let s = build_variant("S").unwrap();
        assert_eq!(s.channels, t.channels);
        let diff: Vec<usize> = (0..4).filter(|&i| s.depths[i] != t.depths[i]).collect();
        assert_eq!(diff, [2]);
        let err = build_variant("X").unwrap_err().to_string();
        assert!(err.contains("T, S, B"));
    }

    #[test]
    fn stage_grid_at_224() {
        let t = build_variant("T").unwrap();
        assert_eq!(
            t.stage_resolutions(224, 224).unwrap(),
            [(56, 56), (28, 28), (14, 14), (7, 7)]
        );
        match t.stage_resolutions(192, 192) {
            Err(Error::Partition { context, .. }) => assert!(context.contains("stage 1")),
            other => panic!("{other:?}"),
        }
        match t.stage_resolutions(280, 280) {
            Err(Error::InvalidShape(msg)) => assert!(msg.contains("stage 3")),
            other => panic!("{other:?}"),
        }
        assert!(t.stage_resolutions(226, 226).is_err());
    }

    #[test]
    fn pairing() {
        let t = build_variant("T").unwrap();
        for i in 0..6 {
            let expect = if i % 2 == 1 {
                ShuffleMode::LongRange
            } else {
                ShuffleMode::Identity
            };
            assert_eq!(t.block_config(2, i).shuffle, expect);
        }
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = ModelConfig::toy();
        cfg.shuffle = ShuffleMode::Random;
        cfg.nwc = NwcPosition::C;
        cfg.shuffle_seed = 17;
        let parsed = ModelConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(parsed, cfg);
        assert_eq!(parsed.to_text(), cfg.to_text());
    }

    #[test]
    fn parse_overrides_variant_in_any_order() {
        let cfg = ModelConfig::parse("channels = 64 # narrower\nvariant = S\n\nnwc = none\n").unwrap();
        assert_eq!(cfg.channels, 64);
        assert_eq!(cfg.depths, [2, 2, 18, 2]);
        assert_eq!(cfg.nwc, NwcPosition::None);
    }

    #[test]
    fn parse_errors() {
        for bad in [
            "colour = red",
            "depths = 2,3",
            "channels = 96\nchannels = 64",
            "window = 2",
            "shuffle = sideways",
            "qkv_bias = maybe",
            "just text",
            "channels = 100",
        ] {
            assert!(matches!(ModelConfig::parse(bad), Err(Error::InvalidConfig(_))), "{bad}");
        }
        assert!(ModelConfig::parse("window = 2\nnwc_padding = same").is_ok());
        assert!(ModelConfig::parse("window = 2\nnwc = none").is_ok());
    }
}
