//! Closed-form parameter and FLOP ledger.
//!
//! One multiply-accumulate counts as one FLOP. Batch norm, activations,
//! softmax, residual additions, bias additions, pooling and the shuffle
//! permutations count as zero. Parameters are every learnable weight, bias and
//! normalization affine; running statistics are buffers and are not counted.

use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;

use crate::error::Result;
use crate::model::config::{ModelConfig, NwcPosition};

pub const CONVENTION: &str = "1 multiply-accumulate = 1 FLOP; BN, activations, softmax, residual/bias adds, pooling and permutations not counted; params = learnable weights, biases and BN affines (running stats excluded)";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostRow {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub variant: String,
    /// `None` for a parameter-only ledger.
    pub resolution: Option<(usize, usize)>,
    pub convention: &'static str,
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.rows.iter().map(|r| r.flops).sum()
    }

    /// Sum of the rows whose name starts with `prefix`.
    pub fn params_of(&self, prefix: &str) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.name.starts_with(prefix))
            .map(|r| r.params)
            .sum()
    }

    pub fn flops_of(&self, prefix: &str) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.name.starts_with(prefix))
            .map(|r| r.flops)
            .sum()
    }

    /// CSV with `#` comment lines carrying the convention and any extra
    /// provenance lines (e.g. the run configuration).
    pub fn write_csv<W: Write>(&self, out: W, provenance: &[String]) -> Result<()> {
        let mut out = out;
        let mut header = format!("# convention: {}\n", self.convention);
        for line in provenance {
            for l in line.lines() {
                writeln!(header, "# {l}").expect("string write");
            }
        }
        out.write_all(header.as_bytes())
            .map_err(|e| crate::error::Error::io("<csv>", e))?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["name", "params", "flops"])?;
        for r in &self.rows {
            w.write_record([r.name.clone(), r.params.to_string(), r.flops.to_string()])?;
        }
        w.write_record([
            "total".to_string(),
            self.total_params().to_string(),
            self.total_flops().to_string(),
        ])?;
        w.flush().map_err(|e| crate::error::Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let res = match self.resolution {
            Some((h, w)) => format!("{h}x{w}"),
            None => "n/a".into(),
        };
        writeln!(s, "variant {} @ {res}", self.variant).unwrap();
        writeln!(s, "convention: {}", self.convention).unwrap();
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        writeln!(s, "{:<width$}  {:>14}  {:>16}", "layer", "params", "flops").unwrap();
        for r in &self.rows {
            writeln!(s, "{:<width$}  {:>14}  {:>16}", r.name, r.params, r.flops).unwrap();
        }
        writeln!(
            s,
            "{:<width$}  {:>14}  {:>16}",
            "total",
            self.total_params(),
            self.total_flops()
        )
        .unwrap();
        writeln!(
            s,
            "params {:.2}M, flops {:.2}G",
            self.total_params() as f64 / 1e6,
            self.total_flops() as f64 / 1e9
        )
        .unwrap();
        s
    }
}

fn row(name: String, params: u64, flops: u64) -> CostRow {
    CostRow { name, params, flops }
}

/// Closed-form rows for one block on a `hw`-token grid (flops zero when `hw == 0`).
pub fn block_rows(cfg: &ModelConfig, prefix: &str, c: u64, hw: u64) -> Vec<CostRow> {
    let m2 = (cfg.window * cfg.window) as u64;
    let hidden = c * cfg.mlp_ratio as u64;
    let heads = c / cfg.head_dim as u64;
    let qkv_bias = if cfg.qkv_bias { 3 * c } else { 0 };
    let rel = if cfg.rel_pos_bias {
        heads * ((2 * cfg.window - 1) * (2 * cfg.window - 1)) as u64
    } else {
        0
    };
    let mut rows = vec![
        row(format!("{prefix}.norm1"), 2 * c, 0),
        row(format!("{prefix}.attn.qkv"), 3 * c * c + qkv_bias, 3 * hw * c * c),
        row(format!("{prefix}.attn.core"), rel, 2 * m2 * hw * c),
        row(format!("{prefix}.attn.proj"), c * c + c, hw * c * c),
    ];
    match cfg.nwc {
        NwcPosition::A | NwcPosition::B => rows.push(row(format!("{prefix}.nwc"), m2 * c + c, m2 * hw * c)),
        NwcPosition::C => rows.push(row(format!("{prefix}.mlp.nwc"), m2 * hidden + hidden, m2 * hw * hidden)),
        NwcPosition::None => {}
    }
    rows.push(row(format!("{prefix}.norm2"), 2 * c, 0));
    rows.push(row(format!("{prefix}.mlp.fc1"), c * hidden + hidden, hw * c * hidden));
    rows.push(row(format!("{prefix}.mlp.fc2"), hidden * c + c, hw * hidden * c));
    rows
}

fn ledger(cfg: &ModelConfig, resolution: Option<(usize, usize)>) -> Result<CostReport> {
    cfg.validate()?;
    let grids = match resolution {
        Some((h, w)) => Some(cfg.stage_resolutions(h, w)?),
        None => None,
    };
    let px = |h: usize, w: usize| if grids.is_some() { (h * w) as u64 } else { 0 };
    let (h, w) = resolution.unwrap_or((0, 0));
    let c = cfg.channels as u64;
    let mid = c / 2;
    let cin = cfg.in_channels as u64;
    let mut rows = vec![
        row("embed.conv1".into(), 9 * cin * mid, 9 * cin * mid * px(h / 2, w / 2)),
        row("embed.norm1".into(), 2 * mid, 0),
        row("embed.conv2".into(), 9 * mid * c, 9 * mid * c * px(h / 4, w / 4)),
        row("embed.norm2".into(), 2 * c, 0),
    ];
    for (s, &depth) in cfg.depths.iter().enumerate() {
        let cs = cfg.stage_channels(s) as u64;
        let hw = grids.as_ref().map_or(0, |g| (g[s].0 * g[s].1) as u64);
        if s > 0 {
            let prev = cfg.stage_channels(s - 1) as u64;
            rows.push(row(format!("merges.{}", s - 1), 4 * prev * cs + cs, 4 * prev * cs * hw));
        }
        for i in 0..depth {
            rows.extend(block_rows(cfg, &format!("stages.{s}.blocks.{i}"), cs, hw));
        }
    }
    let cl = cfg.final_channels() as u64;
    let k = cfg.num_classes as u64;
    rows.push(row("head_norm".into(), 2 * cl, 0));
    rows.push(row("head".into(), cl * k + k, if grids.is_some() { cl * k } else { 0 }));
    Ok(CostReport {
        variant: cfg.variant.clone(),
        resolution,
        convention: CONVENTION,
        rows,
    })
}

/// Parameter ledger; the flop column is zero.
pub fn count_params(cfg: &ModelConfig) -> Result<CostReport> {
    ledger(cfg, None)
}

/// Parameter and flop ledger for one `height x width` image.
pub fn count_flops(cfg: &ModelConfig, height: usize, width: usize) -> Result<CostReport> {
    ledger(cfg, Some((height, width)))
}

/// MACs of the attention core (`QK^T` and `attn V`) when attention is
/// restricted to `m x m` windows on a `hw`-token grid of width `c`.
pub fn window_attention_core_flops(hw: u64, c: u64, m: u64) -> u64 {
    2 * m * m * hw * c
}

/// The same core for global attention over all `hw` tokens.
pub fn global_attention_core_flops(hw: u64, c: u64) -> u64 {
    2 * hw * hw * c
}

/// Full attention module cost (projections plus core), windowed.
pub fn window_msa_flops(hw: u64, c: u64, m: u64) -> u64 {
    4 * hw * c * c + window_attention_core_flops(hw, c, m)
}

/// Full attention module cost (projections plus core), global.
pub fn global_msa_flops(hw: u64, c: u64) -> u64 {
    4 * hw * c * c + global_attention_core_flops(hw, c)
}
