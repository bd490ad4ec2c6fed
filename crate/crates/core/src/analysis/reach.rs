//! Which input positions can influence one output position.
//!
//! The finite-difference probe perturbs every input position of a small
//! float64 block stack (all channels at once, one batch element per
//! position) and marks a position reachable when any output channel at the
//! probe moves by more than `threshold * max(1, |baseline|)`. Three weight
//! seeds are probed and their sets united, so an accidental cancellation in
//! one random draw cannot hide a connection.
//!
//! The symbolic oracle composes the same relations exactly: attention links
//! every pair of positions sharing a (shuffled) window, the neighbor-window
//! connection links a kernel-sized neighborhood, and everything else is
//! pointwise. Every layer is residual, so each relation contains the
//! identity.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::layers::{Mode, Module, NwcPadding};
use crate::model::block::{block_forward, Block};
use crate::model::config::{BlockConfig, NwcPosition};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::windowing::{ShuffleMode, ShufflePlan, WindowGrid};

pub const DEFAULT_THRESHOLD: f64 = 1e-9;
pub const DEFAULT_EPSILON: f64 = 1e-3;
pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReachabilitySet {
    pub method: &'static str,
    pub probe: (usize, usize),
    pub grid: (usize, usize),
    /// Sorted `(row, col)` positions.
    pub members: Vec<(usize, usize)>,
    pub threshold: f64,
    pub seeds: Vec<u64>,
}

impl ReachabilitySet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, pos: (usize, usize)) -> bool {
        self.members.binary_search(&pos).is_ok()
    }

    pub fn is_full(&self) -> bool {
        self.len() == self.grid.0 * self.grid.1
    }

    pub fn same_members(&self, other: &ReachabilitySet) -> bool {
        self.members == other.members
    }

    pub fn is_subset_of(&self, other: &ReachabilitySet) -> bool {
        self.members.iter().all(|&p| other.contains(p))
    }

    pub fn is_strict_subset_of(&self, other: &ReachabilitySet) -> bool {
        self.is_subset_of(other) && self.len() < other.len()
    }

    /// `(rows, cols)` when the set is exactly their Cartesian product.
    pub fn product_factors(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        let rows: BTreeSet<usize> = self.members.iter().map(|p| p.0).collect();
        let cols: BTreeSet<usize> = self.members.iter().map(|p| p.1).collect();
        (rows.len() * cols.len() == self.len()).then(|| (rows.into_iter().collect(), cols.into_iter().collect()))
    }

    /// ASCII map: `P` probe, `#` reachable, `.` not.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for i in 0..self.grid.0 {
            for j in 0..self.grid.1 {
                s.push(if (i, j) == self.probe {
                    'P'
                } else if self.contains((i, j)) {
                    '#'
                } else {
                    '.'
                });
            }
            s.push('\n');
        }
        s
    }
}

/// Spatial relation of one residual layer.
#[derive(Clone, Debug, PartialEq)]
pub enum Relation {
    /// Positions sharing an `m x m` window after the shuffle `plan`.
    Window {
        window: usize,
        plan: ShufflePlan,
    },
    /// Output `i` reads inputs `i - before ..= i + after` along each axis.
    Neighborhood {
        before: usize,
        after: usize,
    },
    Pointwise,
}

impl Relation {
    pub fn nwc(kernel: usize, padding: NwcPadding) -> Result<Self> {
        let pad = padding.resolve(kernel)?;
        Ok(Relation::Neighborhood {
            before: pad.top,
            after: pad.bottom,
        })
    }

    /// Relations of a block, in forward order.
    pub fn of_block(cfg: &BlockConfig, plan: &ShufflePlan) -> Result<Vec<Relation>> {
        let attn = Relation::Window {
            window: cfg.window,
            plan: plan.clone(),
        };
        let nwc = || Relation::nwc(cfg.window, cfg.nwc_padding);
        Ok(match cfg.nwc {
            NwcPosition::A => vec![nwc()?, attn, Relation::Pointwise],
            NwcPosition::B | NwcPosition::C => vec![attn, nwc()?, Relation::Pointwise],
            NwcPosition::None => vec![attn, Relation::Pointwise],
        })
    }

    /// Inputs influencing any output in `outputs` (including the residual path).
    fn pull_back(&self, outputs: &[bool], h: usize, w: usize) -> Result<Vec<bool>> {
        let mut inputs = outputs.to_vec();
        match self {
            Relation::Pointwise => {}
            Relation::Neighborhood { before, after } => {
                for i in 0..h {
                    for j in 0..w {
                        if !outputs[i * w + j] {
                            continue;
                        }
                        let (r0, r1) = (i.saturating_sub(*before), (i + after).min(h - 1));
                        let (c0, c1) = (j.saturating_sub(*before), (j + after).min(w - 1));
                        for r in r0..=r1 {
                            for c in c0..=c1 {
                                inputs[r * w + c] = true;
                            }
                        }
                    }
                }
            }
            Relation::Window { window, plan } => {
                if plan.height() != h || plan.width() != w {
                    return Err(Error::InvalidShape(format!(
                        "shuffle for {}x{} used on a {h}x{w} grid",
                        plan.height(),
                        plan.width()
                    )));
                }
                let grid = WindowGrid::new(h, w, *window)?;
                let inv = plan.inverse();
                let mut hit = vec![false; grid.count()];
                for i in 0..h {
                    for j in 0..w {
                        if outputs[i * w + j] {
                            let (win, _, _) = grid.locate(inv.rows.map()[i], inv.cols.map()[j]);
                            hit[win] = true;
                        }
                    }
                }
                for (win, _) in hit.iter().enumerate().filter(|(_, &h)| h) {
                    for r in 0..*window {
                        for s in 0..*window {
                            let (si, sj) = grid.position(win, r, s);
                            inputs[plan.rows.map()[si] * w + plan.cols.map()[sj]] = true;
                        }
                    }
                }
            }
        }
        Ok(inputs)
    }
}

/// Exact reachable set of `probe` through `relations` (forward order).
pub fn symbolic_reachability(
    relations: &[Relation],
    grid: (usize, usize),
    probe: (usize, usize),
) -> Result<ReachabilitySet> {
    let (h, w) = grid;
    check_probe(grid, probe)?;
    let mut set = vec![false; h * w];
    set[probe.0 * w + probe.1] = true;
    for rel in relations.iter().rev() {
        set = rel.pull_back(&set, h, w)?;
    }
    Ok(ReachabilitySet {
        method: "symbolic",
        probe,
        grid,
        members: members_of(&set, w),
        threshold: 0.0,
        seeds: Vec::new(),
    })
}

fn members_of(set: &[bool], w: usize) -> Vec<(usize, usize)> {
    set.iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(k, _)| (k / w, k % w))
        .collect()
}

fn check_probe(grid: (usize, usize), probe: (usize, usize)) -> Result<()> {
    if probe.0 >= grid.0 || probe.1 >= grid.1 {
        return Err(Error::InvalidConfig(format!(
            "probe {probe:?} lies outside the {}x{} grid",
            grid.0, grid.1
        )));
    }
    Ok(())
}

/// One block of a probe stack: its shuffle and NWC position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockKind {
    pub shuffle: ShuffleMode,
    pub nwc: NwcPosition,
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.shuffle, self.nwc)
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    /// `mode` or `mode/position`, e.g. `none`, `long/B`.
    fn from_str(s: &str) -> Result<Self> {
        let (mode, nwc) = match s.trim().split_once('/') {
            Some((m, n)) => (m, n.parse()?),
            None => (s.trim(), NwcPosition::None),
        };
        Ok(BlockKind {
            shuffle: mode.parse()?,
            nwc,
        })
    }
}

/// A stack of blocks on a small square-or-rectangular grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StackSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub head_dim: usize,
    pub window: usize,
    #[serde(serialize_with = "display_list")]
    pub blocks: Vec<BlockKind>,
    pub nwc_padding: NwcPadding,
    pub shuffle_seed: u64,
}

fn display_list<S: serde::Serializer>(v: &[BlockKind], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(|b| b.to_string()))
}

impl StackSpec {
    /// 4 channels in two heads; even windows use the `same` padding rule.
    pub fn new(grid: usize, window: usize, blocks: Vec<BlockKind>) -> Self {
        StackSpec {
            height: grid,
            width: grid,
            channels: 4,
            head_dim: 2,
            window,
            blocks,
            nwc_padding: if window.is_multiple_of(2) {
                NwcPadding::Same
            } else {
                NwcPadding::Centered
            },
            shuffle_seed: 0,
        }
    }

    /// Comma-separated block kinds, e.g. `none,long/B`.
    pub fn parse_blocks(text: &str) -> Result<Vec<BlockKind>> {
        let blocks: Vec<BlockKind> = text
            .split(',')
            .filter(|t| !t.trim().is_empty())
            .map(str::parse)
            .collect::<Result<_>>()?;
        if blocks.is_empty() {
            return Err(Error::InvalidConfig("a stack needs at least one block".into()));
        }
        Ok(blocks)
    }

    pub fn block_config(&self, kind: BlockKind) -> BlockConfig {
        BlockConfig {
            head_dim: self.head_dim,
            shuffle: kind.shuffle,
            nwc: kind.nwc,
            nwc_padding: self.nwc_padding,
            ..BlockConfig::new(self.channels, self.window)
        }
    }

    /// Blocks with weights from `weight_seed`; shuffles always from `shuffle_seed`.
    pub fn build(&self, weight_seed: u64) -> Result<Vec<Block<f64>>> {
        let mut rng = Rng::new(weight_seed);
        let mut shuffle_rng = Rng::new(self.shuffle_seed);
        self.blocks
            .iter()
            .enumerate()
            .map(|(i, &kind)| {
                Block::new(
                    &format!("blocks.{i}"),
                    self.block_config(kind),
                    (self.height, self.width),
                    &mut rng,
                    &mut shuffle_rng,
                )
            })
            .collect()
    }

    pub fn relations(&self) -> Result<Vec<Relation>> {
        let blocks = self.build(0)?;
        let mut out = Vec::new();
        for b in &blocks {
            out.extend(Relation::of_block(&b.cfg, &b.plan_for(self.height, self.width)?)?);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeConfig {
    pub epsilon: f64,
    pub threshold: f64,
    pub seeds: Vec<u64>,
    /// Standard deviation of the random weights.
    pub weight_std: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epsilon: DEFAULT_EPSILON,
            threshold: DEFAULT_THRESHOLD,
            seeds: DEFAULT_SEEDS.to_vec(),
            weight_std: 0.5,
        }
    }
}

/// Reject stacks where some weight tensor is identically zero (for example a
/// freshly initialized NWC kernel): it would hide connections.
pub fn check_weights(blocks: &[Block<f64>]) -> Result<()> {
    for b in blocks {
        for p in b.params() {
            if p.trainable && p.value.ndim() >= 2 && p.value.data().iter().all(|&v| v == 0.0) {
                return Err(Error::DegenerateWeights(format!(
                    "{} is all zeros and would mask reachability",
                    p.name
                )));
            }
        }
    }
    Ok(())
}

/// Finite-difference reachability of one fixed set of blocks.
pub fn probe_blocks(
    blocks: &[Block<f64>],
    input: &Tensor<f64>,
    probe: (usize, usize),
    epsilon: f64,
    threshold: f64,
) -> Result<Vec<bool>> {
    check_weights(blocks)?;
    let &[1, c, h, w] = input.shape() else {
        return Err(Error::InvalidShape(format!(
            "probe input must be a single (1, channels, H, W) map, got {:?}",
            input.shape()
        )));
    };
    check_probe((h, w), probe)?;
    let plane = h * w;
    // element 0 is the baseline, element 1 + k perturbs position k
    let batch = Tensor::from_fn([plane + 1, c, h, w], |i| {
        let (n, rest) = (i / (c * plane), i % (c * plane));
        let pos = rest % plane;
        input.data()[rest] + if n == pos + 1 { epsilon } else { 0.0 }
    })?;
    let mut g = Graph::inference();
    let mut x = g.constant(batch)?;
    for b in blocks {
        x = block_forward(&mut g, x, b, Mode::Eval)?;
    }
    let out = g.value(x).data();
    let at = |n: usize, ch: usize| out[(n * c + ch) * plane + probe.0 * w + probe.1];
    Ok((0..plane)
        .map(|k| {
            (0..c).any(|ch| {
                let base = at(0, ch);
                (at(k + 1, ch) - base).abs() > threshold * base.abs().max(1.0)
            })
        })
        .collect())
}

/// Union of the finite-difference sets over `cfg.seeds` random weight draws.
pub fn reachability_probe(spec: &StackSpec, probe: (usize, usize), cfg: &ProbeConfig) -> Result<ReachabilitySet> {
    let (h, w) = (spec.height, spec.width);
    check_probe((h, w), probe)?;
    if cfg.seeds.is_empty() {
        return Err(Error::InvalidConfig("the probe needs at least one seed".into()));
    }
    let mut union = vec![false; h * w];
    for &seed in &cfg.seeds {
        let mut blocks = spec.build(seed)?;
        let mut rng = Rng::new(seed).fork(0x5eed);
        for b in &mut blocks {
            b.randomize(&mut rng, cfg.weight_std);
        }
        let input = rng.normal_tensor::<f64>(&[1, spec.channels, h, w], 1.0)?;
        let hit = probe_blocks(&blocks, &input, probe, cfg.epsilon, cfg.threshold)?;
        union.iter_mut().zip(hit).for_each(|(u, b)| *u |= b);
    }
    Ok(ReachabilitySet {
        method: "finite-difference",
        probe,
        grid: (h, w),
        members: members_of(&union, w),
        threshold: cfg.threshold,
        seeds: cfg.seeds.clone(),
    })
}

/// Symbolic set for a stack description.
pub fn symbolic_for_stack(spec: &StackSpec, probe: (usize, usize)) -> Result<ReachabilitySet> {
    symbolic_reachability(&spec.relations()?, (spec.height, spec.width), probe)
}

/// Parse a relation list such as `attn:2:long, nwc:3, mlp`.
///
/// `attn:M[:mode]` is window attention (random modes draw from `rng`),
/// `nwc:K[:padding]` a depth-wise neighborhood, `mlp` and `norm` pointwise.
pub fn parse_relations(text: &str, grid: (usize, usize), rng: &mut Rng) -> Result<Vec<Relation>> {
    let mut out = Vec::new();
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let parts: Vec<&str> = item.split(':').map(str::trim).collect();
        let num = |i: usize| -> Result<usize> {
            parts
                .get(i)
                .ok_or_else(|| Error::InvalidConfig(format!("{item}: missing size")))?
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{item}: size is not a number")))
        };
        let rel = match parts[0] {
            "attn" => {
                let m = num(1)?;
                let mode: ShuffleMode = parts.get(2).copied().unwrap_or("none").parse()?;
                Relation::Window {
                    window: m,
                    plan: ShufflePlan::new(grid.0, grid.1, m, mode, Some(rng))?,
                }
            }
            "nwc" => {
                let k = num(1)?;
                let padding = match parts.get(2) {
                    Some(p) => p.parse()?,
                    None if k % 2 == 0 => NwcPadding::Same,
                    None => NwcPadding::Centered,
                };
                Relation::nwc(k, padding)?
            }
            "mlp" | "norm" | "pointwise" => Relation::Pointwise,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown layer kind {other:?} (expected attn, nwc, mlp or norm)"
                )))
            }
        };
        out.push(rel);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn kinds(text: &str) -> Vec<BlockKind> {
        StackSpec::parse_blocks(text).unwrap()
    }

    #[test]
    fn single_window_relation_is_window_class() {
        let mut rng = Rng::new(0);
        let rels = parse_relations("attn:2", (4, 4), &mut rng).unwrap();
        let s = symbolic_reachability(&rels, (4, 4), (1, 2)).unwrap();
        assert_eq!(s.members, [(0, 2), (0, 3), (1, 2), (1, 3)]);
    }

    #[test]
    fn nwc_relation_is_chebyshev_ball() {
        let mut rng = Rng::new(0);
        let rels = parse_relations("nwc:7", (11, 11), &mut rng).unwrap();
        let s = symbolic_reachability(&rels, (11, 11), (5, 4)).unwrap();
        let expect: Vec<_> = (2..=8).flat_map(|i| (1..=7).map(move |j| (i, j))).collect();
        assert_eq!(s.members, expect);
    }

    #[test]
    fn unknown_kind_rejected() {
        let mut rng = Rng::new(0);
        assert!(matches!(
            parse_relations("attn:2, conv:3", (4, 4), &mut rng),
            Err(Error::InvalidConfig(_))
        ));
        assert!(StackSpec::parse_blocks("none,sideways").is_err());
        assert!(StackSpec::parse_blocks("none/D").is_err());
    }

    #[test]
    fn degenerate_weights_rejected() {
        let spec = StackSpec::new(4, 2, kinds("none/B"));
        let blocks = spec.build(0).unwrap();
        let input = Tensor::zeros([1, 4, 4, 4]).unwrap();
        assert!(matches!(
            probe_blocks(&blocks, &input, (0, 0), 1e-3, 1e-9),
            Err(Error::DegenerateWeights(_))
        ));
    }

    #[test]
    fn probe_outside_grid_rejected() {
        let spec = StackSpec::new(4, 2, kinds("none"));
        assert!(reachability_probe(&spec, (4, 0), &ProbeConfig::default()).is_err());
    }

    #[test]
    fn fd_matches_symbolic_on_small_stacks() {
        for (grid, window, text) in [
            (8, 2, "none,none"),
            (4, 2, "none,long"),
            (8, 2, "none/A,short/A"),
            (6, 3, "none/B,long/B"),
            (8, 2, "none/C,random/C"),
        ] {
            let spec = StackSpec::new(grid, window, kinds(text));
            for probe in [(0, 0), (grid - 1, 1)] {
                let fd = reachability_probe(&spec, probe, &ProbeConfig::default()).unwrap();
                let sym = symbolic_for_stack(&spec, probe).unwrap();
                assert!(
                    fd.same_members(&sym),
                    "{text} {probe:?}\n{}\n{}",
                    fd.render(),
                    sym.render()
                );
            }
        }
    }

    #[test]
    fn render_marks_probe() {
        let spec = StackSpec::new(4, 2, kinds("none"));
        let s = symbolic_for_stack(&spec, (0, 0)).unwrap();
        assert_eq!(s.render(), "P#..\n##..\n....\n....\n");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn appending_a_layer_never_shrinks(
            seed in 0u64..1000,
            layers in proptest::collection::vec(0usize..6, 1..6),
            extra in 0usize..6,
            pi in 0usize..8,
            pj in 0usize..8,
        ) {
            let names = ["attn:2", "attn:2:long", "attn:2:short", "attn:4:random", "nwc:3", "mlp"];
            let text: Vec<&str> = layers.iter().map(|&i| names[i]).collect();
            let mut rng = Rng::new(seed);
            let rels = parse_relations(&text.join(","), (8, 8), &mut rng).unwrap();
            let before = symbolic_reachability(&rels, (8, 8), (pi, pj)).unwrap();
            let mut more = rels.clone();
            more.extend(parse_relations(names[extra], (8, 8), &mut rng).unwrap());
            let after = symbolic_reachability(&more, (8, 8), (pi, pj)).unwrap();
            prop_assert!(before.is_subset_of(&after));
        }
    }
}
