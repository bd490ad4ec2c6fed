use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Graph, Param, Var};
use crate::layers::{
    mlp_forward, nwc_forward, wmsa_forward, BatchNorm2d, MlpParams, Mode, Module, NwcParams, WmsaParams,
};
use crate::model::config::{BlockConfig, NwcPosition};
use crate::rng::Rng;
use crate::tensor::Element;
use crate::windowing::{ShuffleMode, ShufflePlan, WindowGrid, WindowLayout};

/// One block:
///
/// ```text
/// x  = attn(BN(z)) + z
/// y  = NWC(x) + x
/// z' = MLP(BN(y)) + y
/// ```
///
/// where `attn` is window attention, preceded by the shuffled partition and
/// followed by the aligned reverse when the block shuffles.
#[derive(Clone, Debug)]
pub struct Block<T> {
    pub cfg: BlockConfig,
    pub norm1: BatchNorm2d<T>,
    pub attn: WmsaParams<T>,
    /// Present for positions A and B; position C lives inside `mlp`.
    pub nwc: Option<NwcParams<T>>,
    pub norm2: BatchNorm2d<T>,
    pub mlp: MlpParams<T>,
    plan: ShufflePlan,
}

impl<T: Element> Block<T> {
    /// `resolution` fixes the token grid the block was built for; a random
    /// shuffle is drawn from `shuffle_rng` here and frozen.
    pub fn new(
        name: &str,
        cfg: BlockConfig,
        resolution: (usize, usize),
        rng: &mut Rng,
        shuffle_rng: &mut Rng,
    ) -> Result<Self> {
        let (h, w) = resolution;
        WindowGrid::new(h, w, cfg.window)?;
        let plan = ShufflePlan::new(h, w, cfg.window, cfg.shuffle, Some(shuffle_rng))?;
        let c = cfg.channels;
        let attn = WmsaParams::new(
            &format!("{name}.attn"),
            c,
            cfg.head_dim,
            cfg.window,
            cfg.qkv_bias,
            cfg.rel_pos_bias,
            rng,
        )?;
        let mut mlp = MlpParams::new(&format!("{name}.mlp"), c, cfg.mlp_ratio, rng)?;
        let nwc = match cfg.nwc {
            NwcPosition::A | NwcPosition::B => Some(NwcParams::new(
                &format!("{name}.nwc"),
                c,
                cfg.window,
                cfg.nwc_padding,
                rng,
            )?),
            NwcPosition::C => {
                mlp.hidden_nwc = Some(NwcParams::new(
                    &format!("{name}.mlp.nwc"),
                    mlp.hidden(),
                    cfg.window,
                    cfg.nwc_padding,
                    rng,
                )?);
                None
            }
            NwcPosition::None => None,
        };
        Ok(Block {
            norm1: BatchNorm2d::new(&format!("{name}.norm1"), c)?,
            norm2: BatchNorm2d::new(&format!("{name}.norm2"), c)?,
            attn,
            nwc,
            mlp,
            plan,
            cfg,
        })
    }

    /// The frozen shuffle for the construction grid, recomputed for other
    /// grids when the mode is deterministic.
    pub fn plan_for(&self, h: usize, w: usize) -> Result<ShufflePlan> {
        if self.plan.height() == h && self.plan.width() == w {
            return Ok(self.plan.clone());
        }
        if self.cfg.shuffle == ShuffleMode::Random {
            return Err(Error::InvalidConfig(format!(
                "random shuffle was drawn for a {}x{} grid, got {h}x{w}",
                self.plan.height(),
                self.plan.width()
            )));
        }
        ShufflePlan::new(h, w, self.cfg.window, self.cfg.shuffle, None)
    }

    pub fn norms_mut(&mut self) -> [&mut BatchNorm2d<T>; 2] {
        [&mut self.norm1, &mut self.norm2]
    }
}

impl<T: Element> Module<T> for Block<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.norm1.visit(f);
        self.attn.visit(f);
        if let Some(n) = &self.nwc {
            n.visit(f);
        }
        self.norm2.visit(f);
        self.mlp.visit(f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param<T>)) {
        self.norm1.visit_mut(f);
        self.attn.visit_mut(f);
        if let Some(n) = &mut self.nwc {
            n.visit_mut(f);
        }
        self.norm2.visit_mut(f);
        self.mlp.visit_mut(f);
    }
}

pub fn block_forward<T: Element>(g: &mut Graph<T>, z: Var, block: &Block<T>, mode: Mode) -> Result<Var> {
    let shape = g.shape(z).to_vec();
    let &[_, c, h, w] = shape.as_slice() else {
        return Err(Error::InvalidShape(format!(
            "block expects a feature map, got {shape:?}"
        )));
    };
    if c != block.cfg.channels {
        return Err(Error::InvalidConfig(format!(
            "block built for {} channels, got {c}",
            block.cfg.channels
        )));
    }
    let plan = block.plan_for(h, w)?;
    let layout = WindowLayout::new(&shape, block.cfg.window, Some(&plan))?;

    let mut u = block.norm1.forward(g, z, mode)?;
    if block.cfg.nwc == NwcPosition::A {
        u = nwc_forward(g, u, block.nwc.as_ref().expect("position A has an NWC"))?;
    }
    let wins = g.gather(u, Arc::from(layout.partition_index()), &layout.windows_shape())?;
    let a = wmsa_forward(g, wins, &block.attn)?;
    let a = g.gather(a, Arc::from(layout.reverse_index()), &layout.image_shape())?;
    let x = g.add(a, z)?;
    let y = match (&block.nwc, block.cfg.nwc) {
        (Some(nwc), NwcPosition::B) => nwc_forward(g, x, nwc)?,
        _ => x,
    };
    let v = block.norm2.forward(g, y, mode)?;
    let m = mlp_forward(g, v, &block.mlp)?;
    g.add(m, y)
}

/// A plain block followed by a shuffling one.
pub fn block_pair_forward<T: Element>(g: &mut Graph<T>, z: Var, pair: [&Block<T>; 2], mode: Mode) -> Result<Var> {
    if pair[0].cfg.shuffle != ShuffleMode::Identity {
        return Err(Error::InvalidConfig(format!(
            "the first block of a pair must not shuffle (got {})",
            pair[0].cfg.shuffle
        )));
    }
    let z = block_forward(g, z, pair[0], mode)?;
    block_forward(g, z, pair[1], mode)
}
