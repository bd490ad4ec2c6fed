use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::{Conv2dSpec, Graph, Padding2d, Param, StatUpdate, Var};
use crate::layers::{BatchNorm2d, Conv, Mode, Module, INIT_STD};
use crate::model::block::{block_forward, Block};
use crate::model::config::ModelConfig;
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

/// `conv3x3/2 (in -> C/2) -> BN -> GELU -> conv3x3/2 (C/2 -> C) -> BN`.
#[derive(Clone, Debug)]
pub struct TokenEmbed<T> {
    pub conv1: Conv<T>,
    pub norm1: BatchNorm2d<T>,
    pub conv2: Conv<T>,
    pub norm2: BatchNorm2d<T>,
}

impl<T: Element> TokenEmbed<T> {
    pub fn new(name: &str, in_channels: usize, channels: usize, rng: &mut Rng) -> Result<Self> {
        let spec = Conv2dSpec::new(2, Padding2d::uniform(1), 1);
        let mid = channels / 2;
        Ok(TokenEmbed {
            conv1: Conv::new(&format!("{name}.conv1"), in_channels, mid, 3, spec, false, rng)?,
            norm1: BatchNorm2d::new(&format!("{name}.norm1"), mid)?,
            conv2: Conv::new(&format!("{name}.conv2"), mid, channels, 3, spec, false, rng)?,
            norm2: BatchNorm2d::new(&format!("{name}.norm2"), channels)?,
        })
    }

    /// Quarter resolution; the input extents must be multiples of 4.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 4 || !shape[2].is_multiple_of(4) || !shape[3].is_multiple_of(4) {
            return Err(Error::InvalidShape(format!(
                "token embedding needs a (batch, channels, H, W) input with H and W divisible by 4, got {shape:?}"
            )));
        }
        let h = self.conv1.forward(g, x)?;
        let h = self.norm1.forward(g, h, mode)?;
        let h = g.gelu(h)?;
        let h = self.conv2.forward(g, h)?;
        self.norm2.forward(g, h, mode)
    }
}

impl<T: Element> Module<T> for TokenEmbed<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.conv1.visit(f);
        self.norm1.visit(f);
        self.conv2.visit(f);
        self.norm2.visit(f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param<T>)) {
        self.conv1.visit_mut(f);
        self.norm1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.norm2.visit_mut(f);
    }
}

/// 2x2 stride-2 convolution doubling the channels.
pub fn token_merge_layer<T: Element>(name: &str, channels: usize, rng: &mut Rng) -> Result<Conv<T>> {
    let spec = Conv2dSpec::new(2, Padding2d::none(), 1);
    Conv::new(name, channels, 2 * channels, 2, spec, true, rng)
}

pub fn token_merge<T: Element>(g: &mut Graph<T>, x: Var, merge: &Conv<T>) -> Result<Var> {
    let shape = g.shape(x);
    if shape.len() != 4 || !shape[2].is_multiple_of(2) || !shape[3].is_multiple_of(2) {
        return Err(Error::InvalidShape(format!(
            "token merging needs even spatial extents, got {shape:?}"
        )));
    }
    merge.forward(g, x)
}

/// Linear classifier with the weight stored `(in, out)`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Element> Linear<T> {
    pub fn new(name: &str, inputs: usize, outputs: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Linear {
            weight: Param::new(
                format!("{name}.weight"),
                Tensor::from_fn([inputs, outputs], |_| T::of(rng.truncated_normal(INIT_STD)))?,
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros([outputs])?),
        })
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight)?;
        let b = g.param(&self.bias)?;
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

impl<T: Element> Module<T> for Linear<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Embedding, stages of blocks separated by token merging, then
/// `BN -> global average pool -> linear`.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub embed: TokenEmbed<T>,
    pub stages: Vec<Vec<Block<T>>>,
    pub merges: Vec<Conv<T>>,
    pub head_norm: BatchNorm2d<T>,
    pub head: Linear<T>,
}

impl<T: Element> Model<T> {
    /// Weights are drawn from `rng`; random shuffles from `cfg.shuffle_seed`
    /// so that a configuration alone pins every permutation.
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let grids = cfg.stage_resolutions(cfg.resolution, cfg.resolution)?;
        let mut shuffle_rng = Rng::new(cfg.shuffle_seed);
        let embed = TokenEmbed::new("embed", cfg.in_channels, cfg.channels, rng)?;
        let mut stages = Vec::with_capacity(cfg.stages());
        let mut merges = Vec::new();
        for (s, (&depth, &grid)) in cfg.depths.iter().zip(&grids).enumerate() {
            if s > 0 {
                merges.push(token_merge_layer(
                    &format!("merges.{}", s - 1),
                    cfg.stage_channels(s - 1),
                    rng,
                )?);
            }
            let blocks = (0..depth)
                .map(|i| {
                    Block::new(
                        &format!("stages.{s}.blocks.{i}"),
                        cfg.block_config(s, i),
                        grid,
                        rng,
                        &mut shuffle_rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
        }
        let c = cfg.final_channels();
        Ok(Model {
            cfg: cfg.clone(),
            embed,
            stages,
            merges,
            head_norm: BatchNorm2d::new("head_norm", c)?,
            head: Linear::new("head", c, cfg.num_classes, rng)?,
        })
    }

    /// Feature map after every stage.
    pub fn forward_stages(&self, g: &mut Graph<T>, images: Var, mode: Mode) -> Result<Vec<Var>> {
        let shape = g.shape(images).to_vec();
        let &[_, c, h, w] = shape.as_slice() else {
            return Err(Error::InvalidShape(format!(
                "expected (batch, channels, H, W) images, got {shape:?}"
            )));
        };
        if c != self.cfg.in_channels {
            return Err(Error::InvalidShape(format!(
                "model takes {} input channels, got {c}",
                self.cfg.in_channels
            )));
        }
        self.cfg.stage_resolutions(h, w)?;
        let mut x = self.embed.forward(g, images, mode)?;
        let mut outs = Vec::with_capacity(self.stages.len());
        for (s, blocks) in self.stages.iter().enumerate() {
            if s > 0 {
                x = token_merge(g, x, &self.merges[s - 1])?;
            }
            for b in blocks {
                x = block_forward(g, x, b, mode)?;
            }
            outs.push(x);
        }
        Ok(outs)
    }

    /// `(batch, num_classes)` logits.
    pub fn forward(&self, g: &mut Graph<T>, images: Var, mode: Mode) -> Result<Var> {
        let feats = self.forward_stages(g, images, mode)?;
        let last = *feats.last().expect("at least one stage");
        let x = self.head_norm.forward(g, last, mode)?;
        let pooled = g.mean_pool_hw(x)?;
        self.head.forward(g, pooled)
    }

    /// Eval-mode logits without recording gradients.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let x = g.constant(images.clone())?;
        let y = self.forward(&mut g, x, Mode::Eval)?;
        Ok(g.value(y).clone())
    }

    pub fn norms_mut(&mut self) -> Vec<&mut BatchNorm2d<T>> {
        let mut out = vec![&mut self.embed.norm1, &mut self.embed.norm2];
        for b in self.stages.iter_mut().flatten() {
            out.extend(b.norms_mut());
        }
        out.push(&mut self.head_norm);
        out
    }

    /// Fold train-mode batch statistics into the running ones.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate<T>]) -> Result<()> {
        let mut by_name: HashMap<&str, &StatUpdate<T>> = updates.iter().map(|u| (u.name.as_str(), u)).collect();
        for norm in self.norms_mut() {
            if let Some(u) = by_name.remove(norm.name.as_str()) {
                norm.apply(u);
            }
        }
        match by_name.keys().next() {
            Some(name) => Err(Error::InvalidCall(format!("statistics for unknown norm {name}"))),
            None => Ok(()),
        }
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Block<T>> {
        self.stages.iter().flatten()
    }
}

impl<T: Element> Module<T> for Model<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.embed.visit(f);
        for (s, blocks) in self.stages.iter().enumerate() {
            if s > 0 {
                self.merges[s - 1].visit(f);
            }
            for b in blocks {
                b.visit(f);
            }
        }
        self.head_norm.visit(f);
        self.head.visit(f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param<T>)) {
        self.embed.visit_mut(f);
        let mut merges = self.merges.iter_mut();
        for (s, blocks) in self.stages.iter_mut().enumerate() {
            if s > 0 {
                if let Some(m) = merges.next() {
                    m.visit_mut(f);
                }
            }
            for b in blocks {
                b.visit_mut(f);
            }
        }
        self.head_norm.visit_mut(f);
        self.head.visit_mut(f);
    }
}
