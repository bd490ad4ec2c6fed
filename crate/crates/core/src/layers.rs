//! Learnable sub-layers: window attention, the neighbor-window connection,
//! the 1x1-conv MLP, plus the conv and batch-norm wrappers they are made of.

use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{BnMode, Conv2dSpec, Graph, Padding2d, Param, StatUpdate, Var};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const INIT_STD: f64 = 0.02;

/// Whether batch norms use batch statistics (and report them) or running ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Anything owning named parameters.
pub trait Module<T: Element> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>));

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param<T>));

    fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        self.visit_mut(&mut |p| out.push(p));
        out
    }

    /// Number of trainable scalars.
    fn num_trainable(&self) -> usize {
        self.params()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Redraw every trainable tensor from `N(0, std^2)` (biases and affines included).
    fn randomize(&mut self, rng: &mut Rng, std: f64) {
        for p in self.params_mut() {
            if p.trainable {
                p.value
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = T::of(rng.normal() * std));
            }
        }
    }
}

fn trunc_normal<T: Element>(rng: &mut Rng, shape: &[usize]) -> Result<Tensor<T>> {
    Tensor::from_fn(shape.to_vec(), |_| T::of(rng.truncated_normal(INIT_STD)))
}

/// Convolution layer with an optional bias.
#[derive(Clone, Debug)]
pub struct Conv<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub spec: Conv2dSpec,
}

impl<T: Element> Conv<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        spec: Conv2dSpec,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if spec.groups == 0 || !c_in.is_multiple_of(spec.groups) || !c_out.is_multiple_of(spec.groups) {
            return Err(Error::InvalidConfig(format!(
                "{name}: {c_in} -> {c_out} channels not divisible into {} groups",
                spec.groups
            )));
        }
        let weight = trunc_normal(rng, &[c_out, c_in / spec.groups, kernel, kernel])?;
        Ok(Conv {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: if bias {
                Some(Param::new(format!("{name}.bias"), Tensor::zeros([c_out])?))
            } else {
                None
            },
            spec,
        })
    }

    pub fn pointwise(name: &str, c_in: usize, c_out: usize, bias: bool, rng: &mut Rng) -> Result<Self> {
        Self::new(name, c_in, c_out, 1, Conv2dSpec::default(), bias, rng)
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight)?;
        let b = self.bias.as_ref().map(|b| g.param(b)).transpose()?;
        g.conv2d(x, w, b, self.spec)
    }

    pub fn zero(&mut self) {
        for p in self.params_mut() {
            p.value.data_mut().fill(T::zero());
        }
    }
}

impl<T: Element> Module<T> for Conv<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// Per-channel batch norm with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub name: String,
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
}

impl<T: Element> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            name: name.to_string(),
            weight: Param::new(format!("{name}.weight"), Tensor::ones([channels])?),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros([channels])?),
            running_mean: Param::buffer(format!("{name}.running_mean"), Tensor::zeros([channels])?),
            running_var: Param::buffer(format!("{name}.running_var"), Tensor::ones([channels])?),
        })
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(&self.weight)?;
        let beta = g.param(&self.bias)?;
        let bn_mode = match mode {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval {
                mean: self.running_mean.value.data(),
                var: self.running_var.value.data(),
            },
        };
        let (y, stats) = g.batch_norm(x, gamma, beta, bn_mode, T::of(BN_EPS))?;
        if let Some((mean, var)) = stats {
            g.record_stat_update(StatUpdate {
                name: self.name.clone(),
                mean,
                var,
            });
        }
        Ok(y)
    }

    /// Fold batch statistics into the running ones with momentum 0.1.
    pub fn apply(&mut self, update: &StatUpdate<T>) {
        let m = T::of(BN_MOMENTUM);
        let keep = T::one() - m;
        for (r, &b) in self.running_mean.value.data_mut().iter_mut().zip(&update.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.value.data_mut().iter_mut().zip(&update.var) {
            *r = keep * *r + m * b;
        }
    }

    /// Reset to the identity map in eval mode (up to the eps term).
    pub fn neutralize(&mut self) {
        self.weight.value.data_mut().fill(T::one());
        self.bias.value.data_mut().fill(T::zero());
        self.running_mean.value.data_mut().fill(T::zero());
        self.running_var.value.data_mut().fill(T::one());
    }
}

impl<T: Element> Module<T> for BatchNorm2d<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
        f(&self.bias);
        f(&self.running_mean);
        f(&self.running_var);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

/// Window-based multi-head self-attention over `(windows, channels, m, m)` tensors.
#[derive(Clone, Debug)]
pub struct WmsaParams<T> {
    pub q: Conv<T>,
    pub k: Conv<T>,
    pub v: Conv<T>,
    pub proj: Conv<T>,
    pub heads: usize,
    pub head_dim: usize,
    pub window: usize,
    /// `(heads, (2m-1)^2)` table indexed by relative offset; absent by default.
    pub rel_pos_bias: Option<Param<T>>,
}

impl<T: Element> WmsaParams<T> {
    pub fn new(
        name: &str,
        channels: usize,
        head_dim: usize,
        window: usize,
        qkv_bias: bool,
        rel_pos_bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if head_dim == 0 || !channels.is_multiple_of(head_dim) {
            return Err(Error::InvalidConfig(format!(
                "{name}: {channels} channels are not a whole number of {head_dim}-wide heads"
            )));
        }
        let table = (2 * window - 1) * (2 * window - 1);
        let heads = channels / head_dim;
        Ok(WmsaParams {
            q: Conv::pointwise(&format!("{name}.q"), channels, channels, qkv_bias, rng)?,
            k: Conv::pointwise(&format!("{name}.k"), channels, channels, qkv_bias, rng)?,
            v: Conv::pointwise(&format!("{name}.v"), channels, channels, qkv_bias, rng)?,
            proj: Conv::pointwise(&format!("{name}.proj"), channels, channels, true, rng)?,
            heads,
            head_dim,
            window,
            rel_pos_bias: if rel_pos_bias {
                Some(Param::new(
                    format!("{name}.rel_pos_bias"),
                    trunc_normal(rng, &[heads, table])?,
                ))
            } else {
                None
            },
        })
    }

    pub fn channels(&self) -> usize {
        self.heads * self.head_dim
    }
}

impl<T: Element> Module<T> for WmsaParams<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        for c in [&self.q, &self.k, &self.v, &self.proj] {
            c.visit(f);
        }
        if let Some(b) = &self.rel_pos_bias {
            f(b);
        }
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param<T>)) {
        for c in [&mut self.q, &mut self.k, &mut self.v, &mut self.proj] {
            c.visit_mut(f);
        }
        if let Some(b) = &mut self.rel_pos_bias {
            f(b);
        }
    }
}

/// `(query, key)` -> offset-table entry for an `m x m` window.
fn relative_index(m: usize) -> Vec<usize> {
    let span = 2 * m - 1;
    let mut idx = Vec::with_capacity(m.pow(4));
    for qi in 0..m * m {
        for ki in 0..m * m {
            let dr = qi / m + m - 1 - ki / m;
            let dc = qi % m + m - 1 - ki % m;
            idx.push(dr * span + dc);
        }
    }
    idx
}

/// Multi-head attention independently inside each window:
/// `proj(softmax(q k^T / sqrt(d)) v)` with heads split along channels.
pub fn wmsa_forward<T: Element>(g: &mut Graph<T>, wins: Var, p: &WmsaParams<T>) -> Result<Var> {
    let shape = g.shape(wins).to_vec();
    let &[n, c, wm, wn] = shape.as_slice() else {
        return Err(Error::InvalidShape(format!("attention expects windows, got {shape:?}")));
    };
    if c != p.channels() {
        return Err(Error::InvalidConfig(format!(
            "attention configured for {} channels ({} heads x {}), got {c}",
            p.channels(),
            p.heads,
            p.head_dim
        )));
    }
    if wm != p.window || wn != p.window {
        return Err(Error::InvalidShape(format!(
            "attention configured for {0}x{0} windows, got {wm}x{wn}",
            p.window
        )));
    }
    let (h, d, t) = (p.heads, p.head_dim, wm * wn);
    let q = p.q.forward(g, wins)?;
    let k = p.k.forward(g, wins)?;
    let v = p.v.forward(g, wins)?;
    let q = g.reshape_permute(q, &[n * h, d, t], &[0, 2, 1])?;
    let k = g.reshape(k, &[n * h, d, t])?;
    let v = g.reshape_permute(v, &[n * h, d, t], &[0, 2, 1])?;
    let logits = g.matmul(q, k)?;
    let mut logits = g.scale(logits, T::of(1.0 / (d as f64).sqrt()))?;
    if let Some(table) = &p.rel_pos_bias {
        let tv = g.param(table)?;
        let idx = relative_index(p.window);
        let span = (2 * p.window - 1).pow(2);
        let full: Vec<usize> = (0..h).flat_map(|hh| idx.iter().map(move |&i| hh * span + i)).collect();
        let bias = g.gather(tv, Arc::from(full), &[h, t, t])?;
        let l4 = g.reshape(logits, &[n, h, t, t])?;
        let l4 = g.add(l4, bias)?;
        logits = g.reshape(l4, &[n * h, t, t])?;
    }
    let attn = g.softmax(logits)?;
    let out = g.matmul(attn, v)?;
    let out = g.permute(out, &[0, 2, 1])?;
    let out = g.reshape(out, &[n, c, wm, wn])?;
    p.proj.forward(g, out)
}

/// How the neighbor-window depth-wise convolution pads its input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NwcPadding {
    /// `(k - 1) / 2` on every side; rejects even kernels.
    #[default]
    Centered,
    /// `(k - 1) / 2` before and `k / 2` after, so even kernels keep the resolution.
    Same,
}

impl NwcPadding {
    pub fn as_str(self) -> &'static str {
        match self {
            NwcPadding::Centered => "centered",
            NwcPadding::Same => "same",
        }
    }

    pub fn resolve(self, kernel: usize) -> Result<Padding2d> {
        let before = (kernel - 1) / 2;
        match self {
            NwcPadding::Centered if kernel.is_multiple_of(2) => Err(Error::InvalidConfig(format!(
                "even neighbor-window kernel {kernel} needs the `same` padding rule"
            ))),
            NwcPadding::Centered => Ok(Padding2d::uniform(before)),
            NwcPadding::Same => Ok(Padding2d::split(before, kernel - 1 - before)),
        }
    }
}

impl serde::Serialize for NwcPadding {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl FromStr for NwcPadding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "centered" => Ok(NwcPadding::Centered),
            "same" => Ok(NwcPadding::Same),
            other => Err(Error::InvalidConfig(format!(
                "unknown padding rule {other:?} (expected centered or same)"
            ))),
        }
    }
}

/// Residual depth-wise convolution whose kernel spans one window.
#[derive(Clone, Debug)]
pub struct NwcParams<T> {
    pub conv: Conv<T>,
    pub window: usize,
}

impl<T: Element> NwcParams<T> {
    /// Zero-initialized, so the layer starts as the identity.
    pub fn new(name: &str, channels: usize, window: usize, padding: NwcPadding, rng: &mut Rng) -> Result<Self> {
        let spec = Conv2dSpec::new(1, padding.resolve(window)?, channels);
        let mut conv = Conv::new(name, channels, channels, window, spec, true, rng)?;
        conv.zero();
        Ok(NwcParams { conv, window })
    }
}

impl<T: Element> Module<T> for NwcParams<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.conv.visit(f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param<T>)) {
        self.conv.visit_mut(f);
    }
}

/// `x + depthwise(x)`, resolution preserved.
pub fn nwc_forward<T: Element>(g: &mut Graph<T>, x: Var, p: &NwcParams<T>) -> Result<Var> {
    let kernel = p.conv.weight.value.shape()[2];
    if kernel != p.window {
        return Err(Error::InvalidConfig(format!(
            "neighbor-window kernel {kernel} differs from window {}",
            p.window
        )));
    }
    let y = p.conv.forward(g, x)?;
    if g.shape(y) != g.shape(x) {
        return Err(Error::InvalidShape(format!(
            "neighbor-window connection changed resolution {:?} -> {:?}",
            g.shape(x),
            g.shape(y)
        )));
    }
    g.add(x, y)
}

/// Two pointwise convolutions around a GELU; optionally a neighbor-window
/// connection on the hidden activations.
#[derive(Clone, Debug)]
pub struct MlpParams<T> {
    pub fc1: Conv<T>,
    pub fc2: Conv<T>,
    pub hidden_nwc: Option<NwcParams<T>>,
}

impl<T: Element> MlpParams<T> {
    pub fn new(name: &str, channels: usize, ratio: usize, rng: &mut Rng) -> Result<Self> {
        let hidden = channels * ratio;
        Ok(MlpParams {
            fc1: Conv::pointwise(&format!("{name}.fc1"), channels, hidden, true, rng)?,
            fc2: Conv::pointwise(&format!("{name}.fc2"), hidden, channels, true, rng)?,
            hidden_nwc: None,
        })
    }

    pub fn hidden(&self) -> usize {
        self.fc1.weight.value.shape()[0]
    }
}

impl<T: Element> Module<T> for MlpParams<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.fc1.visit(f);
        if let Some(n) = &self.hidden_nwc {
            n.visit(f);
        }
        self.fc2.visit(f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param<T>)) {
        self.fc1.visit_mut(f);
        if let Some(n) = &mut self.hidden_nwc {
            n.visit_mut(f);
        }
        self.fc2.visit_mut(f);
    }
}

/// `fc2(gelu(fc1(x)))`, pointwise in space unless a hidden NWC is present.
/// The block adds the residual.
pub fn mlp_forward<T: Element>(g: &mut Graph<T>, x: Var, p: &MlpParams<T>) -> Result<Var> {
    let c_in = g.shape(x).get(1).copied().unwrap_or(0);
    let expected = p.fc1.weight.value.shape()[1];
    if c_in != expected || p.fc2.weight.value.shape()[1] != p.hidden() {
        return Err(Error::InvalidConfig(format!(
            "mlp widths inconsistent: input {c_in}, fc1 expects {expected}, hidden {}",
            p.hidden()
        )));
    }
    let h = p.fc1.forward(g, x)?;
    let mut h = g.gelu(h)?;
    if let Some(nwc) = &p.hidden_nwc {
        h = nwc_forward(g, h, nwc)?;
    }
    p.fc2.forward(g, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_module_gradients, weighted_sum};
    use crate::windowing::{window_partition, WindowGrid};

    fn rng() -> Rng {
        Rng::new(42)
    }

    fn randomized<M: Module<f64>>(mut m: M, seed: u64) -> M {
        m.randomize(&mut Rng::new(seed), 0.5);
        m
    }

    #[test]
    fn wmsa_single_token_window() {
        let mut r = rng();
        let p: WmsaParams<f64> = randomized(WmsaParams::new("a", 4, 2, 1, true, false, &mut r).unwrap(), 1);
        let x = r.normal_tensor::<f64>(&[3, 4, 1, 1], 1.0).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let y = wmsa_forward(&mut g, xv, &p).unwrap();
        // softmax over a single key is 1, so the output is proj(v(x))
        let mut g2 = Graph::new();
        let xv2 = g2.constant(x).unwrap();
        let v = p.v.forward(&mut g2, xv2).unwrap();
        let o = p.proj.forward(&mut g2, v).unwrap();
        assert!(g.value(y).max_abs_diff(g2.value(o)).unwrap() < 1e-14);
    }

    #[test]
    fn wmsa_identical_tokens_give_identical_outputs() {
        let mut r = rng();
        let p: WmsaParams<f64> = randomized(WmsaParams::new("a", 4, 2, 3, true, false, &mut r).unwrap(), 2);
        let token = [0.3, -1.2, 0.7, 2.0];
        let x = Tensor::from_fn([1, 4, 3, 3], |i| token[i / 9]).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x).unwrap();
        let y = wmsa_forward(&mut g, xv, &p).unwrap();
        for c in 0..4 {
            let plane = &g.value(y).data()[c * 9..][..9];
            assert!(plane.iter().all(|&v| (v - plane[0]).abs() < 1e-13));
        }
    }

    #[test]
    fn wmsa_channel_mismatch() {
        let mut r = rng();
        assert!(WmsaParams::<f64>::new("a", 6, 4, 2, true, false, &mut r).is_err());
        let p = WmsaParams::<f64>::new("a", 4, 2, 2, true, false, &mut r).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([1, 6, 2, 2]).unwrap()).unwrap();
        assert!(matches!(wmsa_forward(&mut g, x, &p), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn wmsa_never_crosses_windows() {
        let mut r = rng();
        let p: WmsaParams<f64> = randomized(WmsaParams::new("a", 4, 2, 2, true, false, &mut r).unwrap(), 3);
        let img = r.normal_tensor::<f64>(&[1, 4, 4, 4], 1.0).unwrap();
        let run = |x: &Tensor<f64>| {
            let wins = window_partition(x, 2).unwrap();
            let mut g = Graph::new();
            let xv = g.constant(wins).unwrap();
            let y = wmsa_forward(&mut g, xv, &p).unwrap();
            g.value(y).clone()
        };
        let base = run(&img);
        let grid = WindowGrid::new(4, 4, 2).unwrap();
        for pos in 0..16 {
            let mut pert = img.clone();
            for c in 0..4 {
                pert.data_mut()[c * 16 + pos] += 1e-3;
            }
            let out = run(&pert);
            let (src_win, _, _) = grid.locate(pos / 4, pos % 4);
            for win in 0..4 {
                let diff = (0..16)
                    .map(|i| (out.data()[win * 16 + i] - base.data()[win * 16 + i]).abs())
                    .fold(0.0, f64::max);
                if win == src_win {
                    assert!(diff > 1e-9);
                } else {
                    assert!(diff < 1e-12, "window {win} moved by {diff}");
                }
            }
        }
    }

    #[test]
    fn wmsa_is_permutation_equivariant_within_a_window() {
        let mut r = rng();
        let p: WmsaParams<f64> = randomized(WmsaParams::new("a", 4, 2, 2, true, false, &mut r).unwrap(), 4);
        let x = r.normal_tensor::<f64>(&[1, 4, 2, 2], 1.0).unwrap();
        let perm = [2usize, 0, 3, 1];
        let permute = |t: &Tensor<f64>| Tensor::from_fn([1, 4, 2, 2], |i| t.data()[(i / 4) * 4 + perm[i % 4]]).unwrap();
        let run = |x: Tensor<f64>| {
            let mut g = Graph::new();
            let xv = g.constant(x).unwrap();
            let y = wmsa_forward(&mut g, xv, &p).unwrap();
            g.value(y).clone()
        };
        let a = permute(&run(x.clone()));
        let b = run(permute(&x));
        assert!(a.max_abs_diff(&b).unwrap() < 1e-13);
    }

    #[test]
    fn relative_position_bias_changes_output() {
        let mut r = rng();
        let plain: WmsaParams<f64> = WmsaParams::new("a", 4, 2, 2, true, false, &mut r).unwrap();
        let mut biased = plain.clone();
        biased.rel_pos_bias = Some(Param::new(
            "a.rel_pos_bias",
            Tensor::from_fn([2, 9], |i| i as f64 * 0.1).unwrap(),
        ));
        let x = r.normal_tensor::<f64>(&[1, 4, 2, 2], 1.0).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x).unwrap();
        let a = wmsa_forward(&mut g, xv, &plain).unwrap();
        let b = wmsa_forward(&mut g, xv, &biased).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)).unwrap() > 1e-6);
        assert_eq!(relative_index(2)[0], 4); // (0,0) vs (0,0): centre of the 3x3 table
    }

    #[test]
    fn nwc_zero_kernel_is_identity() {
        let mut r = rng();
        let p = NwcParams::<f64>::new("n", 3, 7, NwcPadding::Centered, &mut r).unwrap();
        let x = r.normal_tensor::<f64>(&[2, 3, 7, 7], 1.0).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let y = nwc_forward(&mut g, xv, &p).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn nwc_reach_and_channel_isolation() {
        let mut r = rng();
        let p: NwcParams<f64> = randomized(NwcParams::new("n", 2, 7, NwcPadding::Centered, &mut r).unwrap(), 5);
        let x = r.normal_tensor::<f64>(&[1, 2, 11, 11], 1.0).unwrap();
        let run = |x: &Tensor<f64>| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone()).unwrap();
            let y = nwc_forward(&mut g, xv, &p).unwrap();
            g.value(y).clone()
        };
        let base = run(&x);
        let (ph, pw) = (5usize, 4usize);
        let mut pert = x.clone();
        pert.data_mut()[ph * 11 + pw] += 1e-3; // channel 0 only
        let out = run(&pert);
        for c in 0..2 {
            for h in 0..11 {
                for w in 0..11 {
                    let i = (c * 11 + h) * 11 + w;
                    let moved = (out.data()[i] - base.data()[i]).abs() > 1e-12;
                    let inside = h.abs_diff(ph) <= 3 && w.abs_diff(pw) <= 3;
                    assert_eq!(moved, c == 0 && inside, "c={c} h={h} w={w}");
                }
            }
        }
    }

    #[test]
    fn nwc_even_kernel_needs_padding_rule() {
        let mut r = rng();
        assert!(matches!(
            NwcParams::<f64>::new("n", 2, 2, NwcPadding::Centered, &mut r),
            Err(Error::InvalidConfig(_))
        ));
        let p = NwcParams::<f64>::new("n", 2, 2, NwcPadding::Same, &mut r).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones([1, 2, 4, 4]).unwrap()).unwrap();
        let y = nwc_forward(&mut g, x, &p).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 4, 4]);
    }

    #[test]
    fn mlp_zero_weights_and_locality() {
        let mut r = rng();
        let mut p = MlpParams::<f64>::new("m", 3, 4, &mut r).unwrap();
        assert_eq!(p.hidden(), 12);
        for q in p.params_mut() {
            q.value.data_mut().fill(0.0);
        }
        let x = r.normal_tensor::<f64>(&[1, 3, 4, 4], 1.0).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let y = mlp_forward(&mut g, xv, &p).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let p: MlpParams<f64> = randomized(MlpParams::new("m", 3, 4, &mut r).unwrap(), 6);
        let run = |x: &Tensor<f64>| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone()).unwrap();
            let y = mlp_forward(&mut g, xv, &p).unwrap();
            g.value(y).clone()
        };
        let base = run(&x);
        let mut pert = x.clone();
        pert.data_mut()[16 + 5] += 1e-3;
        let out = run(&pert);
        for i in 0..out.numel() {
            let moved = (out.data()[i] - base.data()[i]).abs() > 1e-12;
            assert_eq!(moved, i % 16 == 5);
        }
    }

    #[test]
    fn mlp_matches_per_pixel_perceptron() {
        let mut r = rng();
        let p: MlpParams<f64> = randomized(MlpParams::new("m", 3, 4, &mut r).unwrap(), 7);
        let x = r.normal_tensor::<f64>(&[2, 3, 2, 3], 1.0).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let y = mlp_forward(&mut g, xv, &p).unwrap();
        let w1 = p.fc1.weight.value.data();
        let b1 = p.fc1.bias.as_ref().unwrap().value.data();
        let w2 = p.fc2.weight.value.data();
        let b2 = p.fc2.bias.as_ref().unwrap().value.data();
        let gelu = |v: f64| 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2));
        for b in 0..2 {
            for pix in 0..6 {
                let input: Vec<f64> = (0..3).map(|c| x.data()[(b * 3 + c) * 6 + pix]).collect();
                let hidden: Vec<f64> = (0..12)
                    .map(|j| gelu(b1[j] + (0..3).map(|c| w1[j * 3 + c] * input[c]).sum::<f64>()))
                    .collect();
                for o in 0..3 {
                    let expect = b2[o] + (0..12).map(|j| w2[o * 12 + j] * hidden[j]).sum::<f64>();
                    let got = g.value(y).data()[(b * 3 + o) * 6 + pix];
                    assert!((got - expect).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn mlp_width_mismatch() {
        let mut r = rng();
        let p = MlpParams::<f64>::new("m", 3, 4, &mut r).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([1, 5, 2, 2]).unwrap()).unwrap();
        assert!(matches!(mlp_forward(&mut g, x, &p), Err(Error::InvalidConfig(_))));
    }

    fn check_layer<M, F>(layer: &M, x: &Tensor<f64>, forward: F)
    where
        M: Module<f64> + Clone,
        F: Fn(&mut Graph<f64>, Var, &M) -> Result<Var>,
    {
        let report = check_module_gradients(layer, x, 1e-5, |g, xv, m| {
            let y = forward(g, xv, m)?;
            let weights = Rng::new(99).normal_tensor::<f64>(g.shape(y), 1.0)?;
            weighted_sum(g, y, &weights)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn layer_gradients() {
        let mut r = rng();
        let att: WmsaParams<f64> = randomized(WmsaParams::new("a", 4, 2, 2, true, true, &mut r).unwrap(), 8);
        let x = r.normal_tensor::<f64>(&[2, 4, 2, 2], 1.0).unwrap();
        check_layer(&att, &x, wmsa_forward);

        let nwc: NwcParams<f64> = randomized(NwcParams::new("n", 3, 3, NwcPadding::Centered, &mut r).unwrap(), 9);
        let x = r.normal_tensor::<f64>(&[1, 3, 4, 4], 1.0).unwrap();
        check_layer(&nwc, &x, nwc_forward);

        let mut mlp: MlpParams<f64> = MlpParams::new("m", 2, 2, &mut r).unwrap();
        mlp.hidden_nwc = Some(NwcParams::new("m.nwc", 4, 2, NwcPadding::Same, &mut r).unwrap());
        let mlp = randomized(mlp, 10);
        let x = r.normal_tensor::<f64>(&[1, 2, 4, 4], 1.0).unwrap();
        check_layer(&mlp, &x, mlp_forward);
    }
}
