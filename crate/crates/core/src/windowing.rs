//! Window partition/reverse and the spatial shuffle/alignment permutations.
//!
//! Windows of an `(batch, channels, H, W)` map are ordered batch-major, then
//! row-major over the window grid; tokens inside a window are row-major.
//! The result of a partition has shape `(batch * windows, channels, m, m)`.
//!
//! A 2-D shuffle is the product of independent row and column permutations:
//! position `(i, j)` of the shuffled map holds `x[rows[i], cols[j]]`. The
//! shuffled partition and the aligned reverse are each a single gather, so the
//! shuffle costs no extra pass over the data.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShuffleMode {
    Identity,
    /// reshape `(m, n/m)`, transpose, flatten
    LongRange,
    /// reshape `(n/2m, m, 2)`, swap the last two axes, flatten
    ShortRange,
    /// Fisher–Yates draw, fixed once drawn
    Random,
}

impl ShuffleMode {
    pub const ALL: [ShuffleMode; 4] = [
        ShuffleMode::Identity,
        ShuffleMode::LongRange,
        ShuffleMode::ShortRange,
        ShuffleMode::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ShuffleMode::Identity => "none",
            ShuffleMode::LongRange => "long",
            ShuffleMode::ShortRange => "short",
            ShuffleMode::Random => "random",
        }
    }
}

impl fmt::Display for ShuffleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl serde::Serialize for ShuffleMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl FromStr for ShuffleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" | "identity" => Ok(ShuffleMode::Identity),
            "long" | "long-range" => Ok(ShuffleMode::LongRange),
            "short" | "short-range" => Ok(ShuffleMode::ShortRange),
            "random" => Ok(ShuffleMode::Random),
            other => Err(Error::InvalidConfig(format!(
                "unknown shuffle mode {other:?} (expected none, long, short or random)"
            ))),
        }
    }
}

/// Permutation of the `n` tokens along one spatial axis: position `k` of the
/// permuted axis holds source token `map[k]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpatialPermutation {
    map: Vec<usize>,
    mode: ShuffleMode,
}

impl SpatialPermutation {
    pub fn identity(n: usize) -> Self {
        SpatialPermutation {
            map: (0..n).collect(),
            mode: ShuffleMode::Identity,
        }
    }

    /// Build the shuffle of `n` tokens for windows of `m` tokens.
    /// Short-range needs `2m | n`, except that `n == m` gives the identity.
    /// `rng` is required for [`ShuffleMode::Random`] and ignored otherwise.
    pub fn new(n: usize, m: usize, mode: ShuffleMode, rng: Option<&mut Rng>) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::InvalidConfig(format!(
                "shuffle needs positive token count and window, got n={n}, m={m}"
            )));
        }
        let map = match mode {
            ShuffleMode::Identity => (0..n).collect(),
            ShuffleMode::LongRange => {
                if !n.is_multiple_of(m) {
                    return Err(Error::InvalidConfig(format!(
                        "long-range shuffle needs the window {m} to divide {n}"
                    )));
                }
                let groups = n / m;
                let mut map = vec![0; n];
                for g in 0..groups {
                    for j in 0..m {
                        map[g * m + j] = j * groups + g;
                    }
                }
                map
            }
            // a single window along the axis has nothing to exchange with
            ShuffleMode::ShortRange if n == m => (0..n).collect(),
            ShuffleMode::ShortRange => {
                if !n.is_multiple_of(2 * m) {
                    return Err(Error::InvalidConfig(format!(
                        "short-range shuffle needs twice the window ({}) to divide {n}",
                        2 * m
                    )));
                }
                let mut map = vec![0; n];
                for a in 0..n / (2 * m) {
                    for b in 0..m {
                        for c in 0..2 {
                            map[a * 2 * m + c * m + b] = a * 2 * m + 2 * b + c;
                        }
                    }
                }
                map
            }
            ShuffleMode::Random => {
                let rng = rng.ok_or_else(|| Error::InvalidConfig("random shuffle needs an explicit rng".into()))?;
                rng.permutation(n)
            }
        };
        Ok(SpatialPermutation { map, mode })
    }

    pub fn from_map(map: Vec<usize>, mode: ShuffleMode) -> Result<Self> {
        let n = map.len();
        let mut seen = vec![false; n];
        for &i in &map {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidConfig(format!("{map:?} is not a permutation")));
            }
        }
        Ok(SpatialPermutation { map, mode })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn map(&self) -> &[usize] {
        &self.map
    }

    pub fn mode(&self) -> ShuffleMode {
        self.mode
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(k, &v)| k == v)
    }

    /// The alignment permutation: undoes `self`.
    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.map.len()];
        for (k, &src) in self.map.iter().enumerate() {
            inv[src] = k;
        }
        SpatialPermutation {
            map: inv,
            mode: self.mode,
        }
    }

    /// Apply `self`, then `next`: the result maps `k` to `self.map[next.map[k]]`.
    pub fn then(&self, next: &SpatialPermutation) -> Result<Self> {
        if next.len() != self.len() {
            return Err(Error::InvalidShape(format!(
                "cannot compose permutations of {} and {} tokens",
                self.len(),
                next.len()
            )));
        }
        Ok(SpatialPermutation {
            map: next.map.iter().map(|&k| self.map[k]).collect(),
            mode: self.mode,
        })
    }
}

/// Even partition of an `h x w` grid into `m x m` windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGrid {
    pub window: usize,
    pub rows: usize,
    pub cols: usize,
}

impl WindowGrid {
    pub fn new(h: usize, w: usize, m: usize) -> Result<Self> {
        for (extent, axis) in [(h, "height"), (w, "width")] {
            if m == 0 || extent % m != 0 || extent == 0 {
                return Err(Error::Partition {
                    extent,
                    window: m,
                    context: axis.into(),
                });
            }
        }
        Ok(WindowGrid {
            window: m,
            rows: h / m,
            cols: w / m,
        })
    }

    pub fn height(&self) -> usize {
        self.rows * self.window
    }

    pub fn width(&self) -> usize {
        self.cols * self.window
    }

    pub fn count(&self) -> usize {
        self.rows * self.cols
    }

    /// `(window index, intra-window row, intra-window col)` of grid position `(h, w)`.
    pub fn locate(&self, h: usize, w: usize) -> (usize, usize, usize) {
        let m = self.window;
        ((h / m) * self.cols + w / m, h % m, w % m)
    }

    pub fn position(&self, window: usize, r: usize, s: usize) -> (usize, usize) {
        let m = self.window;
        ((window / self.cols) * m + r, (window % self.cols) * m + s)
    }
}

/// Row and column permutations applied before partitioning.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShufflePlan {
    pub rows: SpatialPermutation,
    pub cols: SpatialPermutation,
}

impl ShufflePlan {
    pub fn identity(h: usize, w: usize) -> Self {
        ShufflePlan {
            rows: SpatialPermutation::identity(h),
            cols: SpatialPermutation::identity(w),
        }
    }

    /// Rows are drawn before columns when `mode` is random.
    pub fn new(h: usize, w: usize, m: usize, mode: ShuffleMode, mut rng: Option<&mut Rng>) -> Result<Self> {
        let rows = SpatialPermutation::new(h, m, mode, rng.as_deref_mut())?;
        let cols = SpatialPermutation::new(w, m, mode, rng)?;
        Ok(ShufflePlan { rows, cols })
    }

    pub fn height(&self) -> usize {
        self.rows.len()
    }

    pub fn width(&self) -> usize {
        self.cols.len()
    }

    pub fn inverse(&self) -> Self {
        ShufflePlan {
            rows: self.rows.inverse(),
            cols: self.cols.inverse(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rows.is_identity() && self.cols.is_identity()
    }
}

/// Gather maps for a (shuffled) partition of a fixed-size feature map.
#[derive(Clone, Debug)]
pub struct WindowLayout {
    pub batch: usize,
    pub channels: usize,
    pub grid: WindowGrid,
    plan: ShufflePlan,
}

fn feature_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::InvalidShape(format!(
            "expected a (batch, channels, height, width) map, got {shape:?}"
        ))),
    }
}

impl WindowLayout {
    pub fn new(shape: &[usize], m: usize, plan: Option<&ShufflePlan>) -> Result<Self> {
        let (batch, channels, h, w) = feature_dims(shape)?;
        let grid = WindowGrid::new(h, w, m)?;
        let plan = match plan {
            Some(p) if p.height() != h || p.width() != w => {
                return Err(Error::InvalidShape(format!(
                    "shuffle plan for {}x{} applied to a {h}x{w} map",
                    p.height(),
                    p.width()
                )))
            }
            Some(p) => p.clone(),
            None => ShufflePlan::identity(h, w),
        };
        Ok(WindowLayout {
            batch,
            channels,
            grid,
            plan,
        })
    }

    pub fn image_shape(&self) -> [usize; 4] {
        [self.batch, self.channels, self.grid.height(), self.grid.width()]
    }

    pub fn windows_shape(&self) -> [usize; 4] {
        let m = self.grid.window;
        [self.batch * self.grid.count(), self.channels, m, m]
    }

    pub fn plan(&self) -> &ShufflePlan {
        &self.plan
    }

    /// `windows[i] = image[index[i]]`.
    pub fn partition_index(&self) -> Vec<usize> {
        let (m, nw) = (self.grid.window, self.grid.count());
        let (h, w) = (self.grid.height(), self.grid.width());
        let rows = self.plan.rows.map();
        let cols = self.plan.cols.map();
        let mut index = Vec::with_capacity(self.batch * self.channels * h * w);
        for b in 0..self.batch {
            for win in 0..nw {
                for c in 0..self.channels {
                    let base = (b * self.channels + c) * h * w;
                    for r in 0..m {
                        for s in 0..m {
                            let (sh, sw) = self.grid.position(win, r, s);
                            index.push(base + rows[sh] * w + cols[sw]);
                        }
                    }
                }
            }
        }
        index
    }

    /// `image[i] = windows[index[i]]`; the exact inverse of [`Self::partition_index`].
    pub fn reverse_index(&self) -> Vec<usize> {
        let (m, nw) = (self.grid.window, self.grid.count());
        let (h, w) = (self.grid.height(), self.grid.width());
        let inv = self.plan.inverse();
        let (rows, cols) = (inv.rows.map(), inv.cols.map());
        let mut index = Vec::with_capacity(self.batch * self.channels * h * w);
        for b in 0..self.batch {
            for c in 0..self.channels {
                for i in 0..h {
                    for j in 0..w {
                        let (win, r, s) = self.grid.locate(rows[i], cols[j]);
                        index.push((((b * nw + win) * self.channels + c) * m + r) * m + s);
                    }
                }
            }
        }
        index
    }
}

pub fn window_partition<T: Element>(x: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
    let layout = WindowLayout::new(x.shape(), m, None)?;
    x.gather(&layout.partition_index(), layout.windows_shape())
}

fn check_windows(shape: &[usize], m: usize, h: usize, w: usize) -> Result<(usize, usize)> {
    let (bw, c, wm, wn) = feature_dims(shape)?;
    let grid = WindowGrid::new(h, w, m)
        .map_err(|_| Error::InvalidShape(format!("{h}x{w} image cannot be tiled by {m}x{m} windows")))?;
    if wm != m || wn != m || bw % grid.count() != 0 {
        return Err(Error::InvalidShape(format!(
            "windows {shape:?} are inconsistent with a {h}x{w} image and window {m}"
        )));
    }
    Ok((bw / grid.count(), c))
}

pub fn window_reverse<T: Element>(wins: &Tensor<T>, m: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let (b, c) = check_windows(wins.shape(), m, h, w)?;
    let layout = WindowLayout::new(&[b, c, h, w], m, None)?;
    wins.gather(&layout.reverse_index(), layout.image_shape())
}

/// `out[b, c, i, j] = x[b, c, rows[i], cols[j]]`.
pub fn apply_spatial_permutation_2d<T: Element>(
    x: &Tensor<T>,
    rows: &SpatialPermutation,
    cols: &SpatialPermutation,
) -> Result<Tensor<T>> {
    let (b, c, h, w) = feature_dims(x.shape())?;
    if rows.len() != h || cols.len() != w {
        return Err(Error::InvalidShape(format!(
            "permutations of {}x{} applied to a {h}x{w} map",
            rows.len(),
            cols.len()
        )));
    }
    let mut index = Vec::with_capacity(x.numel());
    for plane in 0..b * c {
        for &i in rows.map() {
            for &j in cols.map() {
                index.push((plane * h + i) * w + j);
            }
        }
    }
    x.gather(&index, x.shape().to_vec())
}

/// Shuffle then partition, in one gather.
pub fn shuffled_window_partition<T: Element>(x: &Tensor<T>, m: usize, plan: &ShufflePlan) -> Result<Tensor<T>> {
    let layout = WindowLayout::new(x.shape(), m, Some(plan))?;
    x.gather(&layout.partition_index(), layout.windows_shape())
}

/// Reverse then align, in one gather; undoes [`shuffled_window_partition`].
pub fn aligned_window_reverse<T: Element>(wins: &Tensor<T>, m: usize, plan: &ShufflePlan) -> Result<Tensor<T>> {
    let (h, w) = (plan.height(), plan.width());
    let (b, c) = check_windows(wins.shape(), m, h, w)?;
    let layout = WindowLayout::new(&[b, c, h, w], m, Some(plan))?;
    wins.gather(&layout.reverse_index(), layout.image_shape())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn ramp(shape: [usize; 4]) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| i as f64).unwrap()
    }

    #[test]
    fn long_range_nine_by_three() {
        let p = SpatialPermutation::new(9, 3, ShuffleMode::LongRange, None).unwrap();
        assert_eq!(p.map(), &[0, 3, 6, 1, 4, 7, 2, 5, 8]);
    }

    #[test]
    fn long_range_matches_reshape_transpose_flatten() {
        for (n, m) in [(9, 3), (12, 4), (8, 2), (14, 7)] {
            let seq = Tensor::<f64>::from_fn([n], |i| i as f64).unwrap();
            let oracle = seq.reshape_permute(&[m, n / m], &[1, 0]).unwrap();
            let p = SpatialPermutation::new(n, m, ShuffleMode::LongRange, None).unwrap();
            let got: Vec<f64> = p.map().iter().map(|&i| i as f64).collect();
            assert_eq!(got, oracle.data());
            // alignment is reshape (n/m, m), transpose, flatten
            let align = seq.reshape_permute(&[n / m, m], &[1, 0]).unwrap();
            let inv: Vec<f64> = p.inverse().map().iter().map(|&i| i as f64).collect();
            assert_eq!(inv, align.data());
        }
    }

    #[test]
    fn single_window_is_identity() {
        for mode in [ShuffleMode::LongRange, ShuffleMode::Identity] {
            assert!(SpatialPermutation::new(7, 7, mode, None).unwrap().is_identity());
        }
    }

    #[test]
    fn short_range_eight_by_two() {
        let p = SpatialPermutation::new(8, 2, ShuffleMode::ShortRange, None).unwrap();
        assert_eq!(p.map(), &[0, 2, 1, 3, 4, 6, 5, 7]);
        let seq = Tensor::<f64>::from_fn([8], |i| i as f64).unwrap();
        let oracle = seq.reshape_permute(&[2, 2, 2], &[0, 2, 1]).unwrap();
        let got: Vec<f64> = p.map().iter().map(|&i| i as f64).collect();
        assert_eq!(got, oracle.data());
    }

    #[test]
    fn divisibility_errors() {
        assert!(SpatialPermutation::new(10, 3, ShuffleMode::LongRange, None).is_err());
        assert!(SpatialPermutation::new(6, 2, ShuffleMode::ShortRange, None).is_err());
        assert!(SpatialPermutation::new(6, 2, ShuffleMode::Random, None).is_err());
    }

    #[test]
    fn inverse_examples() {
        let p = SpatialPermutation::from_map(vec![0, 2, 1, 3], ShuffleMode::LongRange).unwrap();
        assert_eq!(p.inverse().map(), &[0, 2, 1, 3]);
        assert_eq!(p, SpatialPermutation::new(4, 2, ShuffleMode::LongRange, None).unwrap());
        let id = SpatialPermutation::identity(5);
        assert_eq!(id.inverse(), id);
        assert!(p.then(&p.inverse()).unwrap().is_identity());
    }

    #[test]
    fn partition_index_arithmetic() {
        // H = W = 4, m = 2: pixel (0, 3) -> window 1, intra (0, 1)
        let x = ramp([1, 1, 4, 4]);
        let wins = window_partition(&x, 2).unwrap();
        assert_eq!(wins.shape(), &[4, 1, 2, 2]);
        let v = x.get(&[0, 0, 0, 3]).unwrap();
        assert_eq!(wins.get(&[1, 0, 0, 1]).unwrap(), v);
        let grid = WindowGrid::new(4, 4, 2).unwrap();
        assert_eq!(grid.locate(0, 3), (1, 0, 1));
        assert_eq!(grid.position(1, 0, 1), (0, 3));
    }

    #[test]
    fn single_window_partition_is_unchanged() {
        let x = ramp([2, 3, 5, 5]);
        let wins = window_partition(&x, 5).unwrap();
        assert_eq!(wins.data(), x.data());
        assert_eq!(window_reverse(&wins, 5, 5, 5).unwrap(), x);
    }

    #[test]
    fn indivisible_extent_is_partition_error() {
        let x = ramp([1, 1, 6, 6]);
        assert!(matches!(
            window_partition(&x, 4),
            Err(Error::Partition {
                extent: 6,
                window: 4,
                ..
            })
        ));
    }

    #[test]
    fn inconsistent_reverse_is_invalid_shape() {
        let wins = Tensor::<f64>::zeros([3, 1, 2, 2]).unwrap();
        assert!(matches!(window_reverse(&wins, 2, 4, 4), Err(Error::InvalidShape(_))));
        let wins = Tensor::<f64>::zeros([4, 1, 2, 2]).unwrap();
        assert!(matches!(window_reverse(&wins, 3, 4, 4), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn spatial_permutation_gather_oracle() {
        let x = ramp([1, 1, 4, 4]);
        let p = SpatialPermutation::new(4, 2, ShuffleMode::LongRange, None).unwrap();
        let out = apply_spatial_permutation_2d(&x, &p, &p).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = x.get(&[0, 0, p.map()[i], p.map()[j]]).unwrap();
                assert_eq!(out.get(&[0, 0, i, j]).unwrap(), expect);
            }
        }
        let id = SpatialPermutation::identity(4);
        assert_eq!(apply_spatial_permutation_2d(&x, &id, &id).unwrap(), x);
        let back = apply_spatial_permutation_2d(&out, &p.inverse(), &p.inverse()).unwrap();
        assert_eq!(back, x);
        assert!(apply_spatial_permutation_2d(&x, &SpatialPermutation::identity(3), &id).is_err());
    }

    #[test]
    fn identity_plan_fused_equals_plain_partition() {
        let x = ramp([2, 3, 6, 4]);
        let plan = ShufflePlan::identity(6, 4);
        assert_eq!(
            shuffled_window_partition(&x, 2, &plan).unwrap(),
            window_partition(&x, 2).unwrap()
        );
    }

    #[test]
    fn windows_keep_their_contents_without_shuffle() {
        let x = ramp([1, 2, 6, 6]);
        let wins = window_partition(&x, 3).unwrap();
        let grid = WindowGrid::new(6, 6, 3).unwrap();
        for win in 0..grid.count() {
            for c in 0..2 {
                let mut got: Vec<f64> = (0..9).map(|t| wins.get(&[win, c, t / 3, t % 3]).unwrap()).collect();
                let mut want: Vec<f64> = (0..9)
                    .map(|t| {
                        let (h, w) = grid.position(win, t / 3, t % 3);
                        x.get(&[0, c, h, w]).unwrap()
                    })
                    .collect();
                got.sort_by(f64::total_cmp);
                want.sort_by(f64::total_cmp);
                assert_eq!(got, want);
            }
        }
    }

    fn valid_case() -> impl Strategy<Value = (usize, usize, ShuffleMode, u64)> {
        (1usize..5, 1usize..4, 1usize..4, 0usize..4, any::<u64>()).prop_map(|(m, gh, gw, mode, seed)| {
            let mode = ShuffleMode::ALL[mode];
            // short-range needs an even number of windows per axis
            let f = if mode == ShuffleMode::ShortRange { 2 } else { 1 };
            (m * gh * f, m * gw * f, mode, seed ^ (m as u64))
        })
    }

    proptest! {
        #[test]
        fn every_map_is_a_bijection(n in 1usize..64, seed: u64) {
            let mut rng = Rng::new(seed);
            for m in (1..=n).filter(|m| n % m == 0) {
                for mode in ShuffleMode::ALL {
                    let Ok(p) = SpatialPermutation::new(n, m, mode, Some(&mut rng)) else { continue };
                    let mut sorted = p.map().to_vec();
                    sorted.sort_unstable();
                    prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
                    prop_assert_eq!(p.inverse().inverse(), p.clone());
                }
            }
        }

        #[test]
        fn fused_round_trip_is_identity((h, w, mode, seed) in valid_case()) {
            let mut rng = Rng::new(seed);
            let m = (1..=h.min(w)).rev().find(|m| h % m == 0 && w % m == 0 && (mode != ShuffleMode::ShortRange || (h % (2 * m) == 0 && w % (2 * m) == 0))).unwrap();
            let plan = ShufflePlan::new(h, w, m, mode, Some(&mut rng)).unwrap();
            let x = Tensor::<f64>::from_fn([2, 2, h, w], |i| i as f64).unwrap();
            let wins = shuffled_window_partition(&x, m, &plan).unwrap();
            prop_assert_eq!(aligned_window_reverse(&wins, m, &plan).unwrap(), x.clone());
            let unfused = window_partition(&apply_spatial_permutation_2d(&x, &plan.rows, &plan.cols).unwrap(), m).unwrap();
            prop_assert_eq!(wins, unfused);
        }
    }
}
