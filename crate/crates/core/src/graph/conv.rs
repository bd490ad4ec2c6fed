//! Convolution kernels used by the graph: im2col + GEMM for dense/grouped
//! convolutions and a direct loop for depth-wise ones.

use crate::error::{Error, Result};
use crate::tensor::Element;

/// Zero padding applied to each side of the spatial axes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Padding2d {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding2d {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn uniform(p: usize) -> Self {
        Padding2d {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    /// `before` rows/columns ahead of the data and `after` behind it, on both axes.
    pub fn split(before: usize, after: usize) -> Self {
        Padding2d {
            top: before,
            bottom: after,
            left: before,
            right: after,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: Padding2d,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: 1,
            padding: Padding2d::none(),
            groups: 1,
        }
    }
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: Padding2d, groups: usize) -> Self {
        Conv2dSpec {
            stride,
            padding,
            groups,
        }
    }
}

/// Resolved extents of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub spec: Conv2dSpec,
}

fn out_extent(len: usize, before: usize, after: usize, k: usize, stride: usize, axis: &str) -> Result<usize> {
    let padded = len + before + after;
    if padded < k {
        return Err(Error::InvalidShape(format!(
            "kernel extent {k} exceeds padded {axis} extent {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

impl ConvGeometry {
    pub fn new(x_shape: &[usize], w_shape: &[usize], spec: Conv2dSpec) -> Result<Self> {
        let &[batch, c_in, h, w] = x_shape else {
            return Err(Error::InvalidShape(format!(
                "conv2d input must be (batch, channels, height, width), got {x_shape:?}"
            )));
        };
        let &[c_out, c_per_group, kh, kw] = w_shape else {
            return Err(Error::InvalidShape(format!(
                "conv2d weight must be (out, in/groups, kh, kw), got {w_shape:?}"
            )));
        };
        let g = spec.groups;
        if g == 0 || c_in % g != 0 || c_out % g != 0 {
            return Err(Error::InvalidConfig(format!(
                "{c_in} input / {c_out} output channels are not divisible into {g} groups"
            )));
        }
        if c_per_group != c_in / g {
            return Err(Error::InvalidConfig(format!(
                "weight expects {c_per_group} channels per group, input provides {}",
                c_in / g
            )));
        }
        if spec.stride == 0 {
            return Err(Error::InvalidConfig("conv2d stride must be positive".into()));
        }
        let p = spec.padding;
        let ho = out_extent(h, p.top, p.bottom, kh, spec.stride, "height")?;
        let wo = out_extent(w, p.left, p.right, kw, spec.stride, "width")?;
        Ok(ConvGeometry {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            ho,
            wo,
            spec,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.c_out, self.ho, self.wo]
    }

    fn cin_g(&self) -> usize {
        self.c_in / self.spec.groups
    }

    fn cout_g(&self) -> usize {
        self.c_out / self.spec.groups
    }

    fn col_rows(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.padding == Padding2d::none()
    }

    fn is_depthwise(&self) -> bool {
        self.spec.groups == self.c_in && self.c_in == self.c_out && self.spec.groups > 1
    }

    /// Source offset (within one channel plane) feeding output `(oy, ox)`
    /// through kernel tap `(ky, kx)`, or `None` when it falls in the padding.
    #[inline]
    fn tap(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.spec.stride + ky).checked_sub(self.spec.padding.top)?;
        let ix = (ox * self.spec.stride + kx).checked_sub(self.spec.padding.left)?;
        (iy < self.h && ix < self.w).then_some(iy * self.w + ix)
    }
}

/// Unfold the channels of one group of one image into a
/// `(cin_g * kh * kw, ho * wo)` matrix.
fn im2col<T: Element>(geo: &ConvGeometry, x_group: &[T], col: &mut [T]) {
    let hw_out = geo.ho * geo.wo;
    let plane = geo.h * geo.w;
    for c in 0..geo.cin_g() {
        let src = &x_group[c * plane..(c + 1) * plane];
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let row = ((c * geo.kh + ky) * geo.kw + kx) * hw_out;
                for oy in 0..geo.ho {
                    for ox in 0..geo.wo {
                        col[row + oy * geo.wo + ox] = match geo.tap(oy, ox, ky, kx) {
                            Some(i) => src[i],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Element>(geo: &ConvGeometry, col: &[T], dx_group: &mut [T]) {
    let hw_out = geo.ho * geo.wo;
    let plane = geo.h * geo.w;
    for c in 0..geo.cin_g() {
        let dst = &mut dx_group[c * plane..(c + 1) * plane];
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let row = ((c * geo.kh + ky) * geo.kw + kx) * hw_out;
                for oy in 0..geo.ho {
                    for ox in 0..geo.wo {
                        if let Some(i) = geo.tap(oy, ox, ky, kx) {
                            dst[i] += col[row + oy * geo.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Element>(geo: &ConvGeometry, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let hw_out = geo.ho * geo.wo;
    let mut out = vec![T::zero(); geo.batch * geo.c_out * hw_out];
    if geo.is_depthwise() {
        depthwise_forward(geo, x, w, &mut out);
    } else {
        let (cin_g, cout_g, rows) = (geo.cin_g(), geo.cout_g(), geo.col_rows());
        let in_plane = geo.h * geo.w;
        let mut col = if geo.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); rows * hw_out]
        };
        for b in 0..geo.batch {
            for g in 0..geo.spec.groups {
                let x_group = &x[(b * geo.c_in + g * cin_g) * in_plane..][..cin_g * in_plane];
                let cols: &[T] = if geo.is_pointwise() {
                    x_group
                } else {
                    im2col(geo, x_group, &mut col);
                    &col
                };
                let w_group = &w[g * cout_g * rows..][..cout_g * rows];
                let o = &mut out[(b * geo.c_out + g * cout_g) * hw_out..][..cout_g * hw_out];
                T::gemm(
                    cout_g,
                    rows,
                    hw_out,
                    T::one(),
                    w_group,
                    (rows, 1),
                    cols,
                    (hw_out, 1),
                    T::zero(),
                    o,
                    (hw_out, 1),
                );
            }
        }
    }
    if let Some(bias) = bias {
        for (i, chunk) in out.chunks_mut(hw_out).enumerate() {
            let b = bias[i % geo.c_out];
            chunk.iter_mut().for_each(|v| *v += b);
        }
    }
    out
}

/// Gradients w.r.t. input, weight and bias; only the requested ones are computed.
pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn backward<T: Element>(
    geo: &ConvGeometry,
    x: &[T],
    w: &[T],
    dout: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let hw_out = geo.ho * geo.wo;
    let (need_dx, need_dw, need_db) = need;
    let db = need_db.then(|| {
        let mut db = vec![T::zero(); geo.c_out];
        for (i, chunk) in dout.chunks(hw_out).enumerate() {
            db[i % geo.c_out] += chunk.iter().copied().sum::<T>();
        }
        db
    });
    if geo.is_depthwise() {
        let (dx, dw) = depthwise_backward(geo, x, w, dout, need_dx, need_dw);
        return ConvGrads { dx, dw, db };
    }
    let (cin_g, cout_g, rows) = (geo.cin_g(), geo.cout_g(), geo.col_rows());
    let in_plane = geo.h * geo.w;
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let pointwise = geo.is_pointwise();
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); rows * hw_out]
    };
    let mut dcol = if pointwise || !need_dx {
        Vec::new()
    } else {
        vec![T::zero(); rows * hw_out]
    };
    for b in 0..geo.batch {
        for g in 0..geo.spec.groups {
            let x_off = (b * geo.c_in + g * cin_g) * in_plane;
            let d_group = &dout[(b * geo.c_out + g * cout_g) * hw_out..][..cout_g * hw_out];
            let w_group = &w[g * cout_g * rows..][..cout_g * rows];
            if let Some(dw) = dw.as_mut() {
                let x_group = &x[x_off..][..cin_g * in_plane];
                let cols: &[T] = if pointwise {
                    x_group
                } else {
                    im2col(geo, x_group, &mut col);
                    &col
                };
                let dw_group = &mut dw[g * cout_g * rows..][..cout_g * rows];
                // dW += dOut * col^T
                T::gemm(
                    cout_g,
                    hw_out,
                    rows,
                    T::one(),
                    d_group,
                    (hw_out, 1),
                    cols,
                    (1, hw_out),
                    T::one(),
                    dw_group,
                    (rows, 1),
                );
            }
            if let Some(dx) = dx.as_mut() {
                let dx_group = &mut dx[x_off..][..cin_g * in_plane];
                if pointwise {
                    T::gemm(
                        rows,
                        cout_g,
                        hw_out,
                        T::one(),
                        w_group,
                        (1, rows),
                        d_group,
                        (hw_out, 1),
                        T::one(),
                        dx_group,
                        (hw_out, 1),
                    );
                } else {
                    T::gemm(
                        rows,
                        cout_g,
                        hw_out,
                        T::one(),
                        w_group,
                        (1, rows),
                        d_group,
                        (hw_out, 1),
                        T::zero(),
                        &mut dcol,
                        (hw_out, 1),
                    );
                    col2im_add(geo, &dcol, dx_group);
                }
            }
        }
    }
    ConvGrads { dx, dw, db }
}

fn depthwise_forward<T: Element>(geo: &ConvGeometry, x: &[T], w: &[T], out: &mut [T]) {
    let (plane, hw_out, taps) = (geo.h * geo.w, geo.ho * geo.wo, geo.kh * geo.kw);
    for b in 0..geo.batch {
        for c in 0..geo.c_in {
            let src = &x[(b * geo.c_in + c) * plane..][..plane];
            let dst = &mut out[(b * geo.c_in + c) * hw_out..][..hw_out];
            let kern = &w[c * taps..][..taps];
            for oy in 0..geo.ho {
                for ox in 0..geo.wo {
                    let mut acc = T::zero();
                    for ky in 0..geo.kh {
                        for kx in 0..geo.kw {
                            if let Some(i) = geo.tap(oy, ox, ky, kx) {
                                acc += kern[ky * geo.kw + kx] * src[i];
                            }
                        }
                    }
                    dst[oy * geo.wo + ox] = acc;
                }
            }
        }
    }
}

fn depthwise_backward<T: Element>(
    geo: &ConvGeometry,
    x: &[T],
    w: &[T],
    dout: &[T],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (plane, hw_out, taps) = (geo.h * geo.w, geo.ho * geo.wo, geo.kh * geo.kw);
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    for b in 0..geo.batch {
        for c in 0..geo.c_in {
            let base = (b * geo.c_in + c) * plane;
            let d = &dout[(b * geo.c_in + c) * hw_out..][..hw_out];
            for oy in 0..geo.ho {
                for ox in 0..geo.wo {
                    let g = d[oy * geo.wo + ox];
                    for ky in 0..geo.kh {
                        for kx in 0..geo.kw {
                            if let Some(i) = geo.tap(oy, ox, ky, kx) {
                                let t = c * taps + ky * geo.kw + kx;
                                if let Some(dx) = dx.as_mut() {
                                    dx[base + i] += g * w[t];
                                }
                                if let Some(dw) = dw.as_mut() {
                                    dw[t] += g * x[base + i];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}
