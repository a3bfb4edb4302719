//! 2-D convolution kernels (NCHW input, OIHW weights).
//!
//! The direct sliding-window loops are the reference; the patch-matrix
//! path unrolls each group's receptive fields into a column buffer and
//! multiplies. Both accumulate every output element over
//! `(in_channel, kh, kw)` in the same order.

use crate::error::{Result, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dAttrs {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dAttrs {
    fn default() -> Self {
        Conv2dAttrs {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl Conv2dAttrs {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Conv2dAttrs {
            stride,
            padding,
            groups,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ConvAlgo {
    Direct,
    #[default]
    PatchMatrix,
}

/// Resolved sizes of one convolution application.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub fn conv_out_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl ConvGeometry {
    pub fn new(x_shape: &[usize], w_shape: &[usize], attrs: Conv2dAttrs) -> Result<Self> {
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return Err(TensorError::Shape {
                op: "conv2d",
                detail: format!("expected NCHW input and OIHW weight, got {x_shape:?} and {w_shape:?}"),
            });
        }
        if attrs.stride == 0 {
            return Err(TensorError::Attr {
                op: "conv2d",
                detail: "stride must be at least 1".into(),
            });
        }
        let (batch, c_in, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (c_out, c_per_group, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        let groups = attrs.groups;
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(TensorError::Attr {
                op: "conv2d",
                detail: format!("groups={groups} must divide in-channels {c_in} and out-channels {c_out}"),
            });
        }
        if c_per_group * groups != c_in {
            return Err(TensorError::Shape {
                op: "conv2d",
                detail: format!(
                    "input has {c_in} channels but weight expects {c_per_group} x {groups} groups"
                ),
            });
        }
        let out_h = conv_out_size(h, kh, attrs.stride, attrs.padding);
        let out_w = conv_out_size(w, kw, attrs.stride, attrs.padding);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(TensorError::Shape {
                op: "conv2d",
                detail: format!(
                    "padded input {}x{} smaller than kernel {kh}x{kw}",
                    h + 2 * attrs.padding,
                    w + 2 * attrs.padding
                ),
            });
        };
        Ok(ConvGeometry {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride: attrs.stride,
            padding: attrs.padding,
            groups,
            out_h,
            out_w,
        })
    }

    pub fn in_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.c_out, self.out_h, self.out_w]
    }

    /// Multiply-accumulates per sample, padding taps included.
    pub fn macs_per_sample(&self) -> u64 {
        (self.c_out * self.in_per_group() * self.kh * self.kw * self.out_h * self.out_w) as u64
    }

    #[inline]
    fn input_pos(&self, o: usize, k: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(self.padding)
    }
}

pub fn forward(geo: &ConvGeometry, x: &[f64], w: &[f64], algo: ConvAlgo) -> Vec<f64> {
    match algo {
        ConvAlgo::Direct => forward_direct(geo, x, w),
        ConvAlgo::PatchMatrix => forward_patch(geo, x, w),
    }
}

/// Returns `(grad_x, grad_w)`.
pub fn backward(
    geo: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    algo: ConvAlgo,
) -> (Vec<f64>, Vec<f64>) {
    match algo {
        ConvAlgo::Direct => backward_direct(geo, x, w, dy),
        ConvAlgo::PatchMatrix => backward_patch(geo, x, w, dy),
    }
}

fn forward_direct(g: &ConvGeometry, x: &[f64], w: &[f64]) -> Vec<f64> {
    let (cg, og) = (g.in_per_group(), g.out_per_group());
    let mut out = vec![0.0; g.batch * g.c_out * g.out_h * g.out_w];
    for n in 0..g.batch {
        for oc in 0..g.c_out {
            let grp = oc / og;
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let mut acc = 0.0;
                    for ic in 0..cg {
                        let c = grp * cg + ic;
                        for ki in 0..g.kh {
                            let Some(ih) = g.input_pos(oh, ki).filter(|&p| p < g.h) else {
                                continue;
                            };
                            for kj in 0..g.kw {
                                let Some(iw) = g.input_pos(ow, kj).filter(|&p| p < g.w) else {
                                    continue;
                                };
                                acc += x[((n * g.c_in + c) * g.h + ih) * g.w + iw]
                                    * w[((oc * cg + ic) * g.kh + ki) * g.kw + kj];
                            }
                        }
                    }
                    out[((n * g.c_out + oc) * g.out_h + oh) * g.out_w + ow] = acc;
                }
            }
        }
    }
    out
}

fn backward_direct(g: &ConvGeometry, x: &[f64], w: &[f64], dy: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (cg, og) = (g.in_per_group(), g.out_per_group());
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    for n in 0..g.batch {
        for oc in 0..g.c_out {
            let grp = oc / og;
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let d = dy[((n * g.c_out + oc) * g.out_h + oh) * g.out_w + ow];
                    if d == 0.0 {
                        continue;
                    }
                    for ic in 0..cg {
                        let c = grp * cg + ic;
                        for ki in 0..g.kh {
                            let Some(ih) = g.input_pos(oh, ki).filter(|&p| p < g.h) else {
                                continue;
                            };
                            for kj in 0..g.kw {
                                let Some(iw) = g.input_pos(ow, kj).filter(|&p| p < g.w) else {
                                    continue;
                                };
                                let xi = ((n * g.c_in + c) * g.h + ih) * g.w + iw;
                                let wi = ((oc * cg + ic) * g.kh + ki) * g.kw + kj;
                                dx[xi] += d * w[wi];
                                dw[wi] += d * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Column buffer for one (sample, group): rows `(ic, ki, kj)`, columns `(oh, ow)`.
fn im2col(g: &ConvGeometry, x: &[f64], n: usize, grp: usize, col: &mut [f64]) {
    let cg = g.in_per_group();
    let cols = g.out_h * g.out_w;
    for ic in 0..cg {
        let c = grp * cg + ic;
        let plane = &x[((n * g.c_in + c) * g.h) * g.w..((n * g.c_in + c + 1) * g.h) * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ic * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oh in 0..g.out_h {
                    let ih = g.input_pos(oh, ki).filter(|&p| p < g.h);
                    for ow in 0..g.out_w {
                        let iw = g.input_pos(ow, kj).filter(|&p| p < g.w);
                        dst[oh * g.out_w + ow] = match (ih, iw) {
                            (Some(ih), Some(iw)) => plane[ih * g.w + iw],
                            _ => 0.0,
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeometry, col: &[f64], n: usize, grp: usize, dx: &mut [f64]) {
    let cg = g.in_per_group();
    let cols = g.out_h * g.out_w;
    for ic in 0..cg {
        let c = grp * cg + ic;
        let base = (n * g.c_in + c) * g.h * g.w;
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ic * g.kh + ki) * g.kw + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oh in 0..g.out_h {
                    let Some(ih) = g.input_pos(oh, ki).filter(|&p| p < g.h) else {
                        continue;
                    };
                    for ow in 0..g.out_w {
                        if let Some(iw) = g.input_pos(ow, kj).filter(|&p| p < g.w) {
                            dx[base + ih * g.w + iw] += src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

fn forward_patch(g: &ConvGeometry, x: &[f64], w: &[f64]) -> Vec<f64> {
    let (cg, og) = (g.in_per_group(), g.out_per_group());
    let rows = cg * g.kh * g.kw;
    let cols = g.out_h * g.out_w;
    let mut col = vec![0.0; rows * cols];
    let mut out = vec![0.0; g.batch * g.c_out * cols];
    for n in 0..g.batch {
        for grp in 0..g.groups {
            im2col(g, x, n, grp, &mut col);
            for o in 0..og {
                let oc = grp * og + o;
                let wrow = &w[oc * rows..(oc + 1) * rows];
                let dst = &mut out[(n * g.c_out + oc) * cols..(n * g.c_out + oc + 1) * cols];
                for (r, &wv) in wrow.iter().enumerate() {
                    let src = &col[r * cols..(r + 1) * cols];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += wv * s;
                    }
                }
            }
        }
    }
    out
}

fn backward_patch(g: &ConvGeometry, x: &[f64], w: &[f64], dy: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (cg, og) = (g.in_per_group(), g.out_per_group());
    let rows = cg * g.kh * g.kw;
    let cols = g.out_h * g.out_w;
    let mut col = vec![0.0; rows * cols];
    let mut dcol = vec![0.0; rows * cols];
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    for n in 0..g.batch {
        for grp in 0..g.groups {
            im2col(g, x, n, grp, &mut col);
            dcol.iter_mut().for_each(|v| *v = 0.0);
            for o in 0..og {
                let oc = grp * og + o;
                let dyrow = &dy[(n * g.c_out + oc) * cols..(n * g.c_out + oc + 1) * cols];
                let wrow = &w[oc * rows..(oc + 1) * rows];
                let dwrow = &mut dw[oc * rows..(oc + 1) * rows];
                for r in 0..rows {
                    let src = &col[r * cols..(r + 1) * cols];
                    let mut acc = 0.0;
                    for (a, b) in dyrow.iter().zip(src) {
                        acc += a * b;
                    }
                    dwrow[r] += acc;
                    let wv = wrow[r];
                    let drow = &mut dcol[r * cols..(r + 1) * cols];
                    for (d, s) in drow.iter_mut().zip(dyrow) {
                        *d += wv * s;
                    }
                }
            }
            col2im(g, &dcol, n, grp, &mut dx);
        }
    }
    (dx, dw)
}
