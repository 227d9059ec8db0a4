use crate::error::{Error, Result};
use crate::tensor::linalg::{gemm, MatRef};
use crate::tensor::{Scalar, Tensor, Var};

/// Geometry of one 2-D cross-correlation.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new<T: Scalar>(
        x: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (batch, cin, h, w) = x.dims4("conv2d")?;
        let (cout, wc, kh, kw) = weight.dims4("conv2d")?;
        if wc != cin {
            return Err(Error::shape(
                "conv2d",
                "channels",
                format!("input has {cin} channels, weight expects {wc}"),
            ));
        }
        if let Some(b) = bias {
            if b.numel() != cout {
                return Err(Error::shape(
                    "conv2d",
                    "bias",
                    format!("bias has {} entries for {cout} output channels", b.numel()),
                ));
            }
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if h + 2 * pad < kh {
            return Err(Error::shape(
                "conv2d",
                "height",
                format!("padded height {} smaller than kernel {kh}", h + 2 * pad),
            ));
        }
        if w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                "width",
                format!("padded width {} smaller than kernel {kw}", w + 2 * pad),
            ));
        }
        Ok(ConvGeom {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    /// Output columns `ox` whose input column `ox * stride + kj - pad` is in bounds.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = if kj >= self.pad {
            0
        } else {
            (self.pad - kj).div_ceil(self.stride).min(self.ow)
        };
        // largest ox with ox*stride + kj - pad <= w-1
        let hi = if self.w + self.pad > kj {
            ((self.w + self.pad - kj - 1) / self.stride + 1).min(self.ow)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// Writes the patch matrix of one item into columns `off..off + p` of a
    /// row-major buffer with row length `ld`.
    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T], ld: usize, off: usize) {
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * ld + off;
                    let (lo, hi) = self.valid_cols(kj);
                    for oy in 0..self.oh {
                        let dst = &mut cols[row + oy * self.ow..row + (oy + 1) * self.ow];
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            dst.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        dst[..lo].iter_mut().for_each(|v| *v = T::zero());
                        dst[hi..].iter_mut().for_each(|v| *v = T::zero());
                        let base = kj as isize - self.pad as isize;
                        if hi == lo {
                            continue;
                        }
                        if self.stride == 1 {
                            let start = (lo as isize + base) as usize;
                            dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate().take(hi).skip(lo) {
                                *d = src[(ox as isize * self.stride as isize + base) as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], ld: usize, off: usize, x: &mut [T]) {
        for c in 0..self.cin {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * ld + off;
                    let (lo, hi) = self.valid_cols(kj);
                    let base = kj as isize - self.pad as isize;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &cols[row + oy * self.ow..row + (oy + 1) * self.ow];
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, &s) in src.iter().enumerate().take(hi).skip(lo) {
                            dst[(ox as isize * self.stride as isize + base) as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

/// Items per GEMM so the patch matrix stays around a megaword.
fn chunk_items(g: &ConvGeom) -> usize {
    const TARGET: usize = 1 << 20;
    (TARGET / (g.k() * g.p()).max(1)).clamp(1, g.batch.max(1))
}

fn forward<T: Scalar>(
    g: &ConvGeom,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Tensor<T> {
    let (k, p) = (g.k(), g.p());
    let mut out = Tensor::zeros(vec![g.batch, g.cout, g.oh, g.ow]);
    let chunk = chunk_items(g);
    let mut cols = vec![T::zero(); k * p * chunk];
    let mut tmp = vec![T::zero(); g.cout * p * chunk];
    let in_item = g.cin * g.h * g.w;
    let out_item = g.cout * p;
    for start in (0..g.batch).step_by(chunk) {
        let nb = chunk.min(g.batch - start);
        let ld = nb * p;
        for i in 0..nb {
            let b = start + i;
            g.im2col(&x.data()[b * in_item..(b + 1) * in_item], &mut cols, ld, i * p);
        }
        gemm(
            MatRef::rowmajor(weight.data(), g.cout, k),
            MatRef::rowmajor(&cols[..k * ld], k, ld),
            &mut tmp,
            false,
        );
        for i in 0..nb {
            let dst = &mut out.data_mut()[(start + i) * out_item..(start + i + 1) * out_item];
            for o in 0..g.cout {
                let src = &tmp[o * ld + i * p..o * ld + (i + 1) * p];
                let bv = bias.map_or(T::zero(), |b| b.data()[o]);
                for (d, &v) in dst[o * p..(o + 1) * p].iter_mut().zip(src) {
                    *d = v + bv;
                }
            }
        }
    }
    out
}

/// Plain cross-correlation with zero padding, no graph.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x, weight, bias, stride, pad)?;
    Ok(forward(&g, x, weight, bias))
}

impl<'g, T: Scalar> Var<'g, T> {
    /// 2-D cross-correlation with zero padding. Output size `(H + 2p - kH) / s + 1`.
    pub fn conv2d(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'g, T>> {
        let (x, w) = (self.value(), weight.value());
        let bv = bias.map(|b| b.value());
        let geom = ConvGeom::new(&x, &w, bv.as_deref(), stride, pad)?;
        let out = forward(&geom, &x, &w, bv.as_deref());
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        Ok(self.graph().push(
            "conv2d",
            out,
            &inputs,
            Box::new(move |gout, needs| {
                let g = &geom;
                let (k, p) = (g.k(), g.p());
                let in_item = g.cin * g.h * g.w;
                let out_item = g.cout * p;
                let mut gx = needs[0].then(|| Tensor::zeros(x.shape()));
                let mut gw = needs[1].then(|| Tensor::zeros(w.shape()));
                let chunk = chunk_items(g);
                let mut cols = vec![T::zero(); k * p * chunk];
                let mut go = vec![T::zero(); g.cout * p * chunk];
                for start in (0..g.batch).step_by(chunk) {
                    let nb = chunk.min(g.batch - start);
                    let ld = nb * p;
                    for i in 0..nb {
                        let src = &gout.data()[(start + i) * out_item..(start + i + 1) * out_item];
                        for o in 0..g.cout {
                            go[o * ld + i * p..o * ld + (i + 1) * p]
                                .copy_from_slice(&src[o * p..(o + 1) * p]);
                        }
                    }
                    let go = &go[..g.cout * ld];
                    if let Some(gw) = gw.as_mut() {
                        for i in 0..nb {
                            let b = start + i;
                            g.im2col(&x.data()[b * in_item..(b + 1) * in_item], &mut cols, ld, i * p);
                        }
                        gemm(
                            MatRef::rowmajor(go, g.cout, ld),
                            MatRef::rowmajor(&cols[..k * ld], k, ld).t(),
                            gw.data_mut(),
                            true,
                        );
                    }
                    if let Some(gx) = gx.as_mut() {
                        gemm(
                            MatRef::rowmajor(w.data(), g.cout, k).t(),
                            MatRef::rowmajor(go, g.cout, ld),
                            &mut cols,
                            false,
                        );
                        for i in 0..nb {
                            let b = start + i;
                            g.col2im(&cols, ld, i * p, &mut gx.data_mut()[b * in_item..(b + 1) * in_item]);
                        }
                    }
                }
                let mut grads = vec![gx, gw];
                if needs.len() == 3 {
                    grads.push(needs[2].then(|| {
                        let mut gb = Tensor::zeros(vec![g.cout]);
                        for b in 0..g.batch {
                            for o in 0..g.cout {
                                let s: T = gout.data()[b * out_item + o * p..b * out_item + (o + 1) * p]
                                    .iter()
                                    .copied()
                                    .sum();
                                gb.data_mut()[o] += s;
                            }
                        }
                        gb
                    }));
                }
                grads
            }),
        ))
    }
}
