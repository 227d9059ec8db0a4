use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

/// Per-output-index source taps `(i0, i1, frac)` for half-pixel-centre bilinear sampling.
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

struct Resize {
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    ty: Vec<(usize, usize, f64)>,
    tx: Vec<(usize, usize, f64)>,
}

impl Resize {
    fn new(shape: (usize, usize, usize, usize), oh: usize, ow: usize) -> Self {
        let (b, c, h, w) = shape;
        Resize {
            planes: b * c,
            h,
            w,
            oh,
            ow,
            ty: taps(h, oh),
            tx: taps(w, ow),
        }
    }

    fn forward<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.planes * self.oh * self.ow];
        for p in 0..self.planes {
            let src = &x[p * self.h * self.w..(p + 1) * self.h * self.w];
            let dst = &mut out[p * self.oh * self.ow..(p + 1) * self.oh * self.ow];
            for (oy, &(y0, y1, fy)) in self.ty.iter().enumerate() {
                let fy = T::of(fy);
                let (r0, r1) = (&src[y0 * self.w..], &src[y1 * self.w..]);
                for (ox, &(x0, x1, fx)) in self.tx.iter().enumerate() {
                    let fx = T::of(fx);
                    let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                    let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                    dst[oy * self.ow + ox] = top + (bot - top) * fy;
                }
            }
        }
        out
    }

    fn backward<T: Scalar>(&self, g: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.planes * self.h * self.w];
        for p in 0..self.planes {
            let src = &g[p * self.oh * self.ow..(p + 1) * self.oh * self.ow];
            let dst = &mut out[p * self.h * self.w..(p + 1) * self.h * self.w];
            for (oy, &(y0, y1, fy)) in self.ty.iter().enumerate() {
                let fy = T::of(fy);
                for (ox, &(x0, x1, fx)) in self.tx.iter().enumerate() {
                    let fx = T::of(fx);
                    let gv = src[oy * self.ow + ox];
                    let (top, bot) = (gv * (T::one() - fy), gv * fy);
                    dst[y0 * self.w + x0] += top * (T::one() - fx);
                    dst[y0 * self.w + x1] += top * fx;
                    dst[y1 * self.w + x0] += bot * (T::one() - fx);
                    dst[y1 * self.w + x1] += bot * fx;
                }
            }
        }
        out
    }
}

/// Bilinear resize with the align-corners=false (half-pixel centre) convention.
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let dims = x.dims4("resize_bilinear")?;
    check_target(oh, ow)?;
    let r = Resize::new(dims, oh, ow);
    Tensor::new(vec![dims.0, dims.1, oh, ow], r.forward(x.data()))
}

fn check_target(oh: usize, ow: usize) -> Result<()> {
    if oh == 0 || ow == 0 {
        return Err(Error::Dimension {
            op: "resize_bilinear",
            dim: if oh == 0 { "height" } else { "width" },
            value: 0,
            requirement: ">= 1".into(),
        });
    }
    Ok(())
}

fn check_even(op: &'static str, h: usize, w: usize) -> Result<()> {
    for (dim, v) in [("height", h), ("width", w)] {
        if v % 2 != 0 || v == 0 {
            return Err(Error::Dimension {
                op,
                dim,
                value: v,
                requirement: "even and nonzero".into(),
            });
        }
    }
    Ok(())
}

/// 2x2 average pooling; the fixed `d(.)` operator of the pyramid code.
pub fn downsample2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4("downsample2x")?;
    check_even("downsample2x", h, w)?;
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut out = Tensor::zeros(vec![b, c, oh, ow]);
    let src = x.data();
    for p in 0..b * c {
        let s = &src[p * h * w..(p + 1) * h * w];
        let d = &mut out.data_mut()[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                d[y * ow + xx] = (s[i] + s[i + 1] + s[i + w] + s[i + w + 1]) * quarter;
            }
        }
    }
    Ok(out)
}

/// Bilinear x2 upsampling; the fixed `u(.)` operator of the pyramid code.
pub fn upsample2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, h, w) = x.dims4("upsample2x")?;
    resize_bilinear(x, 2 * h, 2 * w)
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn resize_bilinear(self, oh: usize, ow: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let dims = x.dims4("resize_bilinear")?;
        check_target(oh, ow)?;
        if (dims.2, dims.3) == (oh, ow) {
            return Ok(self);
        }
        let r = Resize::new(dims, oh, ow);
        let y = Tensor::new(vec![dims.0, dims.1, oh, ow], r.forward(x.data()))?;
        Ok(self.graph().push(
            "resize_bilinear",
            y,
            &[self],
            Box::new(move |g, _| {
                vec![Some(
                    Tensor::new(vec![dims.0, dims.1, dims.2, dims.3], r.backward(g.data()))
                        .expect("shape"),
                )]
            }),
        ))
    }

    pub fn upsample2x(self) -> Result<Var<'g, T>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::shape("upsample2x", "rank", format!("{s:?}")));
        }
        self.resize_bilinear(2 * s[2], 2 * s[3])
    }

    pub fn downsample2x(self) -> Result<Var<'g, T>> {
        let x = self.value();
        let y = downsample2x(&x)?;
        let (b, c, h, w) = x.dims4("downsample2x")?;
        Ok(self.graph().push(
            "downsample2x",
            y,
            &[self],
            Box::new(move |g, _| {
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::of(0.25);
                let mut gi = Tensor::zeros(vec![b, c, h, w]);
                for p in 0..b * c {
                    let s = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                    let d = &mut gi.data_mut()[p * h * w..(p + 1) * h * w];
                    for y in 0..oh {
                        for xx in 0..ow {
                            let v = s[y * ow + xx] * quarter;
                            let i = 2 * y * w + 2 * xx;
                            d[i] = v;
                            d[i + 1] = v;
                            d[i + w] = v;
                            d[i + w + 1] = v;
                        }
                    }
                }
                vec![Some(gi)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent scalar bilinear sample at output coordinate, align-corners=false.
    fn scalar_bilinear(row: &[f64], out_len: usize, o: usize) -> f64 {
        let n = row.len();
        let pos = (o as f64 + 0.5) * n as f64 / out_len as f64 - 0.5;
        let pos = pos.clamp(0.0, (n - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        let t = pos - lo as f64;
        row[lo] * (1.0 - t) + row[hi] * t
    }

    #[test]
    fn upsampled_ramp_matches_closed_form() {
        let x = Tensor::new(vec![1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let y = resize_bilinear(&x, 1, 4).unwrap();
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
        for o in 0..4 {
            assert_eq!(y.data()[o], scalar_bilinear(&[0.0, 1.0], 4, o));
        }
    }

    #[test]
    fn constants_are_preserved() {
        let x = Tensor::full(vec![1, 2, 3, 5], 0.3f64);
        for (oh, ow) in [(1, 1), (7, 2), (6, 10), (3, 5)] {
            let y = resize_bilinear(&x, oh, ow).unwrap();
            assert!(y.data().iter().all(|v| (v - 0.3).abs() < 1e-15));
        }
    }

    #[test]
    fn same_size_is_identity() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(resize_bilinear(&x, 2, 2).unwrap(), x);
    }

    #[test]
    fn average_pooling_cases() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        assert_eq!(downsample2x(&x).unwrap().data(), &[3.0]);
        let checker = Tensor::from_fn(vec![1, 1, 4, 4], |i| ((i / 4 + i % 4) % 2) as f64);
        assert!(downsample2x(&checker).unwrap().data().iter().all(|&v| v == 0.5));
        let c = Tensor::full(vec![2, 3, 4, 6], 0.8f64);
        let down = downsample2x(&c).unwrap();
        assert!(down.data().iter().all(|&v| v == 0.8));
        assert_eq!(resize_bilinear(&down, 4, 6).unwrap(), c);
    }

    #[test]
    fn odd_dimension_rejected() {
        let x = Tensor::<f32>::zeros(vec![1, 1, 3, 4]);
        assert!(matches!(
            downsample2x(&x),
            Err(Error::Dimension { dim: "height", .. })
        ));
    }
}
