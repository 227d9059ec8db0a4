use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

/// 4-connected neighbours of cell `g` in a row-major `rows x cols` grid.
pub fn grid_neighbors(rows: usize, cols: usize, g: usize) -> Vec<usize> {
    let (r, c) = (g / cols, g % cols);
    let mut out = Vec::with_capacity(4);
    if r > 0 {
        out.push(g - cols);
    }
    if c > 0 {
        out.push(g - 1);
    }
    if c + 1 < cols {
        out.push(g + 1);
    }
    if r + 1 < rows {
        out.push(g + cols);
    }
    out
}

fn patch_dims(
    op: &'static str,
    shape: (usize, usize, usize, usize),
    rows: usize,
    cols: usize,
) -> Result<(usize, usize)> {
    let (_, _, h, w) = shape;
    if rows == 0 || h % rows != 0 {
        return Err(Error::Dimension {
            op,
            dim: "height",
            value: h,
            requirement: format!("divisible by {rows} grid rows"),
        });
    }
    if cols == 0 || w % cols != 0 {
        return Err(Error::Dimension {
            op,
            dim: "width",
            value: w,
            requirement: format!("divisible by {cols} grid columns"),
        });
    }
    Ok((h / rows, w / cols))
}

/// Copies between an intact (B,C,H,W) layout and the patch-major
/// (B*rows*cols, C, H/rows, W/cols) layout. `to_patches` selects the direction.
fn shuffle_patches<T: Scalar>(
    src: &[T],
    dst: &mut [T],
    intact: (usize, usize, usize, usize),
    rows: usize,
    cols: usize,
    to_patches: bool,
) {
    let (b, c, h, w) = intact;
    let (ph, pw) = (h / rows, w / cols);
    for bi in 0..b {
        for r in 0..rows {
            for q in 0..cols {
                let n = (bi * rows + r) * cols + q;
                for ch in 0..c {
                    for y in 0..ph {
                        let intact_off = ((bi * c + ch) * h + r * ph + y) * w + q * pw;
                        let patch_off = ((n * c + ch) * ph + y) * pw;
                        if to_patches {
                            dst[patch_off..patch_off + pw]
                                .copy_from_slice(&src[intact_off..intact_off + pw]);
                        } else {
                            dst[intact_off..intact_off + pw]
                                .copy_from_slice(&src[patch_off..patch_off + pw]);
                        }
                    }
                }
            }
        }
    }
}

/// Splits an intact tensor into non-overlapping tiles stacked along the batch axis.
pub fn to_patches<T: Scalar>(x: &Tensor<T>, rows: usize, cols: usize) -> Result<Tensor<T>> {
    let dims = x.dims4("to_patches")?;
    let (ph, pw) = patch_dims("to_patches", dims, rows, cols)?;
    let mut out = Tensor::zeros(vec![dims.0 * rows * cols, dims.1, ph, pw]);
    shuffle_patches(x.data(), out.data_mut(), dims, rows, cols, true);
    Ok(out)
}

/// Inverse of [`to_patches`].
pub fn from_patches<T: Scalar>(x: &Tensor<T>, rows: usize, cols: usize) -> Result<Tensor<T>> {
    let (n, c, ph, pw) = x.dims4("from_patches")?;
    let per = rows * cols;
    if per == 0 || n % per != 0 {
        return Err(Error::shape(
            "from_patches",
            "batch",
            format!("{n} patches do not form whole {rows}x{cols} grids"),
        ));
    }
    let dims = (n / per, c, ph * rows, pw * cols);
    let mut out = Tensor::zeros(vec![dims.0, dims.1, dims.2, dims.3]);
    shuffle_patches(x.data(), out.data_mut(), dims, rows, cols, false);
    Ok(out)
}

/// Strides of `a` broadcast against a rank-4 target shape (0 on broadcast axes).
fn broadcast_strides(op: &'static str, target: &[usize], a: &[usize]) -> Result<[usize; 4]> {
    if a.len() != 4 || target.len() != 4 {
        return Err(Error::shape(op, "rank", format!("{target:?} vs {a:?}")));
    }
    let mut strides = [0; 4];
    let mut acc = 1;
    for d in (0..4).rev() {
        if a[d] == target[d] {
            strides[d] = acc;
        } else if a[d] != 1 {
            return Err(Error::shape(
                op,
                ["batch", "channels", "height", "width"][d],
                format!("cannot broadcast {a:?} to {target:?}"),
            ));
        }
        acc *= a[d];
    }
    Ok(strides)
}

fn for_each_broadcast(shape: &[usize], strides: [usize; 4], mut f: impl FnMut(usize, usize)) {
    let mut i = 0;
    for n in 0..shape[0] {
        for c in 0..shape[1] {
            for y in 0..shape[2] {
                let base = n * strides[0] + c * strides[1] + y * strides[2];
                for x in 0..shape[3] {
                    f(i, base + x * strides[3]);
                    i += 1;
                }
            }
        }
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Channel-wise concatenation of tensors sharing batch and spatial size.
    pub fn concat_channels(parts: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_channels of nothing".into()))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let (b, _, h, w) = values[0].dims4("concat_channels")?;
        let mut chans = Vec::with_capacity(parts.len());
        for v in &values {
            let (vb, vc, vh, vw) = v.dims4("concat_channels")?;
            if vb != b {
                return Err(Error::shape("concat_channels", "batch", format!("{vb} vs {b}")));
            }
            if (vh, vw) != (h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    "spatial",
                    format!("{vh}x{vw} vs {h}x{w}"),
                ));
            }
            chans.push(vc);
        }
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Tensor::zeros(vec![b, total, h, w]);
        for bi in 0..b {
            let mut off = 0;
            for (v, &c) in values.iter().zip(&chans) {
                let src = &v.data()[bi * c * hw..(bi + 1) * c * hw];
                let start = (bi * total + off) * hw;
                out.data_mut()[start..start + c * hw].copy_from_slice(src);
                off += c;
            }
        }
        Ok(first.graph().push(
            "concat_channels",
            out,
            parts,
            Box::new(move |g, needs| {
                let mut off = 0;
                chans
                    .iter()
                    .zip(needs)
                    .map(|(&c, &need)| {
                        let this = off;
                        off += c;
                        need.then(|| {
                            let mut gi = Tensor::zeros(vec![b, c, h, w]);
                            for bi in 0..b {
                                let start = (bi * total + this) * hw;
                                gi.data_mut()[bi * c * hw..(bi + 1) * c * hw]
                                    .copy_from_slice(&g.data()[start..start + c * hw]);
                            }
                            gi
                        })
                    })
                    .collect()
            }),
        ))
    }

    /// Per-pixel (mean, max) over channels, producing 2 channels.
    /// The max gradient goes to the first maximal channel.
    pub fn channel_stats(self) -> Result<Var<'g, T>> {
        let x = self.value();
        let (b, c, h, w) = x.dims4("channel_stats")?;
        if c == 0 {
            return Err(Error::Dimension {
                op: "channel_stats",
                dim: "channels",
                value: 0,
                requirement: ">= 1".into(),
            });
        }
        let hw = h * w;
        let inv = T::one() / T::of(c as f64);
        let mut out = Tensor::zeros(vec![b, 2, h, w]);
        let mut argmax = vec![0usize; b * hw];
        for bi in 0..b {
            for p in 0..hw {
                let mut sum = T::zero();
                let mut best = T::neg_infinity();
                let mut arg = 0;
                for ch in 0..c {
                    let v = x.data()[(bi * c + ch) * hw + p];
                    sum += v;
                    if v > best {
                        best = v;
                        arg = ch;
                    }
                }
                out.data_mut()[bi * 2 * hw + p] = sum * inv;
                out.data_mut()[(bi * 2 + 1) * hw + p] = best;
                argmax[bi * hw + p] = arg;
            }
        }
        Ok(self.graph().push(
            "channel_stats",
            out,
            &[self],
            Box::new(move |g, _| {
                let mut gi = Tensor::zeros(vec![b, c, h, w]);
                for bi in 0..b {
                    for p in 0..hw {
                        let gm = g.data()[bi * 2 * hw + p] * inv;
                        let gx = g.data()[(bi * 2 + 1) * hw + p];
                        for ch in 0..c {
                            gi.data_mut()[(bi * c + ch) * hw + p] = gm;
                        }
                        gi.data_mut()[(bi * c + argmax[bi * hw + p]) * hw + p] += gx;
                    }
                }
                vec![Some(gi)]
            }),
        ))
    }

    pub fn to_patches(self, rows: usize, cols: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let y = to_patches(&x, rows, cols)?;
        if rows * cols == 1 {
            return Ok(self);
        }
        Ok(self.graph().push(
            "to_patches",
            y,
            &[self],
            Box::new(move |g, _| vec![Some(from_patches(g, rows, cols).expect("shape"))]),
        ))
    }

    pub fn from_patches(self, rows: usize, cols: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let y = from_patches(&x, rows, cols)?;
        if rows * cols == 1 {
            return Ok(self);
        }
        Ok(self.graph().push(
            "from_patches",
            y,
            &[self],
            Box::new(move |g, _| vec![Some(to_patches(g, rows, cols).expect("shape"))]),
        ))
    }

    /// For patch-major input (B*rows*cols, ...), replaces each patch by the mean
    /// of its 4-connected grid neighbours.
    pub fn patch_neighbor_mean(self, rows: usize, cols: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let per = rows * cols;
        let n = x.shape().first().copied().unwrap_or(0);
        if per < 2 {
            return Err(Error::InvalidArgument(
                "patch_neighbor_mean needs a grid with at least two patches".into(),
            ));
        }
        if n % per != 0 {
            return Err(Error::shape(
                "patch_neighbor_mean",
                "batch",
                format!("{n} patches do not form whole {rows}x{cols} grids"),
            ));
        }
        let item = x.numel() / n;
        let neighbors: Vec<Vec<usize>> = (0..per).map(|g| grid_neighbors(rows, cols, g)).collect();
        let mut out = Tensor::zeros(x.shape());
        for b in 0..n / per {
            for (gi, nb) in neighbors.iter().enumerate() {
                let count = T::of(nb.len() as f64);
                let dst = (b * per + gi) * item;
                for &r in nb {
                    let src = (b * per + r) * item;
                    for k in 0..item {
                        out.data_mut()[dst + k] += x.data()[src + k];
                    }
                }
                for v in &mut out.data_mut()[dst..dst + item] {
                    *v = *v / count;
                }
            }
        }
        Ok(self.graph().push(
            "patch_neighbor_mean",
            out,
            &[self],
            Box::new(move |g, _| {
                let mut gi = Tensor::zeros(g.shape());
                for b in 0..n / per {
                    for (gidx, nb) in neighbors.iter().enumerate() {
                        let count = T::of(nb.len() as f64);
                        let src = (b * per + gidx) * item;
                        for &r in nb {
                            let dst = (b * per + r) * item;
                            for k in 0..item {
                                gi.data_mut()[dst + k] += g.data()[src + k] / count;
                            }
                        }
                    }
                }
                vec![Some(gi)]
            }),
        ))
    }

    /// Elementwise product with `a` broadcast along its size-1 axes.
    pub fn mul_broadcast(self, a: Var<'g, T>) -> Result<Var<'g, T>> {
        let (x, av) = (self.value(), a.value());
        let strides = broadcast_strides("mul_broadcast", x.shape(), av.shape())?;
        let mut out = Tensor::zeros(x.shape());
        for_each_broadcast(x.shape(), strides, |i, j| {
            out.data_mut()[i] = x.data()[i] * av.data()[j];
        });
        Ok(self.graph().push(
            "mul_broadcast",
            out,
            &[self, a],
            Box::new(move |g, needs| {
                let mut gx = needs[0].then(|| Tensor::zeros(x.shape()));
                let mut ga = needs[1].then(|| Tensor::zeros(av.shape()));
                for_each_broadcast(x.shape(), strides, |i, j| {
                    let gv = g.data()[i];
                    if let Some(gx) = gx.as_mut() {
                        gx.data_mut()[i] = gv * av.data()[j];
                    }
                    if let Some(ga) = ga.as_mut() {
                        ga.data_mut()[j] += gv * x.data()[i];
                    }
                });
                vec![gx, ga]
            }),
        ))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.graph().push(
            "sum",
            Tensor::scalar(x.sum()),
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::full(shape.clone(), g.item()))]),
        )
    }

    pub fn mean(self) -> Var<'g, T> {
        let x = self.value();
        let n = T::of(x.numel() as f64);
        let shape = x.shape().to_vec();
        self.graph().push(
            "mean",
            Tensor::scalar(x.sum() / n),
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::full(shape.clone(), g.item() / n))]),
        )
    }

    /// Sum over height and width: (B,C,H,W) -> (B,C,1,1).
    pub fn spatial_sum(self) -> Result<Var<'g, T>> {
        let x = self.value();
        let (b, c, h, w) = x.dims4("spatial_sum")?;
        let hw = h * w;
        let out = Tensor::from_fn(vec![b, c, 1, 1], |i| {
            x.data()[i * hw..(i + 1) * hw].iter().copied().sum()
        });
        Ok(self.graph().push(
            "spatial_sum",
            out,
            &[self],
            Box::new(move |g, _| {
                vec![Some(Tensor::from_fn(vec![b, c, h, w], |i| g.data()[i / hw]))]
            }),
        ))
    }
}
