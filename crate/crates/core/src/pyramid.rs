//! Laplacian pyramid over the fixed operator pair `d` = 2x2 average pooling
//! and `u` = bilinear x2 upsampling.

use crate::error::{Error, Result};
use crate::tensor::ops::{downsample2x, upsample2x};
use crate::tensor::{Scalar, Tensor, Var};

/// High-frequency residuals (finest first), the low-frequency base, and
/// optional per-level single-channel masks.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidDecomposition<T> {
    pub levels: Vec<Tensor<T>>,
    pub low: Tensor<T>,
    pub masks: Option<Vec<Tensor<T>>>,
}

/// `I_{j+1} = d(I_j)`, `h_j = I_j - u(I_{j+1})`, `low = I_n`.
pub fn build<T: Scalar>(image: &Tensor<T>, num_levels: usize) -> Result<PyramidDecomposition<T>> {
    let (_, _, h, w) = image.dims4("pyramid_build")?;
    let factor = 1usize << num_levels;
    for (dim, v) in [("height", h), ("width", w)] {
        if v % factor != 0 || v == 0 {
            return Err(Error::Dimension {
                op: "pyramid_build",
                dim,
                value: v,
                requirement: format!("divisible by 2^{num_levels}"),
            });
        }
    }
    let mut current = image.clone();
    let mut levels = Vec::with_capacity(num_levels);
    for _ in 0..num_levels {
        let down = downsample2x(&current)?;
        let up = upsample2x(&down)?;
        levels.push(current.zip_map(&up, |a, b| a - b)?);
        current = down;
    }
    Ok(PyramidDecomposition {
        levels,
        low: current,
        masks: None,
    })
}

fn apply_mask<T: Scalar>(h: &Tensor<T>, m: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, hh, ww) = h.dims4("pyramid_mask")?;
    let (mb, mc, mh, mw) = m.dims4("pyramid_mask")?;
    if mb != b || mc != 1 || (mh, mw) != (hh, ww) {
        return Err(Error::shape(
            "pyramid_mask",
            "mask",
            format!("mask {:?} does not match level {:?}", m.shape(), h.shape()),
        ));
    }
    let hw = hh * ww;
    Ok(Tensor::from_fn(h.shape().to_vec(), |i| {
        let bi = i / (c * hw);
        h.data()[i] * m.data()[bi * hw + i % hw]
    }))
}

/// Backward recurrence `I_k = u(I_{k+1}) + h_k` (with `h_k` masked when masks are present).
pub fn reconstruct<T: Scalar>(p: &PyramidDecomposition<T>) -> Result<Tensor<T>> {
    if let Some(masks) = &p.masks {
        if masks.len() != p.levels.len() {
            return Err(Error::shape(
                "pyramid_reconstruct",
                "masks",
                format!("{} masks for {} levels", masks.len(), p.levels.len()),
            ));
        }
    }
    let mut current = p.low.clone();
    for (k, h) in p.levels.iter().enumerate().rev() {
        let up = upsample2x(&current)?;
        if up.shape() != h.shape() {
            return Err(Error::shape(
                "pyramid_reconstruct",
                "level",
                format!("level {k} has shape {:?}, upsampled base {:?}", h.shape(), up.shape()),
            ));
        }
        let h = match &p.masks {
            Some(m) => apply_mask(h, &m[k])?,
            None => h.clone(),
        };
        current = up.zip_map(&h, |a, b| a + b)?;
    }
    Ok(current)
}

/// One-level residual `x - u(d(x))` of a restored image.
pub fn extract_highfreq<'g, T: Scalar>(image: Var<'g, T>) -> Result<Var<'g, T>> {
    let low = image.downsample2x()?.upsample2x()?;
    image.sub(low)
}

/// Masked synthesis over a residual chain. `residuals[0]` is the finest level,
/// each next level has half the spatial size, and the last level shares its
/// size with `low`:
/// `out = h'_0 + Up(h'_1 + ... + Up(h'_{n-1} + low))` with `h'_i = h_i * M_i`.
pub fn fuse_chain<'g, T: Scalar>(
    residuals: &[(Var<'g, T>, Var<'g, T>)],
    low: Var<'g, T>,
) -> Result<Var<'g, T>> {
    let Some(((last_h, last_m), rest)) = residuals.split_last() else {
        return Ok(low);
    };
    let masked = |h: Var<'g, T>, m: Var<'g, T>| -> Result<Var<'g, T>> {
        let (hs, ms) = (h.shape(), m.shape());
        if hs.len() != 4 || ms.len() != 4 || ms[1] != 1 || ms[0] != hs[0] || ms[2..] != hs[2..] {
            return Err(Error::shape(
                "fuse_glsgn",
                "mask",
                format!("mask {ms:?} does not match residual {hs:?}"),
            ));
        }
        h.mul_broadcast(m)
    };
    if last_h.shape() != low.shape() {
        return Err(Error::shape(
            "fuse_glsgn",
            "low",
            format!(
                "coarsest residual {:?} must match low component {:?}",
                last_h.shape(),
                low.shape()
            ),
        ));
    }
    let mut acc = masked(*last_h, *last_m)?.add(low)?;
    for &(h, m) in rest.iter().rev() {
        let up = acc.upsample2x()?;
        if up.shape() != h.shape() {
            return Err(Error::shape(
                "fuse_glsgn",
                "level",
                format!("residual {:?} vs upsampled {:?}", h.shape(), up.shape()),
            ));
        }
        acc = masked(h, m)?.add(up)?;
    }
    Ok(acc)
}

/// `B_out = h1*M1 + Up(h2*M2 + Up(h3*M3 + l))`.
pub fn fuse_glsgn<'g, T: Scalar>(
    h1: Var<'g, T>,
    h2: Var<'g, T>,
    h3: Var<'g, T>,
    low: Var<'g, T>,
    masks: [Var<'g, T>; 3],
) -> Result<Var<'g, T>> {
    fuse_chain(&[(h1, masks[0]), (h2, masks[1]), (h3, masks[2])], low)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn constant_image_has_zero_residuals() {
        let x = Tensor::full(vec![1, 3, 16, 16], 0.4f64);
        let p = build(&x, 3).unwrap();
        assert!(p.levels.iter().all(|h| h.max_abs() == 0.0));
        assert!(p.low.data().iter().all(|&v| v == 0.4));
        assert_eq!(p.low.shape(), &[1, 3, 2, 2]);
    }

    #[test]
    fn zero_levels_is_identity() {
        let x = random(vec![1, 3, 6, 10], 1);
        let p = build(&x, 0).unwrap();
        assert!(p.levels.is_empty());
        assert_eq!(p.low, x);
        assert_eq!(reconstruct(&p).unwrap(), x);
    }

    #[test]
    fn indivisible_rejected() {
        assert!(build(&Tensor::<f32>::zeros(vec![1, 3, 12, 16]), 3).is_err());
    }

    #[test]
    fn zero_residuals_reconstruct_to_upsampled_base() {
        let low = random(vec![1, 3, 4, 4], 2);
        let p = PyramidDecomposition {
            levels: vec![Tensor::zeros(vec![1, 3, 16, 16]), Tensor::zeros(vec![1, 3, 8, 8])],
            low: low.clone(),
            masks: None,
        };
        let want = upsample2x(&upsample2x(&low).unwrap()).unwrap();
        assert_eq!(reconstruct(&p).unwrap(), want);
    }

    #[test]
    fn round_trip_random_f32() {
        let x = random(vec![1, 3, 16, 16], 3).cast::<f32>();
        let back = reconstruct(&build(&x, 2).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x) <= 1e-6);
    }

    #[test]
    fn single_pixel_residual_matches_direct_composition() {
        let mut img = Tensor::<f64>::zeros(vec![1, 1, 8, 8]);
        img.data_mut()[3 * 8 + 4] = 1.0;
        // direct loops: d = 2x2 mean, u = bilinear x2 (half-pixel centres)
        let mut d = [[0.0f64; 4]; 4];
        for (y, row) in d.iter_mut().enumerate() {
            for (x, v) in row.iter_mut().enumerate() {
                *v = (0..2)
                    .flat_map(|i| (0..2).map(move |j| (i, j)))
                    .map(|(i, j)| img.data()[(2 * y + i) * 8 + 2 * x + j])
                    .sum::<f64>()
                    / 4.0;
            }
        }
        let src = |o: usize| -> (usize, usize, f64) {
            let s = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = s.floor() as usize;
            (i0, (i0 + 1).min(3), s - i0 as f64)
        };
        let g = Graph::new();
        let h = extract_highfreq(g.constant(img.clone())).unwrap().value();
        for y in 0..8 {
            for x in 0..8 {
                let (y0, y1, fy) = src(y);
                let (x0, x1, fx) = src(x);
                let up = d[y0][x0] * (1.0 - fy) * (1.0 - fx)
                    + d[y0][x1] * (1.0 - fy) * fx
                    + d[y1][x0] * fy * (1.0 - fx)
                    + d[y1][x1] * fy * fx;
                let want = img.data()[y * 8 + x] - up;
                assert!((h.data()[y * 8 + x] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn extract_is_shift_invariant() {
        let x = random(vec![1, 3, 8, 8], 4);
        let g = Graph::new();
        let h0 = extract_highfreq(g.constant(x.clone())).unwrap().value();
        let h1 = extract_highfreq(g.constant(x.map(|v| v + 0.25))).unwrap().value();
        assert!(h0.max_abs_diff(&h1) < 1e-12);
        let c = extract_highfreq(g.constant(Tensor::full(vec![1, 3, 8, 8], 0.6))).unwrap();
        assert!(c.value().max_abs() < 1e-15);
    }

    #[test]
    fn fuse_with_unit_masks_reproduces_image() {
        let x = random(vec![1, 3, 32, 32], 5);
        let p = build(&x, 3).unwrap();
        let g = Graph::new();
        let h: Vec<_> = p.levels.iter().map(|t| g.constant(t.clone())).collect();
        // fusion mode: the coarsest residual shares the size of `low`, so fold
        // the last level into the base
        let low = g.constant(upsample2x(&p.low).unwrap());
        let ones = |t: &Tensor<f64>| {
            let s = t.shape();
            g.constant(Tensor::ones(vec![s[0], 1, s[2], s[3]]))
        };
        let masks = [ones(&p.levels[0]), ones(&p.levels[1]), ones(&p.levels[2])];
        let out = fuse_glsgn(h[0], h[1], h[2], low, masks).unwrap().value();
        assert!(out.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn fuse_with_zero_masks_upsamples_low() {
        let g = Graph::new();
        let low = random(vec![1, 3, 4, 4], 6);
        let h = |s: usize, seed| g.constant(random(vec![1, 3, s, s], seed));
        let z = |s: usize| g.constant(Tensor::zeros(vec![1, 1, s, s]));
        let out = fuse_glsgn(h(16, 7), h(8, 8), h(4, 9), g.constant(low.clone()), [z(16), z(8), z(4)])
            .unwrap()
            .value();
        let want = upsample2x(&upsample2x(&low).unwrap()).unwrap();
        assert!(out.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn fuse_half_masks_constant_residuals() {
        // h1 = 0.4 at 4x4, h2 = 0.2 at 2x2, h3 = 0.1 and l = 0.3 at 1x1, masks 0.5.
        // Up of a constant is that constant, so every pixel is
        // 0.5*0.4 + 0.5*0.2 + 0.5*0.1 + 0.3 = 0.65.
        let g = Graph::new();
        let c = |s: usize, v: f64, ch: usize| g.constant(Tensor::full(vec![1, ch, s, s], v));
        let out = fuse_glsgn(
            c(4, 0.4, 3),
            c(2, 0.2, 3),
            c(1, 0.1, 3),
            c(1, 0.3, 3),
            [c(4, 0.5, 1), c(2, 0.5, 1), c(1, 0.5, 1)],
        )
        .unwrap()
        .value();
        assert_eq!(out.shape(), &[1, 3, 4, 4]);
        assert!(out.data().iter().all(|v| (v - 0.65).abs() < 1e-15));
    }

    #[test]
    fn fuse_rejects_bad_shapes() {
        let g = Graph::new();
        let c = |s: usize, ch: usize| g.constant(Tensor::<f64>::zeros(vec![1, ch, s, s]));
        assert!(fuse_glsgn(c(8, 3), c(4, 3), c(2, 3), c(1, 3), [c(8, 1), c(4, 1), c(2, 1)]).is_err());
        assert!(fuse_glsgn(c(8, 3), c(4, 3), c(2, 3), c(2, 3), [c(8, 3), c(4, 1), c(2, 1)]).is_err());
    }

    proptest! {
        #[test]
        fn reconstruction_is_linear(seed in 0u64..1000, levels in 0usize..3) {
            let a = build(&random(vec![1, 2, 8, 8], seed), levels).unwrap();
            let b = build(&random(vec![1, 2, 8, 8], seed + 1), levels).unwrap();
            let sum = PyramidDecomposition {
                levels: a.levels.iter().zip(&b.levels).map(|(x, y)| x.zip_map(y, |p, q| p + q).unwrap()).collect(),
                low: a.low.zip_map(&b.low, |p, q| p + q).unwrap(),
                masks: None,
            };
            let lhs = reconstruct(&sum).unwrap();
            let rhs = reconstruct(&a).unwrap().zip_map(&reconstruct(&b).unwrap(), |p, q| p + q).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        }

        #[test]
        fn fuse_bounded_by_component_magnitudes(seed in 0u64..1000) {
            let g = Graph::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = |shape: Vec<usize>, lo: f64, hi: f64| {
                Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
            };
            let (h1, h2, h3, l) = (t(vec![1, 3, 8, 8], -1.0, 1.0), t(vec![1, 3, 4, 4], -1.0, 1.0), t(vec![1, 3, 2, 2], -1.0, 1.0), t(vec![1, 3, 2, 2], -1.0, 1.0));
            let ms = [t(vec![1, 1, 8, 8], 0.0, 1.0), t(vec![1, 1, 4, 4], 0.0, 1.0), t(vec![1, 1, 2, 2], 0.0, 1.0)];
            let out = fuse_glsgn(
                g.constant(h1.clone()), g.constant(h2.clone()), g.constant(h3.clone()), g.constant(l.clone()),
                ms.clone().map(|m| g.constant(m)),
            ).unwrap().value();
            let bound = h1.max_abs() + h2.max_abs() + h3.max_abs() + l.max_abs();
            prop_assert!(out.max_abs() <= bound + 1e-12);
        }
    }
}
