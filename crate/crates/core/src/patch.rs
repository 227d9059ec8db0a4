//! Regular patch grids and inter-patch normalization (PN).
//!
//! The restoring intensity of a patch is the per-channel sum of `|x_out / x_in|`
//! over its pixels, taken across one decoder residual block. PN rescales each
//! patch's block output by the mean intensity of its 4-connected neighbours over
//! its own intensity, then adds a learned convolutional bias.
//!
//! The model works on the patch-major layout `(B * rows * cols, C, h, w)`
//! produced by [`Var::to_patches`]; [`PatchGrid`] is the explicit list form.

use crate::error::{Error, Result};
use crate::tensor::ops::{from_patches, to_patches};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Default guard added to the denominator of `|x_out / x_in|`.
pub const PN_EPSILON: f64 = 1e-6;

/// Row-major list of equally sized tiles. Each tile keeps the batch and channel axes.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid<T> {
    pub rows: usize,
    pub cols: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub patches: Vec<Tensor<T>>,
}

impl<T: Scalar> PatchGrid<T> {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Patch-major stacking `(B * rows * cols, C, h, w)`.
    fn packed(&self) -> Result<Tensor<T>> {
        let first = self
            .patches
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty patch grid".into()))?;
        let (b, c, h, w) = first.dims4("patch_grid")?;
        let per = self.rows * self.cols;
        let item = c * h * w;
        let mut data = vec![T::zero(); b * per * item];
        for (g, p) in self.patches.iter().enumerate() {
            for bi in 0..b {
                let dst = (bi * per + g) * item;
                data[dst..dst + item].copy_from_slice(&p.data()[bi * item..(bi + 1) * item]);
            }
        }
        Tensor::new(vec![b * per, c, h, w], data)
    }

    fn validate(&self) -> Result<(usize, usize)> {
        if self.rows == 0 || self.cols == 0 || self.patches.len() != self.rows * self.cols {
            return Err(Error::shape(
                "assemble",
                "patches",
                format!(
                    "{} patches for a {}x{} grid",
                    self.patches.len(),
                    self.rows,
                    self.cols
                ),
            ));
        }
        let (b, c, h, w) = self.patches[0].dims4("assemble")?;
        if (h, w) != (self.patch_h, self.patch_w) {
            return Err(Error::shape("assemble", "patch size", format!("{h}x{w} vs {}x{}", self.patch_h, self.patch_w)));
        }
        for p in &self.patches {
            if p.shape() != [b, c, h, w] {
                return Err(Error::shape(
                    "assemble",
                    "patches",
                    format!("patch {:?} differs from {:?}", p.shape(), self.patches[0].shape()),
                ));
            }
        }
        Ok((b, c))
    }
}

/// Non-overlapping tiles in row-major order.
pub fn partition<T: Scalar>(x: &Tensor<T>, rows: usize, cols: usize) -> Result<PatchGrid<T>> {
    let (b, c, h, w) = x.dims4("partition")?;
    let packed = to_patches(x, rows, cols)?;
    let (ph, pw) = (h / rows, w / cols);
    let per = rows * cols;
    let item = c * ph * pw;
    let patches = (0..per)
        .map(|g| {
            let mut data = Vec::with_capacity(b * item);
            for bi in 0..b {
                let src = (bi * per + g) * item;
                data.extend_from_slice(&packed.data()[src..src + item]);
            }
            Tensor::new(vec![b, c, ph, pw], data).expect("patch shape")
        })
        .collect();
    Ok(PatchGrid {
        rows,
        cols,
        patch_h: ph,
        patch_w: pw,
        patches,
    })
}

/// Inverse of [`partition`].
pub fn assemble<T: Scalar>(grid: &PatchGrid<T>) -> Result<Tensor<T>> {
    grid.validate()?;
    from_patches(&grid.packed()?, grid.rows, grid.cols)
}

/// Per-channel regularizing factor of one patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PnFactor<T> {
    /// `(B, C, 1, 1)`: one factor per batch item and channel.
    pub scale: Tensor<T>,
    pub neighbor_count: usize,
}

/// Restoring intensity per patch and channel, `(B*P, C, 1, 1)`.
pub fn restoring_intensity<'g, T: Scalar>(
    block_in: Var<'g, T>,
    block_out: Var<'g, T>,
    eps: T,
) -> Result<Var<'g, T>> {
    block_out.abs_ratio(block_in, eps)?.spatial_sum()
}

/// Regularizing factors for every patch of a patch-major block:
/// mean neighbour intensity over own intensity, `(B*P, C, 1, 1)`.
pub fn pn_scale<'g, T: Scalar>(
    block_in: Var<'g, T>,
    block_out: Var<'g, T>,
    rows: usize,
    cols: usize,
    eps: T,
) -> Result<Var<'g, T>> {
    if rows * cols < 2 {
        return Err(Error::InvalidArgument(
            "patch normalization is inapplicable on a single-patch grid".into(),
        ));
    }
    let own = restoring_intensity(block_in, block_out, eps)?;
    // A tiny shift on both sides gives an all-zero channel a unit factor
    // without measurably changing any other ratio.
    let tiny = T::min_positive_value().sqrt();
    own.patch_neighbor_mean(rows, cols)?
        .add_scalar(tiny)
        .div(own.add_scalar(tiny))
}

/// `x_out' = A * x_out + bias(x_out)`.
pub fn pn_apply<'g, T: Scalar>(
    block_out: Var<'g, T>,
    scale: Var<'g, T>,
    bias_branch: impl FnOnce(Var<'g, T>) -> Result<Var<'g, T>>,
) -> Result<Var<'g, T>> {
    let (xs, ss) = (block_out.shape(), scale.shape());
    if xs.len() != 4 || ss.len() != 4 || xs[1] != ss[1] {
        return Err(Error::shape(
            "pn_apply",
            "channels",
            format!("factor {ss:?} does not match features {xs:?}"),
        ));
    }
    let scaled = block_out.mul_broadcast(scale)?;
    let bias = bias_branch(block_out)?;
    scaled.add(bias)
}

/// Regularizing factor of patch `g` for a block with input `grid_in` and output `grid_out`.
pub fn pn_factor<T: Scalar>(
    grid_in: &PatchGrid<T>,
    grid_out: &PatchGrid<T>,
    g: usize,
    eps: T,
) -> Result<PnFactor<T>> {
    if (grid_in.rows, grid_in.cols) != (grid_out.rows, grid_out.cols) {
        return Err(Error::shape("pn_factor", "grid", "input and output grids differ"));
    }
    grid_in.validate()?;
    grid_out.validate()?;
    let per = grid_in.rows * grid_in.cols;
    if g >= per {
        return Err(Error::InvalidArgument(format!("patch index {g} outside grid of {per}")));
    }
    let graph = Graph::new();
    let xin = graph.constant(grid_in.packed()?);
    let xout = graph.constant(grid_out.packed()?);
    let scale = pn_scale(xin, xout, grid_in.rows, grid_in.cols, eps)?.value();
    let (n, c, _, _) = scale.dims4("pn_factor")?;
    let b = n / per;
    let data = (0..b)
        .flat_map(|bi| {
            let start = (bi * per + g) * c;
            scale.data()[start..start + c].to_vec()
        })
        .collect();
    Ok(PnFactor {
        scale: Tensor::new(vec![b, c, 1, 1], data)?,
        neighbor_count: crate::tensor::ops::grid_neighbors(grid_in.rows, grid_in.cols, g).len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_grid(rows: usize, cols: usize, value: impl Fn(usize) -> f64) -> PatchGrid<f64> {
        PatchGrid {
            rows,
            cols,
            patch_h: 2,
            patch_w: 2,
            patches: (0..rows * cols)
                .map(|g| Tensor::full(vec![1, 1, 2, 2], value(g)))
                .collect(),
        }
    }

    #[test]
    fn sixteen_patches() {
        let x = Tensor::from_fn(vec![1, 3, 64, 64], |i| i as f32);
        let grid = partition(&x, 4, 4).unwrap();
        assert_eq!(grid.len(), 16);
        assert!(grid.patches.iter().all(|p| p.shape() == [1, 3, 16, 16]));
        assert_eq!(assemble(&grid).unwrap(), x);
    }

    #[test]
    fn single_patch_is_input() {
        let x = Tensor::from_fn(vec![2, 3, 8, 8], |i| i as f32);
        let grid = partition(&x, 1, 1).unwrap();
        assert_eq!(grid.patches, vec![x.clone()]);
    }

    #[test]
    fn constant_patches_make_blocks() {
        let grid = uniform_grid(2, 3, |g| g as f64);
        let img = assemble(&grid).unwrap();
        assert_eq!(img.shape(), &[1, 1, 4, 6]);
        for y in 0..4 {
            for x in 0..6 {
                assert_eq!(img.data()[y * 6 + x], ((y / 2) * 3 + x / 2) as f64);
            }
        }
    }

    #[test]
    fn malformed_grids_rejected() {
        let mut grid = uniform_grid(2, 2, |_| 1.0);
        grid.patches.pop();
        assert!(assemble(&grid).is_err());
        let mut grid = uniform_grid(2, 2, |_| 1.0);
        grid.patches[1] = Tensor::zeros(vec![1, 1, 3, 2]);
        assert!(assemble(&grid).is_err());
    }

    #[test]
    fn identical_patches_give_unit_factor() {
        let xin = uniform_grid(3, 3, |_| 0.7);
        let xout = uniform_grid(3, 3, |_| 1.3);
        for g in 0..9 {
            let a = pn_factor(&xin, &xout, g, PN_EPSILON).unwrap();
            assert!((a.scale.item() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn centre_patch_with_double_intensity_is_halved() {
        let xin = uniform_grid(3, 3, |_| 1.0);
        let xout = uniform_grid(3, 3, |g| if g == 4 { 2.0 } else { 1.0 });
        let a = pn_factor(&xin, &xout, 4, 0.0).unwrap();
        assert_eq!(a.neighbor_count, 4);
        assert!((a.scale.item() - 0.5).abs() < 1e-12);
        assert_eq!(pn_factor(&xin, &xout, 0, 0.0).unwrap().neighbor_count, 2);
        assert_eq!(pn_factor(&xin, &xout, 1, 0.0).unwrap().neighbor_count, 3);
    }

    #[test]
    fn single_patch_grid_is_inapplicable() {
        let g = uniform_grid(1, 1, |_| 1.0);
        assert!(pn_factor(&g, &g, 0, PN_EPSILON).is_err());
    }

    #[test]
    fn apply_identity_and_halving() {
        let graph = Graph::new();
        let x = graph.constant(Tensor::from_fn(vec![2, 3, 2, 2], |i| i as f64 - 5.0));
        fn zero_bias(v: Var<'_, f64>) -> Result<Var<'_, f64>> {
            Ok(v.scale(0.0))
        }
        let one = graph.constant(Tensor::ones(vec![2, 3, 1, 1]));
        assert_eq!(*pn_apply(x, one, zero_bias).unwrap().value(), *x.value());
        let half = graph.constant(Tensor::full(vec![2, 3, 1, 1], 0.5));
        let y = pn_apply(x, half, zero_bias).unwrap().value();
        assert_eq!(*y, x.value().map(|v| v / 2.0));
        let wrong = graph.constant(Tensor::ones(vec![2, 2, 1, 1]));
        assert!(pn_apply(x, wrong, zero_bias).is_err());
    }

    #[test]
    fn normalization_moves_intensity_toward_neighbours() {
        let graph = Graph::new();
        let xin = uniform_grid(3, 3, |_| 1.0);
        let xout = uniform_grid(3, 3, |g| if g == 4 { 2.0 } else { 1.0 });
        let vin = graph.constant(xin.packed().unwrap());
        let vout = graph.constant(xout.packed().unwrap());
        let a = pn_scale(vin, vout, 3, 3, 0.0).unwrap();
        let adjusted = pn_apply(vout, a, |v| Ok(v.scale(0.0))).unwrap();
        let before = restoring_intensity(vin, vout, 0.0).unwrap().value();
        let after = restoring_intensity(vin, adjusted, 0.0).unwrap().value();
        let neighbour = before.data()[1];
        let log_gap = |s: f64| (s / neighbour).ln().abs();
        assert!(log_gap(after.data()[4]) < log_gap(before.data()[4]));
    }

    proptest! {
        #[test]
        fn partition_assemble_round_trip(
            b in 1usize..3, c in 1usize..4, rows in 1usize..5, cols in 1usize..5,
            ph in 1usize..6, pw in 1usize..6, seed in any::<u64>()
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::from_fn(vec![b, c, rows * ph, cols * pw], |_| rng.gen::<f32>());
            let grid = partition(&x, rows, cols).unwrap();
            prop_assert_eq!(assemble(&grid).unwrap(), x);
        }

        #[test]
        fn factor_is_scale_covariant(seed in any::<u64>(), k in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xin = Tensor::from_fn(vec![1, 2, 6, 6], |_| rng.gen_range(0.5..1.5));
            let xout = Tensor::from_fn(vec![1, 2, 6, 6], |_| rng.gen_range(-1.0..1.0));
            let gin = partition(&xin, 3, 3).unwrap();
            let gout = partition(&xout, 3, 3).unwrap();
            let gscaled = partition(&xout.map(|v| v * k), 3, 3).unwrap();
            for g in 0..9 {
                let a = pn_factor(&gin, &gout, g, PN_EPSILON).unwrap();
                let b = pn_factor(&gin, &gscaled, g, PN_EPSILON).unwrap();
                prop_assert!(a.scale.max_abs_diff(&b.scale) < 1e-9 * a.scale.max_abs().max(1.0));
            }
        }
    }
}
