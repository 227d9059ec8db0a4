//! Spatial attention and perceptual attention consistency (PAC).
//!
//! Each pathway computes an attention map from its bottleneck features. Before
//! reweighting, a pathway's own map is averaged with the previous pathway's map
//! and with the global pathway's map of its decoded features, so all pathways
//! attend to the same degraded regions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Var};

/// Mixing weights of the previous-pathway and global terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PacWeights {
    pub sigma1: f64,
    pub sigma2: f64,
}

impl Default for PacWeights {
    fn default() -> Self {
        PacWeights {
            sigma1: 0.5,
            sigma2: 0.5,
        }
    }
}

impl PacWeights {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("pac.sigma1", self.sigma1), ("pac.sigma2", self.sigma2)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config {
                    key: key.into(),
                    message: format!("{v} is outside [0, 1]"),
                });
            }
        }
        Ok(())
    }
}

/// Kernel size of the attention convolution.
pub const ATTENTION_KERNEL: usize = 7;

/// `sigmoid(conv7x7([mean_c, max_c]))`, a `(B, 1, H, W)` map.
pub fn spatial_attention<'g, T: Scalar>(
    features: Var<'g, T>,
    weight: Var<'g, T>,
    bias: Var<'g, T>,
) -> Result<Var<'g, T>> {
    let stats = features.channel_stats()?;
    Ok(stats
        .conv2d(weight, Some(bias), 1, ATTENTION_KERNEL / 2)?
        .sigmoid())
}

/// Weighted mean of the available maps. Absent terms drop out of the denominator.
pub fn fuse_attention<'g, T: Scalar>(
    own: Var<'g, T>,
    prev: Option<Var<'g, T>>,
    global: Option<Var<'g, T>>,
    w: PacWeights,
) -> Result<Var<'g, T>> {
    let mut acc = own;
    let mut denom = 1.0;
    for (map, sigma) in [(prev, w.sigma1), (global, w.sigma2)] {
        let Some(map) = map else { continue };
        if map.shape() != own.shape() {
            return Err(Error::shape(
                "fuse_attention",
                "spatial",
                format!("map {:?} vs own {:?}", map.shape(), own.shape()),
            ));
        }
        if sigma != 0.0 {
            acc = acc.add(map.scale(T::of(sigma)))?;
            denom += sigma;
        }
    }
    Ok(if denom == 1.0 {
        acc
    } else {
        acc.scale(T::of(1.0 / denom))
    })
}

/// Broadcast multiply of `features` by a single-channel map.
pub fn reweight<'g, T: Scalar>(features: Var<'g, T>, a: Var<'g, T>) -> Result<Var<'g, T>> {
    let (fs, s) = (features.shape(), a.shape());
    if s.len() != 4 || fs.len() != 4 || s[1] != 1 || s[0] != fs[0] || s[2..] != fs[2..] {
        return Err(Error::shape(
            "reweight",
            "spatial",
            format!("map {s:?} vs features {fs:?}"),
        ));
    }
    features.mul_broadcast(a)
}

/// Placement of a patch-major map: the intact size and the grid it is cut into.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MapGeometry {
    pub height: usize,
    pub width: usize,
    pub rows: usize,
    pub cols: usize,
}

impl MapGeometry {
    fn check(&self, op: &'static str) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.height % self.rows != 0 || self.width % self.cols != 0 {
            return Err(Error::shape(
                op,
                "geometry",
                format!("{}x{} map cannot be cut into {}x{} patches", self.height, self.width, self.rows, self.cols),
            ));
        }
        Ok(())
    }

    pub fn patch_size(&self) -> (usize, usize) {
        (self.height / self.rows, self.width / self.cols)
    }
}

/// Re-expresses a patch-major map laid out per `from` in the layout `to`:
/// assemble, resize the intact map bilinearly, partition again.
pub fn align_map<'g, T: Scalar>(map: Var<'g, T>, from: MapGeometry, to: MapGeometry) -> Result<Var<'g, T>> {
    from.check("align_map")?;
    to.check("align_map")?;
    let s = map.shape();
    let (ph, pw) = from.patch_size();
    if s.len() != 4 || s[0] % (from.rows * from.cols) != 0 || s[2] != ph || s[3] != pw {
        return Err(Error::shape(
            "align_map",
            "map",
            format!("{s:?} does not match geometry {from:?}"),
        ));
    }
    if from == to {
        return Ok(map);
    }
    map.from_patches(from.rows, from.cols)?
        .resize_bilinear(to.height, to.width)?
        .to_patches(to.rows, to.cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_conv_gives_half() {
        let g = Graph::new();
        let f = g.constant(random(&[2, 5, 6, 6], 1));
        let w = g.constant(Tensor::zeros(vec![1, 2, 7, 7]));
        let b = g.constant(Tensor::zeros(vec![1]));
        let a = spatial_attention(f, w, b).unwrap().value();
        assert_eq!(a.shape(), &[2, 1, 6, 6]);
        assert!(a.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn attention_is_bounded_and_shift_equivariant() {
        let g = Graph::new();
        let base = random(&[1, 3, 20, 20], 2);
        let shifted = Tensor::from_fn(vec![1, 3, 20, 20], |i| {
            let (c, y, x) = (i / 400, (i / 20) % 20, i % 20);
            if x >= 2 { base.data()[c * 400 + y * 20 + x - 2] } else { 0.0 }
        });
        let w = g.constant(random(&[1, 2, 7, 7], 3));
        let b = g.constant(Tensor::full(vec![1], 0.1));
        let a0 = spatial_attention(g.constant(base), w, b).unwrap().value();
        let a1 = spatial_attention(g.constant(shifted), w, b).unwrap().value();
        assert!(a0.data().iter().all(|&v| v > 0.0 && v < 1.0));
        for y in 3..17 {
            for x in 5..17 {
                assert!((a1.data()[y * 20 + x] - a0.data()[y * 20 + x - 2]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fusion_fixtures() {
        let g = Graph::new();
        let c = |v: f64| g.constant(Tensor::full(vec![1, 1, 3, 3], v));
        let (own, prev, glob) = (c(0.2), c(0.4), c(0.6));
        let zero = PacWeights { sigma1: 0.0, sigma2: 0.0 };
        assert_eq!(fuse_attention(own, Some(prev), Some(glob), zero).unwrap().id(), own.id());
        let one = PacWeights { sigma1: 1.0, sigma2: 1.0 };
        let m = fuse_attention(own, Some(prev), Some(glob), one).unwrap().value();
        assert!(m.data().iter().all(|v| (v - 0.4).abs() < 1e-15));
        let m = fuse_attention(own, None, Some(glob), one).unwrap().value();
        assert!(m.data().iter().all(|v| (v - 0.4).abs() < 1e-15));
        let other = g.constant(Tensor::zeros(vec![1, 1, 2, 3]));
        assert!(fuse_attention(own, Some(other), None, one).is_err());
        assert!(PacWeights { sigma1: 1.5, sigma2: 0.0 }.validate().is_err());
    }

    #[test]
    fn slot_symmetry_at_unit_weights() {
        let g = Graph::new();
        let maps: Vec<_> = (0..3).map(|s| g.constant(random(&[2, 1, 4, 4], s).map(|v| v.abs()))).collect();
        let one = PacWeights { sigma1: 1.0, sigma2: 1.0 };
        let a = fuse_attention(maps[0], Some(maps[1]), Some(maps[2]), one).unwrap().value();
        let b = fuse_attention(maps[2], Some(maps[0]), Some(maps[1]), one).unwrap().value();
        assert!(a.max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn reweight_scales_features() {
        let g = Graph::new();
        let f = g.constant(random(&[2, 4, 3, 3], 4));
        let half = g.constant(Tensor::full(vec![2, 1, 3, 3], 0.5));
        let y = reweight(f, half).unwrap().value();
        assert_eq!(*y, f.value().map(|v| v * 0.5));
        let ones = g.constant(Tensor::ones(vec![2, 1, 3, 3]));
        assert_eq!(*reweight(f, ones).unwrap().value(), *f.value());
        assert!(reweight(f, g.constant(Tensor::ones(vec![2, 2, 3, 3]))).is_err());
        let eps = 1e-3;
        let tiny = g.constant(Tensor::full(vec![2, 1, 3, 3], eps));
        let y = reweight(f, tiny).unwrap().value();
        assert!(y.data().iter().zip(f.value().data()).all(|(o, x)| o.abs() <= eps * x.abs()));
    }

    #[test]
    fn align_identity_constant_and_smooth() {
        let g = Graph::new();
        let geo = |h, w, r, c| MapGeometry { height: h, width: w, rows: r, cols: c };
        let m = g.constant(random(&[8, 1, 2, 2], 5));
        let same = geo(8, 4, 4, 2);
        assert_eq!(align_map(m, same, same).unwrap().id(), m.id());

        let k = g.constant(Tensor::full(vec![4, 1, 4, 4], 0.3));
        let out = align_map(k, geo(8, 8, 2, 2), geo(4, 4, 1, 1)).unwrap().value();
        assert_eq!(out.shape(), &[1, 1, 4, 4]);
        assert!(out.data().iter().all(|v| (v - 0.3).abs() < 1e-15));

        let smooth = |y: f64, x: f64| 0.5 + 0.3 * (y * 0.2).sin() * (x * 0.15).cos();
        let full = Tensor::from_fn(vec![1, 1, 32, 32], |i| {
            smooth((i / 32) as f64 + 0.5, (i % 32) as f64 + 0.5)
        });
        let src = g.constant(crate::tensor::ops::to_patches(&full, 4, 4).unwrap());
        let down = align_map(src, geo(32, 32, 4, 4), geo(16, 16, 2, 2)).unwrap();
        let back = align_map(down, geo(16, 16, 2, 2), geo(32, 32, 4, 4)).unwrap().value();
        let err = back.max_abs_diff(&src.value());
        assert!(err <= 0.05, "round trip error {err}");
        assert!(align_map(src, geo(32, 32, 4, 4), geo(30, 32, 4, 4)).is_err());
    }

    proptest! {
        #[test]
        fn fused_map_is_convex(seed in any::<u64>(), s1 in 0.0f64..=1.0, s2 in 0.0f64..=1.0,
                               has_prev in any::<bool>(), has_glob in any::<bool>()) {
            let g = Graph::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut map = || g.constant(Tensor::from_fn(vec![2, 1, 5, 5], |_| rng.gen_range(0.0f32..1.0)));
            let (own, prev, glob) = (map(), map(), map());
            let w = PacWeights { sigma1: s1, sigma2: s2 };
            let out = fuse_attention(own, has_prev.then_some(prev), has_glob.then_some(glob), w).unwrap().value();
            let mut maps = vec![own.value()];
            if has_prev { maps.push(prev.value()); }
            if has_glob { maps.push(glob.value()); }
            for (i, v) in out.data().iter().enumerate() {
                let lo = maps.iter().map(|m| m.data()[i]).fold(f32::INFINITY, f32::min);
                let hi = maps.iter().map(|m| m.data()[i]).fold(f32::NEG_INFINITY, f32::max);
                prop_assert!(*v >= lo - 1e-6 && *v <= hi + 1e-6);
            }
        }
    }
}
