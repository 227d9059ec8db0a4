//! Training objective: pixel and perceptual reconstruction over every pathway,
//! an adversarial term from a spectrally normalized discriminator, and their
//! weighted total.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, Init, ParamStore};
use crate::rng::{stream, streams};
use crate::tensor::ops::SpectralState;
use crate::tensor::{Scalar, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Pixel term, per pathway.
    pub alpha1: f64,
    /// Pixel term, final image.
    pub beta1: f64,
    /// Perceptual term, per pathway.
    pub alpha2: f64,
    /// Perceptual term, final image.
    pub beta2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha1: 0.1,
            beta1: 0.5,
            alpha2: 0.1,
            beta2: 0.5,
            lambda1: 1.0,
            lambda2: 0.01,
            lambda3: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("alpha1", self.alpha1),
            ("beta1", self.beta1),
            ("alpha2", self.alpha2),
            ("beta2", self.beta2),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ];
        for (key, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config {
                    key: format!("loss_weights.{key}"),
                    message: format!("{v} must be a nonnegative finite number"),
                });
            }
        }
        Ok(())
    }

    /// `lambda1 * pixel + lambda2 * perceptual + lambda3 * adversarial` on plain numbers.
    pub fn total(&self, pixel: f64, perceptual: f64, adversarial: f64) -> f64 {
        self.lambda1 * pixel + self.lambda2 * perceptual + self.lambda3 * adversarial
    }
}

/// Mean absolute difference.
pub fn l1<'g, T: Scalar>(a: Var<'g, T>, b: Var<'g, T>) -> Result<Var<'g, T>> {
    Ok(a.sub(b)?.abs().mean())
}

fn at_size<'g, T: Scalar>(gt: Var<'g, T>, like: Var<'g, T>) -> Result<Var<'g, T>> {
    let (gs, s) = (gt.shape(), like.shape());
    if s.len() != 4 || gs.len() != 4 || s[..2] != gs[..2] {
        return Err(Error::shape("loss", "output", format!("{s:?} vs ground truth {gs:?}")));
    }
    gt.resize_bilinear(s[2], s[3])
}

/// Weighted sum of a per-pathway term and a final-image term.
fn reconstruction<'g, T: Scalar>(
    gt: Var<'g, T>,
    pathways: &[Var<'g, T>],
    final_image: Var<'g, T>,
    per_pathway: f64,
    final_weight: f64,
    mut dist: impl FnMut(Var<'g, T>, Var<'g, T>) -> Result<Var<'g, T>>,
) -> Result<Var<'g, T>> {
    if gt.shape() != final_image.shape() {
        return Err(Error::shape(
            "loss",
            "final",
            format!("{:?} vs ground truth {:?}", final_image.shape(), gt.shape()),
        ));
    }
    let mut acc = dist(gt, final_image)?.scale(T::of(final_weight));
    for &b in pathways {
        acc = acc.add(dist(at_size(gt, b)?, b)?.scale(T::of(per_pathway)))?;
    }
    Ok(acc)
}

/// `alpha1 * sum_i L1(B_i, B^_i) + beta1 * L1(B, B^out)`, ground truth resized per pathway.
pub fn pixel_loss<'g, T: Scalar>(
    gt: Var<'g, T>,
    pathways: &[Var<'g, T>],
    final_image: Var<'g, T>,
    w: &LossWeights,
) -> Result<Var<'g, T>> {
    reconstruction(gt, pathways, final_image, w.alpha1, w.beta1, l1)
}

/// Frozen convolutional feature pyramid standing in for a pretrained classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualExtractor<T> {
    pub params: ParamStore<T>,
}

/// Output channels of the extractor levels; level 0 keeps full resolution.
pub const EXTRACTOR_CHANNELS: [usize; 4] = [8, 16, 32, 64];

impl<T: Scalar> PerceptualExtractor<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = stream(seed, streams::INIT_EXTRACTOR);
        let mut params = ParamStore::new();
        let mut cin = 3;
        for (i, &c) in EXTRACTOR_CHANNELS.iter().enumerate() {
            params
                .conv(&format!("perc.conv{i}"), c, cin, 3, true, Init::FanIn { gain: 1.0 }, &mut rng)
                .expect("fresh store");
            cin = c;
        }
        PerceptualExtractor { params }
    }

    /// Uses externally supplied weights laid out as [`PerceptualExtractor::new`] lays them out.
    pub fn from_params(params: ParamStore<T>) -> Result<Self> {
        let reference = PerceptualExtractor::<T>::new(0).params;
        if params.len() != reference.len() {
            return Err(Error::Checkpoint(format!(
                "extractor needs {} tensors, got {}",
                reference.len(),
                params.len()
            )));
        }
        for (name, t) in reference.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Checkpoint(format!(
                        "extractor tensor `{name}` has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("extractor tensor `{name}` missing"))),
            }
        }
        Ok(PerceptualExtractor { params })
    }

    /// Tap activations, finest first.
    pub fn features<'g>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Vec<Var<'g, T>>> {
        let mut taps = Vec::with_capacity(EXTRACTOR_CHANNELS.len());
        let mut y = x;
        for i in 0..EXTRACTOR_CHANNELS.len() {
            let stride = if i == 0 { 1 } else { 2 };
            y = p.conv(y, &format!("perc.conv{i}"), stride, 1)?.leaky_relu();
            taps.push(y);
        }
        Ok(taps)
    }

    /// Mean over taps of the mean absolute feature difference.
    pub fn distance<'g>(&self, p: &Bound<'g, T>, a: Var<'g, T>, b: Var<'g, T>) -> Result<Var<'g, T>> {
        let (fa, fb) = (self.features(p, a)?, self.features(p, b)?);
        let mut acc: Option<Var<'g, T>> = None;
        for (x, y) in fa.into_iter().zip(fb) {
            let d = l1(x, y)?;
            acc = Some(match acc {
                Some(s) => s.add(d)?,
                None => d,
            });
        }
        Ok(acc.expect("extractor has taps").scale(T::of(1.0 / EXTRACTOR_CHANNELS.len() as f64)))
    }
}

/// `alpha2 * sum_i L_feat(B_i, B^_i) + beta2 * L_feat(B, B^out)`.
pub fn perceptual_loss<'g, T: Scalar>(
    extractor: &PerceptualExtractor<T>,
    p: &Bound<'g, T>,
    gt: Var<'g, T>,
    pathways: &[Var<'g, T>],
    final_image: Var<'g, T>,
    w: &LossWeights,
) -> Result<Var<'g, T>> {
    reconstruction(gt, pathways, final_image, w.alpha2, w.beta2, |a, b| {
        extractor.distance(p, a, b)
    })
}

/// Patch-score discriminator with spectrally normalized convolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    pub params: ParamStore<T>,
    /// One state per convolution weight, in layer order.
    pub spectral: Vec<SpectralState<T>>,
}

/// Channels of the stride-2 discriminator convolutions.
pub const DISCRIMINATOR_CHANNELS: [usize; 4] = [16, 32, 64, 128];

impl<T: Scalar> Discriminator<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = stream(seed, streams::INIT_DISCRIMINATOR);
        let mut params = ParamStore::new();
        let mut cin = 3;
        let he = Init::FanIn { gain: 1.0 };
        for (i, &c) in DISCRIMINATOR_CHANNELS.iter().enumerate() {
            params.conv(&format!("d.conv{i}"), c, cin, 3, true, he, &mut rng).expect("fresh store");
            cin = c;
        }
        params.conv("d.out", 1, cin, 1, true, he, &mut rng).expect("fresh store");
        let mut rng = stream(seed, streams::SPECTRAL);
        let spectral = Self::layer_names()
            .map(|name| {
                let w = params.get(&format!("{name}.weight")).expect("declared");
                let u = (0..w.shape()[0]).map(|_| T::of(rng.gen_range(-1.0..1.0))).collect();
                SpectralState::new(w, u).expect("matching rows")
            })
            .collect();
        Discriminator { params, spectral }
    }

    pub fn layer_names() -> impl Iterator<Item = String> {
        (0..DISCRIMINATOR_CHANNELS.len())
            .map(|i| format!("d.conv{i}"))
            .chain(std::iter::once("d.out".to_string()))
    }

    /// One power-iteration step on every layer, against the current weights.
    pub fn power_iteration(&mut self) -> Result<()> {
        for (name, st) in Self::layer_names().zip(self.spectral.iter_mut()) {
            st.power_iteration(self.params.get(&format!("{name}.weight")).expect("declared"))?;
        }
        Ok(())
    }

    /// Per-sample scores `(B, 1, 1, 1)`: spatial mean of the final 1x1 map.
    pub fn scores<'g>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let mut y = x;
        for (i, (name, st)) in Self::layer_names().zip(&self.spectral).enumerate() {
            let w = p.get(&format!("{name}.weight"))?.spectral_normalize(st)?;
            let b = p.try_get(&format!("{name}.bias"));
            y = if i < DISCRIMINATOR_CHANNELS.len() {
                y.conv2d(w, b, 2, 1)?.leaky_relu()
            } else {
                y.conv2d(w, b, 1, 0)?
            };
        }
        let s = y.shape();
        Ok(y.spatial_sum()?.scale(T::of(1.0 / (s[2] * s[3]) as f64)))
    }
}

/// `-mean(scores)`.
pub fn adversarial_from_scores<'g, T: Scalar>(fake_scores: Var<'g, T>) -> Var<'g, T> {
    fake_scores.mean().scale(-T::one())
}

/// `mean(relu(1 - real)) + mean(relu(1 + fake))`.
pub fn hinge_from_scores<'g, T: Scalar>(real: Var<'g, T>, fake: Var<'g, T>) -> Result<Var<'g, T>> {
    let r = real.scale(-T::one()).add_scalar(T::one()).relu().mean();
    let f = fake.add_scalar(T::one()).relu().mean();
    r.add(f)
}

pub fn adversarial_g_loss<'g, T: Scalar>(
    d: &Discriminator<T>,
    p: &Bound<'g, T>,
    fake: Var<'g, T>,
) -> Result<Var<'g, T>> {
    Ok(adversarial_from_scores(d.scores(p, fake)?))
}

/// Hinge objective of the discriminator; `fake` should be detached from the generator.
pub fn discriminator_loss<'g, T: Scalar>(
    d: &Discriminator<T>,
    p: &Bound<'g, T>,
    real: Var<'g, T>,
    fake: Var<'g, T>,
) -> Result<Var<'g, T>> {
    hinge_from_scores(d.scores(p, real)?, d.scores(p, fake)?)
}

pub fn total_loss<'g, T: Scalar>(
    pixel: Var<'g, T>,
    perceptual: Var<'g, T>,
    adversarial: Var<'g, T>,
    w: &LossWeights,
) -> Result<Var<'g, T>> {
    pixel
        .scale(T::of(w.lambda1))
        .add(perceptual.scale(T::of(w.lambda2)))?
        .add(adversarial.scale(T::of(w.lambda3)))
}
