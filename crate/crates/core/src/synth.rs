//! Deterministic generators of paired (degraded, clean) samples: blurred
//! reflection overlays, oriented rain streaks, and a scattering haze model.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{save_image, Image};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegradationKind {
    Reflection,
    Rain,
    Haze,
}

impl DegradationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DegradationKind::Reflection => "reflection",
            DegradationKind::Rain => "rain",
            DegradationKind::Haze => "haze",
        }
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reflection" => Ok(DegradationKind::Reflection),
            "rain" => Ok(DegradationKind::Rain),
            "haze" => Ok(DegradationKind::Haze),
            other => Err(Error::InvalidArgument(format!(
                "unknown degradation `{other}` (expected rain, reflection or haze)"
            ))),
        }
    }
}

/// Closed interval a parameter is drawn from uniformly. `[v, v]` pins the value.
pub type Range = [f64; 2];

/// Sampling ranges for every generator. Desk-scale defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthRanges {
    pub reflection_sigma: Range,
    pub reflection_beta: Range,
    pub rain_density: Range,
    pub rain_length: Range,
    pub rain_angle_deg: Range,
    pub rain_sigma: Range,
    pub rain_contrast: Range,
    pub haze_airlight: Range,
    pub haze_beta: Range,
}

impl Default for SynthRanges {
    fn default() -> Self {
        SynthRanges {
            reflection_sigma: [2.0, 5.0],
            reflection_beta: [0.4, 0.8],
            rain_density: [0.01, 0.10],
            rain_length: [8.0, 24.0],
            rain_angle_deg: [60.0, 120.0],
            rain_sigma: [0.5, 1.5],
            rain_contrast: [0.5, 1.0],
            haze_airlight: [0.7, 1.0],
            haze_beta: [0.6, 1.6],
        }
    }
}

impl SynthRanges {
    pub fn validate(&self) -> Result<()> {
        let checks: [(&str, Range, f64, f64); 9] = [
            ("reflection_sigma", self.reflection_sigma, 1e-9, f64::INFINITY),
            ("reflection_beta", self.reflection_beta, 0.0, f64::INFINITY),
            ("rain_density", self.rain_density, 0.0, 1.0),
            ("rain_length", self.rain_length, 1.0, f64::INFINITY),
            ("rain_angle_deg", self.rain_angle_deg, -360.0, 360.0),
            ("rain_sigma", self.rain_sigma, 1e-9, f64::INFINITY),
            ("rain_contrast", self.rain_contrast, 0.0, f64::INFINITY),
            ("haze_airlight", self.haze_airlight, 0.0, 1.0),
            ("haze_beta", self.haze_beta, 0.0, f64::INFINITY),
        ];
        for (key, [lo, hi], min, max) in checks {
            if !(lo <= hi && lo >= min && hi <= max) {
                return Err(Error::Config {
                    key: format!("synth.{key}"),
                    message: format!("range [{lo}, {hi}] must be ordered and within [{min}, {max}]"),
                });
            }
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: Range) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// Parameters drawn for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SampleParams {
    Reflection {
        sigma: f64,
        beta: f64,
    },
    Rain {
        density: f64,
        length: f64,
        angle_deg: f64,
        sigma: f64,
        contrast: f64,
    },
    Haze {
        airlight: f64,
        beta: f64,
    },
}

#[derive(Clone, Debug)]
pub struct DegradedSample {
    pub degraded: Image,
    pub background: Image,
    pub kind: DegradationKind,
    pub seed: u64,
    pub params: SampleParams,
}

/// Normalized oriented blur kernel: a line segment thickened by a Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct StreakKernel {
    /// Odd side length.
    pub size: usize,
    pub weights: Vec<f64>,
    pub length: f64,
    pub angle_deg: f64,
    pub sigma: f64,
}

impl StreakKernel {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.weights[y * self.size + x]
    }

    pub fn peak(&self) -> f64 {
        self.weights.iter().cloned().fold(0.0, f64::max)
    }
}

/// Builds the streak kernel. The angle is measured counter-clockwise from the
/// image x axis, so 90 degrees is vertical. Weights vanish beyond `3 * sigma`
/// from the segment of length `length` centred on the kernel.
pub fn make_streak_kernel(length: f64, angle_deg: f64, sigma: f64) -> Result<StreakKernel> {
    if !(length >= 1.0) {
        return Err(Error::InvalidArgument(format!("streak length {length} must be >= 1")));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("streak sigma {sigma} must be positive")));
    }
    let half = (length - 1.0) / 2.0;
    let radius = (half + 3.0 * sigma).ceil() as isize;
    let size = (2 * radius + 1) as usize;
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let cutoff = 3.0 * sigma;
    let mut weights = vec![0.0; size * size];
    for (i, w) in weights.iter_mut().enumerate() {
        let dy = (i / size) as f64 - radius as f64;
        let dx = (i % size) as f64 - radius as f64;
        // image y grows downwards
        let along = dx * cos - dy * sin;
        let across = dx * sin + dy * cos;
        let t = along.clamp(-half, half);
        let dist = ((along - t).powi(2) + across * across).sqrt();
        if dist <= cutoff {
            *w = (-dist * dist / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(StreakKernel {
        size,
        weights,
        length,
        angle_deg,
        sigma,
    })
}

/// Same-size correlation of a single plane with zero padding.
fn correlate_plane(plane: &[f64], h: usize, w: usize, k: &StreakKernel) -> Vec<f64> {
    let r = (k.size / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for ky in 0..k.size as isize {
                let iy = y + ky - r;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k.size as isize {
                    let ix = x + kx - r;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    acc += plane[(iy * w as isize + ix) as usize] * k.at(ky as usize, kx as usize);
                }
            }
            out[(y * w as isize + x) as usize] = acc;
        }
    }
    out
}

/// Separable Gaussian blur with replicated borders, radius `ceil(3 sigma)`.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = {
        let raw: Vec<f64> = (-radius..=radius)
            .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    };
    let (h, w) = (img.height() as isize, img.width() as isize);
    let mut tmp = vec![0.0f64; 3 * (h * w) as usize];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, t) in taps.iter().enumerate() {
                    let ix = (x + i as isize - radius).clamp(0, w - 1);
                    acc += t * img.get(c, y as usize, ix as usize) as f64;
                }
                tmp[((c as isize * h + y) * w + x) as usize] = acc;
            }
        }
    }
    Image::from_fn(h as usize, w as usize, |c, y, x| {
        let mut acc = 0.0;
        for (i, t) in taps.iter().enumerate() {
            let iy = (y as isize + i as isize - radius).clamp(0, h - 1);
            acc += t * tmp[((c as isize * h + iy) * w + x as isize) as usize];
        }
        acc as f32
    })
}

fn same_size(a: &Image, b: &Image) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::shape(
            "synth_reflection",
            "spatial",
            format!(
                "background {}x{} vs reflection {}x{}",
                a.height(),
                a.width(),
                b.height(),
                b.width()
            ),
        ));
    }
    Ok(())
}

/// `I = clip(B + beta * blur(R, sigma))`.
pub fn synth_reflection(
    background: &Image,
    reflection_source: &Image,
    seed: u64,
    ranges: &SynthRanges,
) -> Result<DegradedSample> {
    same_size(background, reflection_source)?;
    let mut rng = rng::stream(seed, 0);
    let sigma = uniform(&mut rng, ranges.reflection_sigma);
    let beta = uniform(&mut rng, ranges.reflection_beta);
    let blurred = gaussian_blur(reflection_source, sigma);
    let degraded = Image::from_fn(background.height(), background.width(), |c, y, x| {
        (background.get(c, y, x) as f64 + beta * blurred.get(c, y, x) as f64) as f32
    });
    Ok(DegradedSample {
        degraded,
        background: background.clone(),
        kind: DegradationKind::Reflection,
        seed,
        params: SampleParams::Reflection { sigma, beta },
    })
}

/// Streak layer from a binary noise map. The kernel sums to one, so the layer
/// lies in `[0, 1]` and its mean away from the borders equals the noise density.
pub fn streak_layer(noise: &[f64], h: usize, w: usize, kernel: &StreakKernel) -> Vec<f64> {
    correlate_plane(noise, h, w, kernel)
}

/// `I = clip(B + c * streaks)` with Bernoulli noise blurred along a random direction.
pub fn synth_rain(background: &Image, seed: u64, ranges: &SynthRanges) -> Result<DegradedSample> {
    let (h, w) = (background.height(), background.width());
    if h.min(w) < 16 {
        return Err(Error::Dimension {
            op: "synth_rain",
            dim: if h < 16 { "height" } else { "width" },
            value: h.min(w),
            requirement: ">= 16".into(),
        });
    }
    let mut rng = rng::stream(seed, 0);
    let density = uniform(&mut rng, ranges.rain_density);
    let length = uniform(&mut rng, ranges.rain_length);
    let angle_deg = uniform(&mut rng, ranges.rain_angle_deg);
    let sigma = uniform(&mut rng, ranges.rain_sigma);
    let contrast = uniform(&mut rng, ranges.rain_contrast);
    let noise: Vec<f64> = (0..h * w)
        .map(|_| if rng.gen::<f64>() < density { 1.0 } else { 0.0 })
        .collect();
    let kernel = make_streak_kernel(length, angle_deg, sigma)?;
    let streaks = streak_layer(&noise, h, w, &kernel);
    let degraded = Image::from_fn(h, w, |c, y, x| {
        (background.get(c, y, x) as f64 + contrast * streaks[y * w + x]) as f32
    });
    Ok(DegradedSample {
        degraded,
        background: background.clone(),
        kind: DegradationKind::Rain,
        seed,
        params: SampleParams::Rain {
            density,
            length,
            angle_deg,
            sigma,
            contrast,
        },
    })
}

/// Depth proxy: 1 at the top row (far), 0 at the bottom row (near).
pub fn depth_proxy(h: usize, y: usize) -> f64 {
    if h <= 1 {
        0.0
    } else {
        1.0 - y as f64 / (h - 1) as f64
    }
}

/// Scattering composite `I = B t + A (1 - t)` for a per-row transmission.
pub fn composite_haze(background: &Image, airlight: f64, transmission: impl Fn(usize) -> f64) -> Image {
    Image::from_fn(background.height(), background.width(), |c, y, x| {
        let t = transmission(y);
        (background.get(c, y, x) as f64 * t + airlight * (1.0 - t)) as f32
    })
}

/// Haze with `t = exp(-beta * D)` over a vertical depth proxy.
pub fn synth_haze(background: &Image, seed: u64, ranges: &SynthRanges) -> Result<DegradedSample> {
    let mut rng = rng::stream(seed, 0);
    let airlight = uniform(&mut rng, ranges.haze_airlight);
    let beta = uniform(&mut rng, ranges.haze_beta);
    let h = background.height();
    let degraded = composite_haze(background, airlight, |y| (-beta * depth_proxy(h, y)).exp());
    Ok(DegradedSample {
        degraded,
        background: background.clone(),
        kind: DegradationKind::Haze,
        seed,
        params: SampleParams::Haze { airlight, beta },
    })
}

/// One entry of a train/test manifest; paths are relative to the manifest directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub kind: DegradationKind,
    pub degraded: PathBuf,
    pub background: PathBuf,
}

impl ManifestEntry {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}",
            self.kind,
            self.degraded.to_string_lossy(),
            self.background.to_string_lossy()
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.split('\t').collect();
        match parts[..] {
            [kind, degraded, background] => Ok(ManifestEntry {
                kind: kind.parse()?,
                degraded: degraded.into(),
                background: background.into(),
            }),
            _ => Err(Error::InvalidArgument(format!(
                "manifest line `{line}` must be `kind<TAB>degraded<TAB>background`"
            ))),
        }
    }
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&e.to_line());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(ManifestEntry::parse_line)
        .collect()
}

/// Seeded disjoint split. The train side receives `round(n * fraction)` items,
/// kept within `1..n` so both sides are nonempty.
pub fn build_split<S: Clone>(samples: &[S], train_fraction: f64, seed: u64) -> Result<(Vec<S>, Vec<S>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} must lie in (0, 1)"
        )));
    }
    if samples.len() < 2 {
        return Err(Error::InvalidArgument("a split needs at least two samples".into()));
    }
    let n = samples.len();
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, rng::streams::SPLIT));
    let mut train: Vec<usize> = order[..n_train].to_vec();
    let mut test: Vec<usize> = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((
        train.into_iter().map(|i| samples[i].clone()).collect(),
        test.into_iter().map(|i| samples[i].clone()).collect(),
    ))
}

/// Crops to the target aspect ratio around the centre, then resizes bilinearly.
pub fn fit_to(img: &Image, h: usize, w: usize) -> Result<Image> {
    if (img.height(), img.width()) == (h, w) {
        return Ok(img.clone());
    }
    let (ih, iw) = (img.height() as f64, img.width() as f64);
    let target = w as f64 / h as f64;
    let (ch, cw) = if iw / ih > target {
        (img.height(), ((ih * target).round() as usize).clamp(1, img.width()))
    } else {
        (((iw / target).round() as usize).clamp(1, img.height()), img.width())
    };
    img.center_crop(ch, cw)?.resized(h, w)
}

/// Smooth colour field with shapes and texture, used when no photographs are at hand.
pub fn procedural_background(seed: u64, h: usize, w: usize) -> Image {
    let mut rng = rng::stream(seed, 0xb6);
    let base: [[f64; 3]; 2] = [
        [rng.gen_range(0.1..0.6), rng.gen_range(0.1..0.6), rng.gen_range(0.1..0.6)],
        [rng.gen_range(0.2..0.7), rng.gen_range(0.2..0.7), rng.gen_range(0.2..0.7)],
    ];
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let freq: f64 = rng.gen_range(0.05..0.25);
    let amp: f64 = rng.gen_range(0.02..0.08);
    let shapes: Vec<(f64, f64, f64, [f64; 3], bool)> = (0..rng.gen_range(2..5))
        .map(|_| {
            (
                rng.gen_range(0.0..h as f64),
                rng.gen_range(0.0..w as f64),
                rng.gen_range(0.1..0.3) * h.min(w) as f64,
                [rng.gen_range(0.0..0.7), rng.gen_range(0.0..0.7), rng.gen_range(0.0..0.7)],
                rng.gen_bool(0.5),
            )
        })
        .collect();
    Image::from_fn(h, w, |c, y, x| {
        let (yf, xf) = (y as f64 / h as f64, x as f64 / w as f64);
        let t = (xf * angle.cos() + yf * angle.sin()).rem_euclid(1.0);
        let mut v = base[0][c] * (1.0 - t) + base[1][c] * t;
        v += amp * ((x as f64 * freq).sin() * (y as f64 * freq * 0.7).cos());
        for &(cy, cx, r, col, round) in &shapes {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let inside = if round {
                dy * dy + dx * dx <= r * r
            } else {
                dy.abs() <= r && dx.abs() <= r * 0.7
            };
            if inside {
                v = 0.5 * v + 0.5 * col[c];
            }
        }
        v as f32
    })
}

/// One generated pair together with where it was written.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub kind: DegradationKind,
    pub seed: u64,
    pub background_source: String,
    pub params: SampleParams,
}

/// Dataset generation request.
#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub kind: DegradationKind,
    pub count: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub train_fraction: f64,
    pub ranges: SynthRanges,
    /// Worker threads; 0 or 1 runs sequentially.
    pub threads: usize,
}

#[derive(Clone, Debug)]
pub struct DatasetSummary {
    pub train: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
    pub records: Vec<SampleRecord>,
}

/// Generates sample `index` of a dataset; a pure function of its arguments.
pub fn generate_sample(
    spec: &DatasetSpec,
    backgrounds: &[Image],
    index: usize,
) -> Result<(DegradedSample, usize)> {
    if backgrounds.is_empty() {
        return Err(Error::InvalidArgument("no background images".into()));
    }
    let seed = rng::derive_seed(spec.seed, index as u64);
    let mut pick = rng::stream(seed, 0x9c);
    let bg_index = pick.gen_range(0..backgrounds.len());
    let background = fit_to(&backgrounds[bg_index], spec.height, spec.width)?;
    let sample = match spec.kind {
        DegradationKind::Reflection => {
            let mut r = pick.gen_range(0..backgrounds.len());
            if backgrounds.len() > 1 && r == bg_index {
                r = (r + 1) % backgrounds.len();
            }
            let source = fit_to(&backgrounds[r], spec.height, spec.width)?;
            synth_reflection(&background, &source, seed, &spec.ranges)?
        }
        DegradationKind::Rain => synth_rain(&background, seed, &spec.ranges)?,
        DegradationKind::Haze => synth_haze(&background, seed, &spec.ranges)?,
    };
    Ok((sample, bg_index))
}

fn generate_all(spec: &DatasetSpec, backgrounds: &[Image]) -> Result<Vec<(DegradedSample, usize)>> {
    if spec.threads <= 1 || spec.count < 2 {
        return (0..spec.count)
            .map(|i| generate_sample(spec, backgrounds, i))
            .collect();
    }
    let threads = spec.threads.min(spec.count);
    let mut slots: Vec<Option<Result<(DegradedSample, usize)>>> = (0..spec.count).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (t, chunk) in slots.chunks_mut(spec.count.div_ceil(threads)).enumerate() {
            let start = t * spec.count.div_ceil(threads);
            scope.spawn(move || {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(generate_sample(spec, backgrounds, start + k));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

/// Writes `<out>/<kind>/<index>_in.ppm`, `<out>/<kind>/<index>_gt.ppm`,
/// `manifest_train.txt`, `manifest_test.txt` and `params.jsonl`.
pub fn write_dataset(spec: &DatasetSpec, backgrounds: &[Image], out: &Path) -> Result<DatasetSummary> {
    spec.ranges.validate()?;
    let kind_dir = out.join(spec.kind.as_str());
    fs::create_dir_all(&kind_dir).map_err(|e| Error::io(&kind_dir, e))?;
    let samples = if spec.count == 0 {
        Vec::new()
    } else {
        generate_all(spec, backgrounds)?
    };
    let mut entries = Vec::with_capacity(samples.len());
    let mut records = Vec::with_capacity(samples.len());
    let mut params = String::new();
    for (index, (sample, bg)) in samples.iter().enumerate() {
        let rel_in = PathBuf::from(spec.kind.as_str()).join(format!("{index:05}_in.ppm"));
        let rel_gt = PathBuf::from(spec.kind.as_str()).join(format!("{index:05}_gt.ppm"));
        save_image(&sample.degraded, out.join(&rel_in))?;
        save_image(&sample.background, out.join(&rel_gt))?;
        entries.push(ManifestEntry {
            kind: spec.kind,
            degraded: rel_in,
            background: rel_gt,
        });
        let record = SampleRecord {
            index,
            kind: spec.kind,
            seed: sample.seed,
            background_source: backgrounds[*bg]
                .source()
                .and_then(|p| p.file_name())
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("background#{bg}")),
            params: sample.params.clone(),
        };
        params.push_str(&serde_json::to_string(&record).expect("record serializes"));
        params.push('\n');
        records.push(record);
    }
    let (train, test) = match entries.len() {
        0 => (Vec::new(), Vec::new()),
        1 => (entries.clone(), Vec::new()),
        _ => build_split(&entries, spec.train_fraction, spec.seed)?,
    };
    write_manifest(&out.join("manifest_train.txt"), &train)?;
    write_manifest(&out.join("manifest_test.txt"), &test)?;
    let params_path = out.join("params.jsonl");
    fs::write(&params_path, params).map_err(|e| Error::io(&params_path, e))?;
    Ok(DatasetSummary { train, test, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bg() -> Image {
        procedural_background(11, 32, 32)
    }

    fn pinned(mut r: SynthRanges, f: impl FnOnce(&mut SynthRanges)) -> SynthRanges {
        f(&mut r);
        r
    }

    #[test]
    fn zero_beta_reflection_is_identity() {
        let ranges = pinned(SynthRanges::default(), |r| r.reflection_beta = [0.0, 0.0]);
        let s = synth_reflection(&bg(), &procedural_background(5, 32, 32), 7, &ranges).unwrap();
        assert_eq!(s.degraded, s.background);
    }

    #[test]
    fn black_reflection_is_identity() {
        let s = synth_reflection(&bg(), &Image::filled(32, 32, [0.0; 3]), 7, &SynthRanges::default()).unwrap();
        assert_eq!(s.degraded, s.background);
    }

    #[test]
    fn reflection_size_mismatch() {
        assert!(synth_reflection(&bg(), &Image::filled(16, 32, [0.0; 3]), 7, &SynthRanges::default()).is_err());
    }

    #[test]
    fn zero_density_rain_is_identity() {
        let ranges = pinned(SynthRanges::default(), |r| r.rain_density = [0.0, 0.0]);
        let s = synth_rain(&bg(), 3, &ranges).unwrap();
        assert_eq!(s.degraded, s.background);
    }

    #[test]
    fn rain_never_darkens() {
        for seed in 0..20 {
            let s = synth_rain(&bg(), seed, &SynthRanges::default()).unwrap();
            assert!(s.degraded.mean() >= s.background.mean());
        }
    }

    #[test]
    fn vertical_streak_from_single_point() {
        let k = make_streak_kernel(11.0, 90.0, 0.8).unwrap();
        let (h, w) = (41, 41);
        let mut noise = vec![0.0; h * w];
        noise[20 * w + 20] = 1.0;
        let layer = streak_layer(&noise, h, w, &k);
        // bright pixels lie on the centre column
        let max = layer.iter().cloned().fold(0.0, f64::max);
        let bright: Vec<(usize, usize)> = (0..h * w)
            .filter(|&i| layer[i] > 0.5 * max)
            .map(|i| (i / w, i % w))
            .collect();
        assert!(bright.iter().all(|&(_, x)| x == 20));
        let rows: Vec<usize> = bright.iter().map(|&(y, _)| y).collect();
        let extent = rows.iter().max().unwrap() - rows.iter().min().unwrap() + 1;
        assert!((extent as f64 - 11.0).abs() <= 2.0, "extent {extent}");
        assert!(rows.contains(&20));
    }

    #[test]
    fn mirrored_angle_is_a_horizontal_flip() {
        for (angle, len, sigma) in [(60.0, 9.0, 0.7), (75.0, 14.0, 1.2), (100.0, 20.0, 0.5), (120.0, 8.0, 1.5)] {
            let a = make_streak_kernel(len, angle, sigma).unwrap();
            let b = make_streak_kernel(len, 180.0 - angle, sigma).unwrap();
            assert_eq!(a.size, b.size);
            for y in 0..a.size {
                for x in 0..a.size {
                    let d: f64 = a.at(y, x) - b.at(y, a.size - 1 - x);
                    assert!(d.abs() < 1e-12, "angle {angle} at ({y}, {x})");
                }
            }
        }
    }

    #[test]
    fn streak_layer_mean_is_density() {
        let k = make_streak_kernel(9.0, 70.0, 1.0).unwrap();
        let (h, w) = (64, 64);
        let noise: Vec<f64> = (0..h * w).map(|i| if i % 17 == 3 { 1.0 } else { 0.0 }).collect();
        let layer = streak_layer(&noise, h, w, &k);
        let r = k.size / 2;
        let inner = |v: &[f64]| {
            let mut s = 0.0;
            for y in r..h - r {
                for x in r..w - r {
                    s += v[y * w + x];
                }
            }
            s / ((h - 2 * r) * (w - 2 * r)) as f64
        };
        assert!((inner(&layer) - inner(&noise)).abs() < 0.01);
        assert!(layer.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn zero_beta_haze_is_identity() {
        let ranges = pinned(SynthRanges::default(), |r| r.haze_beta = [0.0, 0.0]);
        let s = synth_haze(&bg(), 1, &ranges).unwrap();
        assert_eq!(s.degraded, s.background);
    }

    #[test]
    fn opaque_haze_is_airlight() {
        let out = composite_haze(&bg(), 0.8, |_| 0.0);
        assert!(out.data().iter().all(|&v| v == 0.8f64 as f32));
    }

    #[test]
    fn haze_stays_between_background_and_airlight() {
        let b = bg();
        for seed in 0..5 {
            let s = synth_haze(&b, seed, &SynthRanges::default()).unwrap();
            let SampleParams::Haze { airlight, .. } = s.params else { panic!() };
            for c in 0..3 {
                for y in 0..32 {
                    for x in 0..32 {
                        let v = s.degraded.get(c, y, x) as f64;
                        let bv = b.get(c, y, x) as f64;
                        let a = airlight as f32 as f64;
                        assert!(v >= bv.min(a) - 1e-6 && v <= bv.max(a) + 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn unit_length_kernel_is_isotropic() {
        let k = make_streak_kernel(1.0, 37.0, 1.2).unwrap();
        for y in 0..k.size {
            for x in 0..k.size {
                assert!((k.at(y, x) - k.at(x, y)).abs() < 1e-12);
                assert!((k.at(y, x) - k.at(k.size - 1 - y, x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kernel_validation() {
        assert!(make_streak_kernel(0.5, 90.0, 1.0).is_err());
        assert!(make_streak_kernel(4.0, 90.0, 0.0).is_err());
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let items: Vec<usize> = (0..10).collect();
        let (train, test) = build_split(&items, 0.8, 9).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        assert!(train.iter().all(|i| !test.contains(i)));
        let mut all = [train.clone(), test.clone()].concat();
        all.sort_unstable();
        assert_eq!(all, items);
        assert_eq!(build_split(&items, 0.8, 9).unwrap(), (train, test));
        assert!(build_split(&items, 1.0, 9).is_err());
        assert!(build_split(&items, 0.0, 9).is_err());
        assert!(build_split(&items[..1], 0.5, 9).is_err());
    }

    #[test]
    fn manifest_line_round_trip() {
        let e = ManifestEntry {
            kind: DegradationKind::Rain,
            degraded: "rain/00001_in.ppm".into(),
            background: "rain/00001_gt.ppm".into(),
        };
        assert_eq!(ManifestEntry::parse_line(&e.to_line()).unwrap(), e);
        assert!(ManifestEntry::parse_line("rain only").is_err());
    }
}
