//! Optimization loop, augmentation, checkpoints and evaluation.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{load_image, psnr, ssim, Image};
use crate::losses::{self, Discriminator, PerceptualExtractor};
use crate::model::{Glsgn, GlsgnConfig};
use crate::nn::ParamStore;
use crate::rng::{stream, streams};
use crate::synth::{read_manifest, DegradedSample};
use crate::tensor::ops::SpectralState;
use crate::tensor::{DType, Graph, Scalar, Tensor};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let ok = [
            ("lr", self.lr > 0.0 && self.lr.is_finite()),
            ("beta1", (0.0..1.0).contains(&self.beta1)),
            ("beta2", (0.0..1.0).contains(&self.beta2)),
            ("eps", self.eps > 0.0 && self.eps.is_finite()),
        ];
        match ok.iter().find(|(_, good)| !good) {
            Some((key, _)) => Err(Error::Config {
                key: format!("{prefix}.{key}"),
                message: "out of range".into(),
            }),
            None => Ok(()),
        }
    }
}

/// First and second moment buffers, one pair per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    fn check(&self, params: &ParamStore<T>) -> Result<()> {
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer holds {} moments for {} parameters",
                self.m.len(),
                params.len()
            )));
        }
        for ((name, p), (m, v)) in params.iter().zip(self.m.iter().zip(&self.v)) {
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return Err(Error::Checkpoint(format!("optimizer moments of `{name}` have the wrong shape")));
            }
        }
        Ok(())
    }

    /// Bias-corrected Adam update; `grads` are in store order.
    pub fn update(&mut self, cfg: &AdamConfig, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        self.check(params)?;
        if grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (((name, p), g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if g.shape() != p.shape() {
                return Err(Error::shape("adam", "gradient", format!("`{name}`: {:?} vs {:?}", g.shape(), p.shape())));
            }
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i].as_f64();
                let mi = cfg.beta1 * md[i].as_f64() + (1.0 - cfg.beta1) * gi;
                let vi = cfg.beta2 * vd[i].as_f64() + (1.0 - cfg.beta2) * gi * gi;
                md[i] = T::of(mi);
                vd[i] = T::of(vi);
                let delta = cfg.lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
                pd[i] = T::of(pd[i].as_f64() - delta);
            }
        }
        Ok(())
    }
}

/// Degraded input with its clean background.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub degraded: Image,
    pub background: Image,
}

impl From<DegradedSample> for Pair {
    fn from(s: DegradedSample) -> Self {
        Pair {
            degraded: s.degraded,
            background: s.background,
        }
    }
}

/// Joint flip/rotation applied to both images of a pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augmentation {
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    /// Counter-clockwise quarter turns.
    pub quarter_turns: u8,
}

impl Augmentation {
    /// Quarter turns are restricted to 0 or 2 on non-square images so the size is kept.
    pub fn draw(rng: &mut impl Rng, square: bool) -> Self {
        Augmentation {
            flip_horizontal: rng.gen(),
            flip_vertical: rng.gen(),
            quarter_turns: if square { rng.gen_range(0..4) } else { 2 * rng.gen_range(0..2) },
        }
    }

    pub fn apply(&self, img: &Image) -> Image {
        let mut out = img.clone();
        if self.flip_horizontal {
            out = out.flip_horizontal();
        }
        if self.flip_vertical {
            out = out.flip_vertical();
        }
        for _ in 0..self.quarter_turns % 4 {
            out = out.rotate90();
        }
        out
    }
}

pub fn augment(pair: &Pair, rng: &mut impl Rng) -> Pair {
    let square = pair.degraded.height() == pair.degraded.width();
    let a = Augmentation::draw(rng, square);
    Pair {
        degraded: a.apply(&pair.degraded),
        background: a.apply(&pair.background),
    }
}

/// Same random window of both images.
pub fn crop_pair(pair: &Pair, h: usize, w: usize, rng: &mut impl Rng) -> Result<Pair> {
    let (ih, iw) = (pair.degraded.height(), pair.degraded.width());
    if (ih, iw) != (pair.background.height(), pair.background.width()) {
        return Err(Error::InvalidArgument(format!(
            "pair sizes differ: {ih}x{iw} vs {}x{}",
            pair.background.height(),
            pair.background.width()
        )));
    }
    if h > ih || w > iw || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("crop {h}x{w} does not fit a {ih}x{iw} image")));
    }
    let top = rng.gen_range(0..=ih - h);
    let left = rng.gen_range(0..=iw - w);
    Ok(Pair {
        degraded: pair.degraded.crop(top, left, h, w)?,
        background: pair.background.crop(top, left, h, w)?,
    })
}

/// Loads every pair listed in a manifest; paths are relative to the manifest's directory.
pub fn load_pairs(manifest: &Path) -> Result<Vec<Pair>> {
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let load = |rel: &Path| -> Result<Image> {
        let path = base.join(rel);
        load_image(&path).map_err(|e| match e {
            Error::Io { .. } => e,
            other => Error::Data {
                path,
                message: other.to_string(),
            },
        })
    };
    read_manifest(manifest)?
        .iter()
        .map(|e| {
            Ok(Pair {
                degraded: load(&e.degraded)?,
                background: load(&e.background)?,
            })
        })
        .collect()
}

/// Training schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRun {
    pub steps: u64,
    pub batch_size: usize,
    pub crop_height: usize,
    pub crop_width: usize,
    /// A log row is kept every `log_every` steps, plus the first and last.
    pub log_every: u64,
    /// Master seed of initialization, batch order and augmentation.
    pub seed: u64,
    pub augment: bool,
    pub adam: AdamConfig,
    /// Extractor weights in the weights-file format; seeded random features otherwise.
    pub perceptual_weights: Option<PathBuf>,
}

impl Default for TrainRun {
    fn default() -> Self {
        TrainRun {
            steps: 500,
            batch_size: 2,
            crop_height: 64,
            crop_width: 64,
            log_every: 1,
            seed: 0,
            augment: true,
            adam: AdamConfig::default(),
            perceptual_weights: None,
        }
    }
}

impl TrainRun {
    pub fn validate(&self, model: &GlsgnConfig) -> Result<()> {
        let err = |key: &str, message: String| Error::Config {
            key: format!("train.{key}"),
            message,
        };
        if self.batch_size == 0 {
            return Err(err("batch_size", "must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(err("log_every", "must be positive".into()));
        }
        for (key, v, want) in [
            ("crop_height", self.crop_height, model.input_height),
            ("crop_width", self.crop_width, model.input_width),
        ] {
            if v == 0 || v % 16 != 0 {
                return Err(err(key, format!("{v} is not a positive multiple of 16")));
            }
            if v != want {
                return Err(err(key, format!("{v} differs from the model input size {want}")));
            }
        }
        self.adam.validate("train.adam")
    }
}

/// Loss terms of one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub l_pixel: f64,
    pub l_perc: f64,
    pub l_adv_g: f64,
    pub l_d: f64,
    pub total: f64,
}

pub const LOG_HEADER: &str = "step,l_pixel,l_perc,l_adv_g,l_d,total";

impl StepLog {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e}",
            self.step, self.l_pixel, self.l_perc, self.l_adv_g, self.l_d, self.total
        )
    }
}

pub fn write_log(path: &Path, rows: &[StepLog]) -> Result<()> {
    let mut text = String::from(LOG_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Complete training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: GlsgnConfig,
    pub seed: u64,
    pub step: u64,
    pub generator: ParamStore<f32>,
    pub generator_opt: AdamState<f32>,
    pub discriminator: Discriminator<f32>,
    pub discriminator_opt: AdamState<f32>,
}

pub const MAGIC: &[u8; 4] = b"GLSG";
pub const FORMAT_VERSION: u32 = 1;
const KIND_CHECKPOINT: u8 = 0;
const KIND_WEIGHTS: u8 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn header(kind: u8) -> Self {
        let mut w = Writer(MAGIC.to_vec());
        w.u32(FORMAT_VERSION);
        w.0.push(kind);
        w
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }

    fn tensor<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        self.bytes(name.as_bytes());
        self.0.push(T::DTYPE.tag());
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            v.write_le(&mut self.0);
        }
    }

    fn section<'a, T: Scalar>(&mut self, items: impl Iterator<Item = (String, &'a Tensor<T>)>) {
        let items: Vec<_> = items.collect();
        self.u32(items.len() as u32);
        for (name, t) in items {
            self.tensor(&name, t);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()?;
        self.take(usize::try_from(n).map_err(|_| Error::Checkpoint("length overflow".into()))?)
    }

    fn header(&mut self, kind: u8) -> Result<()> {
        if self.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Checkpoint("bad magic (not a GLSG file)".into()));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let k = self.u8()?;
        if k != kind {
            return Err(Error::Checkpoint(format!("file kind {k}, expected {kind}")));
        }
        Ok(())
    }

    fn tensor<T: Scalar>(&mut self) -> Result<(String, Tensor<T>)> {
        let name = String::from_utf8(self.bytes()?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let dtype = DType::from_tag(self.u8()?)
            .ok_or_else(|| Error::Checkpoint(format!("`{name}` has an unknown dtype")))?;
        if dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!("`{name}` is {dtype:?}, expected {:?}", T::DTYPE)));
        }
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("`{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("`{name}` shape overflows")))?;
        let size = dtype.size();
        let payload = self.take(numel.checked_mul(size).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = payload.chunks_exact(size).map(T::read_le).collect();
        Ok((name, Tensor::new(shape, data)?))
    }

    fn section<T: Scalar>(&mut self) -> Result<Vec<(String, Tensor<T>)>> {
        let n = self.u32()?;
        (0..n).map(|_| self.tensor()).collect()
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// Checks names, order and shapes of `got` against `reference`.
fn match_store<T: Scalar>(what: &str, reference: &ParamStore<T>, got: Vec<(String, Tensor<T>)>) -> Result<ParamStore<T>> {
    if got.len() != reference.len() {
        return Err(Error::Checkpoint(format!(
            "{what}: {} tensors, configuration needs {}",
            got.len(),
            reference.len()
        )));
    }
    let mut store = ParamStore::new();
    for ((name, t), (want, r)) in got.into_iter().zip(reference.iter()) {
        if name != want {
            return Err(Error::Checkpoint(format!("{what}: found `{name}` where `{want}` was expected")));
        }
        if t.shape() != r.shape() {
            return Err(Error::Checkpoint(format!(
                "{what}: `{name}` has shape {:?}, configuration needs {:?}",
                t.shape(),
                r.shape()
            )));
        }
        store.insert(name, t)?;
    }
    Ok(store)
}

fn write_opt(w: &mut Writer, params: &ParamStore<f32>, opt: &AdamState<f32>) {
    w.u64(opt.step);
    w.section(params.names().zip(&opt.m).map(|(n, t)| (format!("m/{n}"), t)));
    w.section(params.names().zip(&opt.v).map(|(n, t)| (format!("v/{n}"), t)));
}

fn read_opt(r: &mut Reader, params: &ParamStore<f32>) -> Result<AdamState<f32>> {
    let step = r.u64()?;
    let mut moments = |prefix: &str| -> Result<Vec<Tensor<f32>>> {
        let got = r.section::<f32>()?;
        let renamed = got
            .into_iter()
            .map(|(n, t)| match n.strip_prefix(prefix) {
                Some(rest) => Ok((rest.to_string(), t)),
                None => Err(Error::Checkpoint(format!("optimizer tensor `{n}` lacks prefix `{prefix}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let store = match_store("optimizer", params, renamed)?;
        Ok(store.iter().map(|(_, t)| t.clone()).collect())
    };
    let m = moments("m/")?;
    let v = moments("v/")?;
    Ok(AdamState { step, m, v })
}

impl Checkpoint {
    /// Fresh state for `config`; every random stream derives from `seed`.
    pub fn initial(config: GlsgnConfig, seed: u64) -> Result<Self> {
        let config = GlsgnConfig { seed, ..config };
        let generator = Glsgn::<f32>::new(config.clone())?.params;
        let discriminator = Discriminator::<f32>::new(seed);
        Ok(Checkpoint {
            generator_opt: AdamState::new(&generator),
            discriminator_opt: AdamState::new(&discriminator.params),
            config,
            seed,
            step: 0,
            generator,
            discriminator,
        })
    }

    pub fn model(&self) -> Glsgn<f32> {
        Glsgn {
            config: self.config.clone(),
            params: self.generator.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::header(KIND_CHECKPOINT);
        w.bytes(serde_json::to_string(&self.config).expect("config serializes").as_bytes());
        w.u64(self.seed);
        w.u64(self.step);
        w.section(self.generator.iter().map(|(n, t)| (n.to_string(), t)));
        write_opt(&mut w, &self.generator, &self.generator_opt);
        w.section(self.discriminator.params.iter().map(|(n, t)| (n.to_string(), t)));
        write_opt(&mut w, &self.discriminator.params, &self.discriminator_opt);
        let vectors: Vec<(String, Tensor<f32>)> = Discriminator::<f32>::layer_names()
            .zip(&self.discriminator.spectral)
            .flat_map(|(n, st)| {
                [
                    (format!("u/{n}"), Tensor::new(vec![st.u.len()], st.u.clone()).expect("1-d")),
                    (format!("v/{n}"), Tensor::new(vec![st.v.len()], st.v.clone()).expect("1-d")),
                ]
            })
            .collect();
        w.section(vectors.iter().map(|(n, t)| (n.clone(), t)));
        w.0
    }

    /// Parses and validates against the embedded configuration.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        r.header(KIND_CHECKPOINT)?;
        let config: GlsgnConfig = serde_json::from_slice(r.bytes()?)
            .map_err(|e| Error::Checkpoint(format!("embedded configuration: {e}")))?;
        config.validate()?;
        let seed = r.u64()?;
        let step = r.u64()?;
        // Reference layout only; initialization values are discarded.
        let reference = Checkpoint::initial(config.clone(), config.seed)?;
        let generator = match_store("generator", &reference.generator, r.section()?)?;
        let generator_opt = read_opt(&mut r, &generator)?;
        let dparams = match_store("discriminator", &reference.discriminator.params, r.section()?)?;
        let discriminator_opt = read_opt(&mut r, &dparams)?;
        let vectors = r.section::<f32>()?;
        let names: Vec<String> = Discriminator::<f32>::layer_names().collect();
        if vectors.len() != 2 * names.len() {
            return Err(Error::Checkpoint(format!(
                "{} spectral vectors, expected {}",
                vectors.len(),
                2 * names.len()
            )));
        }
        let mut spectral = Vec::with_capacity(names.len());
        for (i, layer) in names.iter().enumerate() {
            let (un, u) = &vectors[2 * i];
            let (vn, v) = &vectors[2 * i + 1];
            if *un != format!("u/{layer}") || *vn != format!("v/{layer}") {
                return Err(Error::Checkpoint(format!("spectral vectors `{un}`, `{vn}` out of order")));
            }
            let st = SpectralState {
                u: u.data().to_vec(),
                v: v.data().to_vec(),
            };
            let w = dparams.get(&format!("{layer}.weight")).expect("validated");
            st.sigma(w).map_err(|e| Error::Checkpoint(e.to_string()))?;
            spectral.push(st);
        }
        r.finish()?;
        Ok(Checkpoint {
            config,
            seed,
            step,
            generator,
            generator_opt,
            discriminator: Discriminator {
                params: dparams,
                spectral,
            },
            discriminator_opt,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Writes a bare list of named tensors (e.g. perceptual extractor weights) in the checkpoint container.
pub fn save_weights<T: Scalar>(path: &Path, params: &ParamStore<T>) -> Result<()> {
    let mut w = Writer::header(KIND_WEIGHTS);
    w.section(params.iter().map(|(n, t)| (n.to_string(), t)));
    fs::write(path, w.0).map_err(|e| Error::io(path, e))
}

pub fn load_weights<T: Scalar>(path: &Path) -> Result<ParamStore<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    r.header(KIND_WEIGHTS)?;
    let mut store = ParamStore::new();
    for (n, t) in r.section()? {
        store.insert(n, t)?;
    }
    r.finish()?;
    Ok(store)
}

/// SHA-256 over names, shapes and payloads.
pub fn digest<T: Scalar>(params: &ParamStore<T>) -> [u8; 32] {
    let mut w = Writer(Vec::new());
    w.section(params.iter().map(|(n, t)| (n.to_string(), t)));
    Sha256::digest(&w.0).into()
}

/// Cycles through shuffled epochs of the training set.
struct Batches {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batches {
    fn new(n: usize, seed: u64) -> Self {
        let mut b = Batches {
            order: (0..n).collect(),
            pos: 0,
            rng: stream(seed, streams::BATCH_ORDER),
        };
        b.order.shuffle(&mut b.rng);
        b
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
}

pub fn perceptual_extractor(run: &TrainRun) -> Result<PerceptualExtractor<f32>> {
    match &run.perceptual_weights {
        Some(path) => PerceptualExtractor::from_params(load_weights(path)?),
        None => Ok(PerceptualExtractor::new(run.seed)),
    }
}

/// Alternating discriminator and generator updates, one of each per batch.
pub fn train(config: &GlsgnConfig, data: &[Pair], run: &TrainRun) -> Result<TrainOutcome> {
    run.validate(config)?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut ck = Checkpoint::initial(config.clone(), run.seed)?;
    let extractor = perceptual_extractor(run)?;
    let extractor_digest = digest(&extractor.params);
    let mut batches = Batches::new(data.len(), run.seed);
    let mut aug_rng = stream(run.seed, streams::AUGMENT);
    let mut log = Vec::new();
    let w = ck.config.loss_weights.clone();

    for step in 1..=run.steps {
        let mut xs = Vec::with_capacity(run.batch_size);
        let mut ys = Vec::with_capacity(run.batch_size);
        for i in batches.next(run.batch_size) {
            let mut pair = crop_pair(&data[i], run.crop_height, run.crop_width, &mut aug_rng)?;
            if run.augment {
                pair = augment(&pair, &mut aug_rng);
            }
            xs.push(pair.degraded.to_tensor::<f32>());
            ys.push(pair.background.to_tensor::<f32>());
        }
        let (x, y) = (Tensor::stack_batch(&xs)?, Tensor::stack_batch(&ys)?);

        let model = ck.model();
        let graph = Graph::new();
        let pg = model.bind(&graph, true);
        let out = model.forward(&pg, graph.constant(x))?;
        let gt = graph.constant(y);

        ck.discriminator.power_iteration()?;
        let l_d = {
            let pd = ck.discriminator.params.bind(&graph, true);
            let l = losses::discriminator_loss(&ck.discriminator, &pd, gt, out.final_image.detach())?;
            let grads = pd.gradients(&graph.backward(l)?)?;
            ck.discriminator_opt
                .update(&run.adam, &mut ck.discriminator.params, &grads)?;
            l.value().item() as f64
        };

        let pd = ck.discriminator.params.bind(&graph, false);
        let pe = extractor.params.bind(&graph, false);
        let restored: Vec<_> = out.per_pathway.iter().map(|o| o.restored).collect();
        let pix = losses::pixel_loss(gt, &restored, out.final_image, &w)?;
        let perc = losses::perceptual_loss(&extractor, &pe, gt, &restored, out.final_image, &w)?;
        let adv = losses::adversarial_g_loss(&ck.discriminator, &pd, out.final_image)?;
        let total = losses::total_loss(pix, perc, adv, &w)?;
        let grads = pg.gradients(&graph.backward(total)?)?;
        ck.generator_opt.update(&run.adam, &mut ck.generator, &grads)?;
        ck.step = step;

        let row = StepLog {
            step,
            l_pixel: pix.value().item() as f64,
            l_perc: perc.value().item() as f64,
            l_adv_g: adv.value().item() as f64,
            l_d,
            total: total.value().item() as f64,
        };
        if !row.total.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite generator loss at step {step}")));
        }
        if step == 1 || step == run.steps || step % run.log_every == 0 {
            log.push(row);
        }
    }
    if digest(&extractor.params) != extractor_digest {
        return Err(Error::InvalidArgument("perceptual extractor changed during training".into()));
    }
    Ok(TrainOutcome { checkpoint: ck, log })
}

/// Restores an image of any size at least the model input: inputs are center-cropped
/// to a whole number of model-sized tiles, restored tile by tile and stitched.
pub fn restore_image(model: &Glsgn<f32>, img: &Image) -> Result<Image> {
    let (th, tw) = (model.config.input_height, model.config.input_width);
    let (ny, nx) = (img.height() / th, img.width() / tw);
    if ny == 0 || nx == 0 {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} is smaller than the model input {th}x{tw}",
            img.height(),
            img.width()
        )));
    }
    let src = img.center_crop(ny * th, nx * tw)?;
    let mut out = Image::filled(ny * th, nx * tw, [0.0; 3]);
    for ty in 0..ny {
        for tx in 0..nx {
            let tile = src.crop(ty * th, tx * tw, th, tw)?;
            let restored = model.restore(&tile.to_tensor())?;
            out.paste(&Image::from_tensor(&restored, 0)?, ty * th, tx * tw)?;
        }
    }
    Ok(out)
}

/// Metrics of one evaluated pair. Infinite PSNR is written as `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub index: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub count: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_baseline_psnr: f64,
    pub mean_baseline_ssim: f64,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// One `{"record":"sample",..}` line per pair followed by a `{"record":"summary",..}` line.
    pub fn to_jsonl(&self) -> String {
        let mut text = String::new();
        for r in &self.rows {
            let mut v = serde_json::to_value(r).expect("row serializes");
            v["record"] = "sample".into();
            v["variant"] = self.variant.clone().into();
            text.push_str(&v.to_string());
            text.push('\n');
        }
        let summary = serde_json::json!({
            "record": "summary",
            "variant": self.variant,
            "count": self.count,
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "mean_baseline_psnr": self.mean_baseline_psnr,
            "mean_baseline_ssim": self.mean_baseline_ssim,
        });
        text.push_str(&summary.to_string());
        text.push('\n');
        text
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Evaluates `restore` on every pair, center-cropping both images to `h x w` first.
pub fn evaluate_with(
    pairs: &[Pair],
    h: usize,
    w: usize,
    variant: &str,
    mut restore: impl FnMut(&Image) -> Result<Image>,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let mut rows = Vec::with_capacity(pairs.len());
    for (index, p) in pairs.iter().enumerate() {
        let degraded = p.degraded.center_crop(h, w)?;
        let gt = p.background.center_crop(h, w)?;
        let out = restore(&degraded)?;
        rows.push(EvalRow {
            index,
            psnr: psnr(&out, &gt)?,
            ssim: ssim(&out, &gt)?,
            baseline_psnr: psnr(&degraded, &gt)?,
            baseline_ssim: ssim(&degraded, &gt)?,
        });
    }
    Ok(EvalReport {
        variant: variant.to_string(),
        count: rows.len(),
        mean_psnr: mean(rows.iter().map(|r| r.psnr)),
        mean_ssim: mean(rows.iter().map(|r| r.ssim)),
        mean_baseline_psnr: mean(rows.iter().map(|r| r.baseline_psnr)),
        mean_baseline_ssim: mean(rows.iter().map(|r| r.baseline_ssim)),
        rows,
    })
}

pub fn evaluate(checkpoint: &Checkpoint, pairs: &[Pair]) -> Result<EvalReport> {
    let model = checkpoint.model();
    let (h, w) = (model.config.input_height, model.config.input_width);
    evaluate_with(pairs, h, w, checkpoint.config.variant.name(), |img| {
        Image::from_tensor(&model.restore(&img.to_tensor())?, 0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PathwayGeometry;
    use crate::synth::{procedural_background, synth_rain, SynthRanges};
    use rand::SeedableRng;

    fn pair(seed: u64, h: usize, w: usize) -> Pair {
        let bg = procedural_background(seed, h, w);
        synth_rain(&bg, seed, &SynthRanges::default()).unwrap().into()
    }

    fn small() -> GlsgnConfig {
        GlsgnConfig {
            input_height: 32,
            input_width: 32,
            geometry: vec![
                PathwayGeometry::new(1, 2, 2),
                PathwayGeometry::new(2, 2, 2),
                PathwayGeometry::new(4, 1, 1),
                PathwayGeometry::new(4, 1, 1),
            ],
            base_channels: 8,
            encoder_depth: 2,
            residual_blocks: 1,
            ..GlsgnConfig::default()
        }
    }

    fn small_run(steps: u64) -> TrainRun {
        TrainRun {
            steps,
            crop_height: 32,
            crop_width: 32,
            seed: 3,
            ..TrainRun::default()
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut p = ParamStore::<f64>::new();
        p.insert("a", Tensor::from_fn(vec![3], |i| i as f64)).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        st.update(&AdamConfig::default(), &mut p, &[Tensor::zeros(vec![3])]).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut p = ParamStore::<f64>::new();
        p.insert("a", Tensor::full(vec![2], 0.3)).unwrap();
        p.insert("b", Tensor::full(vec![1], -1.0)).unwrap();
        let mut st = AdamState::new(&p);
        let g = [Tensor::full(vec![2], 0.1), Tensor::full(vec![1], 0.1)];
        st.update(&AdamConfig::default(), &mut p, &g).unwrap();
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let expected = 2e-4 * 0.1 / (0.1 + 1e-8);
        assert!((p.get("a").unwrap().data()[0] - (0.3 - expected)).abs() < 1e-12);
        assert!((p.get("b").unwrap().data()[0] - (-1.0 - expected)).abs() < 1e-12);
        let da = 0.3 - p.get("a").unwrap().data()[1];
        let db = -1.0 - p.get("b").unwrap().data()[0];
        assert!((da - db).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_misaligned_gradients() {
        let mut p = ParamStore::<f32>::new();
        p.insert("a", Tensor::zeros(vec![2])).unwrap();
        let mut st = AdamState::new(&p);
        assert!(st.update(&AdamConfig::default(), &mut p, &[]).is_err());
        assert!(st
            .update(&AdamConfig::default(), &mut p, &[Tensor::zeros(vec![3])])
            .is_err());
    }

    #[test]
    fn augmentation_is_joint_and_invertible() {
        let p = pair(1, 16, 16);
        assert_eq!(Augmentation::default().apply(&p.degraded), p.degraded);
        let h = Augmentation {
            flip_horizontal: true,
            ..Default::default()
        };
        assert_eq!(h.apply(&h.apply(&p.degraded)), p.degraded);
        let base = psnr(&p.degraded, &p.background).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..8 {
            let a = augment(&p, &mut rng);
            assert!((psnr(&a.degraded, &a.background).unwrap() - base).abs() < 1e-9);
        }
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(augment(&p, &mut r1), augment(&p, &mut r2));
    }

    #[test]
    fn crops_stay_inside_and_align() {
        let p = pair(2, 20, 24);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(crop_pair(&p, 20, 24, &mut rng).unwrap(), p);
        for _ in 0..1000 {
            let c = crop_pair(&p, 7, 9, &mut rng).unwrap();
            assert_eq!((c.degraded.height(), c.degraded.width()), (7, 9));
            assert_eq!((c.background.height(), c.background.width()), (7, 9));
        }
        // Identical windows: the crop of the difference is the difference of the crops.
        let c = crop_pair(&p, 5, 5, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let c2 = crop_pair(&p, 5, 5, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_eq!(c, c2);
        let found = (0..=15).flat_map(|t| (0..=19).map(move |l| (t, l))).any(|(t, l)| {
            p.degraded.crop(t, l, 5, 5).unwrap() == c.degraded && p.background.crop(t, l, 5, 5).unwrap() == c.background
        });
        assert!(found);
        assert!(crop_pair(&p, 21, 4, &mut rng).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let ck = Checkpoint::initial(small(), 5).unwrap();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(&bytes[..4], b"GLSG");
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let bytes = Checkpoint::initial(small(), 5).unwrap().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("version"));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());

        // A checkpoint whose tensors disagree with its own configuration.
        let mut ck = Checkpoint::initial(small(), 5).unwrap();
        ck.config.base_channels = 4;
        let err = Checkpoint::from_bytes(&ck.to_bytes()).unwrap_err().to_string();
        assert!(err.contains("shape"), "{err}");
    }

    #[test]
    fn weights_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("perc.bin");
        let ex = PerceptualExtractor::<f32>::new(8);
        save_weights(&path, &ex.params).unwrap();
        let back = PerceptualExtractor::from_params(load_weights::<f32>(&path).unwrap()).unwrap();
        assert_eq!(back, ex);
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn zero_steps_return_initialization() {
        let data = vec![pair(1, 32, 32)];
        let out = train(&small(), &data, &small_run(0)).unwrap();
        assert_eq!(out.checkpoint, Checkpoint::initial(small(), 3).unwrap());
        assert!(out.log.is_empty());
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let data: Vec<Pair> = (0..4).map(|s| pair(s, 32, 32)).collect();
        let run = small_run(50);
        let a = train(&small(), &data, &run).unwrap();
        assert_eq!(a.log.len(), 50);
        let first = a.log[0].total;
        let last = a.log[49].total;
        assert!(last < first, "{first} -> {last}");
        assert!(a.log.iter().all(|r| r.l_d.is_finite() && r.l_d >= 0.0));
        let b = train(&small(), &data, &run).unwrap();
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        assert_eq!(a.log, b.log);

        // Discriminator and generator sets are disjoint and each moved.
        let init = Checkpoint::initial(small(), 3).unwrap();
        assert_ne!(a.checkpoint.generator, init.generator);
        assert_ne!(a.checkpoint.discriminator.params, init.discriminator.params);
        assert!(a.checkpoint.generator.names().all(|n| !n.starts_with("d.")));
    }

    #[test]
    fn evaluation_rows_and_baseline() {
        let pairs: Vec<Pair> = (0..3).map(|s| pair(s, 40, 36)).collect();
        let report = evaluate_with(&pairs, 32, 32, "oracle", |img| {
            let i = pairs
                .iter()
                .position(|p| p.degraded.center_crop(32, 32).unwrap() == *img)
                .unwrap();
            pairs[i].background.center_crop(32, 32)
        })
        .unwrap();
        assert_eq!(report.rows.len(), 3);
        assert!(report.mean_psnr.is_infinite());
        assert!((report.mean_ssim - 1.0).abs() < 1e-9);
        for (r, p) in report.rows.iter().zip(&pairs) {
            let d = p.degraded.center_crop(32, 32).unwrap();
            let g = p.background.center_crop(32, 32).unwrap();
            assert_eq!(r.baseline_psnr, psnr(&d, &g).unwrap());
            assert_eq!(r.baseline_ssim, ssim(&d, &g).unwrap());
        }
        let text = report.to_jsonl();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().last().unwrap().contains("\"summary\""));
        assert!(evaluate_with(&[], 32, 32, "x", |i| Ok(i.clone())).is_err());
    }

    #[test]
    fn restore_tiles_large_inputs() {
        let model = Checkpoint::initial(small(), 1).unwrap().model();
        let img = procedural_background(3, 70, 100);
        let out = restore_image(&model, &img).unwrap();
        assert_eq!((out.height(), out.width()), (64, 96));
        let tile = img.center_crop(64, 96).unwrap().crop(32, 64, 32, 32).unwrap();
        let direct = Image::from_tensor(&model.restore(&tile.to_tensor()).unwrap(), 0).unwrap();
        assert_eq!(out.crop(32, 64, 32, 32).unwrap(), direct);
        assert!(restore_image(&model, &procedural_background(3, 16, 64)).is_err());
    }
}
