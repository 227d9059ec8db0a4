//! The four-pathway stepwise generator.
//!
//! A global pathway `sg` restores a low-resolution intact copy of the image.
//! Local pathways `s1..sN` then restore the image at decreasing resolution and
//! decreasing patch counts, each consuming the decoded features of the previous
//! pathway and of `sg`. Patches travel through the encoder-decoder packed along
//! the batch axis. The final image is synthesized from the pathway outputs with a
//! masked Laplacian pyramid.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nn::{Bound, Init, ParamStore};
use crate::pac::{self, MapGeometry, PacWeights, ATTENTION_KERNEL};
use crate::patch;
use crate::pyramid;
use crate::rng::{stream, streams};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Scale divisor per side and patch grid of one pathway.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathwayGeometry {
    pub divisor: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PathwayGeometry {
    pub const fn new(divisor: usize, rows: usize, cols: usize) -> Self {
        PathwayGeometry { divisor, rows, cols }
    }
}

/// Ablation ladder, from the global pathway alone to the complete model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "global-only")]
    GlobalOnly,
    #[serde(rename = "global-local")]
    GlobalLocal,
    #[serde(rename = "+pn")]
    Pn,
    #[serde(rename = "+pac")]
    Pac,
    #[serde(rename = "full")]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::GlobalOnly,
        Variant::GlobalLocal,
        Variant::Pn,
        Variant::Pac,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::GlobalOnly => "global-only",
            Variant::GlobalLocal => "global-local",
            Variant::Pn => "+pn",
            Variant::Pac => "+pac",
            Variant::Full => "full",
        }
    }

    pub fn local(self) -> bool {
        self != Variant::GlobalOnly
    }

    pub fn pn(self) -> bool {
        matches!(self, Variant::Pn | Variant::Pac | Variant::Full)
    }

    pub fn pac(self) -> bool {
        matches!(self, Variant::Pac | Variant::Full)
    }

    pub fn pyramid(self) -> bool {
        self == Variant::Full
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown variant `{s}` (expected one of global-only, global-local, +pn, +pac, full)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlsgnConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub local_pathways: usize,
    /// Local pathways in order, then the global pathway.
    pub geometry: Vec<PathwayGeometry>,
    pub base_channels: usize,
    pub encoder_depth: usize,
    pub residual_blocks: usize,
    pub pac: PacWeights,
    pub pn_epsilon: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for GlsgnConfig {
    fn default() -> Self {
        GlsgnConfig {
            input_height: 64,
            input_width: 64,
            local_pathways: 3,
            geometry: vec![
                PathwayGeometry::new(1, 4, 4),
                PathwayGeometry::new(2, 2, 2),
                PathwayGeometry::new(4, 1, 1),
                PathwayGeometry::new(4, 1, 1),
            ],
            base_channels: 16,
            encoder_depth: 3,
            residual_blocks: 2,
            pac: PacWeights::default(),
            pn_epsilon: DEFAULT_PN_EPSILON,
            loss_weights: LossWeights::default(),
            seed: 0,
            variant: Variant::Full,
        }
    }
}

/// Ratio guard used by the decoder's patch normalization.
///
/// Leaky-ReLU block inputs sit near zero at many pixels, where `|x̂/x|`
/// reaches `|x̂|/ε`. At 1e-6 those few pixels dominate every patch's
/// intensity, the factors span orders of magnitude and compound through six
/// blocks until the head saturates. At 1e-2 the factors stay near one.
pub const DEFAULT_PN_EPSILON: f64 = 1e-2;

fn config_err(key: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

impl GlsgnConfig {
    /// 16x16 input with four channels, small enough for finite differences.
    pub fn tiny() -> Self {
        GlsgnConfig {
            input_height: 16,
            input_width: 16,
            geometry: vec![
                PathwayGeometry::new(1, 2, 2),
                PathwayGeometry::new(2, 2, 2),
                PathwayGeometry::new(4, 1, 1),
                PathwayGeometry::new(4, 1, 1),
            ],
            base_channels: 4,
            encoder_depth: 2,
            residual_blocks: 1,
            ..GlsgnConfig::default()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("input_height", self.input_height), ("input_width", self.input_width)] {
            if v == 0 || v % 16 != 0 {
                return Err(config_err(key, format!("{v} is not a positive multiple of 16")));
            }
        }
        if self.local_pathways == 0 {
            return Err(config_err("local_pathways", "at least one local pathway is required"));
        }
        if self.geometry.len() != self.local_pathways + 1 {
            return Err(config_err(
                "geometry",
                format!(
                    "expected {} entries (local pathways then global), got {}",
                    self.local_pathways + 1,
                    self.geometry.len()
                ),
            ));
        }
        if self.base_channels == 0 {
            return Err(config_err("base_channels", "must be positive"));
        }
        if self.encoder_depth == 0 {
            return Err(config_err("encoder_depth", "must be positive"));
        }
        if !(self.pn_epsilon > 0.0 && self.pn_epsilon.is_finite()) {
            return Err(config_err("pn_epsilon", "must be a positive finite number"));
        }
        let step = 1usize << self.encoder_depth;
        for (i, g) in self.geometry.iter().enumerate() {
            let key = format!("geometry[{i}]");
            if g.divisor == 0 || g.rows == 0 || g.cols == 0 {
                return Err(config_err(key, "divisor and grid must be positive"));
            }
            if self.input_height % g.divisor != 0 || self.input_width % g.divisor != 0 {
                return Err(config_err(key, format!("divisor {} does not divide the input", g.divisor)));
            }
            let (h, w) = (self.input_height / g.divisor, self.input_width / g.divisor);
            if h % g.rows != 0 || w % g.cols != 0 {
                return Err(config_err(key, format!("{h}x{w} is not divisible by a {}x{} grid", g.rows, g.cols)));
            }
            let (ph, pw) = (h / g.rows, w / g.cols);
            if ph % step != 0 || pw % step != 0 {
                return Err(config_err(
                    key,
                    format!("patch {ph}x{pw} is not divisible by 2^encoder_depth = {step}"),
                ));
            }
        }
        if self.geometry[0].divisor != 1 {
            return Err(config_err("geometry[0]", "the first local pathway must run at full resolution"));
        }
        for i in 1..self.local_pathways {
            if self.geometry[i].divisor < self.geometry[i - 1].divisor {
                return Err(config_err(format!("geometry[{i}]"), "divisors must be nondecreasing"));
            }
        }
        if self.variant.pyramid() {
            let n = self.local_pathways;
            for i in 0..=n {
                let want = 1 << (i.min(n - 1));
                if self.geometry[i].divisor != want {
                    return Err(config_err(
                        format!("geometry[{i}]"),
                        format!("pyramid synthesis needs divisor {want} here"),
                    ));
                }
            }
        }
        self.pac.validate()?;
        self.loss_weights.validate()
    }

    /// Pathways in computation order: global first, then local.
    pub fn pathways(&self) -> Vec<Pathway> {
        let n = self.local_pathways;
        let v = self.variant;
        let mut out = vec![Pathway {
            name: "sg".into(),
            local: None,
            geometry: self.geometry[n],
            pn: false,
            pac: v.pac(),
            mask: v.pyramid(),
        }];
        if v.local() {
            for i in 0..n {
                let g = self.geometry[i];
                out.push(Pathway {
                    name: format!("s{}", i + 1),
                    local: Some(i),
                    geometry: g,
                    pn: v.pn() && g.rows * g.cols > 1,
                    pac: v.pac(),
                    mask: v.pyramid() && i + 1 < n,
                });
            }
        }
        out
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    fn intact_size(&self, g: PathwayGeometry) -> (usize, usize) {
        (self.input_height / g.divisor, self.input_width / g.divisor)
    }

    fn bottleneck_geometry(&self, g: PathwayGeometry) -> MapGeometry {
        let (h, w) = self.intact_size(g);
        MapGeometry {
            height: h >> self.encoder_depth,
            width: w >> self.encoder_depth,
            rows: g.rows,
            cols: g.cols,
        }
    }
}

/// Static description of one pathway of a configured model.
#[derive(Clone, Debug, PartialEq)]
pub struct Pathway {
    pub name: String,
    /// Index among local pathways; `None` for the global pathway.
    pub local: Option<usize>,
    pub geometry: PathwayGeometry,
    pub pn: bool,
    pub pac: bool,
    pub mask: bool,
}

/// Outputs of one pathway, all intact (patches assembled).
#[derive(Clone, Debug)]
pub struct PathwayOutput<'g, T> {
    pub name: String,
    pub restored: Var<'g, T>,
    pub decoded: Var<'g, T>,
    /// Raw attention map of the bottleneck, patch-major, with its layout.
    pub attention: Option<(Var<'g, T>, MapGeometry)>,
    pub mask: Option<Var<'g, T>>,
}

#[derive(Clone, Debug)]
pub struct GlsgnOutput<'g, T> {
    /// In computation order: `sg`, then `s1..sN`.
    pub per_pathway: Vec<PathwayOutput<'g, T>>,
    pub final_image: Var<'g, T>,
}

/// Generator parameters together with the configuration that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct Glsgn<T> {
    pub config: GlsgnConfig,
    pub params: ParamStore<T>,
}

const RESIDUAL_GAIN: f64 = 0.1;

impl<T: Scalar> Glsgn<T> {
    /// Deterministic initialization from `config.seed`.
    pub fn new(config: GlsgnConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.seed, streams::INIT_GENERATOR);
        let mut params = ParamStore::new();
        let base = config.base_channels;
        let he = Init::FanIn { gain: 1.0 };
        for pw in config.pathways() {
            let p = &pw.name;
            params.conv(&format!("{p}.stem"), base, 3, 3, true, he, &mut rng)?;
            params.conv(&format!("{p}.merge"), base, 3 * base, 3, true, he, &mut rng)?;
            for d in 1..=config.encoder_depth {
                let (cin, cout) = (config.channels(d - 1), config.channels(d));
                params.conv(&format!("{p}.enc{d}"), cout, cin, 3, true, he, &mut rng)?;
            }
            if pw.pac {
                params.conv(&format!("{p}.att"), 1, 2, ATTENTION_KERNEL, true, he, &mut rng)?;
            }
            for d in (1..=config.encoder_depth).rev() {
                let (c, cup) = (config.channels(d - 1), config.channels(d));
                params.conv(&format!("{p}.dec{d}.up"), c, cup, 3, true, he, &mut rng)?;
                params.conv(&format!("{p}.dec{d}.fuse"), c, 2 * c, 3, true, he, &mut rng)?;
                for r in 0..config.residual_blocks {
                    let rb = format!("{p}.dec{d}.rb{r}");
                    params.conv(&format!("{rb}.conv1"), c, c, 3, true, he, &mut rng)?;
                    let small = Init::FanIn { gain: RESIDUAL_GAIN };
                    params.conv(&format!("{rb}.conv2"), c, c, 3, true, small, &mut rng)?;
                    if pw.pn {
                        params.conv(&format!("{rb}.pn_bias"), c, c, 3, true, Init::Zero, &mut rng)?;
                    }
                }
            }
            params.conv(&format!("{p}.head"), 3, base, 3, true, he, &mut rng)?;
            if pw.mask {
                params.conv(&format!("{p}.mask"), 1, base, 1, true, he, &mut rng)?;
            }
        }
        Ok(Glsgn { config, params })
    }

    pub fn bind<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> Bound<'g, T> {
        self.params.bind(graph, trainable)
    }

    /// Full forward pass on a `(B, 3, H, W)` image batch.
    pub fn forward<'g>(&self, p: &Bound<'g, T>, image: Var<'g, T>) -> Result<GlsgnOutput<'g, T>> {
        let cfg = &self.config;
        let s = image.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != cfg.input_height || s[3] != cfg.input_width {
            return Err(Error::shape(
                "glsgn_forward",
                "input",
                format!(
                    "expected (B, 3, {}, {}), got {s:?}",
                    cfg.input_height, cfg.input_width
                ),
            ));
        }
        let pathways = cfg.pathways();
        let mut outputs: Vec<PathwayOutput<'g, T>> = Vec::with_capacity(pathways.len());
        let mut global_map = None;
        for pw in &pathways {
            let (h, w) = cfg.intact_size(pw.geometry);
            let input = image.resize_bilinear(h, w)?;
            let (prev, global) = match pw.local {
                None => (None, None),
                Some(0) => (None, outputs.first()),
                Some(_) => (outputs.last(), outputs.first()),
            };
            let out = self.pathway_forward(p, pw, input, prev, global, global_map)?;
            if pw.local.is_none() && pw.pac {
                let g = MapGeometry {
                    height: h,
                    width: w,
                    rows: 1,
                    cols: 1,
                };
                let map = pac::spatial_attention(
                    out.decoded,
                    p.get(&format!("{}.att.weight", pw.name))?,
                    p.get(&format!("{}.att.bias", pw.name))?,
                )?;
                global_map = Some((map, g));
            }
            outputs.push(out);
        }
        let final_image = self.synthesize(&outputs)?.clamp(T::zero(), T::one());
        Ok(GlsgnOutput {
            per_pathway: outputs,
            final_image,
        })
    }

    /// Combines pathway outputs (computation order) into the full-resolution image, unclamped.
    pub fn synthesize<'g>(&self, outputs: &[PathwayOutput<'g, T>]) -> Result<Var<'g, T>> {
        let cfg = &self.config;
        let (h, w) = (cfg.input_height, cfg.input_width);
        let sg = outputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("no pathway outputs".into()))?;
        match cfg.variant {
            Variant::GlobalOnly => sg.restored.resize_bilinear(h, w),
            Variant::GlobalLocal | Variant::Pn | Variant::Pac => {
                let mut acc = sg.restored.resize_bilinear(h, w)?;
                for o in &outputs[1..] {
                    acc = acc.add(o.restored.resize_bilinear(h, w)?)?;
                }
                Ok(acc.scale(T::of(1.0 / outputs.len() as f64)))
            }
            Variant::Full => {
                let locals = &outputs[1..];
                let (low, finer) = locals
                    .split_last()
                    .ok_or_else(|| Error::InvalidArgument("pyramid synthesis needs local pathways".into()))?;
                let mut residuals = Vec::with_capacity(locals.len());
                for o in finer.iter().chain(std::iter::once(sg)) {
                    let m = o.mask.ok_or_else(|| {
                        Error::InvalidArgument(format!("pathway {} has no mask head", o.name))
                    })?;
                    residuals.push((pyramid::extract_highfreq(o.restored)?, m));
                }
                pyramid::fuse_chain(&residuals, low.restored)
            }
        }
    }

    /// One pathway on an intact input already resized to the pathway's scale.
    pub fn pathway_forward<'g>(
        &self,
        p: &Bound<'g, T>,
        pw: &Pathway,
        input: Var<'g, T>,
        prev: Option<&PathwayOutput<'g, T>>,
        global: Option<&PathwayOutput<'g, T>>,
        global_map: Option<(Var<'g, T>, MapGeometry)>,
    ) -> Result<PathwayOutput<'g, T>> {
        let cfg = &self.config;
        let g = pw.geometry;
        let (rows, cols) = (g.rows, g.cols);
        if pw.local.is_some() && global.is_none() {
            return Err(Error::InvalidArgument(format!("{} needs the global pathway output", pw.name)));
        }
        if matches!(pw.local, Some(i) if i > 0) && prev.is_none() {
            return Err(Error::InvalidArgument(format!("{} needs the previous pathway output", pw.name)));
        }
        let name = |s: &str| format!("{}.{s}", pw.name);
        let x = input.to_patches(rows, cols)?;
        let xs = x.shape();
        let (n, ph, pwid) = (xs[0], xs[2], xs[3]);

        let stem = p.conv(x, &name("stem"), 1, 1)?.leaky_relu();
        let handoff = |o: Option<&PathwayOutput<'g, T>>| -> Result<Var<'g, T>> {
            match o {
                Some(o) => o
                    .decoded
                    .resize_bilinear(ph * rows, pwid * cols)?
                    .to_patches(rows, cols),
                None => Ok(input
                    .graph()
                    .constant(Tensor::zeros(vec![n, cfg.base_channels, ph, pwid]))),
            }
        };
        let merged = Var::concat_channels(&[stem, handoff(prev)?, handoff(global)?])?;
        let mut levels = vec![p.conv(merged, &name("merge"), 1, 1)?.leaky_relu()];
        for d in 1..=cfg.encoder_depth {
            let next = p.conv(levels[d - 1], &name(&format!("enc{d}")), 2, 1)?.leaky_relu();
            levels.push(next);
        }

        let mut y = levels[cfg.encoder_depth];
        let mut attention = None;
        if pw.pac {
            let own = pac::spatial_attention(y, p.get(&name("att.weight"))?, p.get(&name("att.bias"))?)?;
            let here = cfg.bottleneck_geometry(g);
            let prev_map = match prev.and_then(|o| o.attention) {
                Some((m, from)) => Some(pac::align_map(m, from, here)?),
                None => None,
            };
            let global_term = match (pw.local, global_map) {
                (Some(_), Some((m, from))) => Some(pac::align_map(m, from, here)?),
                _ => None,
            };
            let fused = pac::fuse_attention(own, prev_map, global_term, cfg.pac)?;
            y = pac::reweight(y, fused)?;
            attention = Some((own, here));
        }

        let eps = T::of(cfg.pn_epsilon);
        for d in (1..=cfg.encoder_depth).rev() {
            let lvl = format!("dec{d}");
            y = p.conv(y.upsample2x()?, &name(&format!("{lvl}.up")), 1, 1)?.leaky_relu();
            y = Var::concat_channels(&[y, levels[d - 1]])?;
            y = p.conv(y, &name(&format!("{lvl}.fuse")), 1, 1)?.leaky_relu();
            for r in 0..cfg.residual_blocks {
                let rb = name(&format!("{lvl}.rb{r}"));
                let inner = p.conv(y, &format!("{rb}.conv1"), 1, 1)?.leaky_relu();
                let out = y.add(p.conv(inner, &format!("{rb}.conv2"), 1, 1)?)?;
                y = if pw.pn {
                    let a = patch::pn_scale(y, out, rows, cols, eps)?;
                    patch::pn_apply(out, a, |v| p.conv(v, &format!("{rb}.pn_bias"), 1, 1))?
                } else {
                    out
                };
            }
        }

        let restored = p.conv(y, &name("head"), 1, 1)?.sigmoid();
        let mask = if pw.mask {
            Some(p.conv(y, &name("mask"), 1, 0)?.sigmoid().from_patches(rows, cols)?)
        } else {
            None
        };
        Ok(PathwayOutput {
            name: pw.name.clone(),
            restored: restored.from_patches(rows, cols)?,
            decoded: y.from_patches(rows, cols)?,
            attention,
            mask,
        })
    }

    /// Restores a batch outside of any training graph.
    pub fn restore(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let graph = Graph::new();
        let p = self.bind(&graph, false);
        let x = graph.constant(image.clone());
        let out = self.forward(&p, x)?;
        Ok((*out.final_image.value()).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(b: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![b, 3, h, w], |_| rng.gen_range(0.0..1.0))
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
            base_channels: 4,
            encoder_depth: 2,
            residual_blocks: 1,
            ..GlsgnConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid_and_traces_geometry() {
        let cfg = GlsgnConfig::default();
        cfg.validate().unwrap();
        let sizes: Vec<_> = cfg
            .pathways()
            .iter()
            .map(|pw| {
                let (h, w) = cfg.intact_size(pw.geometry);
                (pw.name.clone(), pw.geometry.rows * pw.geometry.cols, h / pw.geometry.rows, w / pw.geometry.cols)
            })
            .collect();
        assert_eq!(
            sizes,
            [
                ("sg".to_string(), 1, 16, 16),
                ("s1".to_string(), 16, 16, 16),
                ("s2".to_string(), 4, 16, 16),
                ("s3".to_string(), 1, 16, 16),
            ]
        );
    }

    #[test]
    fn receptive_field_grows_across_local_pathways() {
        let cfg = GlsgnConfig::default();
        let covered: Vec<f64> = cfg.geometry[..cfg.local_pathways]
            .iter()
            .map(|g| 1.0 / (g.rows * g.cols) as f64)
            .collect();
        assert_eq!(covered, [1.0 / 16.0, 0.25, 1.0]);
    }

    #[test]
    fn validation_names_keys() {
        let key_of = |cfg: GlsgnConfig| match cfg.validate() {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected config error, got {other:?}"),
        };
        assert_eq!(key_of(GlsgnConfig { input_height: 40, ..GlsgnConfig::default() }), "input_height");
        let mut cfg = GlsgnConfig::default();
        cfg.geometry.pop();
        assert_eq!(key_of(cfg), "geometry");
        let mut cfg = GlsgnConfig::default();
        cfg.geometry[1] = PathwayGeometry::new(2, 8, 8);
        assert_eq!(key_of(cfg), "geometry[1]");
        let mut cfg = GlsgnConfig::default();
        cfg.geometry[2].divisor = 2;
        assert_eq!(key_of(cfg), "geometry[2]");
        let mut cfg = GlsgnConfig::default().with_variant(Variant::GlobalLocal);
        cfg.geometry[2].divisor = 2;
        cfg.validate().unwrap();
        let mut cfg = GlsgnConfig::default();
        cfg.pac.sigma2 = 2.0;
        assert_eq!(key_of(cfg), "pac.sigma2");
        let mut cfg = GlsgnConfig::default();
        cfg.loss_weights.lambda2 = -1.0;
        assert_eq!(key_of(cfg), "loss_weights.lambda2");
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("complete".parse::<Variant>().is_err());
    }

    #[test]
    fn bottleneck_shape_and_shared_encoder_structure() {
        let cfg = GlsgnConfig::default();
        let model = Glsgn::<f32>::new(cfg.clone()).unwrap();
        let shapes = |pw: &str| -> Vec<Vec<usize>> {
            model
                .params
                .iter()
                .filter(|(n, _)| {
                    let rest = n.strip_prefix(pw).unwrap_or("");
                    rest.starts_with(".stem") || rest.starts_with(".merge") || rest.starts_with(".enc")
                })
                .map(|(_, t)| t.shape().to_vec())
                .collect()
        };
        let reference = shapes("sg");
        assert_eq!(*reference.last().unwrap(), vec![128]);
        assert_eq!(reference[reference.len() - 2], vec![128, 64, 3, 3]);
        for pw in ["s1", "s2", "s3"] {
            assert_eq!(shapes(pw), reference);
        }

        let graph = Graph::new();
        let p = model.bind(&graph, false);
        let x = graph.constant(Tensor::full(vec![1, 3, 16, 16], 0.5f32));
        let pw = &cfg.pathways()[0];
        let out = model.pathway_forward(&p, pw, x, None, None, None).unwrap();
        assert_eq!(out.restored.shape(), [1, 3, 16, 16]);
        assert_eq!(out.decoded.shape(), [1, 16, 16, 16]);
        assert_eq!(out.attention.unwrap().0.shape(), [1, 1, 2, 2]);
    }

    #[test]
    fn forward_shapes_ranges_and_determinism() {
        let model = Glsgn::<f64>::new(small()).unwrap();
        let img = random_image(2, 32, 32, 3);
        let a = model.restore(&img).unwrap();
        let b = model.restore(&img).unwrap();
        assert_eq!(a.shape(), img.shape());
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));

        let graph = Graph::new();
        let p = model.bind(&graph, false);
        let out = model.forward(&p, graph.constant(img.clone())).unwrap();
        let names: Vec<_> = out.per_pathway.iter().map(|o| o.name.as_str()).collect();
        assert_eq!(names, ["sg", "s1", "s2", "s3"]);
        let sizes: Vec<_> = out.per_pathway.iter().map(|o| o.restored.shape()[2]).collect();
        assert_eq!(sizes, [8, 32, 16, 8]);
        for o in &out.per_pathway {
            assert!(o.restored.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
            if let Some(m) = o.mask {
                assert!(m.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
        assert!(out.per_pathway[0].mask.is_some() && out.per_pathway[3].mask.is_none());
        assert!(model.restore(&random_image(1, 16, 16, 0)).is_err());
    }

    #[test]
    fn zero_weights_restore_one_half() {
        let mut model = Glsgn::<f64>::new(small()).unwrap();
        for t in model.params.tensors_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let out = model.restore(&random_image(1, 32, 32, 4)).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
        let graph = Graph::new();
        let p = model.bind(&graph, false);
        let res = model.forward(&p, graph.constant(random_image(1, 32, 32, 4))).unwrap();
        for o in res.per_pathway {
            assert!(o.restored.value().data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn pathway_parameters_are_independent() {
        let model = Glsgn::<f64>::new(small()).unwrap();
        let img = random_image(1, 32, 32, 5);
        let run = |m: &Glsgn<f64>| -> Vec<Tensor<f64>> {
            let graph = Graph::new();
            let p = m.bind(&graph, false);
            let out = m.forward(&p, graph.constant(img.clone())).unwrap();
            out.per_pathway.iter().map(|o| (*o.restored.value()).clone()).collect()
        };
        let before = run(&model);
        let mut changed = model.clone();
        for (name, t) in changed.params.iter_mut() {
            if name.starts_with("s2.") {
                *t = t.map(|v| v * 1.5);
            }
        }
        let after = run(&changed);
        assert_eq!(before[..2], after[..2]);
        assert_ne!(before[2], after[2]);
    }

    fn copy_shared(from: &Glsgn<f64>, to: &mut Glsgn<f64>) {
        for (name, t) in to.params.iter_mut() {
            *t = from.params.get(name).unwrap().clone();
        }
    }

    #[test]
    fn pn_is_identity_on_uniform_input() {
        let mut with_pn = Glsgn::<f64>::new(small().with_variant(Variant::Pn)).unwrap();
        let mut without = Glsgn::<f64>::new(small().with_variant(Variant::GlobalLocal)).unwrap();
        copy_shared(&with_pn, &mut without);
        // Cut the handoff inputs so every patch sees the same data.
        for m in [&mut with_pn, &mut without] {
            for (name, t) in m.params.iter_mut() {
                if name.ends_with(".merge.weight") {
                    let per = t.shape()[1] * 9;
                    for (i, v) in t.data_mut().iter_mut().enumerate() {
                        if i % per >= per / 3 {
                            *v = 0.0;
                        }
                    }
                }
            }
        }
        let img = Tensor::full(vec![1, 3, 32, 32], 0.3);
        let (a, b) = (with_pn.restore(&img).unwrap(), without.restore(&img).unwrap());
        assert!(a.max_abs_diff(&b) < 1e-12, "{}", a.max_abs_diff(&b));
        let noisy = random_image(1, 32, 32, 8);
        assert!(with_pn.restore(&noisy).unwrap() != without.restore(&noisy).unwrap());
    }

    #[test]
    fn parameter_counts_grow_along_the_ladder() {
        let counts: Vec<usize> = Variant::ALL
            .iter()
            .map(|&v| Glsgn::<f32>::new(small().with_variant(v)).unwrap().params.numel())
            .collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
        let full = Glsgn::<f32>::new(small()).unwrap();
        assert_eq!(full, Glsgn::<f32>::new(small().with_variant(Variant::Full)).unwrap());
    }

    #[test]
    fn synthesis_reproduces_a_consistent_pyramid() {
        let model = Glsgn::<f64>::new(small()).unwrap();
        let graph = Graph::new();
        let b1 = graph.constant(random_image(1, 32, 32, 6));
        let b2 = b1.downsample2x().unwrap();
        let b3 = b2.downsample2x().unwrap();
        let flat = graph.constant(Tensor::full(vec![1, 3, 8, 8], 0.4));
        let ones = |s: usize| graph.constant(Tensor::ones(vec![1, 1, s, s]));
        let out = |name: &str, restored, mask| PathwayOutput {
            name: name.into(),
            restored,
            decoded: restored,
            attention: None,
            mask,
        };
        let outputs = vec![
            out("sg", flat, Some(ones(8))),
            out("s1", b1, Some(ones(32))),
            out("s2", b2, Some(ones(16))),
            out("s3", b3, None),
        ];
        let fused = model.synthesize(&outputs).unwrap().value();
        assert!(fused.max_abs_diff(&b1.value()) < 1e-12);
    }
}
