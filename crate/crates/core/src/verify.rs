//! Finite-difference verification of every differentiable op, the composite
//! modules built from them, and the end-to-end generator.

use std::collections::BTreeSet;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{self, Discriminator, LossWeights, PerceptualExtractor};
use crate::model::{Glsgn, GlsgnConfig};
use crate::pac::{self, MapGeometry, PacWeights};
use crate::patch;
use crate::pyramid;
use crate::tensor::ops::{SpectralState, DIFFERENTIABLE_OPS};
use crate::tensor::{check_gradients, GradCase, GradEntry, GradReport, Graph, Tensor};

/// Perturbation used by the 64-bit checks.
pub const FD_EPSILON: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
/// Seeds over which every op case is repeated.
pub const SEEDS: [u64; 5] = [11, 23, 37, 41, 53];

struct Inputs(ChaCha8Rng);

impl Inputs {
    fn new(seed: u64) -> Self {
        Inputs(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Uniform in [-1, 1].
    fn uniform(&mut self, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| self.0.gen_range(-1.0..1.0))
    }

    /// Uniform in [-1, 1] with magnitude at least `gap`, away from kinks at zero.
    fn signed(&mut self, shape: &[usize], gap: f64) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| {
            let m = self.0.gen_range(gap..1.0);
            if self.0.gen_bool(0.5) { m } else { -m }
        })
    }

    fn range(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| self.0.gen_range(lo..hi))
    }
}

/// One case per differentiable op, named after the op.
pub fn op_cases(seed: u64) -> Vec<GradCase> {
    let mut r = Inputs::new(seed);
    let t = OP_TOLERANCE;
    let mut cases = vec![
        GradCase::new(
            "conv2d",
            vec![r.uniform(&[2, 3, 5, 6]), r.uniform(&[4, 3, 3, 3]), r.uniform(&[4])],
            t,
            |_, v| v[0].conv2d(v[1], Some(v[2]), 1, 1),
        ),
        GradCase::new(
            "conv2d/stride2",
            vec![r.uniform(&[1, 2, 6, 7]), r.uniform(&[3, 2, 3, 3])],
            t,
            |_, v| v[0].conv2d(v[1], None, 2, 1),
        ),
        GradCase::new(
            "conv2d/7x7",
            vec![r.uniform(&[2, 2, 2, 3]), r.uniform(&[1, 2, 7, 7]), r.uniform(&[1])],
            t,
            |_, v| v[0].conv2d(v[1], Some(v[2]), 1, 3),
        ),
        GradCase::new("resize_bilinear", vec![r.uniform(&[1, 2, 3, 5])], t, |_, v| {
            v[0].resize_bilinear(7, 4)
        }),
        GradCase::new("downsample2x", vec![r.uniform(&[2, 2, 4, 6])], t, |_, v| {
            v[0].downsample2x()
        }),
        GradCase::new("relu", vec![r.signed(&[2, 3, 3, 3], 1e-3)], t, |_, v| Ok(v[0].relu())),
        GradCase::new("leaky_relu", vec![r.signed(&[2, 3, 3, 3], 1e-3)], t, |_, v| {
            Ok(v[0].leaky_relu())
        }),
        GradCase::new("sigmoid", vec![r.uniform(&[2, 3, 3, 3])], t, |_, v| Ok(v[0].sigmoid())),
        GradCase::new("tanh", vec![r.uniform(&[2, 3, 3, 3])], t, |_, v| Ok(v[0].tanh())),
        GradCase::new("abs", vec![r.signed(&[2, 3, 3, 3], 1e-3)], t, |_, v| Ok(v[0].abs())),
        GradCase::new("add", vec![r.uniform(&[1, 2, 3, 3]), r.uniform(&[1, 2, 3, 3])], t, |_, v| {
            v[0].add(v[1])
        }),
        GradCase::new("sub", vec![r.uniform(&[1, 2, 3, 3]), r.uniform(&[1, 2, 3, 3])], t, |_, v| {
            v[0].sub(v[1])
        }),
        GradCase::new("mul", vec![r.uniform(&[1, 2, 3, 3]), r.uniform(&[1, 2, 3, 3])], t, |_, v| {
            v[0].mul(v[1])
        }),
        GradCase::new("div", vec![r.uniform(&[1, 2, 3, 3]), r.signed(&[1, 2, 3, 3], 0.3)], t, |_, v| {
            v[0].div(v[1])
        }),
        GradCase::new("scale", vec![r.uniform(&[1, 2, 3, 3])], t, |_, v| Ok(v[0].scale(-1.7))),
        GradCase::new("add_scalar", vec![r.uniform(&[1, 2, 3, 3])], t, |_, v| {
            Ok(v[0].add_scalar(0.3))
        }),
        GradCase::new("clamp", vec![clamp_input(&mut r)], t, |_, v| Ok(v[0].clamp(-0.5, 0.5))),
        GradCase::new(
            "abs_ratio",
            vec![r.signed(&[1, 2, 3, 3], 1e-3), r.signed(&[1, 2, 3, 3], 0.2)],
            t,
            |_, v| v[0].abs_ratio(v[1], 1e-6),
        ),
        GradCase::new(
            "concat_channels",
            vec![r.uniform(&[2, 1, 3, 3]), r.uniform(&[2, 3, 3, 3])],
            t,
            |_, v| crate::tensor::Var::concat_channels(&[v[0], v[1]]),
        ),
        GradCase::new("channel_stats", vec![r.uniform(&[2, 4, 3, 3])], t, |_, v| {
            v[0].channel_stats()
        }),
        GradCase::new("to_patches", vec![r.uniform(&[2, 2, 4, 6])], t, |_, v| {
            v[0].to_patches(2, 3)
        }),
        GradCase::new("from_patches", vec![r.uniform(&[12, 2, 2, 2])], t, |_, v| {
            v[0].from_patches(2, 3)
        }),
        GradCase::new("patch_neighbor_mean", vec![r.uniform(&[18, 2, 1, 1])], t, |_, v| {
            v[0].patch_neighbor_mean(3, 3)
        }),
        GradCase::new(
            "mul_broadcast",
            vec![r.uniform(&[2, 3, 3, 4]), r.uniform(&[2, 1, 3, 4])],
            t,
            |_, v| v[0].mul_broadcast(v[1]),
        ),
        GradCase::new(
            "mul_broadcast/channel",
            vec![r.uniform(&[2, 3, 3, 4]), r.uniform(&[2, 3, 1, 1])],
            t,
            |_, v| v[0].mul_broadcast(v[1]),
        ),
        GradCase::new("sum", vec![r.uniform(&[2, 3, 2, 2])], t, |_, v| Ok(v[0].sum())),
        GradCase::new("mean", vec![r.uniform(&[2, 3, 2, 2])], t, |_, v| Ok(v[0].mean())),
        GradCase::new("spatial_sum", vec![r.uniform(&[2, 3, 2, 4])], t, |_, v| {
            v[0].spatial_sum()
        }),
    ];
    let w = r.uniform(&[4, 2, 3, 3]);
    let mut state = SpectralState::new(&w, r.uniform(&[4]).into_data()).expect("rows");
    for _ in 0..3 {
        state.power_iteration(&w).expect("shape");
    }
    cases.push(GradCase::new("spectral_normalize", vec![w], t, move |_, v| {
        v[0].spectral_normalize(&state)
    }));
    cases
}

fn clamp_input(r: &mut Inputs) -> Tensor<f64> {
    // Values on both sides of each bound, none within 1e-3 of it.
    let mut t = r.signed(&[1, 2, 3, 3], 1e-3);
    for v in t.data_mut() {
        if (v.abs() - 0.5).abs() < 1e-3 {
            *v *= 0.9;
        }
    }
    t
}

/// Composite modules: patch normalization, attention, pyramid synthesis, losses.
pub fn module_cases(seed: u64) -> Vec<GradCase> {
    let mut r = Inputs::new(seed);
    let t = OP_TOLERANCE;
    let extractor = Rc::new(PerceptualExtractor::<f64>::new(seed));
    let disc = Rc::new(Discriminator::<f64>::new(seed));
    vec![
        GradCase::new(
            "module/pn",
            vec![
                r.signed(&[9, 2, 2, 2], 0.2),
                r.uniform(&[9, 2, 2, 2]),
                r.uniform(&[2, 2, 3, 3]).map(|v| v * 0.1),
            ],
            t,
            |_, v| {
                let a = patch::pn_scale(v[0], v[1], 3, 3, 1e-6)?;
                patch::pn_apply(v[1], a, |y| y.conv2d(v[2], None, 1, 1))
            },
        ),
        GradCase::new(
            "module/spatial_attention",
            vec![r.uniform(&[2, 3, 4, 4]), r.uniform(&[1, 2, 7, 7]), r.uniform(&[1])],
            t,
            |_, v| pac::spatial_attention(v[0], v[1], v[2]),
        ),
        GradCase::new(
            "module/fuse_reweight",
            vec![
                r.range(&[4, 1, 2, 2], 0.1, 0.9),
                r.range(&[4, 1, 2, 2], 0.1, 0.9),
                r.range(&[1, 1, 3, 3], 0.1, 0.9),
                r.uniform(&[4, 3, 2, 2]),
            ],
            t,
            |_, v| {
                let from = MapGeometry { height: 3, width: 3, rows: 1, cols: 1 };
                let to = MapGeometry { height: 4, width: 4, rows: 2, cols: 2 };
                let g = pac::align_map(v[2], from, to)?;
                let a = pac::fuse_attention(v[0], Some(v[1]), Some(g), PacWeights::default())?;
                pac::reweight(v[3], a)
            },
        ),
        GradCase::new(
            "module/pyramid_fusion",
            vec![
                r.uniform(&[1, 3, 8, 8]),
                r.uniform(&[1, 3, 4, 4]),
                r.uniform(&[1, 3, 2, 2]),
                r.uniform(&[1, 3, 2, 2]),
                r.range(&[1, 1, 8, 8], 0.1, 0.9),
                r.range(&[1, 1, 4, 4], 0.1, 0.9),
                r.range(&[1, 1, 2, 2], 0.1, 0.9),
            ],
            t,
            |_, v| {
                let h1 = pyramid::extract_highfreq(v[0])?;
                let h2 = pyramid::extract_highfreq(v[1])?;
                let h3 = pyramid::extract_highfreq(v[2])?;
                pyramid::fuse_glsgn(h1, h2, h3, v[3], [v[4], v[5], v[6]])
            },
        ),
        GradCase::new(
            "module/pixel_loss",
            vec![r.range(&[1, 3, 8, 8], 0.0, 1.0), r.range(&[1, 3, 4, 4], 0.0, 1.0)],
            t,
            |g, v| {
                let gt = g.constant(Tensor::from_fn(vec![1, 3, 8, 8], |i| (i % 5) as f64 / 5.0 + 0.0123));
                losses::pixel_loss(gt, &[v[1]], v[0], &LossWeights::default())
            },
        ),
        GradCase::new(
            "module/perceptual_loss",
            vec![r.range(&[1, 3, 8, 8], 0.0, 1.0), r.range(&[1, 3, 4, 4], 0.0, 1.0)],
            t,
            move |g, v| {
                let p = extractor.params.bind(g, false);
                let gt = g.constant(Tensor::from_fn(vec![1, 3, 8, 8], |i| (i % 7) as f64 / 7.0));
                losses::perceptual_loss(&extractor, &p, gt, &[v[1]], v[0], &LossWeights::default())
            },
        )
        .with_max_coords(48),
        GradCase::new(
            "module/discriminator_hinge",
            vec![r.range(&[2, 3, 16, 16], 0.0, 1.0), r.range(&[2, 3, 16, 16], 0.0, 1.0)],
            t,
            move |g, v| {
                let p = disc.params.bind(g, false);
                let d = losses::discriminator_loss(&disc, &p, v[0], v[1])?;
                d.add(losses::adversarial_g_loss(&disc, &p, v[1])?)
            },
        )
        .with_max_coords(48),
    ]
}

/// Gradient of `mean(B_out)` and of the full training objective through the
/// tiny generator, with respect to selected parameters and the input image.
pub fn end_to_end_cases(seed: u64) -> Vec<GradCase> {
    let cfg = GlsgnConfig { seed, ..GlsgnConfig::tiny() };
    let mut model = Glsgn::<f64>::new(cfg).expect("tiny config is valid");
    // Bias branches start at zero; make them nonzero so their gradients are exercised.
    let mut r = Inputs::new(seed ^ 0xe2e);
    for (name, t) in model.params.iter_mut() {
        if name.contains("pn_bias.weight") {
            *t = r.uniform(t.shape()).map(|v| v * 0.05);
        }
    }
    let model = Rc::new(model);
    let image = r.range(&[1, 3, 16, 16], 0.05, 0.95);
    let gt = Rc::new(r.range(&[1, 3, 16, 16], 0.05, 0.95));

    let weight_case = |name: &str| -> GradCase {
        let m = Rc::clone(&model);
        let (param, img) = (name.to_string(), image.clone());
        let value = model.params.get(name).expect("parameter exists").clone();
        GradCase::new(format!("end_to_end/{name}"), vec![value], END_TO_END_TOLERANCE, move |g, v| {
            let mut p = m.bind(g, false);
            p.replace(&param, v[0])?;
            let out = m.forward(&p, g.constant(img.clone()))?;
            Ok(out.final_image.mean())
        })
        .with_max_coords(16)
    };
    let mut cases = vec![
        weight_case("s1.enc1.weight"),
        weight_case("s1.dec1.rb0.pn_bias.weight"),
        weight_case("s1.att.bias"),
        weight_case("s2.dec2.fuse.weight"),
        weight_case("sg.mask.weight"),
    ];

    let m = Rc::clone(&model);
    let extractor = Rc::new(PerceptualExtractor::<f64>::new(seed));
    let disc = Rc::new(Discriminator::<f64>::new(seed));
    let w0 = model.params.get("s1.stem.weight").expect("stem").clone();
    cases.push(
        GradCase::new("end_to_end/total_loss", vec![image, w0], END_TO_END_TOLERANCE, move |g, v| {
            let mut p = m.bind(g, false);
            p.replace("s1.stem.weight", v[1])?;
            let pe = extractor.params.bind(g, false);
            let pd = disc.params.bind(g, false);
            let out = m.forward(&p, v[0])?;
            let gt = g.constant((*gt).clone());
            let restored: Vec<_> = out.per_pathway.iter().map(|o| o.restored).collect();
            let w = &m.config.loss_weights;
            let pix = losses::pixel_loss(gt, &restored, out.final_image, w)?;
            let perc = losses::perceptual_loss(&extractor, &pe, gt, &restored, out.final_image, w)?;
            let adv = losses::adversarial_g_loss(&disc, &pd, out.final_image)?;
            losses::total_loss(pix, perc, adv, w)
        })
        .with_max_coords(16),
    );
    cases
}

/// A case whose recorded gradient is deliberately wrong; the suite must flag it.
pub fn sabotaged_case() -> GradCase {
    let mut r = Inputs::new(7);
    GradCase::new("sabotaged_square", vec![r.uniform(&[1, 1, 2, 2])], OP_TOLERANCE, |g, v| {
        let x = v[0].value();
        let y = x.map(|a| a * a);
        Ok(g.push(
            "sabotaged_square",
            y,
            &[v[0]],
            Box::new(move |gout, _| vec![Some(gout.zip_map(&x, |gv, a| 3.0 * gv * a).expect("shape"))]),
        ))
    })
}

/// Merges repeated runs of the same case, keeping the worst error.
fn merge(entries: &mut Vec<GradEntry>, e: GradEntry) {
    match entries.iter_mut().find(|x| x.name == e.name) {
        Some(x) => {
            x.max_rel_error = x.max_rel_error.max(e.max_rel_error);
            x.checked += e.checked;
            if x.error.is_none() {
                x.error = e.error;
            }
        }
        None => entries.push(e),
    }
}

/// What to run.
#[derive(Clone, Copy, Debug, Default)]
pub struct SuiteOptions {
    pub include_end_to_end: bool,
    pub include_sabotaged: bool,
}

/// Runs every registered case; op and module cases over [`SEEDS`], end-to-end cases once.
pub fn gradient_suite(opts: SuiteOptions) -> GradReport {
    let mut entries = Vec::new();
    for &seed in &SEEDS {
        for case in op_cases(seed).iter().chain(&module_cases(seed)) {
            merge(&mut entries, check_gradients(case, FD_EPSILON));
        }
    }
    if opts.include_end_to_end {
        for case in &end_to_end_cases(SEEDS[0]) {
            merge(&mut entries, check_gradients(case, FD_EPSILON));
        }
    }
    if opts.include_sabotaged {
        merge(&mut entries, check_gradients(&sabotaged_case(), FD_EPSILON));
    }
    GradReport { entries }
}

/// Registered ops that no op case records on its graph; empty when the registry is complete.
pub fn unexercised_ops() -> Result<Vec<&'static str>> {
    let mut seen = BTreeSet::new();
    for case in op_cases(SEEDS[0]) {
        let g = Graph::new();
        let vars: Vec<_> = case.inputs.iter().map(|t| g.variable(t.clone())).collect();
        (case.build)(&g, &vars)?;
        seen.extend(g.op_names());
    }
    Ok(DIFFERENTIABLE_OPS
        .iter()
        .copied()
        .filter(|op| !seen.contains(op))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_has_a_named_case() {
        let names: BTreeSet<String> = op_cases(1).into_iter().map(|c| c.name).collect();
        for op in DIFFERENTIABLE_OPS {
            assert!(names.contains(*op), "no case named {op}");
        }
        assert!(unexercised_ops().unwrap().is_empty());
    }

    #[test]
    fn op_and_module_cases_pass() {
        let report = gradient_suite(SuiteOptions::default());
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn sabotage_is_caught() {
        let e = check_gradients(&sabotaged_case(), FD_EPSILON);
        assert!(!e.passed());
        assert!(e.max_rel_error > 0.1);
    }

    #[test]
    fn identity_has_zero_error() {
        let case = GradCase::new("identity", vec![Tensor::from_fn(vec![1, 1, 2, 2], |i| i as f64)], 1e-12, |_, v| {
            Ok(v[0])
        });
        let e = check_gradients(&case, FD_EPSILON);
        assert!(e.max_rel_error < 1e-9, "{}", e.max_rel_error);
    }
}

#[cfg(test)]
mod end_to_end {
    use super::*;

    #[test]
    fn tiny_generator_gradients_match() {
        let mut report = GradReport::default();
        for case in &end_to_end_cases(SEEDS[0]) {
            report.entries.push(check_gradients(case, FD_EPSILON));
        }
        println!("{report}");
        assert!(report.passed(), "{report}");
    }
}

