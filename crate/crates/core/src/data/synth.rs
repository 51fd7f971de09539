//! Synthetic compositional features.
//!
//! Every image shows its labelled pair `(a, o)` on a random subset of the
//! patch positions (the foreground) and a distractor pair `(a', o')`, with
//! `a' != a` and `o' != o`, on the rest. Per token:
//!
//! * deep patch: object prototype of the region (the distractor's scaled by
//!   `distractor_deep`) plus noise;
//! * shallow patch, per block: `(1 - κ)·Q_a + κ·mix(a, P_o)` of the region
//!   plus independent noise, where `mix(a, P_o)` is the normalised sum of
//!   both prototypes and a fixed pseudo-random direction for the pair. `κ`
//!   sets how far an attribute's appearance depends on the object it sits
//!   on, and also how much object identity shallow tokens carry;
//! * class tokens: mean of the patches plus noise.
//!
//! Prototypes are unit vectors; features are multiplied by `scale`, by
//! default `sqrt(D)` so coordinates are O(1) like transformer activations.
//! Noise is isotropic with norm about `σ` before scaling. Text embeddings
//! are the prototypes under a fixed random linear map to `d` dimensions.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{FeatureBundle, TextEmbeddings};
use crate::rng::{stream, Stream};
use crate::space::{CompositionSpace, Pair};
use crate::tensor::Tensor;

/// Weight of the pair-specific direction inside `mix`.
const PAIR_TEXTURE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_attrs: usize,
    pub num_objs: usize,
    pub visual_dim: usize,
    pub text_dim: usize,
    pub tokens: usize,
    pub blocks: usize,
    pub seen_fraction: f64,
    /// Training images per seen composition. Validation and test get
    /// `max(1, n / 4)` and `max(1, n / 2)` per composition.
    pub samples_per_composition: usize,
    /// `σ`
    pub noise: f64,
    /// `κ`
    pub dependence: f64,
    /// Fraction of patch positions covered by the labelled pair.
    pub foreground: f64,
    /// Weight of the distractor object in the deep patches.
    pub distractor_deep: f64,
    /// Feature magnitude; `None` means `sqrt(D)`.
    pub scale: Option<f64>,
    /// Per-coordinate standard deviation of the text embeddings.
    pub text_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_attrs: 8,
            num_objs: 6,
            visual_dim: 64,
            text_dim: 32,
            tokens: 6,
            blocks: 3,
            seen_fraction: 0.7,
            samples_per_composition: 40,
            noise: 0.1,
            dependence: 0.8,
            foreground: 0.5,
            distractor_deep: 0.5,
            scale: None,
            text_scale: 1.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn seen_count(&self) -> usize {
        (self.seen_fraction * (self.num_attrs * self.num_objs) as f64).round() as usize
    }

    pub fn foreground_tokens(&self) -> usize {
        ((self.foreground * self.tokens as f64).round() as usize).clamp(1, self.tokens)
    }

    pub fn feature_scale(&self) -> f64 {
        self.scale.unwrap_or((self.visual_dim as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_attrs < 2 || self.num_objs < 2 {
            return bad(format!(
                "need at least 2 attributes and 2 objects, got {}x{}",
                self.num_attrs, self.num_objs
            ));
        }
        if [self.visual_dim, self.text_dim, self.tokens, self.blocks, self.samples_per_composition]
            .contains(&0)
        {
            return bad("D, d, T, B and samples per composition must be at least 1".into());
        }
        if !(self.seen_fraction > 0.0 && self.seen_fraction < 1.0) {
            return bad(format!("seen fraction must lie in (0, 1), got {}", self.seen_fraction));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be nonnegative, got {}", self.noise));
        }
        if !(0.0..=1.0).contains(&self.dependence) {
            return bad(format!("dependence must lie in [0, 1], got {}", self.dependence));
        }
        if !(self.foreground > 0.0 && self.foreground <= 1.0) {
            return bad(format!("foreground fraction must lie in (0, 1], got {}", self.foreground));
        }
        if !(self.distractor_deep >= 0.0 && self.distractor_deep.is_finite()) {
            return bad(format!("distractor weight must be nonnegative, got {}", self.distractor_deep));
        }
        if !(self.text_scale > 0.0 && self.text_scale.is_finite()) {
            return bad(format!("text scale must be positive, got {}", self.text_scale));
        }
        if let Some(s) = self.scale {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("scale must be positive, got {s}"));
            }
        }
        let total = self.num_attrs * self.num_objs;
        let seen = self.seen_count();
        let need = self.num_attrs.max(self.num_objs);
        if seen < need {
            return bad(format!(
                "{seen} seen compositions cannot cover {} attributes and {} objects",
                self.num_attrs, self.num_objs
            ));
        }
        if seen >= total {
            return bad(format!("seen fraction leaves no unseen compositions out of {total}"));
        }
        Ok(())
    }
}

/// The fixed ingredients of a synthetic benchmark.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub config: SynthConfig,
    /// Unit attribute prototypes `Q_a`, `M` rows of length `D`.
    pub attr_protos: Vec<Vec<f64>>,
    /// Unit object prototypes `P_o`.
    pub obj_protos: Vec<Vec<f64>>,
    /// `mix(a, P_o)` for every pair, attribute-major.
    mixes: Vec<Vec<f64>>,
    /// `[d x D]` map from prototypes to text embeddings.
    text_map: Vec<Vec<f64>>,
}

/// One rendered image and which patch positions show the labelled pair.
#[derive(Debug, Clone)]
pub struct Rendered {
    pub bundle: FeatureBundle,
    pub foreground: Vec<bool>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, xi) in out.iter_mut().zip(x) {
        *o += a * xi;
    }
}

impl SynthWorld {
    pub fn new(config: SynthConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.seed, Stream::Synth);
        let dv = config.visual_dim;
        let attr_protos: Vec<_> = (0..config.num_attrs).map(|_| unit(gaussian(&mut rng, dv))).collect();
        let obj_protos: Vec<_> = (0..config.num_objs).map(|_| unit(gaussian(&mut rng, dv))).collect();
        let mut mixes = Vec::with_capacity(config.num_attrs * config.num_objs);
        for q in &attr_protos {
            for p in &obj_protos {
                let mut m = unit(gaussian(&mut rng, dv));
                m.iter_mut().for_each(|x| *x *= PAIR_TEXTURE);
                axpy(&mut m, 1.0, p);
                axpy(&mut m, 1.0, q);
                mixes.push(unit(m));
            }
        }
        // unit prototypes map to coordinates of standard deviation `text_scale`
        let s = config.text_scale;
        let text_map = (0..config.text_dim)
            .map(|_| gaussian(&mut rng, dv).into_iter().map(|x| x * s).collect())
            .collect();
        Ok(SynthWorld {
            config,
            attr_protos,
            obj_protos,
            mixes,
            text_map,
        })
    }

    pub fn mix(&self, attr: usize, obj: usize) -> &[f64] {
        &self.mixes[attr * self.config.num_objs + obj]
    }

    /// Noise-free shallow signal of a pair, before scaling.
    pub fn shallow_signal(&self, attr: usize, obj: usize) -> Vec<f64> {
        let k = self.config.dependence;
        let mut v = vec![0.0; self.config.visual_dim];
        axpy(&mut v, 1.0 - k, &self.attr_protos[attr]);
        axpy(&mut v, k, self.mix(attr, obj));
        v
    }

    fn project(&self, proto: &[f64]) -> Vec<f64> {
        self.text_map
            .iter()
            .map(|row| row.iter().zip(proto).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn text(&self) -> Result<TextEmbeddings> {
        let c = &self.config;
        let table = |protos: &[Vec<f64>]| {
            let data = protos.iter().flat_map(|p| self.project(p)).collect();
            Tensor::matrix(protos.len(), c.text_dim, data)
        };
        TextEmbeddings::new(
            attr_names(c.num_attrs),
            obj_names(c.num_objs),
            table(&self.attr_protos)?,
            table(&self.obj_protos)?,
        )
    }

    /// Renders one image of `(attr, obj)`.
    pub fn render(&self, id: String, attr: usize, obj: usize, rng: &mut ChaCha8Rng) -> Result<Rendered> {
        let c = &self.config;
        let (dv, t) = (c.visual_dim, c.tokens);
        if attr >= c.num_attrs || obj >= c.num_objs {
            return Err(Error::Index {
                index: attr.max(obj),
                len: c.num_attrs.min(c.num_objs),
                context: "synthetic pair",
            });
        }
        let d_attr = (attr + rng.random_range(1..c.num_attrs)) % c.num_attrs;
        let d_obj = (obj + rng.random_range(1..c.num_objs)) % c.num_objs;
        let mut positions: Vec<usize> = (0..t).collect();
        positions.shuffle(rng);
        let mut foreground = vec![false; t];
        for &p in &positions[..c.foreground_tokens()] {
            foreground[p] = true;
        }

        let noise = Noise {
            scale: c.feature_scale(),
            sd: c.noise / (dv as f64).sqrt(),
        };
        let mut deep_main = vec![0.0; dv];
        axpy(&mut deep_main, 1.0, &self.obj_protos[obj]);
        let mut deep_bg = vec![0.0; dv];
        axpy(&mut deep_bg, c.distractor_deep, &self.obj_protos[d_obj]);
        let shallow_main = self.shallow_signal(attr, obj);
        let shallow_bg = self.shallow_signal(d_attr, d_obj);

        let render_patches = |main: &[f64], bg: &[f64], rng: &mut ChaCha8Rng| -> Result<(Tensor, Tensor)> {
            let mut data = Vec::with_capacity(t * dv);
            for &fg in &foreground {
                data.extend(noise.apply(if fg { main } else { bg }, rng));
            }
            let patches = Tensor::matrix(t, dv, data)?;
            let mut class = vec![0.0; dv];
            for r in 0..t {
                axpy(&mut class, 1.0 / t as f64, patches.row_slice(r));
            }
            let class = noise.apply_scaled(class, rng);
            Ok((Tensor::matrix(1, dv, class)?, patches))
        };
        let (deep_class, deep_patches) = render_patches(&deep_main, &deep_bg, rng)?;
        let mut shallow_blocks = Vec::with_capacity(c.blocks);
        let mut shallow_class = Vec::with_capacity(c.blocks);
        for _ in 0..c.blocks {
            let (class, block) = render_patches(&shallow_main, &shallow_bg, rng)?;
            shallow_class.push(class);
            shallow_blocks.push(block);
        }
        Ok(Rendered {
            bundle: FeatureBundle {
                image_id: id,
                deep_class,
                deep_patches,
                shallow_blocks,
                shallow_class,
                attr,
                obj,
            },
            foreground,
        })
    }
}

struct Noise {
    scale: f64,
    sd: f64,
}

impl Noise {
    /// `scale * (signal + sd * z)`
    fn apply(&self, signal: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        signal
            .iter()
            .map(|&x| self.scale * (x + self.sd * rng.sample::<f64, _>(StandardNormal)))
            .collect()
    }

    /// Adds noise to an already scaled vector.
    fn apply_scaled(&self, mut v: Vec<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
        for x in v.iter_mut() {
            *x += self.scale * self.sd * rng.sample::<f64, _>(StandardNormal);
        }
        v
    }
}

pub fn attr_names(m: usize) -> Vec<String> {
    (0..m).map(|i| format!("attr{i}")).collect()
}

pub fn obj_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("obj{i}")).collect()
}

/// Seen pairs covering every attribute and object, then random fill.
fn sample_seen(c: &SynthConfig, rng: &mut ChaCha8Rng) -> BTreeSet<Pair> {
    let mut attrs: Vec<usize> = (0..c.num_attrs).collect();
    let mut objs: Vec<usize> = (0..c.num_objs).collect();
    attrs.shuffle(rng);
    objs.shuffle(rng);
    let mut seen = BTreeSet::new();
    for i in 0..c.num_attrs.max(c.num_objs) {
        seen.insert(Pair::new(attrs[i % c.num_attrs], objs[i % c.num_objs]));
    }
    let mut rest: Vec<Pair> = (0..c.num_attrs)
        .flat_map(|a| (0..c.num_objs).map(move |o| Pair::new(a, o)))
        .filter(|p| !seen.contains(p))
        .collect();
    rest.shuffle(rng);
    let want = c.seen_count();
    seen.extend(rest.into_iter().take(want - seen.len()));
    seen
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub train: Vec<FeatureBundle>,
    pub val: Vec<FeatureBundle>,
    pub test: Vec<FeatureBundle>,
    pub space: CompositionSpace,
    pub text: TextEmbeddings,
}

pub fn synth_generate(config: &SynthConfig) -> Result<SynthData> {
    let world = SynthWorld::new(config.clone())?;
    // A separate stream for splits and images keeps the prototypes fixed
    // when only sample counts change.
    let mut rng = stream(config.seed ^ 0x5eed_5eed, Stream::Synth);
    let seen = sample_seen(config, &mut rng);
    let mut unseen: Vec<Pair> = world_pairs(config).filter(|p| !seen.contains(p)).collect();
    unseen.shuffle(&mut rng);
    let n_test = unseen.len().div_ceil(2);
    let test_unseen: BTreeSet<Pair> = unseen[..n_test].iter().copied().collect();
    let val_unseen: BTreeSet<Pair> = unseen[n_test..].iter().copied().collect();
    let space = CompositionSpace::new(
        attr_names(config.num_attrs),
        obj_names(config.num_objs),
        seen.clone(),
        seen.clone(),
        val_unseen.clone(),
        seen.clone(),
        test_unseen.clone(),
    )?;

    let spc = config.samples_per_composition;
    let mut make = |split: &str, pairs: Vec<Pair>, per: usize| -> Result<Vec<FeatureBundle>> {
        let mut out = Vec::with_capacity(pairs.len() * per);
        for p in pairs {
            for _ in 0..per {
                let id = format!("{split}-{:06}", out.len());
                out.push(world.render(id, p.attr, p.obj, &mut rng)?.bundle);
            }
        }
        Ok(out)
    };
    let train = make("train", seen.iter().copied().collect(), spc)?;
    let val = make(
        "val",
        seen.iter().chain(&val_unseen).copied().collect(),
        (spc / 4).max(1),
    )?;
    let test = make(
        "test",
        seen.iter().chain(&test_unseen).copied().collect(),
        (spc / 2).max(1),
    )?;
    Ok(SynthData {
        train,
        val,
        test,
        space,
        text: world.text()?,
    })
}

fn world_pairs(c: &SynthConfig) -> impl Iterator<Item = Pair> + '_ {
    (0..c.num_attrs).flat_map(move |a| (0..c.num_objs).map(move |o| Pair::new(a, o)))
}
