//! The conditional-probability head.
//!
//! Object prediction uses a text-enhanced object feature: a textual
//! descriptor (an attention mixture of object word embeddings keyed by the
//! projected class token) attends over the deep patch tokens, and the pooled
//! patches are added back to the class token. Attribute prediction is
//! conditioned on that object feature: it is the query that attends over the
//! fused shallow patch tokens. A third head matches a joint visual feature
//! against joint text features of candidate compositions.
//!
//! Every logit is divided by the shared temperature before its softmax.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::space::{CompositionSpace, Pair};
use crate::tensor::Tensor;

/// Frozen word embeddings for the attribute and object vocabularies.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddings {
    pub attr_names: Vec<String>,
    pub obj_names: Vec<String>,
    /// `[M x d]`
    pub attrs: Tensor,
    /// `[N x d]`
    pub objs: Tensor,
    pub frozen: bool,
}

impl TextEmbeddings {
    pub fn new(
        attr_names: Vec<String>,
        obj_names: Vec<String>,
        attrs: Tensor,
        objs: Tensor,
    ) -> Result<Self> {
        let t = TextEmbeddings {
            attr_names,
            obj_names,
            attrs,
            objs,
            frozen: true,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn dim(&self) -> usize {
        self.attrs.dims2().1
    }

    pub fn validate(&self) -> Result<()> {
        let (m, da) = self.attrs.dims2();
        let (n, dobj) = self.objs.dims2();
        if self.attrs.shape().len() != 2 || self.objs.shape().len() != 2 || da != dobj {
            return Err(Error::dim("text embeddings", self.attrs.shape(), self.objs.shape()));
        }
        if m != self.attr_names.len() || n != self.obj_names.len() {
            return Err(Error::Data(format!(
                "text embedding rows ({m}, {n}) disagree with vocabulary sizes ({}, {})",
                self.attr_names.len(),
                self.obj_names.len()
            )));
        }
        if !self.attrs.is_finite() || !self.objs.is_finite() {
            return Err(Error::numeric("text embeddings"));
        }
        for (kind, names) in [("attribute", &self.attr_names), ("object", &self.obj_names)] {
            let mut sorted: Vec<&String> = names.iter().collect();
            sorted.sort();
            if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
                return Err(Error::Data(format!("duplicate {kind} name {:?}", w[0])));
            }
        }
        Ok(())
    }
}

/// Backbone embeddings of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub image_id: String,
    /// Deep class token, `[1 x D]`.
    pub deep_class: Tensor,
    /// Deep patch tokens, `[T x D]`.
    pub deep_patches: Tensor,
    /// Raw shallow patch tokens per block, each `[T x D]`.
    pub shallow_blocks: Vec<Tensor>,
    /// Shallow class tokens per block, each `[1 x D]`. Kept for file
    /// fidelity; the head does not read them.
    pub shallow_class: Vec<Tensor>,
    pub attr: usize,
    pub obj: usize,
}

impl FeatureBundle {
    pub fn pair(&self) -> Pair {
        Pair::new(self.attr, self.obj)
    }

    pub fn tokens(&self) -> usize {
        self.deep_patches.dims2().0
    }

    pub fn visual_dim(&self) -> usize {
        self.deep_class.dims2().1
    }

    /// Checks every tensor against `(D, T, B)`.
    pub fn validate(&self, visual_dim: usize, tokens: usize, blocks: usize) -> Result<()> {
        let want_patch = [tokens, visual_dim];
        let want_class = [1, visual_dim];
        if self.deep_class.shape() != want_class {
            return Err(Error::dim("deep class token", self.deep_class.shape(), &want_class));
        }
        if self.deep_patches.shape() != want_patch {
            return Err(Error::dim("deep patches", self.deep_patches.shape(), &want_patch));
        }
        if self.shallow_blocks.len() != blocks || self.shallow_class.len() != blocks {
            return Err(Error::Data(format!(
                "image {}: expected {blocks} shallow blocks, got {} patch sets and {} class tokens",
                self.image_id,
                self.shallow_blocks.len(),
                self.shallow_class.len()
            )));
        }
        for b in &self.shallow_blocks {
            if b.shape() != want_patch {
                return Err(Error::dim("shallow block", b.shape(), &want_patch));
            }
        }
        for c in &self.shallow_class {
            if c.shape() != want_class {
                return Err(Error::dim("shallow class token", c.shape(), &want_class));
            }
        }
        Ok(())
    }
}

/// Affine map `x · W + b`, `W` stored `[in x out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Linear {
            weight: Tensor::matrix(fan_in, fan_out, data).expect("shape matches"),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> LinearVars {
        let (w, b) = if trainable {
            (g.param(self.weight.clone()), g.param(self.bias.clone()))
        } else {
            (g.constant(self.weight.clone()), g.constant(self.bias.clone()))
        };
        LinearVars { weight: w, bias: b }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.linear(x, self.weight, self.bias)
    }
}

/// Which pooling stages use attention. The reduced variants replace an
/// attention stage by a plain mean over patch tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Variant {
    #[default]
    Full,
    /// Object feature is the class token plus mean-pooled deep patches.
    NoTextObject,
    /// Additionally, the attribute feature is the mean of fused shallow patches.
    NoTextObjectNoGuidance,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoTextObject => "no-teo",
            Variant::NoTextObjectNoGuidance => "no-teo-oga",
        }
    }

    pub fn code(self) -> u32 {
        match self {
            Variant::Full => 0,
            Variant::NoTextObject => 1,
            Variant::NoTextObjectNoGuidance => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Variant::Full),
            1 => Some(Variant::NoTextObject),
            2 => Some(Variant::NoTextObjectNoGuidance),
            _ => None,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no-teo" => Ok(Variant::NoTextObject),
            "no-teo-oga" => Ok(Variant::NoTextObjectNoGuidance),
            other => Err(Error::Config(format!(
                "unknown variant {other:?}, expected full, no-teo or no-teo-oga"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadConfig {
    pub temperature: f64,
    /// Weight of the attribute loss.
    pub alpha_attr: f64,
    /// Weight of the object loss.
    pub alpha_obj: f64,
    pub variant: Variant,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            temperature: 0.05,
            alpha_attr: 0.6,
            alpha_obj: 0.4,
            variant: Variant::Full,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        for (name, v) in [("alpha1", self.alpha_attr), ("alpha2", self.alpha_obj)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Feature sizes the head is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    /// Visual width `D`.
    pub visual: usize,
    /// Text width `d`; also the joint composition width.
    pub text: usize,
    /// Shallow blocks fused per token.
    pub blocks: usize,
}

/// Every trainable tensor of the head plus its fixed hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CpfParams {
    pub proj_obj: Linear,
    pub proj_attr: Linear,
    pub fusion: Linear,
    pub comp_visual: Linear,
    pub comp_text: Linear,
    pub config: HeadConfig,
}

pub const PARAM_NAMES: [&str; 10] = [
    "proj_obj.weight",
    "proj_obj.bias",
    "proj_attr.weight",
    "proj_attr.bias",
    "fusion.weight",
    "fusion.bias",
    "comp_visual.weight",
    "comp_visual.bias",
    "comp_text.weight",
    "comp_text.bias",
];

impl CpfParams {
    pub fn init<R: Rng + ?Sized>(dims: Dims, config: HeadConfig, rng: &mut R) -> Self {
        let Dims {
            visual: dv,
            text: dt,
            blocks,
        } = dims;
        let proj_obj = Linear::init(dv, dt, rng);
        let proj_attr = Linear::init(dv, dt, rng);
        let mut fusion = Linear::init(blocks * dv, dv, rng);
        // start the fusion near the block mean so the fused tokens begin in
        // the same space as each block
        let w = fusion.weight.data_mut();
        for b in 0..blocks {
            for i in 0..dv {
                w[(b * dv + i) * dv + i] += 1.0 / blocks as f64;
            }
        }
        CpfParams {
            proj_obj,
            proj_attr,
            fusion,
            comp_visual: Linear::init(2 * dv, dt, rng),
            comp_text: Linear::init(2 * dt, dt, rng),
            config,
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            visual: self.proj_obj.fan_in(),
            text: self.proj_obj.fan_out(),
            blocks: self.fusion.fan_in() / self.proj_obj.fan_in(),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 10] {
        [
            &self.proj_obj.weight,
            &self.proj_obj.bias,
            &self.proj_attr.weight,
            &self.proj_attr.bias,
            &self.fusion.weight,
            &self.fusion.bias,
            &self.comp_visual.weight,
            &self.comp_visual.bias,
            &self.comp_text.weight,
            &self.comp_text.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 10] {
        [
            &mut self.proj_obj.weight,
            &mut self.proj_obj.bias,
            &mut self.proj_attr.weight,
            &mut self.proj_attr.bias,
            &mut self.fusion.weight,
            &mut self.fusion.bias,
            &mut self.comp_visual.weight,
            &mut self.comp_visual.bias,
            &mut self.comp_text.weight,
            &mut self.comp_text.bias,
        ]
    }

    /// Checks the head's shapes against each other and the text width.
    pub fn validate(&self, text_dim: usize) -> Result<()> {
        self.config.validate()?;
        let Dims {
            visual: dv,
            text: dt,
            blocks,
        } = self.dims();
        let expect = [
            (&self.proj_obj, dv, dt),
            (&self.proj_attr, dv, dt),
            (&self.fusion, blocks * dv, dv),
            (&self.comp_visual, 2 * dv, dt),
            (&self.comp_text, 2 * dt, dt),
        ];
        for (lin, fi, fo) in expect {
            if lin.weight.shape() != [fi, fo] || lin.bias.shape() != [1, fo] {
                return Err(Error::dim("parameter", lin.weight.shape(), &[fi, fo]));
            }
        }
        if blocks == 0 || self.fusion.fan_in() != blocks * dv {
            return Err(Error::dim("fusion", self.fusion.weight.shape(), &[blocks * dv, dv]));
        }
        if dt != text_dim {
            return Err(Error::dim("text width", &[dt], &[text_dim]));
        }
        if self.tensors().iter().any(|t| !t.is_finite()) {
            return Err(Error::numeric("parameters"));
        }
        Ok(())
    }

    /// Puts every tensor on `g`, trainable or constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ParamVars {
        ParamVars {
            proj_obj: self.proj_obj.bind(g, trainable),
            proj_attr: self.proj_attr.bind(g, trainable),
            fusion: self.fusion.bind(g, trainable),
            comp_visual: self.comp_visual.bind(g, trainable),
            comp_text: self.comp_text.bind(g, trainable),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub proj_obj: LinearVars,
    pub proj_attr: LinearVars,
    pub fusion: LinearVars,
    pub comp_visual: LinearVars,
    pub comp_text: LinearVars,
}

impl ParamVars {
    /// Same order as [`PARAM_NAMES`].
    pub fn vars(&self) -> [Var; 10] {
        [
            self.proj_obj.weight,
            self.proj_obj.bias,
            self.proj_attr.weight,
            self.proj_attr.bias,
            self.fusion.weight,
            self.fusion.bias,
            self.comp_visual.weight,
            self.comp_visual.bias,
            self.comp_text.weight,
            self.comp_text.bias,
        ]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TextVars {
    pub attrs: Var,
    pub objs: Var,
}

pub fn bind_text(g: &mut Graph, text: &TextEmbeddings) -> TextVars {
    TextVars {
        attrs: g.constant(text.attrs.clone()),
        objs: g.constant(text.objs.clone()),
    }
}

// ---------------------------------------------------------------------------
// Graph-building stages

/// Fused shallow tokens: each token's concatenated block vectors through the
/// fusion map.
pub fn fuse_shallow(g: &mut Graph, blocks: &[Var], fusion: LinearVars) -> Result<Var> {
    let width = g.value(fusion.weight).shape()[0];
    let cat = g.concat(blocks)?;
    if g.value(cat).dims2().1 != width {
        return Err(Error::dim("fuse_shallow", g.value(cat).shape(), g.value(fusion.weight).shape()));
    }
    fusion.apply(g, cat)
}

/// Textual descriptor: object word embeddings mixed by the softmax
/// similarity between the projected class token and each object row.
pub fn textual_descriptor(
    g: &mut Graph,
    deep_class: Var,
    objs: Var,
    proj_obj: LinearVars,
) -> Result<Var> {
    let d = g.value(objs).dims2().1 as f64;
    let query = proj_obj.apply(g, deep_class)?;
    let (q_t, _) = g.attention(query, objs, objs, d.sqrt())?;
    Ok(q_t)
}

/// Text-enhanced object feature: class token plus raw deep patches pooled
/// with the descriptor as query against projected patches (scale `sqrt(d)`).
pub fn text_enhanced_object(
    g: &mut Graph,
    deep_class: Var,
    deep_patches: Var,
    descriptor: Var,
    proj_obj: LinearVars,
) -> Result<(Var, Var)> {
    let d = g.value(descriptor).dims2().1 as f64;
    let keys = proj_obj.apply(g, deep_patches)?;
    let (pooled, weights) = g.attention(descriptor, keys, deep_patches, d.sqrt())?;
    Ok((g.add(deep_class, pooled)?, weights))
}

/// Object-guided attribute feature: fused shallow tokens pooled with the
/// object feature as query (scale `sqrt(D)`).
pub fn object_guided_attribute(g: &mut Graph, object: Var, fused: Var) -> Result<(Var, Var)> {
    let dv = g.value(object).dims2().1 as f64;
    g.attention(object, fused, fused, dv.sqrt())
}

/// Row mean of a `[T x D]` tensor, as a `[1 x D]` node.
pub fn mean_rows(g: &mut Graph, x: Var) -> Result<Var> {
    let t = g.value(x).dims2().0;
    let avg = g.constant(Tensor::filled(&[1, t], 1.0 / t as f64));
    g.matmul(avg, x)
}

/// Class logits `proj(feature) · Wᵀ`, before tempering.
pub fn class_logits(g: &mut Graph, feature: Var, proj: LinearVars, table: Var) -> Result<Var> {
    let p = proj.apply(g, feature)?;
    g.matmul_t(p, table)
}

/// Joint text features for `candidates`, `[C x d]`.
pub fn composition_text(
    g: &mut Graph,
    text: TextVars,
    comp_text: LinearVars,
    candidates: &[Pair],
) -> Result<Var> {
    if candidates.is_empty() {
        return Err(Error::Contract("composition candidates must be nonempty".into()));
    }
    let ai: Vec<usize> = candidates.iter().map(|p| p.attr).collect();
    let oi: Vec<usize> = candidates.iter().map(|p| p.obj).collect();
    let wa = g.select_rows(text.attrs, &ai)?;
    let wo = g.select_rows(text.objs, &oi)?;
    let joint = g.concat(&[wa, wo])?;
    comp_text.apply(g, joint)
}

/// Composition logits: joint visual feature against each candidate's joint
/// text feature, `[1 x C]`.
pub fn composition_logits(
    g: &mut Graph,
    attr_feat: Var,
    obj_feat: Var,
    comp_visual: LinearVars,
    comp_text_feats: Var,
) -> Result<Var> {
    let joint = g.concat(&[attr_feat, obj_feat])?;
    let vc = comp_visual.apply(g, joint)?;
    g.matmul_t(vc, comp_text_feats)
}

/// Nodes produced by one image's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct SampleNodes {
    pub descriptor: Option<Var>,
    pub object: Var,
    pub attribute: Var,
    pub object_weights: Option<Var>,
    pub attribute_weights: Option<Var>,
    pub obj_logits: Var,
    pub attr_logits: Var,
    pub comp_logits: Var,
}

/// Builds the full forward pass of one image on `g`.
pub fn forward_sample(
    g: &mut Graph,
    variant: Variant,
    params: &ParamVars,
    text: TextVars,
    comp_text_feats: Var,
    bundle: &FeatureBundle,
) -> Result<SampleNodes> {
    let vhc = g.constant(bundle.deep_class.clone());
    let vhp = g.constant(bundle.deep_patches.clone());
    let blocks: Vec<Var> = bundle
        .shallow_blocks
        .iter()
        .map(|b| g.constant(b.clone()))
        .collect();

    let (descriptor, object, object_weights) = match variant {
        Variant::Full => {
            let q_t = textual_descriptor(g, vhc, text.objs, params.proj_obj)?;
            let (v_o, w) = text_enhanced_object(g, vhc, vhp, q_t, params.proj_obj)?;
            (Some(q_t), v_o, Some(w))
        }
        Variant::NoTextObject | Variant::NoTextObjectNoGuidance => {
            let pooled = mean_rows(g, vhp)?;
            (None, g.add(vhc, pooled)?, None)
        }
    };
    let obj_logits = class_logits(g, object, params.proj_obj, text.objs)?;

    let fused = fuse_shallow(g, &blocks, params.fusion)?;
    let (attribute, attribute_weights) = match variant {
        Variant::NoTextObjectNoGuidance => (mean_rows(g, fused)?, None),
        _ => {
            let (v_a, w) = object_guided_attribute(g, object, fused)?;
            (v_a, Some(w))
        }
    };
    let attr_logits = class_logits(g, attribute, params.proj_attr, text.attrs)?;
    let comp_logits =
        composition_logits(g, attribute, object, params.comp_visual, comp_text_feats)?;

    Ok(SampleNodes {
        descriptor,
        object,
        attribute,
        object_weights,
        attribute_weights,
        obj_logits,
        attr_logits,
        comp_logits,
    })
}

/// Batch-mean loss nodes.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub comp: Var,
    pub attr: Var,
    pub obj: Var,
    pub total: Var,
}

/// Scalar values of the three losses and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub comp: f64,
    pub attr: f64,
    pub obj: f64,
    pub total: f64,
}

impl LossNodes {
    pub fn values(&self, g: &Graph) -> LossTerms {
        let v = |x: Var| g.value(x).data()[0];
        LossTerms {
            comp: v(self.comp),
            attr: v(self.attr),
            obj: v(self.obj),
            total: v(self.total),
        }
    }
}

/// Builds the joint training objective of a batch on `g`:
/// `L_com + α₁·L_att + α₂·L_obj`, each term a batch mean.
///
/// Every label pair must be among `candidates`, which at training time are
/// the seen pairs (or the full product).
pub fn forward_losses(
    g: &mut Graph,
    config: &HeadConfig,
    params: &ParamVars,
    text: TextVars,
    candidates: &[Pair],
    batch: &[&FeatureBundle],
) -> Result<LossNodes> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let index: std::collections::HashMap<Pair, usize> =
        candidates.iter().enumerate().map(|(i, p)| (*p, i)).collect();
    let comp_feats = composition_text(g, text, params.comp_text, candidates)?;
    let tau = config.temperature;
    let mut sums: Option<(Var, Var, Var)> = None;
    for bundle in batch {
        let label = index.get(&bundle.pair()).copied().ok_or_else(|| {
                Error::Data(format!(
                    "image {} has label pair {} outside the training compositions",
                    bundle.image_id,
                bundle.pair()
            ))
        })?;
        let nodes = forward_sample(g, config.variant, params, text, comp_feats, bundle)?;
        let lc = g.cross_entropy(nodes.comp_logits, label, tau)?;
        let la = g.cross_entropy(nodes.attr_logits, bundle.attr, tau)?;
        let lo = g.cross_entropy(nodes.obj_logits, bundle.obj, tau)?;
        sums = Some(match sums {
            None => (lc, la, lo),
            Some((c, a, o)) => (g.add(c, lc)?, g.add(a, la)?, g.add(o, lo)?),
        });
    }
    let (c, a, o) = sums.expect("batch is nonempty");
    let inv = 1.0 / batch.len() as f64;
    let comp = g.scale(c, inv);
    let attr = g.scale(a, inv);
    let obj = g.scale(o, inv);
    let wa = g.scale(attr, config.alpha_attr);
    let wo = g.scale(obj, config.alpha_obj);
    let rest = g.add(wa, wo)?;
    let total = g.add(comp, rest)?;
    Ok(LossNodes {
        comp,
        attr,
        obj,
        total,
    })
}

// ---------------------------------------------------------------------------
// Inference

/// Probability vectors for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleProbs {
    /// Over the candidate list, in candidate order.
    pub comp: Vec<f64>,
    pub attr: Vec<f64>,
    pub obj: Vec<f64>,
}

fn tempered_softmax(logits: &Tensor, tau: f64) -> Result<Vec<f64>> {
    let scaled: Vec<f64> = logits.data().iter().map(|x| x / tau).collect();
    Ok(Tensor::row(scaled)?.softmax_lastdim()?.into_data())
}

/// Precomputed state shared by every image scored against one candidate list.
pub struct Scorer<'a> {
    params: &'a CpfParams,
    text: &'a TextEmbeddings,
    comp_feats: Tensor,
}

impl<'a> Scorer<'a> {
    pub fn new(params: &'a CpfParams, text: &'a TextEmbeddings, candidates: &[Pair]) -> Result<Self> {
        params.validate(text.dim())?;
        let mut g = Graph::new();
        let pv = params.bind(&mut g, false);
        let tv = bind_text(&mut g, text);
        let feats = composition_text(&mut g, tv, pv.comp_text, candidates)?;
        Ok(Scorer {
            params,
            text,
            comp_feats: g.value(feats).clone(),
        })
    }

    pub fn score(&self, bundle: &FeatureBundle) -> Result<SampleProbs> {
        let mut g = Graph::new();
        let pv = self.params.bind(&mut g, false);
        let tv = bind_text(&mut g, self.text);
        let cf = g.constant(self.comp_feats.clone());
        let nodes = forward_sample(&mut g, self.params.config.variant, &pv, tv, cf, bundle)?;
        let tau = self.params.config.temperature;
        Ok(SampleProbs {
            comp: tempered_softmax(g.value(nodes.comp_logits), tau)?,
            attr: tempered_softmax(g.value(nodes.attr_logits), tau)?,
            obj: tempered_softmax(g.value(nodes.obj_logits), tau)?,
        })
    }
}

/// One-shot probabilities for a single image.
pub fn sample_probs(
    params: &CpfParams,
    text: &TextEmbeddings,
    bundle: &FeatureBundle,
    candidates: &[Pair],
) -> Result<SampleProbs> {
    Scorer::new(params, text, candidates)?.score(bundle)
}

// ---------------------------------------------------------------------------
// Standalone forms of each stage over plain tensors.

/// Evaluates a graph-building closure on constants and returns one value.
fn eval_const<F>(inputs: &[&Tensor], f: F) -> Result<Tensor>
where
    F: FnOnce(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant((*t).clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).clone())
}

/// Attention weights of one image: over deep patches for the object
/// feature and over fused shallow tokens for the attribute feature. A stage
/// the variant replaces by mean pooling reports `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    pub object: Option<Vec<f64>>,
    pub attribute: Option<Vec<f64>>,
}

pub fn attention_maps(
    params: &CpfParams,
    text: &TextEmbeddings,
    bundle: &FeatureBundle,
) -> Result<AttentionMaps> {
    let mut g = Graph::new();
    let pv = params.bind(&mut g, false);
    let tv = bind_text(&mut g, text);
    let all: Vec<Pair> = (0..text.attr_names.len())
        .flat_map(|a| (0..text.obj_names.len()).map(move |o| Pair::new(a, o)))
        .take(1)
        .collect();
    let comp = composition_text(&mut g, tv, pv.comp_text, &all)?;
    let nodes = forward_sample(&mut g, params.config.variant, &pv, tv, comp, bundle)?;
    let read = |v: Option<Var>| v.map(|v| g.value(v).data().to_vec());
    Ok(AttentionMaps {
        object: read(nodes.object_weights),
        attribute: read(nodes.attribute_weights),
    })
}

pub mod ops {
    //! Pure, tape-free entry points for each stage of the head.

    use super::*;

    pub fn fuse_shallow(blocks: &[Tensor], fusion: &Linear) -> Result<Tensor> {
        let mut inputs: Vec<&Tensor> = blocks.iter().collect();
        inputs.push(&fusion.weight);
        inputs.push(&fusion.bias);
        eval_const(&inputs, |g, v| {
            let (bl, rest) = v.split_at(v.len() - 2);
            let lin = LinearVars {
                weight: rest[0],
                bias: rest[1],
            };
            super::fuse_shallow(g, bl, lin)
        })
    }

    pub fn textual_descriptor(deep_class: &Tensor, objs: &Tensor, proj_obj: &Linear) -> Result<Tensor> {
        eval_const(&[deep_class, objs, &proj_obj.weight, &proj_obj.bias], |g, v| {
            let lin = LinearVars {
                weight: v[2],
                bias: v[3],
            };
            super::textual_descriptor(g, v[0], v[1], lin)
        })
    }

    pub fn text_enhanced_object(
        deep_class: &Tensor,
        deep_patches: &Tensor,
        descriptor: &Tensor,
        proj_obj: &Linear,
    ) -> Result<Tensor> {
        eval_const(
            &[deep_class, deep_patches, descriptor, &proj_obj.weight, &proj_obj.bias],
            |g, v| {
                let lin = LinearVars {
                    weight: v[3],
                    bias: v[4],
                };
                Ok(super::text_enhanced_object(g, v[0], v[1], v[2], lin)?.0)
            },
        )
    }

    pub fn object_guided_attribute(object: &Tensor, fused: &Tensor) -> Result<Tensor> {
        eval_const(&[object, fused], |g, v| {
            Ok(super::object_guided_attribute(g, v[0], v[1])?.0)
        })
    }

    fn class_probs(feature: &Tensor, table: &Tensor, proj: &Linear, tau: f64) -> Result<Vec<f64>> {
        if !(tau > 0.0) {
            return Err(Error::Contract(format!("temperature must be positive, got {tau}")));
        }
        let logits = eval_const(&[feature, table, &proj.weight, &proj.bias], |g, v| {
            let lin = LinearVars {
                weight: v[2],
                bias: v[3],
            };
            class_logits(g, v[0], lin, v[1])
        })?;
        tempered_softmax(&logits, tau)
    }

    /// `p(o | x)` over all objects.
    pub fn object_probs(object: &Tensor, objs: &Tensor, proj_obj: &Linear, tau: f64) -> Result<Vec<f64>> {
        class_probs(object, objs, proj_obj, tau)
    }

    /// `p(a | x, v_o)` over all attributes.
    pub fn attribute_probs(
        attribute: &Tensor,
        attrs: &Tensor,
        proj_attr: &Linear,
        tau: f64,
    ) -> Result<Vec<f64>> {
        class_probs(attribute, attrs, proj_attr, tau)
    }

    /// `p(c | x)` over `candidates`.
    pub fn composition_probs(
        attribute: &Tensor,
        object: &Tensor,
        text: &TextEmbeddings,
        comp_visual: &Linear,
        comp_text: &Linear,
        candidates: &[Pair],
        tau: f64,
    ) -> Result<Vec<f64>> {
        let logits = eval_const(
            &[
                attribute,
                object,
                &text.attrs,
                &text.objs,
                &comp_visual.weight,
                &comp_visual.bias,
                &comp_text.weight,
                &comp_text.bias,
            ],
            |g, v| {
                let tv = TextVars {
                    attrs: v[2],
                    objs: v[3],
                };
                let ct = LinearVars {
                    weight: v[6],
                    bias: v[7],
                };
                let cv = LinearVars {
                    weight: v[4],
                    bias: v[5],
                };
                let feats = composition_text(g, tv, ct, candidates)?;
                composition_logits(g, v[0], v[1], cv, feats)
            },
        )?;
        tempered_softmax(&logits, tau)
    }
}

/// Checks batch labels against the space and the head's shapes.
pub fn validate_batch(
    bundles: &[FeatureBundle],
    space: &CompositionSpace,
    params: &CpfParams,
) -> Result<()> {
    let dims = params.dims();
    for b in bundles {
        b.validate(dims.visual, b.tokens(), dims.blocks)?;
        if b.attr >= space.num_attrs() || b.obj >= space.num_objs() {
            return Err(Error::Data(format!(
                "image {} has label {} outside the {}x{} vocabulary",
                b.image_id,
                b.pair(),
                space.num_attrs(),
                space.num_objs()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use proptest::prelude::{any, prop_assert, prop_assert_eq, prop_assume, proptest, ProptestConfig};
    use rand_chacha::ChaCha8Rng;

    const VARIANTS: [Variant; 3] = [Variant::Full, Variant::NoTextObject, Variant::NoTextObjectNoGuidance];

    fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, mag: f64) -> Tensor {
        let data = (0..r * c).map(|_| rng.random_range(-mag..=mag)).collect();
        Tensor::matrix(r, c, data).unwrap()
    }

    struct Setup {
        params: CpfParams,
        text: TextEmbeddings,
        bundle: FeatureBundle,
        candidates: Vec<Pair>,
    }

    fn setup(seed: u64, variant: Variant) -> Setup {
        let mut rng = stream(seed, Stream::GradCheck);
        let (dv, dt, t, b, m, n) = (
            rng.random_range(2..7),
            rng.random_range(2..6),
            rng.random_range(1..6),
            rng.random_range(1..4),
            rng.random_range(2..5),
            rng.random_range(2..5),
        );
        let mag = rng.random_range(0.1..4.0);
        let text = TextEmbeddings::new(
            (0..m).map(|i| format!("a{i}")).collect(),
            (0..n).map(|i| format!("o{i}")).collect(),
            uniform(&mut rng, m, dt, mag),
            uniform(&mut rng, n, dt, mag),
        )
        .unwrap();
        let config = HeadConfig {
            variant,
            ..HeadConfig::default()
        };
        let params = CpfParams::init(Dims { visual: dv, text: dt, blocks: b }, config, &mut rng);
        let bundle = FeatureBundle {
            image_id: "x".into(),
            deep_class: uniform(&mut rng, 1, dv, mag),
            deep_patches: uniform(&mut rng, t, dv, mag),
            shallow_blocks: (0..b).map(|_| uniform(&mut rng, t, dv, mag)).collect(),
            shallow_class: (0..b).map(|_| uniform(&mut rng, 1, dv, mag)).collect(),
            attr: 0,
            obj: 0,
        };
        let candidates = (0..m).flat_map(|a| (0..n).map(move |o| Pair::new(a, o))).collect();
        Setup {
            params,
            text,
            bundle,
            candidates,
        }
    }

    fn on_simplex(p: &[f64]) -> bool {
        p.iter().all(|&x| x >= 0.0) && (p.iter().sum::<f64>() - 1.0).abs() <= 1e-10
    }

    fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
        let (r, c) = t.dims2();
        let data = perm.iter().flat_map(|&i| t.row_slice(i).to_vec()).collect();
        Tensor::matrix(r, c, data).unwrap()
    }

    /// Every coordinate of `x` lies within the column range of `rows`.
    fn in_column_hull(x: &Tensor, rows: &Tensor) -> bool {
        let (r, c) = rows.dims2();
        (0..c).all(|j| {
            let col = (0..r).map(|i| rows.row_slice(i)[j]);
            let lo = col.clone().fold(f64::INFINITY, f64::min);
            let hi = col.fold(f64::NEG_INFINITY, f64::max);
            let v = x.data()[j];
            v >= lo - 1e-10 && v <= hi + 1e-10
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn probabilities_and_attention_on_simplex(seed in any::<u64>(), v in 0usize..3) {
            let s = setup(seed, VARIANTS[v]);
            let p = sample_probs(&s.params, &s.text, &s.bundle, &s.candidates).unwrap();
            prop_assert!(on_simplex(&p.comp) && on_simplex(&p.attr) && on_simplex(&p.obj));
            let maps = attention_maps(&s.params, &s.text, &s.bundle).unwrap();
            for w in [maps.object, maps.attribute].into_iter().flatten() {
                prop_assert!(on_simplex(&w));
            }
        }

        #[test]
        fn attended_features_in_convex_hull(seed in any::<u64>()) {
            let s = setup(seed, Variant::Full);
            let b = &s.bundle;
            let q = ops::textual_descriptor(&b.deep_class, &s.text.objs, &s.params.proj_obj).unwrap();
            prop_assert!(in_column_hull(&q, &s.text.objs));
            let vo = ops::text_enhanced_object(&b.deep_class, &b.deep_patches, &q, &s.params.proj_obj).unwrap();
            let pooled: Vec<f64> = vo.data().iter().zip(b.deep_class.data()).map(|(o, c)| o - c).collect();
            prop_assert!(in_column_hull(&Tensor::row(pooled).unwrap(), &b.deep_patches));
            let fused = ops::fuse_shallow(&b.shallow_blocks, &s.params.fusion).unwrap();
            let va = ops::object_guided_attribute(&vo, &fused).unwrap();
            prop_assert!(in_column_hull(&va, &fused));
        }

        #[test]
        fn token_order_does_not_matter(seed in any::<u64>(), v in 0usize..3, shuffle in any::<u64>()) {
            use rand::seq::SliceRandom;
            let s = setup(seed, VARIANTS[v]);
            let t = s.bundle.tokens();
            let mut perm: Vec<usize> = (0..t).collect();
            perm.shuffle(&mut stream(shuffle, Stream::Shuffle(0)));
            let mut moved = s.bundle.clone();
            moved.deep_patches = permute_rows(&s.bundle.deep_patches, &perm);
            moved.shallow_blocks = s.bundle.shallow_blocks.iter().map(|b| permute_rows(b, &perm)).collect();
            let a = sample_probs(&s.params, &s.text, &s.bundle, &s.candidates).unwrap();
            let b = sample_probs(&s.params, &s.text, &moved, &s.candidates).unwrap();
            for (x, y) in [(&a.comp, &b.comp), (&a.attr, &b.attr), (&a.obj, &b.obj)] {
                for (p, q) in x.iter().zip(y) {
                    prop_assert!((p - q).abs() <= 1e-10, "{p} vs {q}");
                }
            }
        }

        #[test]
        fn temperature_keeps_the_argmax(seed in any::<u64>(), tau in 0.01f64..5.0) {
            let s = setup(seed, Variant::Full);
            let feature = &s.bundle.deep_class;
            let argmax = |p: Vec<f64>| (0..p.len()).max_by(|&i, &j| p[i].total_cmp(&p[j])).unwrap();
            let base = ops::object_probs(feature, &s.text.objs, &s.params.proj_obj, 1.0).unwrap();
            let hot = ops::object_probs(feature, &s.text.objs, &s.params.proj_obj, tau).unwrap();
            // skip near-ties, where rounding may pick either
            let mut sorted = base.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            prop_assume!(sorted[0] - sorted[1] > 1e-9);
            prop_assert_eq!(argmax(base), argmax(hot));
        }
    }

    fn nodes_for(s: &Setup) -> (Graph, SampleNodes) {
        let mut g = Graph::new();
        let pv = s.params.bind(&mut g, false);
        let tv = bind_text(&mut g, &s.text);
        let cf = composition_text(&mut g, tv, pv.comp_text, &s.candidates).unwrap();
        let n = forward_sample(&mut g, s.params.config.variant, &pv, tv, cf, &s.bundle).unwrap();
        (g, n)
    }

    fn col_mean(t: &Tensor) -> Vec<f64> {
        let (r, c) = t.dims2();
        (0..c).map(|j| (0..r).map(|i| t.row_slice(i)[j]).sum::<f64>() / r as f64).collect()
    }

    #[test]
    fn ablations_pool_by_mean() {
        let s = setup(11, Variant::NoTextObject);
        let (g, n) = nodes_for(&s);
        let mean = col_mean(&s.bundle.deep_patches);
        for (j, x) in g.value(n.object).data().iter().enumerate() {
            assert!((x - (s.bundle.deep_class.data()[j] + mean[j])).abs() < 1e-12);
        }
        assert!(n.descriptor.is_none() && n.object_weights.is_none());
        assert!(n.attribute_weights.is_some());

        let s = setup(11, Variant::NoTextObjectNoGuidance);
        let (g, n) = nodes_for(&s);
        let fused = ops::fuse_shallow(&s.bundle.shallow_blocks, &s.params.fusion).unwrap();
        let mean = col_mean(&fused);
        for (x, m) in g.value(n.attribute).data().iter().zip(mean) {
            assert!((x - m).abs() < 1e-12);
        }
        assert!(n.attribute_weights.is_none());
    }

    #[test]
    fn hand_worked_guidance() {
        // one query against two tokens, sqrt(D) = sqrt(2)
        let object = Tensor::row(vec![2.0f64.sqrt() * 2f64.ln(), 0.0]).unwrap();
        let fused = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let va = ops::object_guided_attribute(&object, &fused).unwrap();
        // weights are softmax(ln 2, 0) = (2/3, 1/3)
        assert!((va.data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((va.data()[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn fusion_starts_near_block_mean() {
        let dims = Dims { visual: 4, text: 2, blocks: 2 };
        let p = CpfParams::init(dims, HeadConfig::default(), &mut stream(0, Stream::Init));
        let w = p.fusion.weight.data();
        let bound = 1.0 / 8f64.sqrt();
        for b in 0..2 {
            for i in 0..4 {
                let x = w[(b * 4 + i) * 4 + i];
                assert!((x - 0.5).abs() <= bound, "{x}");
            }
        }
        assert!(p.fusion.bias.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn text_is_frozen_by_default() {
        let s = setup(1, Variant::Full);
        assert!(s.text.frozen);
    }

    #[test]
    fn mismatched_bundle_is_rejected() {
        let mut s = setup(2, Variant::Full);
        s.bundle.shallow_blocks.pop();
        s.bundle.shallow_class.pop();
        if s.params.dims().blocks > 1 {
            assert!(sample_probs(&s.params, &s.text, &s.bundle, &s.candidates).is_err());
        }
        let s = setup(3, Variant::Full);
        assert!(sample_probs(&s.params, &s.text, &s.bundle, &[]).is_err());
    }
}
