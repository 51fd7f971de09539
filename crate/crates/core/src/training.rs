//! Adam optimisation of the head under the joint loss, with a single step
//! learning-rate decay.

use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::model::{
    bind_text, forward_losses, CpfParams, Dims, FeatureBundle, HeadConfig, LossTerms,
    TextEmbeddings, PARAM_NAMES,
};
use crate::rng::{stream, Stream};
use crate::space::CompositionSpace;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// First moments, one buffer per parameter tensor.
    pub m: Vec<Vec<f64>>,
    /// Second moments.
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(shapes: &[usize]) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(params: &CpfParams) -> Self {
        let lens: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        Self::new(&lens)
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Vec<f64>],
        names: &[&str],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "adam: {} params, {} grads, {} moment buffers",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        if !(lr > 0.0) {
            return Err(Error::Contract(format!("learning rate must be positive, got {lr}")));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || self.m[i].len() != g.len() {
                return Err(Error::dim("adam", p.shape(), &[g.len()]));
            }
            if g.iter().any(|x| !x.is_finite()) {
                let name = names.get(i).copied().unwrap_or("?");
                return Err(Error::numeric(format!("gradient of {name}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, theta) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Applies one Adam step to every head tensor.
pub fn adam_step(
    params: &mut CpfParams,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    let mut tensors = params.tensors_mut();
    state.step(&mut tensors, grads, &PARAM_NAMES, lr)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub decay_factor: f64,
    /// First epoch trained at the decayed rate.
    pub decay_epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub head: HeadConfig,
    /// Stored shallow blocks fed to the fusion layer; `None` uses all.
    pub shallow_blocks: Option<Vec<usize>>,
    /// Record every n-th step in the log.
    pub log_every: usize,
    /// Score the composition loss over every attribute-object pair instead
    /// of the seen pairs only.
    pub full_train_softmax: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            base_lr: 1e-4,
            decay_factor: 0.1,
            decay_epoch: 5,
            batch_size: 64,
            seed: 0,
            head: HeadConfig::default(),
            shallow_blocks: None,
            log_every: 1,
            full_train_softmax: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.base_lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return Err(Error::Config(format!(
                "decay factor must be positive, got {}",
                self.decay_factor
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log-every must be at least 1".into()));
        }
        if let Some(b) = &self.shallow_blocks {
            if b.is_empty() {
                return Err(Error::Config("at least one shallow block is required".into()));
            }
        }
        Ok(())
    }

    /// Keys accepted by [`TrainConfig::set`], in [`TrainConfig::to_kv`] order.
    pub const KEYS: [&'static str; 13] = [
        "epochs",
        "lr",
        "decay_factor",
        "decay_epoch",
        "batch_size",
        "seed",
        "tau",
        "alpha1",
        "alpha2",
        "variant",
        "blocks",
        "log_every",
        "full_train_softmax",
    ];

    /// `key = value` lines; floats use shortest round-trip formatting.
    pub fn to_kv(&self) -> String {
        let blocks = match &self.shallow_blocks {
            None => "all".to_string(),
            Some(b) => b.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        };
        let values = [
            self.epochs.to_string(),
            format!("{:?}", self.base_lr),
            format!("{:?}", self.decay_factor),
            self.decay_epoch.to_string(),
            self.batch_size.to_string(),
            self.seed.to_string(),
            format!("{:?}", self.head.temperature),
            format!("{:?}", self.head.alpha_attr),
            format!("{:?}", self.head.alpha_obj),
            self.head.variant.as_str().to_string(),
            blocks,
            self.log_every.to_string(),
            self.full_train_softmax.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in Self::KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Sets one key. Dashes and underscores are interchangeable.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        let value = value.trim();
        match key.trim().replace('-', "_").as_str() {
            "epochs" => self.epochs = num(key, value)?,
            "lr" => self.base_lr = num(key, value)?,
            "decay_factor" => self.decay_factor = num(key, value)?,
            "decay_epoch" => self.decay_epoch = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "tau" => self.head.temperature = num(key, value)?,
            "alpha1" => self.head.alpha_attr = num(key, value)?,
            "alpha2" => self.head.alpha_obj = num(key, value)?,
            "variant" => self.head.variant = value.parse()?,
            "blocks" => {
                self.shallow_blocks = if value == "all" {
                    None
                } else {
                    Some(
                        value
                            .split(',')
                            .map(|b| num(key, b.trim()))
                            .collect::<Result<Vec<usize>>>()?,
                    )
                }
            }
            "log_every" => self.log_every = num(key, value)?,
            "full_train_softmax" => self.full_train_softmax = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses [`TrainConfig::to_kv`] output on top of the defaults.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (line_no, key, value) in parse_kv(text)? {
            cfg.set(&key, &value)
                .map_err(|e| e.context(format!("line {line_no}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `key = value` lines; blank lines and `#` comments are skipped.
/// Returns `(line number, key, value)` triples.
pub fn parse_kv(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Learning rate for a zero-based epoch.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    if epoch < config.decay_epoch {
        config.base_lr
    } else {
        config.base_lr * config.decay_factor
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub losses: LossTerms,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Sample-weighted mean of the step losses over the epoch.
    pub mean: LossTerms,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    /// Full-training-set losses before the first update.
    pub initial: LossTerms,
    /// Full-training-set losses after the last update.
    pub last: LossTerms,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    /// One `epoch, step, lr, L_com, L_att, L_obj, L_total` line per recorded
    /// step, after a `#` header.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# epoch, step, lr, L_com, L_att, L_obj, L_total\n");
        for r in &self.steps {
            let l = &r.losses;
            let _ = writeln!(
                out,
                "{}, {}, {:e}, {}, {}, {}, {}",
                r.epoch, r.step, r.lr, l.comp, l.attr, l.obj, l.total
            );
        }
        out
    }

    /// Losses before and after training and one line per epoch mean.
    pub fn epochs_text(&self) -> String {
        let mut out = String::from("# epoch, lr, L_com, L_att, L_obj, L_total\n");
        let line = |out: &mut String, tag: &str, lr: String, l: &LossTerms| {
            let _ = writeln!(out, "{tag}, {lr}, {}, {}, {}, {}", l.comp, l.attr, l.obj, l.total);
        };
        line(&mut out, "initial", "-".into(), &self.initial);
        for e in &self.epochs {
            line(&mut out, &e.epoch.to_string(), format!("{:e}", e.lr), &e.mean);
        }
        line(&mut out, "final", "-".into(), &self.last);
        out
    }

    /// Parses the output of [`TrainLog::to_text`] back into step records.
    pub fn parse_steps(text: &str) -> Result<Vec<StepRecord>> {
        let mut out = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || Error::Data(format!("log line {}: {line:?}", lineno + 1));
            if fields.len() != 7 {
                return Err(bad());
            }
            let f = |i: usize| fields[i].parse::<f64>().map_err(|_| bad());
            out.push(StepRecord {
                epoch: fields[0].parse().map_err(|_| bad())?,
                step: fields[1].parse().map_err(|_| bad())?,
                lr: f(2)?,
                losses: LossTerms {
                    comp: f(3)?,
                    attr: f(4)?,
                    obj: f(5)?,
                    total: f(6)?,
                },
            });
        }
        Ok(out)
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct Trained {
    pub params: CpfParams,
    pub optimizer: AdamState,
    pub log: TrainLog,
}

/// Restricts each bundle to the chosen shallow blocks.
pub fn select_blocks(bundles: &[FeatureBundle], blocks: Option<&[usize]>) -> Result<Vec<FeatureBundle>> {
    let Some(idx) = blocks else {
        return Ok(bundles.to_vec());
    };
    bundles
        .iter()
        .map(|b| {
            let mut out = b.clone();
            out.shallow_blocks = Vec::with_capacity(idx.len());
            out.shallow_class = Vec::with_capacity(idx.len());
            for &i in idx {
                let (Some(p), Some(c)) = (b.shallow_blocks.get(i), b.shallow_class.get(i)) else {
                    return Err(Error::Config(format!(
                        "shallow block {i} requested but image {} stores {}",
                        b.image_id,
                        b.shallow_blocks.len()
                    )));
                };
                out.shallow_blocks.push(p.clone());
                out.shallow_class.push(c.clone());
            }
            Ok(out)
        })
        .collect()
}

/// Mean losses of `params` over `bundles`, without recording gradients.
pub fn dataset_losses(
    params: &CpfParams,
    text: &TextEmbeddings,
    space: &CompositionSpace,
    bundles: &[FeatureBundle],
    full_train_softmax: bool,
    batch_size: usize,
) -> Result<LossTerms> {
    let candidates = space.train_candidates(full_train_softmax);
    let mut acc = LossTerms::default();
    for chunk in bundles.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        let pv = params.bind(&mut g, false);
        let tv = bind_text(&mut g, text);
        let refs: Vec<&FeatureBundle> = chunk.iter().collect();
        let l = forward_losses(&mut g, &params.config, &pv, tv, &candidates, &refs)?.values(&g);
        let w = chunk.len() as f64;
        acc.comp += l.comp * w;
        acc.attr += l.attr * w;
        acc.obj += l.obj * w;
        acc.total += l.total * w;
    }
    let n = bundles.len().max(1) as f64;
    Ok(LossTerms {
        comp: acc.comp / n,
        attr: acc.attr / n,
        obj: acc.obj / n,
        total: acc.total / n,
    })
}

/// Trains a freshly initialised head. Deterministic for a fixed config.
pub fn train(
    train_set: &[FeatureBundle],
    text: &TextEmbeddings,
    space: &CompositionSpace,
    config: &TrainConfig,
) -> Result<Trained> {
    config.validate()?;
    let first = train_set
        .first()
        .ok_or_else(|| Error::Contract("training set is empty".into()))?;
    let blocks = config
        .shallow_blocks
        .as_ref()
        .map_or(first.shallow_blocks.len(), Vec::len);
    let dims = Dims {
        visual: first.visual_dim(),
        text: text.dim(),
        blocks,
    };
    let params = CpfParams::init(dims, config.head, &mut stream(config.seed, Stream::Init));
    train_from(params, train_set, text, space, config)
}

/// Trains starting from `params`.
pub fn train_from(
    mut params: CpfParams,
    train_set: &[FeatureBundle],
    text: &TextEmbeddings,
    space: &CompositionSpace,
    config: &TrainConfig,
) -> Result<Trained> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if !text.frozen {
        return Err(Error::Config("trainable text embeddings are not supported".into()));
    }
    params.config = config.head;
    params.validate(text.dim())?;
    let data = select_blocks(train_set, config.shallow_blocks.as_deref())?;
    let tokens = data[0].tokens();
    let dims = params.dims();
    for b in &data {
        b.validate(dims.visual, tokens, dims.blocks)?;
        if !space.is_seen(b.pair()) {
            return Err(Error::Data(format!(
                "training image {} is labelled {}, which is not a seen composition",
                b.image_id,
                space.pair_name(b.pair())
            )));
        }
    }
    let candidates = space.train_candidates(config.full_train_softmax);
    let mut optimizer = AdamState::for_params(&params);
    let mut log = TrainLog {
        initial: dataset_losses(&params, text, space, &data, config.full_train_softmax, config.batch_size)?,
        ..TrainLog::default()
    };

    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config);
        order.sort_unstable();
        order.shuffle(&mut stream(config.seed, Stream::Shuffle(epoch as u64)));
        let mut sum = LossTerms::default();
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&FeatureBundle> = chunk.iter().map(|&i| &data[i]).collect();
            let mut g = Graph::new();
            let pv = params.bind(&mut g, true);
            let tv = bind_text(&mut g, text);
            let losses = forward_losses(&mut g, &params.config, &pv, tv, &candidates, &batch)
                .map_err(|e| e.context(format_args!("epoch {epoch} batch {bi}")))?;
            let values = losses.values(&g);
            let vars = pv.vars();
            let grads = g.backward(losses.total)?;
            let grads: Vec<Vec<f64>> = vars
                .iter()
                .zip(params.tensors())
                .map(|(&v, t)| grads.get_or_zero(v, t.len()))
                .collect();
            adam_step(&mut params, &grads, &mut optimizer, lr)
                .map_err(|e| e.context(format_args!("epoch {epoch} batch {bi}")))?;

            let w = batch.len() as f64;
            sum.comp += values.comp * w;
            sum.attr += values.attr * w;
            sum.obj += values.obj * w;
            sum.total += values.total * w;
            if (optimizer.step - 1).is_multiple_of(config.log_every as u64) {
                log.steps.push(StepRecord {
                    epoch,
                    step: optimizer.step,
                    lr,
                    losses: values,
                });
            }
        }
        let n = data.len() as f64;
        log.epochs.push(EpochRecord {
            epoch,
            lr,
            mean: LossTerms {
                comp: sum.comp / n,
                attr: sum.attr / n,
                obj: sum.obj / n,
                total: sum.total / n,
            },
        });
        log::debug!("epoch {epoch}: lr {lr:e}, mean total {:.6}", sum.total / n);
    }
    log.last = dataset_losses(&params, text, space, &data, config.full_train_softmax, config.batch_size)?;
    Ok(Trained {
        params,
        optimizer,
        log,
    })
}
