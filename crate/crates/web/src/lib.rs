//! Browser demo: trains a small head on synthetic features and exposes
//! three views to the page in `www/`: attention over patches, the
//! seen/unseen calibration curve, and additive versus product aggregation.
//!
//! Everything except the `wasm` module is plain Rust so it can be tested
//! natively.

use cpf_core::data::{synth_generate, SynthConfig, SynthWorld};
use cpf_core::eval::{accuracies_at, build_score_table, EvalReport, ScoreTable};
use cpf_core::model::attention_maps;
use cpf_core::rng::{stream, Stream};
use cpf_core::training::{train, TrainConfig};
use cpf_core::{CpfParams, FeatureBundle, HeadConfig, Setting, TextEmbeddings, Variant};
use rand::Rng;

pub type DemoResult<T> = std::result::Result<T, String>;

fn err(e: cpf_core::Error) -> String {
    e.to_string()
}

pub fn parse_variant(name: &str) -> DemoResult<Variant> {
    match name {
        "full" => Ok(Variant::Full),
        "no-teo" => Ok(Variant::NoTextObject),
        "no-teo-oga" => Ok(Variant::NoTextObjectNoGuidance),
        other => Err(format!("unknown variant {other:?}")),
    }
}

/// The default synthetic world with a 4 x 3 vocabulary, small enough to
/// train in the page in a second or two.
pub fn demo_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        num_attrs: 4,
        num_objs: 3,
        seed,
        ..SynthConfig::default()
    }
}

pub struct Showcase {
    pub bundle: FeatureBundle,
    pub foreground: Vec<bool>,
    pub seen: bool,
}

pub struct DemoModel {
    params: CpfParams,
    text: TextEmbeddings,
    showcase: Vec<Showcase>,
    attr_names: Vec<String>,
    obj_names: Vec<String>,
    table: ScoreTable,
    report: EvalReport,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Attention of one image, with `None` where the variant mean-pools.
pub struct AttentionView {
    pub object: Option<Vec<f64>>,
    pub attribute: Option<Vec<f64>>,
    pub foreground: Vec<bool>,
}

impl DemoModel {
    pub fn new(seed: u64, variant: Variant, epochs: usize) -> DemoResult<Self> {
        let sc = demo_synth(seed);
        let data = synth_generate(&sc).map_err(err)?;
        let cfg = TrainConfig {
            epochs,
            seed,
            head: HeadConfig { variant, ..HeadConfig::default() },
            // fewer images than the desk-scale world; smaller batches keep
            // the step count comparable
            batch_size: 16,
            ..TrainConfig::default()
        };
        let trained = train(&data.train, &data.text, &data.space, &cfg).map_err(err)?;

        // one fresh image per composition, seen ones first
        let world = SynthWorld::new(sc).map_err(err)?;
        let mut rng = stream(seed, Stream::Shuffle(1 << 32));
        let mut showcase = Vec::new();
        for seen in [true, false] {
            for p in data.space.open_world() {
                if data.space.is_seen(p) != seen {
                    continue;
                }
                let r = world
                    .render(data.space.pair_name(p), p.attr, p.obj, &mut rng)
                    .map_err(err)?;
                showcase.push(Showcase { bundle: r.bundle, foreground: r.foreground, seen });
            }
        }

        let table = build_score_table(&data.test, &trained.params, &data.text, &data.space, Setting::ClosedWorld, 1)
            .map_err(err)?;
        let report = EvalReport::from_table(Setting::ClosedWorld, &table, None);
        Ok(DemoModel {
            params: trained.params,
            text: data.text,
            showcase,
            attr_names: data.space.attributes.clone(),
            obj_names: data.space.objects.clone(),
            table,
            report,
            initial_loss: trained.log.initial.total,
            final_loss: trained.log.last.total,
        })
    }

    pub fn image_count(&self) -> usize {
        self.showcase.len()
    }

    pub fn image_label(&self, i: usize) -> DemoResult<String> {
        let s = self.showcase.get(i).ok_or_else(|| format!("no image {i}"))?;
        let kind = if s.seen { "seen" } else { "unseen" };
        Ok(format!(
            "{} {} ({kind})",
            self.attr_names[s.bundle.attr], self.obj_names[s.bundle.obj]
        ))
    }

    pub fn attention(&self, i: usize) -> DemoResult<AttentionView> {
        let s = self.showcase.get(i).ok_or_else(|| format!("no image {i}"))?;
        let maps = attention_maps(&self.params, &self.text, &s.bundle).map_err(err)?;
        Ok(AttentionView {
            object: maps.object,
            attribute: maps.attribute,
            foreground: s.foreground.clone(),
        })
    }

    pub fn report(&self) -> &EvalReport {
        &self.report
    }

    /// Seen accuracy, unseen accuracy and unseen prediction share at `bias`.
    pub fn at_bias(&self, bias: f64) -> (f64, f64, f64) {
        let (seen, unseen, preds) = accuracies_at(&self.table, bias);
        let share = preds.iter().filter(|&&k| self.table.unseen[k]).count() as f64 / preds.len().max(1) as f64;
        (seen, unseen, share)
    }
}

/// One toy image scored both ways.
pub struct AggregationRow {
    pub label: String,
    pub additive: f64,
    pub product_f32: f32,
    pub log_product: f64,
}

pub struct AggregationDemo {
    pub rows: Vec<AggregationRow>,
    pub additive_best: usize,
    pub product_best: usize,
    pub exact_best: usize,
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

fn first_max<T: PartialOrd + Copy>(xs: impl Iterator<Item = T>) -> usize {
    let mut best: Option<(usize, T)> = None;
    for (i, x) in xs.enumerate() {
        if best.is_none_or(|(_, b)| x > b) {
            best = Some((i, x));
        }
    }
    best.map_or(0, |b| b.0)
}

/// Random 3x3 probabilities from logits in `[-1, 1]` divided by
/// `temperature`; every one of the 9 pairs is a candidate.
pub fn aggregation_demo(seed: u64, temperature: f64) -> DemoResult<AggregationDemo> {
    if !(temperature > 0.0) {
        return Err(format!("temperature must be positive, got {temperature}"));
    }
    let mut rng = stream(seed, Stream::Synth);
    let mut draw = |n: usize| {
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) / temperature).collect();
        log_softmax(&logits)
    };
    let (lc, la, lo) = (draw(9), draw(3), draw(3));
    let rows: Vec<AggregationRow> = (0..9)
        .map(|k| {
            let (a, o) = (k / 3, k % 3);
            let p = |l: f64| l.exp();
            AggregationRow {
                label: format!("a{a} o{o}"),
                additive: p(lc[k]) + p(la[a]) + p(lo[o]),
                product_f32: p(lc[k]) as f32 * p(la[a]) as f32 * p(lo[o]) as f32,
                log_product: lc[k] + la[a] + lo[o],
            }
        })
        .collect();
    Ok(AggregationDemo {
        additive_best: first_max(rows.iter().map(|r| r.additive)),
        product_best: first_max(rows.iter().map(|r| r.product_f32)),
        exact_best: first_max(rows.iter().map(|r| r.log_product)),
        rows,
    })
}

#[cfg(target_arch = "wasm32")]
mod wasm {
    use wasm_bindgen::prelude::*;

    /// Handle held by the page.
    #[wasm_bindgen]
    pub struct Demo(super::DemoModel);

    #[wasm_bindgen]
    impl Demo {
        #[wasm_bindgen(constructor)]
        pub fn new(seed: u32, variant: &str, epochs: u32) -> Result<Demo, JsError> {
            let v = super::parse_variant(variant).map_err(|e| JsError::new(&e))?;
            super::DemoModel::new(seed.into(), v, epochs as usize)
                .map(Demo)
                .map_err(|e| JsError::new(&e))
        }

        pub fn image_count(&self) -> usize {
            self.0.image_count()
        }

        pub fn image_label(&self, i: usize) -> Result<String, JsError> {
            self.0.image_label(i).map_err(|e| JsError::new(&e))
        }

        /// `[object weights | attribute weights | foreground mask]`, each of
        /// length T; a mean-pooled stage reports uniform weights.
        pub fn attention(&self, i: usize) -> Result<Vec<f64>, JsError> {
            let v = self.0.attention(i).map_err(|e| JsError::new(&e))?;
            let t = v.foreground.len();
            let uniform = vec![1.0 / t as f64; t];
            let mut out = v.object.unwrap_or_else(|| uniform.clone());
            out.extend(v.attribute.unwrap_or(uniform));
            out.extend(v.foreground.iter().map(|&f| f64::from(u8::from(f))));
            Ok(out)
        }

        /// Flattened `(bias, seen, unseen, hm)` rows of the closed-world curve.
        pub fn curve(&self) -> Vec<f64> {
            self.0
                .report()
                .curve
                .points
                .iter()
                .flat_map(|p| [p.bias, p.seen, p.unseen, p.hm])
                .collect()
        }

        /// `[seen, unseen, unseen share]` at `bias`.
        pub fn at_bias(&self, bias: f64) -> Vec<f64> {
            let (s, u, share) = self.0.at_bias(bias);
            vec![s, u, share]
        }

        pub fn summary(&self) -> String {
            let r = self.0.report();
            format!(
                "loss {:.3} -> {:.3}; AUC {:.1}, best HM {:.1}, seen {:.1}, unseen {:.1}",
                self.0.initial_loss,
                self.0.final_loss,
                r.auc * 100.0,
                r.best_hm * 100.0,
                r.best_seen * 100.0,
                r.best_unseen * 100.0
            )
        }
    }

    /// Tab-separated rows `label, additive, f32 product, log product`, then a
    /// final line with the three winning indices.
    #[wasm_bindgen]
    pub fn aggregation(seed: u32, temperature: f64) -> Result<String, JsError> {
        let d = super::aggregation_demo(seed.into(), temperature).map_err(|e| JsError::new(&e))?;
        let mut out = String::new();
        for r in &d.rows {
            out.push_str(&format!("{}\t{:.6e}\t{:e}\t{:.3}\n", r.label, r.additive, r.product_f32, r.log_product));
        }
        out.push_str(&format!("{}\t{}\t{}", d.additive_best, d.product_best, d.exact_best));
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_trains_and_shows_every_pair() {
        let m = DemoModel::new(3, Variant::Full, 4).unwrap();
        assert_eq!(m.image_count(), 12);
        assert!(m.final_loss < m.initial_loss);
        assert!(m.image_label(0).unwrap().ends_with("(seen)"));
        assert!(m.image_label(11).unwrap().ends_with("(unseen)"));
        assert!(m.image_label(12).is_err());
        let v = m.attention(0).unwrap();
        for w in [v.object.unwrap(), v.attribute.unwrap()] {
            assert_eq!(w.len(), 6);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_pooled_stages_report_no_weights() {
        let m = DemoModel::new(3, Variant::NoTextObjectNoGuidance, 0).unwrap();
        let v = m.attention(2).unwrap();
        assert!(v.object.is_none() && v.attribute.is_none());
        assert_eq!(v.foreground.iter().filter(|&&f| f).count(), 3);
    }

    #[test]
    fn bias_extremes_favour_one_side() {
        let m = DemoModel::new(5, Variant::Full, 2).unwrap();
        assert_eq!(m.at_bias(f64::NEG_INFINITY).2, 0.0);
        assert_eq!(m.at_bias(f64::INFINITY).2, 1.0);
    }

    #[test]
    fn low_temperature_collapses_the_product_only() {
        // at τ = 1 nothing underflows and both rules are well defined
        let warm = aggregation_demo(1, 1.0).unwrap();
        assert_eq!(warm.product_best, warm.exact_best);
        // at τ = 0.01 the smallest probabilities are near e^-200
        let hits = (0..40)
            .filter(|&s| {
                let d = aggregation_demo(s, 0.01).unwrap();
                d.product_best != d.exact_best && d.rows[d.exact_best].product_f32 == 0.0
            })
            .count();
        assert!(hits > 0);
        assert!(aggregation_demo(0, 0.0).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in [Variant::Full, Variant::NoTextObject, Variant::NoTextObjectNoGuidance] {
            assert_eq!(parse_variant(v.as_str()).unwrap(), v);
        }
        assert!(parse_variant("teo").is_err());
    }
}
