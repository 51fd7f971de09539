//! Additive inference, calibration-bias sweep and the seen/unseen metrics.
//!
//! A candidate's score is `p(c) + p(a | x, v_o) + p(o | x)`. A calibration
//! bias is added to every candidate that is not a training composition;
//! sweeping it trades seen accuracy for unseen accuracy and traces the
//! curve whose area (AUC) and best harmonic mean are reported.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{CpfParams, FeatureBundle, Scorer, TextEmbeddings};
use crate::space::{CompositionSpace, Pair, Setting};

/// Probabilities of one test image.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    /// Over the table's candidates.
    pub comp: Vec<f64>,
    pub attr: Vec<f64>,
    pub obj: Vec<f64>,
    pub truth: Pair,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub candidates: Vec<Pair>,
    /// `true` where the candidate is not a training composition.
    pub unseen: Vec<bool>,
    pub rows: Vec<ScoreRow>,
}

const SIMPLEX_TOL: f64 = 1e-8;

fn check_simplex(p: &[f64], what: &str, row: usize) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Data(format!(
            "row {row}: {what} probabilities are not a distribution (sum {sum})"
        )));
    }
    Ok(())
}

impl ScoreTable {
    pub fn new(candidates: Vec<Pair>, unseen: Vec<bool>, rows: Vec<ScoreRow>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::Contract("score table needs at least one candidate".into()));
        }
        if unseen.len() != candidates.len() {
            return Err(Error::dim("score table", &[candidates.len()], &[unseen.len()]));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.comp.len() != candidates.len() {
                return Err(Error::dim("score row", &[candidates.len()], &[r.comp.len()]));
            }
            if candidates.iter().any(|c| c.attr >= r.attr.len() || c.obj >= r.obj.len()) {
                return Err(Error::Data(format!("row {i}: candidate outside attribute/object range")));
            }
            check_simplex(&r.comp, "composition", i)?;
            check_simplex(&r.attr, "attribute", i)?;
            check_simplex(&r.obj, "object", i)?;
        }
        Ok(ScoreTable {
            candidates,
            unseen,
            rows,
        })
    }

    /// Whether the true pair of `row` is a seen composition.
    pub fn truth_is_seen(&self, row: &ScoreRow) -> bool {
        match self.candidates.iter().position(|&c| c == row.truth) {
            Some(i) => !self.unseen[i],
            None => true,
        }
    }

    pub fn counts(&self) -> (usize, usize) {
        let seen = self.rows.iter().filter(|r| self.truth_is_seen(r)).count();
        (seen, self.rows.len() - seen)
    }
}

/// `p(c_ij) + p(a_i) + p(o_j)`.
pub fn aggregate_score(comp: f64, attr: f64, obj: f64) -> f64 {
    comp + attr + obj
}

/// Additive score of candidate `k` of `row`.
pub fn candidate_score(table: &ScoreTable, row: &ScoreRow, k: usize) -> f64 {
    let c = table.candidates[k];
    aggregate_score(row.comp[k], row.attr[c.attr], row.obj[c.obj])
}

/// Index of the predicted candidate at calibration `bias`.
///
/// Unseen candidates get `bias` added; ties go to the lowest index. An
/// infinite bias restricts the choice to unseen (`+inf`) or seen (`-inf`)
/// candidates when any exist.
pub fn predict(table: &ScoreTable, row: &ScoreRow, bias: f64) -> usize {
    let restrict = if bias == f64::INFINITY {
        Some(true)
    } else if bias == f64::NEG_INFINITY {
        Some(false)
    } else {
        None
    };
    let allowed = |k: usize| match restrict {
        Some(want_unseen) => table.unseen[k] == want_unseen,
        None => true,
    };
    let any_allowed = (0..table.candidates.len()).any(allowed);
    let mut best: Option<(usize, f64)> = None;
    for k in 0..table.candidates.len() {
        if any_allowed && !allowed(k) {
            continue;
        }
        let mut s = candidate_score(table, row, k);
        if restrict.is_none() && table.unseen[k] {
            s += bias;
        }
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((k, s));
        }
    }
    best.expect("table has candidates").0
}

/// Product rule `p(c)·p(a)·p(o)` at `f32`. Not used for inference: small
/// probabilities underflow and erase the ranking the additive rule keeps.
pub fn multiplicative_score_f32(comp: f64, attr: f64, obj: f64) -> f32 {
    comp as f32 * attr as f32 * obj as f32
}

/// Argmax of [`multiplicative_score_f32`] without calibration, ties to the
/// lowest index.
pub fn predict_multiplicative_f32(table: &ScoreTable, row: &ScoreRow) -> usize {
    let mut best = (0, f32::NEG_INFINITY);
    for (k, c) in table.candidates.iter().enumerate() {
        let s = multiplicative_score_f32(row.comp[k], row.attr[c.attr], row.obj[c.obj]);
        if s > best.1 {
            best = (k, s);
        }
    }
    best.0
}

/// Best seen score minus best unseen score, or `None` when the candidate
/// list lacks one of the two kinds.
pub fn seen_unseen_margin(table: &ScoreTable, row: &ScoreRow) -> Option<f64> {
    let mut best_seen = f64::NEG_INFINITY;
    let mut best_unseen = f64::NEG_INFINITY;
    for k in 0..table.candidates.len() {
        let s = candidate_score(table, row, k);
        if table.unseen[k] {
            best_unseen = best_unseen.max(s);
        } else {
            best_seen = best_seen.max(s);
        }
    }
    (best_seen.is_finite() && best_unseen.is_finite()).then_some(best_seen - best_unseen)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub bias: f64,
    pub seen: f64,
    pub unseen: f64,
    pub hm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub points: Vec<CurvePoint>,
    /// Set when the table lacks seen-truth or unseen-truth images.
    pub degenerate: bool,
}

pub fn harmonic_mean(seen: f64, unseen: f64) -> f64 {
    if seen + unseen == 0.0 {
        0.0
    } else {
        2.0 * seen * unseen / (seen + unseen)
    }
}

/// Seen and unseen accuracy at one bias, plus the per-row predictions.
pub fn accuracies_at(table: &ScoreTable, bias: f64) -> (f64, f64, Vec<usize>) {
    let mut hits = [0usize; 2];
    let mut totals = [0usize; 2];
    let mut preds = Vec::with_capacity(table.rows.len());
    for row in &table.rows {
        let k = predict(table, row, bias);
        preds.push(k);
        let slot = usize::from(!table.truth_is_seen(row));
        totals[slot] += 1;
        if table.candidates[k] == row.truth {
            hits[slot] += 1;
        }
    }
    let acc = |i: usize| {
        if totals[i] == 0 {
            0.0
        } else {
            hits[i] as f64 / totals[i] as f64
        }
    };
    (acc(0), acc(1), preds)
}

/// Calibration biases that visit every distinct prediction state: the
/// sentinels and the midpoints between consecutive distinct per-image
/// seen/unseen margins.
pub fn bias_grid(table: &ScoreTable) -> Vec<f64> {
    let mut margins: Vec<f64> = table
        .rows
        .iter()
        .filter_map(|r| seen_unseen_margin(table, r))
        .collect();
    margins.sort_by(f64::total_cmp);
    margins.dedup();
    let mut grid = Vec::with_capacity(margins.len() + 1);
    grid.push(f64::NEG_INFINITY);
    grid.extend(margins.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    grid.push(f64::INFINITY);
    grid
}

/// `k` evenly spaced biases spanning the margin range, plus sentinels.
pub fn linear_bias_grid(table: &ScoreTable, k: usize) -> Vec<f64> {
    let margins: Vec<f64> = table
        .rows
        .iter()
        .filter_map(|r| seen_unseen_margin(table, r))
        .collect();
    let mut grid = vec![f64::NEG_INFINITY];
    if let (Some(lo), Some(hi)) = (
        margins.iter().copied().reduce(f64::min),
        margins.iter().copied().reduce(f64::max),
    ) {
        if k == 1 {
            grid.push(0.5 * (lo + hi));
        } else {
            grid.extend((0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64));
        }
    }
    grid.push(f64::INFINITY);
    grid
}

/// Seen/unseen curve over the exact bias grid.
pub fn calibration_sweep(table: &ScoreTable) -> Curve {
    sweep_with_grid(table, &bias_grid(table))
}

pub fn sweep_with_grid(table: &ScoreTable, grid: &[f64]) -> Curve {
    let (n_seen, n_unseen) = table.counts();
    let degenerate = n_seen == 0 || n_unseen == 0;
    if degenerate {
        log::warn!(
            "degenerate seen/unseen curve: {n_seen} seen-truth and {n_unseen} unseen-truth images"
        );
    }
    let points = grid
        .iter()
        .map(|&bias| {
            let (seen, unseen, _) = accuracies_at(table, bias);
            CurvePoint {
                bias,
                seen,
                unseen,
                hm: harmonic_mean(seen, unseen),
            }
        })
        .collect();
    Curve { points, degenerate }
}

/// Area under unseen accuracy as a function of seen accuracy, with the curve
/// extended to `(0, max unseen)` and `(max seen, 0)`.
pub fn auc(points: &[CurvePoint]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let max_seen = points.iter().map(|p| p.seen).fold(0.0, f64::max);
    let max_unseen = points.iter().map(|p| p.unseen).fold(0.0, f64::max);
    let mut xy: Vec<(f64, f64)> = points.iter().map(|p| (p.seen, p.unseen)).collect();
    xy.push((0.0, max_unseen));
    xy.push((max_seen, 0.0));
    xy.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    xy.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) * 0.5)
        .sum()
}

pub fn best_hm(points: &[CurvePoint]) -> f64 {
    points.iter().map(|p| p.hm).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub setting: Setting,
    pub images: usize,
    pub seen_images: usize,
    pub unseen_images: usize,
    pub candidates: usize,
    pub curve: Curve,
    pub auc: f64,
    pub best_hm: f64,
    /// Seen accuracy at its favourable extreme (bias `-inf`).
    pub best_seen: f64,
    /// Unseen accuracy at its favourable extreme (bias `+inf`).
    pub best_unseen: f64,
}

impl EvalReport {
    pub fn from_table(setting: Setting, table: &ScoreTable, grid: Option<&[f64]>) -> Self {
        let curve = match grid {
            Some(g) => sweep_with_grid(table, g),
            None => calibration_sweep(table),
        };
        let (seen_images, unseen_images) = table.counts();
        EvalReport {
            setting,
            images: table.rows.len(),
            seen_images,
            unseen_images,
            candidates: table.candidates.len(),
            auc: auc(&curve.points),
            best_hm: best_hm(&curve.points),
            best_seen: curve.points.iter().map(|p| p.seen).fold(0.0, f64::max),
            best_unseen: curve.points.iter().map(|p| p.unseen).fold(0.0, f64::max),
            curve,
        }
    }

    /// The `AUC, HM, Seen, Unseen` summary, each scaled by 100.
    pub fn summary_line(&self) -> String {
        format!(
            "{:.4}, {:.4}, {:.4}, {:.4}",
            self.auc * 100.0,
            self.best_hm * 100.0,
            self.best_seen * 100.0,
            self.best_unseen * 100.0
        )
    }

    pub fn curve_text(&self) -> String {
        let mut out = String::from("bias, seen, unseen, hm\n");
        for p in &self.curve.points {
            let _ = writeln!(out, "{}, {}, {}, {}", p.bias, p.seen, p.unseen, p.hm);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("[header]\n");
        let _ = writeln!(out, "setting = {}", self.setting.as_str());
        let _ = writeln!(out, "images = {}", self.images);
        let _ = writeln!(out, "seen_images = {}", self.seen_images);
        let _ = writeln!(out, "unseen_images = {}", self.unseen_images);
        let _ = writeln!(out, "candidates = {}", self.candidates);
        let _ = writeln!(out, "degenerate = {}", self.curve.degenerate);
        out.push_str("[curve]\n");
        out.push_str(&self.curve_text());
        out.push_str("[summary]\nAUC, HM, Seen, Unseen\n");
        out.push_str(&self.summary_line());
        out.push('\n');
        out
    }
}

/// Scores every test image against the setting's candidates.
pub fn build_score_table(
    test_set: &[FeatureBundle],
    params: &CpfParams,
    text: &TextEmbeddings,
    space: &CompositionSpace,
    setting: Setting,
    threads: usize,
) -> Result<ScoreTable> {
    let candidates = space.candidates(setting);
    for b in test_set {
        if candidates.binary_search(&b.pair()).is_err() {
            return Err(Error::Data(format!(
                "test image {} is labelled {}, which is not a {} candidate",
                b.image_id,
                space.pair_name(b.pair()),
                setting.as_str()
            )));
        }
    }
    let scorer = Scorer::new(params, text, &candidates)?;
    let score_one = |b: &FeatureBundle| -> Result<ScoreRow> {
        let p = scorer.score(b)?;
        Ok(ScoreRow {
            comp: p.comp,
            attr: p.attr,
            obj: p.obj,
            truth: b.pair(),
        })
    };
    let rows = score_all(test_set, threads, score_one)?;
    let unseen = candidates.iter().map(|&c| !space.is_seen(c)).collect();
    ScoreTable::new(candidates, unseen, rows)
}

#[cfg(feature = "parallel")]
fn score_all<F>(set: &[FeatureBundle], threads: usize, f: F) -> Result<Vec<ScoreRow>>
where
    F: Fn(&FeatureBundle) -> Result<ScoreRow> + Sync,
{
    use rayon::prelude::*;
    if threads <= 1 {
        return set.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| set.par_iter().map(&f).collect())
}

#[cfg(not(feature = "parallel"))]
fn score_all<F>(set: &[FeatureBundle], _threads: usize, f: F) -> Result<Vec<ScoreRow>>
where
    F: Fn(&FeatureBundle) -> Result<ScoreRow>,
{
    set.iter().map(f).collect()
}

/// Scores `test_set` and sweeps the calibration bias.
pub fn evaluate(
    test_set: &[FeatureBundle],
    params: &CpfParams,
    text: &TextEmbeddings,
    space: &CompositionSpace,
    setting: Setting,
    threads: usize,
) -> Result<EvalReport> {
    let table = build_score_table(test_set, params, text, space, setting, threads)?;
    Ok(EvalReport::from_table(setting, &table, None))
}
