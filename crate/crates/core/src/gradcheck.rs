//! Central finite-difference checks of the reverse-mode gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BackwardFault, Graph, Var};
use crate::error::{Error, Result};
use crate::model::{
    bind_text, forward_losses, CpfParams, Dims, FeatureBundle, HeadConfig, LossNodes,
    TextEmbeddings, Variant, PARAM_NAMES,
};
use crate::rng::{stream, Stream};
use crate::space::Pair;
use crate::tensor::Tensor;

/// `|a - n| / max(1, |a|, |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!("eps must lie in [1e-7, 1e-3], got {eps}")));
    }
    Ok(())
}

fn scalar_of(g: &Graph, v: Var, what: &str) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::Contract(format!("{what} must be a scalar, got shape {:?}", t.shape())));
    }
    let x = t.data()[0];
    if !x.is_finite() {
        return Err(Error::numeric(what.to_string()));
    }
    Ok(x)
}

/// Max relative error between the tape gradient of `f` at `x` and central
/// differences. `f` maps its input node to a scalar node.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_with(None, f, x, eps)
}

/// As [`grad_check`], optionally with a deliberately broken backward pass.
pub fn grad_check_with<F>(fault: Option<BackwardFault>, f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    check_eps(eps)?;
    let mut g = fault.map_or_else(Graph::new, Graph::with_fault);
    let input = g.param(x.clone());
    let out = f(&mut g, input)?;
    scalar_of(&g, out, "grad_check function value")?;
    let analytic = g.backward(out)?.get_or_zero(input, x.len());

    let eval = |probe: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(probe);
        let out = f(&mut g, v)?;
        scalar_of(&g, out, "grad_check function value")
    };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Loss terms checked by [`check_model`].
pub const LOSS_NAMES: [&str; 4] = ["L_obj", "L_att", "L_com", "L_total"];

fn pick(nodes: &LossNodes, which: usize) -> Var {
    match which {
        0 => nodes.obj,
        1 => nodes.attr,
        2 => nodes.comp,
        _ => nodes.total,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelCheckConfig {
    pub text_dim: usize,
    pub visual_dim: usize,
    pub tokens: usize,
    pub blocks: usize,
    pub num_attrs: usize,
    pub num_objs: usize,
    /// Images in the checked batch.
    pub batch: usize,
    pub eps: f64,
    pub tolerance: f64,
    pub fault: Option<BackwardFault>,
}

impl Default for ModelCheckConfig {
    fn default() -> Self {
        ModelCheckConfig {
            text_dim: 4,
            visual_dim: 6,
            tokens: 3,
            blocks: 3,
            num_attrs: 3,
            num_objs: 2,
            batch: 2,
            eps: 1e-5,
            tolerance: 1e-4,
            fault: None,
        }
    }
}

/// Worst error for one (seed, variant, loss term, parameter tensor).
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub seed: u64,
    pub variant: Variant,
    pub loss: &'static str,
    pub param: &'static str,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckReport {
    pub tolerance: f64,
    pub rows: Vec<CheckRow>,
}

impl ModelCheckReport {
    pub fn worst(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.max_rel_error < self.tolerance)
    }

    /// Worst error per (variant, loss, param) across seeds, one line each.
    pub fn to_text(&self) -> String {
        let mut keys: Vec<(Variant, &str, &str)> = Vec::new();
        for r in &self.rows {
            let k = (r.variant, r.loss, r.param);
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        let mut out = String::new();
        for (v, l, p) in keys {
            let worst = self
                .rows
                .iter()
                .filter(|r| r.variant == v && r.loss == l && r.param == p)
                .map(|r| r.max_rel_error)
                .fold(0.0, f64::max);
            let verdict = if worst < self.tolerance { "ok" } else { "FAIL" };
            out.push_str(&format!("{:<10} {:<7} {:<18} {worst:.3e} {verdict}\n", v.as_str(), l, p));
        }
        out.push_str(&format!(
            "worst {:.3e} over {} checks, tolerance {:.0e}: {}\n",
            self.worst(),
            self.rows.len(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        ));
        out
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..=1.0)).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches")
}

struct Instance {
    params: CpfParams,
    text: TextEmbeddings,
    batch: Vec<FeatureBundle>,
    candidates: Vec<Pair>,
}

fn instance(cfg: &ModelCheckConfig, variant: Variant, seed: u64) -> Result<Instance> {
    let mut rng = stream(seed, Stream::GradCheck);
    let (dv, dt, t, b) = (cfg.visual_dim, cfg.text_dim, cfg.tokens, cfg.blocks);
    let (m, n) = (cfg.num_attrs, cfg.num_objs);
    let text = TextEmbeddings::new(
        (0..m).map(|i| format!("a{i}")).collect(),
        (0..n).map(|i| format!("o{i}")).collect(),
        uniform(&mut rng, m, dt),
        uniform(&mut rng, n, dt),
    )?;
    let head = HeadConfig {
        variant,
        ..HeadConfig::default()
    };
    let mut params = CpfParams::init(
        Dims {
            visual: dv,
            text: dt,
            blocks: b,
        },
        head,
        &mut rng,
    );
    // nonzero biases so their paths carry signal
    for (tensor, name) in params.tensors_mut().into_iter().zip(PARAM_NAMES) {
        if name.ends_with("bias") {
            for x in tensor.data_mut() {
                *x = rng.random_range(-0.5..=0.5);
            }
        }
    }
    let batch = (0..cfg.batch)
        .map(|i| FeatureBundle {
            image_id: format!("g{i}"),
            deep_class: uniform(&mut rng, 1, dv),
            deep_patches: uniform(&mut rng, t, dv),
            shallow_blocks: (0..b).map(|_| uniform(&mut rng, t, dv)).collect(),
            shallow_class: (0..b).map(|_| uniform(&mut rng, 1, dv)).collect(),
            attr: rng.random_range(0..m),
            obj: rng.random_range(0..n),
        })
        .collect();
    let candidates = (0..m).flat_map(|a| (0..n).map(move |o| Pair::new(a, o))).collect();
    Ok(Instance {
        params,
        text,
        batch,
        candidates,
    })
}

fn loss_values(inst: &Instance, params: &CpfParams) -> Result<[f64; 4]> {
    let mut g = Graph::new();
    let pv = params.bind(&mut g, false);
    let tv = bind_text(&mut g, &inst.text);
    let refs: Vec<&FeatureBundle> = inst.batch.iter().collect();
    let nodes = forward_losses(&mut g, &params.config, &pv, tv, &inst.candidates, &refs)?;
    let mut out = [0.0; 4];
    for (k, o) in out.iter_mut().enumerate() {
        *o = scalar_of(&g, pick(&nodes, k), LOSS_NAMES[k])?;
    }
    Ok(out)
}

/// Gradient of each loss term with respect to each head tensor.
fn analytic(inst: &Instance, fault: Option<BackwardFault>) -> Result<Vec<Vec<Vec<f64>>>> {
    let refs: Vec<&FeatureBundle> = inst.batch.iter().collect();
    let mut per_loss = Vec::with_capacity(LOSS_NAMES.len());
    for k in 0..LOSS_NAMES.len() {
        let mut g = fault.map_or_else(Graph::new, Graph::with_fault);
        let pv = inst.params.bind(&mut g, true);
        let tv = bind_text(&mut g, &inst.text);
        let nodes = forward_losses(&mut g, &inst.params.config, &pv, tv, &inst.candidates, &refs)?;
        let grads = g.backward(pick(&nodes, k))?;
        let lens: Vec<usize> = inst.params.tensors().iter().map(|t| t.len()).collect();
        per_loss.push(
            pv.vars()
                .iter()
                .zip(lens)
                .map(|(v, len)| grads.get_or_zero(*v, len))
                .collect(),
        );
    }
    Ok(per_loss)
}

/// Checks every loss term against every head tensor for one seed and variant.
pub fn check_instance(cfg: &ModelCheckConfig, variant: Variant, seed: u64) -> Result<Vec<CheckRow>> {
    check_eps(cfg.eps)?;
    let inst = instance(cfg, variant, seed)?;
    let grads = analytic(&inst, cfg.fault)?;
    let mut worst = vec![[0.0f64; 10]; LOSS_NAMES.len()];
    for p in 0..PARAM_NAMES.len() {
        let len = inst.params.tensors()[p].len();
        for i in 0..len {
            let mut plus = inst.params.clone();
            plus.tensors_mut()[p].data_mut()[i] += cfg.eps;
            let mut minus = inst.params.clone();
            minus.tensors_mut()[p].data_mut()[i] -= cfg.eps;
            let (lp, lm) = (loss_values(&inst, &plus)?, loss_values(&inst, &minus)?);
            for k in 0..LOSS_NAMES.len() {
                let numeric = (lp[k] - lm[k]) / (2.0 * cfg.eps);
                let e = relative_error(grads[k][p][i], numeric);
                worst[k][p] = worst[k][p].max(e);
            }
        }
    }
    let mut rows = Vec::new();
    for (k, loss) in LOSS_NAMES.iter().enumerate() {
        for (p, param) in PARAM_NAMES.iter().enumerate() {
            rows.push(CheckRow {
                seed,
                variant,
                loss,
                param,
                max_rel_error: worst[k][p],
            });
        }
    }
    Ok(rows)
}

/// Runs [`check_instance`] over `seeds` and `variants`.
pub fn check_model(
    cfg: &ModelCheckConfig,
    variants: &[Variant],
    seeds: impl IntoIterator<Item = u64>,
) -> Result<ModelCheckReport> {
    let mut rows = Vec::new();
    for seed in seeds {
        for &v in variants {
            rows.extend(check_instance(cfg, v, seed)?);
        }
    }
    Ok(ModelCheckReport {
        tolerance: cfg.tolerance,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        composition_logits, fuse_shallow, object_guided_attribute, text_enhanced_object,
        textual_descriptor, LinearVars,
    };

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::row(vec![0.3, -0.7, 0.2]).unwrap();
        let e = grad_check(
            |g, x| {
                let w = g.constant(Tensor::matrix(3, 1, vec![1.5, -2.0, 0.5]).unwrap());
                g.matmul(x, w)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(e <= 1e-10, "{e}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::row(vec![1.0, 2.0]).unwrap();
        let e = grad_check(|g, _| Ok(g.constant(Tensor::row(vec![4.0]).unwrap())), &x, 1e-5).unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn softmax_then_pick() {
        let x = Tensor::row(vec![0.1, -0.4, 0.9, 0.0]).unwrap();
        let e = grad_check(
            |g, x| {
                let s = g.softmax(x)?;
                let pick = g.constant(Tensor::matrix(4, 1, vec![0.0, 0.0, 1.0, 0.0]).unwrap());
                g.matmul(s, pick)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(e <= 1e-6, "{e}");
    }

    #[test]
    fn non_scalar_and_bad_eps_rejected() {
        let x = Tensor::row(vec![1.0, 2.0]).unwrap();
        assert!(grad_check(|_, x| Ok(x), &x, 1e-5).is_err());
        assert!(grad_check(|g, x| g.softmax(x), &x, 1e-2).is_err());
    }

    #[test]
    fn non_finite_value_is_numeric_error() {
        let x = Tensor::row(vec![1.0]).unwrap();
        let r = grad_check(|g, x| Ok(g.scale(x, f64::INFINITY)), &x, 1e-5);
        assert!(matches!(r, Err(Error::Numeric { .. })));
    }

    #[test]
    fn broken_softmax_backward_is_caught() {
        let x = Tensor::row(vec![0.1, -0.4, 0.9]).unwrap();
        let f = |g: &mut Graph, x: Var| {
            let s = g.softmax(x)?;
            let w = g.constant(Tensor::matrix(3, 1, vec![1.0, -2.0, 0.5]).unwrap());
            g.matmul(s, w)
        };
        assert!(grad_check(f, &x, 1e-5).unwrap() < 1e-8);
        let bad = grad_check_with(Some(BackwardFault::SoftmaxJacobian), f, &x, 1e-5).unwrap();
        assert!(bad > 1e-2, "{bad}");
    }

    /// Sum of `x · c` with a fixed random `c`, so every output element matters.
    fn contract(g: &mut Graph, x: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
        let (r, c) = g.value(x).dims2();
        let w = g.constant(uniform(rng, c, 1));
        let y = g.matmul(x, w)?;
        let ones = g.constant(Tensor::filled(&[1, r], 1.0));
        g.matmul(ones, y)
    }

    #[test]
    fn composite_stages_pass() {
        let (dv, dt, t, b, n) = (6, 4, 3, 3, 2);
        for seed in 0..5 {
            let mut rng = stream(seed, Stream::GradCheck);
            let cls = uniform(&mut rng, 1, dv);
            let patches = uniform(&mut rng, t, dv);
            let objs = uniform(&mut rng, n, dt);
            let proj = [uniform(&mut rng, dv, dt), uniform(&mut rng, 1, dt)];
            let blocks: Vec<Tensor> = (0..b).map(|_| uniform(&mut rng, t, dv)).collect();
            let fusion = [uniform(&mut rng, b * dv, dv), uniform(&mut rng, 1, dv)];
            let probe_seed = seed + 100;

            // descriptor and object feature w.r.t. the class token
            let e = grad_check(
                |g, x| {
                    let lin = LinearVars {
                        weight: g.constant(proj[0].clone()),
                        bias: g.constant(proj[1].clone()),
                    };
                    let o = g.constant(objs.clone());
                    let p = g.constant(patches.clone());
                    let q = textual_descriptor(g, x, o, lin)?;
                    let (v, _) = text_enhanced_object(g, x, p, q, lin)?;
                    contract(g, v, &mut stream(probe_seed, Stream::GradCheck))
                },
                &cls,
                1e-5,
            )
            .unwrap();
            assert!(e < 1e-4, "object feature wrt class token: {e}");

            // object feature w.r.t. the patches (keys and values)
            let e = grad_check(
                |g, x| {
                    let lin = LinearVars {
                        weight: g.constant(proj[0].clone()),
                        bias: g.constant(proj[1].clone()),
                    };
                    let c = g.constant(cls.clone());
                    let o = g.constant(objs.clone());
                    let q = textual_descriptor(g, c, o, lin)?;
                    let (v, _) = text_enhanced_object(g, c, x, q, lin)?;
                    contract(g, v, &mut stream(probe_seed, Stream::GradCheck))
                },
                &patches,
                1e-5,
            )
            .unwrap();
            assert!(e < 1e-4, "object feature wrt patches: {e}");

            // fused shallow tokens and attribute feature w.r.t. the fusion weight
            let e = grad_check(
                |g, w| {
                    let bl: Vec<Var> = blocks.iter().map(|t| g.constant(t.clone())).collect();
                    let lin = LinearVars {
                        weight: w,
                        bias: g.constant(fusion[1].clone()),
                    };
                    let fused = fuse_shallow(g, &bl, lin)?;
                    let q = g.constant(cls.clone());
                    let (a, _) = object_guided_attribute(g, q, fused)?;
                    contract(g, a, &mut stream(probe_seed, Stream::GradCheck))
                },
                &fusion[0],
                1e-5,
            )
            .unwrap();
            assert!(e < 1e-4, "attribute feature wrt fusion: {e}");

            // composition logits w.r.t. the attribute feature
            let comp_w = [uniform(&mut rng, 2 * dv, dt), uniform(&mut rng, 1, dt)];
            let comp_t = uniform(&mut rng, 4, dt);
            let e = grad_check(
                |g, a| {
                    let lin = LinearVars {
                        weight: g.constant(comp_w[0].clone()),
                        bias: g.constant(comp_w[1].clone()),
                    };
                    let o = g.constant(cls.clone());
                    let t = g.constant(comp_t.clone());
                    let l = composition_logits(g, a, o, lin, t)?;
                    g.cross_entropy(l, 1, 0.05)
                },
                &cls,
                1e-5,
            )
            .unwrap();
            assert!(e < 1e-4, "composition loss wrt attribute feature: {e}");
        }
    }

    #[test]
    fn model_paths_pass_for_a_few_seeds() {
        let cfg = ModelCheckConfig::default();
        let all = [Variant::Full, Variant::NoTextObject, Variant::NoTextObjectNoGuidance];
        let report = check_model(&cfg, &all, 0..3).unwrap();
        assert_eq!(report.rows.len(), 3 * 3 * 4 * 10);
        assert!(report.passed(), "{}", report.to_text());
    }

    #[test]
    fn model_check_catches_injected_fault() {
        let cfg = ModelCheckConfig {
            fault: Some(BackwardFault::SoftmaxJacobian),
            ..ModelCheckConfig::default()
        };
        let report = check_model(&cfg, &[Variant::Full], 0..1).unwrap();
        assert!(!report.passed());
        assert!(report.to_text().contains("FAIL"));
    }
}
