//! Finite-difference verification of the hand-written backward passes.
//!
//! Each configuration draws a random head (adaptor variant, `C`, `Hd`,
//! batch), random features and noise, and a training objective. The
//! implementation runs in `f64`; derivatives are compared against central
//! differences of a separate loop-based forward written only for this check.
//! Richardson extrapolation over steps `h` and `h/2` keeps truncation error
//! far below the tolerance.
//!
//! Coordinates whose perturbation moves any activation or hinge across its
//! kink are not differentiable there and are skipped (and counted).

use std::time::Instant;

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{AdaptorVariant, Model};
use crate::pipeline::PipelineConfig;
use crate::training::{compute_loss, LossKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    /// `sum_i r_i * D_i` for fixed random `r`; isolates the head.
    Functional,
    CrossEntropy,
    TruncatedL1 { th_pos: f64, th_neg: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub max_channels: usize,
    pub max_hidden: usize,
    pub max_batch: usize,
    pub configs: usize,
    pub seed: u64,
    pub tolerance: f64,
    /// Scale one analytic gradient entry by 1.01 so the check must fail.
    pub corrupt: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            max_channels: 8,
            max_hidden: 8,
            max_batch: 16,
            configs: 24,
            seed: 0,
            tolerance: 1e-4,
            corrupt: false,
        }
    }
}

/// Step for the coarser of the two central differences.
const STEP: f64 = 1e-4;
/// Denominator floor of the relative error, so entries that are zero up to
/// rounding compare by absolute difference.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigReport {
    pub index: usize,
    pub adaptor: AdaptorVariant,
    pub objective: Objective,
    pub channels: usize,
    pub hidden: usize,
    pub batch: usize,
    /// Largest disagreement between the implementation's forward scores and
    /// the reference forward.
    pub forward_max_abs_diff: f64,
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
    pub seconds: f64,
    pub configs: Vec<ConfigReport>,
}

/// Flat parameter set of the reference forward.
#[derive(Debug, Clone)]
struct Params {
    /// `(name, values)` in a fixed order; the adaptor tensors may be absent.
    tensors: Vec<(&'static str, Vec<f64>)>,
}

impl Params {
    fn get(&self, name: &str) -> &[f64] {
        self.tensors
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| v.as_slice())
            .unwrap_or(&[])
    }
}

struct Problem {
    variant: AdaptorVariant,
    objective: Objective,
    c: usize,
    hd: usize,
    rows: usize,
    local: Vec<f64>,
    noise: Vec<f64>,
    weights: Vec<f64>,
    slope: f64,
    eps: f64,
}

struct Evaluation {
    loss: f64,
    scores: Vec<f64>,
    /// Which side of every kink each intermediate sits on.
    pattern: Vec<bool>,
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

impl Problem {
    /// Loss as a function of the scores alone; the pattern records hinge sides.
    fn objective_of(&self, scores: &[f64], pattern: &mut Vec<bool>) -> f64 {
        let n = self.rows;
        let (pos, neg) = scores.split_at(n);
        match self.objective {
            Objective::Functional => scores.iter().zip(&self.weights).map(|(s, r)| s * r).sum(),
            Objective::CrossEntropy => {
                let sp = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
                (pos.iter().map(|&s| sp(-s)).sum::<f64>() + neg.iter().map(|&s| sp(s)).sum::<f64>())
                    / (2 * n) as f64
            }
            Objective::TruncatedL1 { th_pos, th_neg } => {
                let mut a = 0.0;
                for &s in pos {
                    pattern.push(th_pos - s > 0.0);
                    a += (th_pos - s).max(0.0);
                }
                let mut b = 0.0;
                for &s in neg {
                    pattern.push(s - th_neg > 0.0);
                    b += (s - th_neg).max(0.0);
                }
                a / n as f64 + b / n as f64
            }
        }
    }

    /// Straight-loop forward over `[q; q + noise]` with train-mode batch norm.
    fn evaluate(&self, p: &Params) -> Evaluation {
        let (c, hd, n) = (self.c, self.hd, self.rows);
        let mut pattern = Vec::new();

        let mut q = vec![0.0; n * c];
        for r in 0..n {
            let o = &self.local[r * c..(r + 1) * c];
            match self.variant {
                AdaptorVariant::Identity => q[r * c..(r + 1) * c].copy_from_slice(o),
                AdaptorVariant::Linear => {
                    let w = p.get("adaptor.weight");
                    for j in 0..c {
                        q[r * c + j] = (0..c).map(|i| o[i] * w[i * c + j]).sum();
                    }
                }
                AdaptorVariant::Mlp => {
                    let (w, w2) = (p.get("adaptor.weight"), p.get("adaptor.weight2"));
                    let mut hidden = vec![0.0; c];
                    for j in 0..c {
                        let u: f64 = (0..c).map(|i| o[i] * w[i * c + j]).sum();
                        pattern.push(u > 0.0);
                        hidden[j] = leaky(u, self.slope);
                    }
                    for j in 0..c {
                        q[r * c + j] = (0..c).map(|i| hidden[i] * w2[i * c + j]).sum();
                    }
                }
            }
        }

        let total = 2 * n;
        let x = |r: usize, i: usize| {
            if r < n {
                q[r * c + i]
            } else {
                q[(r - n) * c + i] + self.noise[(r - n) * c + i]
            }
        };
        let (w1, b1) = (p.get("w1"), p.get("b1"));
        let (gamma, beta) = (p.get("bn_gamma"), p.get("bn_beta"));
        let (w2, b2) = (p.get("w2"), p.get("b2")[0]);

        let mut z = vec![0.0; total * hd];
        for r in 0..total {
            for j in 0..hd {
                z[r * hd + j] = b1[j] + (0..c).map(|i| x(r, i) * w1[i * hd + j]).sum::<f64>();
            }
        }
        let mut scores = vec![b2; total];
        for j in 0..hd {
            let mean = (0..total).map(|r| z[r * hd + j]).sum::<f64>() / total as f64;
            let var = (0..total).map(|r| (z[r * hd + j] - mean).powi(2)).sum::<f64>() / total as f64;
            let denom = (var + self.eps).sqrt();
            for r in 0..total {
                let y = gamma[j] * (z[r * hd + j] - mean) / denom + beta[j];
                pattern.push(y > 0.0);
                scores[r] += leaky(y, self.slope) * w2[j];
            }
        }
        let loss = self.objective_of(&scores, &mut pattern);
        Evaluation {
            loss,
            scores,
            pattern,
        }
    }
}

fn normal<R: Rng>(rng: &mut R, scale: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * scale
}

struct Analytic {
    scores: Vec<f64>,
    /// `dL/dscore`, normal rows then noised rows.
    score_grads: Vec<f64>,
    params: Vec<(&'static str, Vec<f64>)>,
}

/// Runs the library forward, loss and backward in `f64`.
fn analytic(prob: &Problem, model: &mut Model<f64>) -> Result<Analytic> {
    let fwd = model.forward_train(&prob.local, prob.rows, &prob.noise)?;
    let (gp, gn) = match prob.objective {
        Objective::Functional => {
            let (a, b) = prob.weights.split_at(prob.rows);
            (a.to_vec(), b.to_vec())
        }
        Objective::CrossEntropy => {
            let out = compute_loss(LossKind::CrossEntropy, &fwd.pos, &fwd.neg, 0.0, 0.0)?;
            (out.grad_pos, out.grad_neg)
        }
        Objective::TruncatedL1 { th_pos, th_neg } => {
            let out = compute_loss(LossKind::TruncatedL1, &fwd.pos, &fwd.neg, th_pos, th_neg)?;
            (out.grad_pos, out.grad_neg)
        }
    };
    let grads = model.backward(&fwd.cache, &gp, &gn)?;
    let mut params = Vec::new();
    let a = &grads.adaptor;
    match prob.variant {
        AdaptorVariant::Identity => {}
        AdaptorVariant::Linear => params.push(("adaptor.weight", a.weight.clone())),
        AdaptorVariant::Mlp => {
            params.push(("adaptor.weight", a.weight.clone()));
            params.push(("adaptor.weight2", a.weight2.clone()));
        }
    }
    let d = &grads.discriminator;
    params.push(("w1", d.w1.clone()));
    params.push(("b1", d.b1.clone()));
    params.push(("bn_gamma", d.bn_gamma.clone()));
    params.push(("bn_beta", d.bn_beta.clone()));
    params.push(("w2", d.w2.clone()));
    params.push(("b2", vec![d.b2]));

    let mut scores = fwd.pos;
    scores.extend(fwd.neg);
    let mut score_grads = gp;
    score_grads.extend(gn);
    Ok(Analytic {
        scores,
        score_grads,
        params,
    })
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Richardson-extrapolated central difference of `f` at offset 0, or `None`
/// when any evaluation crosses a kink.
fn derivative(base: &[bool], mut f: impl FnMut(f64) -> Evaluation) -> Option<f64> {
    let mut at = |h: f64| {
        let e = f(h);
        (e.pattern == base).then_some(e.loss)
    };
    let d1 = (at(STEP)? - at(-STEP)?) / (2.0 * STEP);
    let d2 = (at(STEP / 2.0)? - at(-STEP / 2.0)?) / STEP;
    Some((4.0 * d2 - d1) / 3.0)
}

struct Tally {
    max_rel: f64,
    worst: String,
    checked: usize,
    skipped: usize,
}

impl Tally {
    fn record(&mut self, label: impl FnOnce() -> String, a: f64, n: Option<f64>) {
        match n {
            None => self.skipped += 1,
            Some(n) => {
                self.checked += 1;
                let e = rel_err(a, n);
                if e > self.max_rel || e.is_nan() {
                    self.max_rel = if e.is_nan() { f64::INFINITY } else { e };
                    self.worst = format!("{} (analytic {a:.6e}, numeric {n:.6e})", label());
                }
            }
        }
    }
}

fn run_config(index: usize, opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<ConfigReport> {
    let variants = [AdaptorVariant::Identity, AdaptorVariant::Linear, AdaptorVariant::Mlp];
    let variant = variants[index % 3];
    let objective = match (index / 3) % 4 {
        0 => Objective::Functional,
        1 => Objective::CrossEntropy,
        2 => Objective::TruncatedL1 {
            th_pos: 0.5,
            th_neg: -0.5,
        },
        // every hinge active: the loss is linear in the scores
        _ => Objective::TruncatedL1 {
            th_pos: 5.0,
            th_neg: -5.0,
        },
    };
    let c = rng.random_range(1..=opts.max_channels);
    let hd = rng.random_range(1..=opts.max_hidden);
    let rows = rng.random_range(1..=opts.max_batch);

    let mut model = Model::<f64>::new(PipelineConfig::default(), variant, c, hd, rng.random())?;
    {
        let mut ps = model.adaptor.params_mut();
        for t in ps.iter_mut() {
            for (k, v) in t.iter_mut().enumerate() {
                let diag = if k % (c + 1) == 0 { 1.0 } else { 0.0 };
                *v = diag + normal(rng, 0.3);
            }
        }
    }
    {
        let d = &mut model.discriminator;
        d.b1.iter_mut().for_each(|v| *v = normal(rng, 0.2));
        d.bn_gamma.iter_mut().for_each(|v| *v = 1.0 + normal(rng, 0.3));
        d.bn_beta.iter_mut().for_each(|v| *v = normal(rng, 0.3));
        d.b2 = normal(rng, 0.2);
        let _ = d.params_mut();
    }
    let local: Vec<f64> = (0..rows * c).map(|_| normal(rng, 1.0)).collect();
    let noise: Vec<f64> = (0..rows * c).map(|_| normal(rng, 0.5)).collect();
    let weights: Vec<f64> = (0..2 * rows).map(|_| normal(rng, 1.0)).collect();

    let d = &model.discriminator;
    let mut tensors = Vec::new();
    match variant {
        AdaptorVariant::Identity => {}
        AdaptorVariant::Linear => tensors.push(("adaptor.weight", model.adaptor.weight.clone())),
        AdaptorVariant::Mlp => {
            tensors.push(("adaptor.weight", model.adaptor.weight.clone()));
            tensors.push(("adaptor.weight2", model.adaptor.weight2.clone()));
        }
    }
    tensors.push(("w1", d.w1.clone()));
    tensors.push(("b1", d.b1.clone()));
    tensors.push(("bn_gamma", d.bn_gamma.clone()));
    tensors.push(("bn_beta", d.bn_beta.clone()));
    tensors.push(("w2", d.w2.clone()));
    tensors.push(("b2", vec![d.b2]));
    let params = Params { tensors };

    let prob = Problem {
        variant,
        objective,
        c,
        hd,
        rows,
        local,
        noise,
        weights,
        slope: model.discriminator.leaky_slope,
        eps: model.discriminator.bn_eps,
    };

    let mut an = analytic(&prob, &mut model)?;
    if opts.corrupt {
        let (_, g) = an.params.iter_mut().find(|(n, _)| *n == "w1").unwrap();
        let k = g
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(k, _)| k)
            .unwrap();
        g[k] *= 1.01;
    }

    let base = prob.evaluate(&params);
    let forward_max_abs_diff = base
        .scores
        .iter()
        .zip(&an.scores)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let mut tally = Tally {
        max_rel: 0.0,
        worst: String::new(),
        checked: 0,
        skipped: 0,
    };

    // loss derivative with respect to each score
    for k in 0..base.scores.len() {
        let mut loss_pattern = Vec::new();
        prob.objective_of(&base.scores, &mut loss_pattern);
        let numeric = derivative(&loss_pattern, |h| {
            let mut s = base.scores.clone();
            s[k] += h;
            let mut pattern = Vec::new();
            let loss = prob.objective_of(&s, &mut pattern);
            Evaluation {
                loss,
                scores: Vec::new(),
                pattern,
            }
        });
        tally.record(|| format!("dL/dscore[{k}]"), an.score_grads[k], numeric);
    }

    // parameter derivatives through the whole head
    for (name, grad) in &an.params {
        let t = params.tensors.iter().position(|(n, _)| n == name).unwrap();
        if grad.len() != params.tensors[t].1.len() {
            return Err(Error::Internal(format!(
                "{name}: {} gradient entries for {} parameters",
                grad.len(),
                params.tensors[t].1.len()
            )));
        }
        for (k, &analytic) in grad.iter().enumerate() {
            let numeric = derivative(&base.pattern, |h| {
                let mut p = params.clone();
                p.tensors[t].1[k] += h;
                prob.evaluate(&p)
            });
            tally.record(|| format!("{name}[{k}]"), analytic, numeric);
        }
    }

    if forward_max_abs_diff > 1e-9 {
        tally.max_rel = f64::INFINITY;
        tally.worst = format!("forward scores disagree by {forward_max_abs_diff:.3e}");
    }
    Ok(ConfigReport {
        index,
        adaptor: variant,
        objective,
        channels: c,
        hidden: hd,
        batch: rows,
        forward_max_abs_diff,
        max_rel_err: tally.max_rel,
        worst: tally.worst,
        checked: tally.checked,
        skipped: tally.skipped,
    })
}

pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if opts.max_channels == 0 || opts.max_hidden == 0 || opts.max_batch == 0 {
        return Err(Error::InvalidArgument("gradcheck dims must be positive".into()));
    }
    if opts.configs == 0 {
        return Err(Error::InvalidArgument("gradcheck needs at least one config".into()));
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let configs = (0..opts.configs)
        .map(|i| run_config(i, opts, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let max_rel_err = configs.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let checked = configs.iter().map(|c| c.checked).sum();
    let skipped = configs.iter().map(|c| c.skipped).sum();
    Ok(GradcheckReport {
        seed: opts.seed,
        tolerance: opts.tolerance,
        max_rel_err,
        checked,
        skipped,
        passed: max_rel_err < opts.tolerance,
        seconds: started.elapsed().as_secs_f64(),
        configs,
    })
}
