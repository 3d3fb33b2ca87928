//! Deterministic optimization loop, per-step diagnostics and evaluation
//! against a tabular ground truth.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PreferenceTriple;
use crate::error::{Error, Result};
use crate::losses::{loss_and_grad, pair_terms, LossSpec};
use crate::policy::{Checkpoint, Policy, TrainablePolicy};
use crate::scalar::Real;
use crate::tabular::{forward_kl, reverse_kl, TabularDomain};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_WARMUP_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    CosineWarmup { warmup_fraction: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub optimizer: Optimizer,
    pub lr: f64,
    pub schedule: Schedule,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    /// Metrics are recorded at multiples of this step count and at the end.
    pub eval_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::adam(),
            lr: 0.01,
            schedule: Schedule::Constant,
            steps: 200,
            batch_size: 16,
            seed: 0,
            grad_clip: None,
            eval_every: 1,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be non-negative, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::invalid("batch_size and eval_every must be positive"));
        }
        if let Schedule::CosineWarmup { warmup_fraction } = self.schedule {
            if !(0.0..1.0).contains(&warmup_fraction) {
                return Err(Error::invalid(format!("warmup_fraction must lie in [0, 1), got {warmup_fraction}")));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::invalid(format!("grad_clip must be positive, got {c}")));
            }
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::invalid("adam constants out of range"));
            }
        }
        Ok(())
    }
}

/// Learning rate applied by update `step` (0-based).
///
/// Cosine schedule: linear ramp `lr·step/w` over the first
/// `w = ⌈warmup_fraction·steps⌉` updates, then `lr·½(1 + cos(π·progress))`
/// with `progress = (step − w)/(steps − w)`.
pub fn schedule_lr(cfg: &OptimConfig, step: usize) -> Result<f64> {
    if step >= cfg.steps {
        return Err(Error::invalid(format!("step {step} outside 0..{}", cfg.steps)));
    }
    Ok(match cfg.schedule {
        Schedule::Constant => cfg.lr,
        Schedule::CosineWarmup { warmup_fraction } => {
            let w = (warmup_fraction * cfg.steps as f64).ceil() as usize;
            if step < w {
                cfg.lr * step as f64 / w as f64
            } else {
                let progress = (step - w) as f64 / (cfg.steps - w) as f64;
                cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    })
}

/// Full-dataset diagnostics after `step` updates. `lr` is the rate of the
/// update that produced this state (0 for the initial row).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub mean_chosen_logp: f64,
    pub mean_rejected_logp: f64,
    pub margin: f64,
    pub mean_chosen_log_ratio: f64,
    pub mean_rejected_log_ratio: f64,
    pub reverse_kl_to_chosen: Option<f64>,
    pub forward_kl_to_chosen: Option<f64>,
    pub expected_true_reward: Option<f64>,
    pub lr: f64,
}

pub const METRICS_HEADER: [&str; 11] = [
    "step",
    "loss",
    "mean_chosen_logp",
    "mean_rejected_logp",
    "margin",
    "mean_chosen_log_ratio",
    "mean_rejected_log_ratio",
    "reverse_kl_to_chosen",
    "forward_kl_to_chosen",
    "expected_true_reward",
    "lr",
];

const MISSING: &str = "NA";

fn opt_cell(v: Option<f64>) -> String {
    v.map_or_else(|| MISSING.to_string(), |x| x.to_string())
}

impl MetricsRow {
    pub fn to_tsv(&self) -> String {
        [
            self.step.to_string(),
            self.loss.to_string(),
            self.mean_chosen_logp.to_string(),
            self.mean_rejected_logp.to_string(),
            self.margin.to_string(),
            self.mean_chosen_log_ratio.to_string(),
            self.mean_rejected_log_ratio.to_string(),
            opt_cell(self.reverse_kl_to_chosen),
            opt_cell(self.forward_kl_to_chosen),
            opt_cell(self.expected_true_reward),
            self.lr.to_string(),
        ]
        .join("\t")
    }

    pub fn from_tsv(line: &str) -> Result<Self> {
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != METRICS_HEADER.len() {
            return Err(Error::invalid(format!("metrics row has {} cells, expected {}", cells.len(), METRICS_HEADER.len())));
        }
        let num = |i: usize| -> Result<f64> {
            cells[i]
                .parse()
                .map_err(|_| Error::invalid(format!("column `{}`: `{}` is not a number", METRICS_HEADER[i], cells[i])))
        };
        let opt = |i: usize| -> Result<Option<f64>> {
            if cells[i] == MISSING {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        Ok(Self {
            step: cells[0]
                .parse()
                .map_err(|_| Error::invalid(format!("bad step `{}`", cells[0])))?,
            loss: num(1)?,
            mean_chosen_logp: num(2)?,
            mean_rejected_logp: num(3)?,
            margin: num(4)?,
            mean_chosen_log_ratio: num(5)?,
            mean_rejected_log_ratio: num(6)?,
            reverse_kl_to_chosen: opt(7)?,
            forward_kl_to_chosen: opt(8)?,
            expected_true_reward: opt(9)?,
            lr: num(10)?,
        })
    }
}

pub fn metrics_to_tsv(rows: &[MetricsRow]) -> String {
    let mut out = METRICS_HEADER.join("\t");
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_tsv());
        out.push('\n');
    }
    out
}

pub fn metrics_from_tsv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.split('\t').eq(METRICS_HEADER.iter().copied()) => {}
        _ => return Err(Error::invalid("metrics log header does not match")),
    }
    lines.filter(|l| !l.is_empty()).map(MetricsRow::from_tsv).collect()
}

pub fn write_metrics(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, metrics_to_tsv(rows)).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    metrics_from_tsv(&text)
}

/// Policy quality against the ground truth of a tabular domain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub reverse_kl_to_chosen: f64,
    pub forward_kl_to_chosen: f64,
    pub expected_true_reward: f64,
    /// `E_{π_chosen}[ln π_θ − ln π_ref]`, prompt-averaged.
    pub chosen_log_ratio: f64,
    /// `E_{π_ref}[ln π_θ − ln π_ref]`, prompt-averaged.
    pub reference_log_ratio: f64,
}

/// Tabulates both policies over the domain's responses (renormalized over
/// the enumerated set) and scores `policy` against `π_chosen` and the true
/// reward. `ref_policy` is tabulated the same way for the log-ratios.
pub fn evaluate<T: Real, P: Policy<T> + ?Sized, Q: Policy<T> + ?Sized>(policy: &P, ref_policy: &Q, domain: &TabularDomain<T>) -> Result<Evaluation> {
    let model = policy.policy_table(domain)?;
    let reference = ref_policy.policy_table(domain)?;
    let n = T::from_usize_lossy(domain.num_prompts());
    let (mut rkl, mut fkl, mut rew, mut fc, mut fr) = (T::zero(), T::zero(), T::zero(), T::zero(), T::zero());
    for x in 0..domain.num_prompts() {
        let (q, c, r) = (model.row(x), domain.pi_chosen(x), reference.row(x));
        rkl += reverse_kl(c, q)?;
        fkl += forward_kl(c, q)?;
        rew += q.iter().zip(domain.reward(x)).map(|(p, &v)| p * v).sum::<T>();
        for y in 0..q.len() {
            if q.get(y) <= T::zero() || r.get(y) <= T::zero() {
                return Err(Error::Support(format!("prompt {x}, response {y}: zero policy mass")));
            }
            let f = q.get(y).ln() - r.get(y).ln();
            fc += c.get(y) * f;
            fr += domain.pi_ref(x).get(y) * f;
        }
    }
    Ok(Evaluation {
        reverse_kl_to_chosen: (rkl / n).to_f64_lossy(),
        forward_kl_to_chosen: (fkl / n).to_f64_lossy(),
        expected_true_reward: (rew / n).to_f64_lossy(),
        chosen_log_ratio: (fc / n).to_f64_lossy(),
        reference_log_ratio: (fr / n).to_f64_lossy(),
    })
}

/// Computes one metrics row over the whole dataset.
pub fn measure<T: Real, P: Policy<T> + ?Sized, Q: Policy<T> + ?Sized>(
    spec: &LossSpec,
    policy: &P,
    ref_policy: &Q,
    data: &[PreferenceTriple],
    domain: Option<&TabularDomain<T>>,
    step: usize,
    lr: f64,
) -> Result<MetricsRow> {
    if data.is_empty() {
        return Err(Error::invalid("cannot measure on an empty dataset"));
    }
    let (mut loss, mut lw, mut ll, mut fw, mut fl) = (T::zero(), T::zero(), T::zero(), T::zero(), T::zero());
    for t in data {
        let p = pair_terms(spec, policy, ref_policy, t)?;
        loss += p.loss;
        lw += p.chosen.log_prob;
        ll += p.rejected.log_prob;
        fw += p.chosen.value;
        fl += p.rejected.value;
    }
    let n = T::from_usize_lossy(data.len());
    let (lw, ll) = ((lw / n).to_f64_lossy(), (ll / n).to_f64_lossy());
    let eval = domain.map(|d| evaluate(policy, ref_policy, d)).transpose()?;
    Ok(MetricsRow {
        step,
        loss: (loss / n).to_f64_lossy(),
        mean_chosen_logp: lw,
        mean_rejected_logp: ll,
        margin: lw - ll,
        mean_chosen_log_ratio: (fw / n).to_f64_lossy(),
        mean_rejected_log_ratio: (fl / n).to_f64_lossy(),
        reverse_kl_to_chosen: eval.as_ref().map(|e| e.reverse_kl_to_chosen),
        forward_kl_to_chosen: eval.as_ref().map(|e| e.forward_kl_to_chosen),
        expected_true_reward: eval.as_ref().map(|e| e.expected_true_reward),
        lr,
    })
}

/// Training data plus the optional ground truth used for tabular metrics.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a, T> {
    pub triples: &'a [PreferenceTriple],
    pub domain: Option<&'a TabularDomain<T>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<P, T> {
    pub policy: P,
    pub metrics: Vec<MetricsRow>,
    pub checkpoint: Checkpoint<T>,
}

#[derive(Debug)]
pub enum TrainError<T> {
    Setup(Error),
    /// A non-finite loss or gradient at `step`; `last_good` holds the
    /// parameters before that update.
    Diverged {
        step: usize,
        message: String,
        last_good: Box<Checkpoint<T>>,
        metrics: Vec<MetricsRow>,
    },
}

impl<T> fmt::Display for TrainError<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Setup(e) => write!(f, "{e}"),
            TrainError::Diverged { step, message, .. } => write!(f, "training diverged at step {step}: {message}"),
        }
    }
}

impl<T: fmt::Debug> std::error::Error for TrainError<T> {}

impl<T> From<Error> for TrainError<T> {
    fn from(e: Error) -> Self {
        TrainError::Setup(e)
    }
}

struct AdamState<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Runs `cfg.steps` mini-batch updates of `policy` against the frozen
/// `ref_policy`. Batches come from a seeded reshuffle of `data.triples` at
/// each epoch; the last batch of an epoch may be short.
pub fn train<T, P, Q>(policy: P, ref_policy: &Q, data: TrainData<'_, T>, spec: &LossSpec, cfg: &OptimConfig) -> std::result::Result<TrainOutcome<P, T>, TrainError<T>>
where
    T: Real,
    P: TrainablePolicy<T>,
    Q: Policy<T> + ?Sized,
{
    cfg.validate()?;
    if data.triples.is_empty() {
        return Err(Error::invalid("training dataset is empty").into());
    }
    let mut policy = policy;
    let n_params = policy.num_params();
    let mut adam = AdamState {
        m: vec![T::zero(); n_params],
        v: vec![T::zero(); n_params],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.triples.len()).collect();
    let mut cursor = order.len();
    let mut metrics = vec![measure(spec, &policy, ref_policy, data.triples, data.domain, 0, 0.0)?];
    let mut batch = Vec::with_capacity(cfg.batch_size);

    for step in 0..cfg.steps {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        batch.clear();
        batch.extend(order[cursor..end].iter().map(|&i| data.triples[i].clone()));
        cursor = end;

        let diverged = |message: String, policy: &P, metrics: Vec<MetricsRow>| TrainError::Diverged {
            step,
            message,
            last_good: Box::new(policy.checkpoint()),
            metrics,
        };
        let (value, grad) = match loss_and_grad(spec, &policy, ref_policy, &batch) {
            Ok(v) => v,
            Err(Error::NonFinite(m)) => return Err(diverged(m, &policy, metrics)),
            Err(e) => return Err(e.into()),
        };
        let mut g = grad.values;
        if !value.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(diverged(format!("{} loss {value} or its gradient is not finite", spec.name()), &policy, metrics));
        }
        if let Some(clip) = cfg.grad_clip {
            let norm = g.iter().map(|v| *v * *v).sum::<T>().sqrt();
            let clip = T::lit(clip);
            if norm > clip {
                let s = clip / norm;
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
        let lr_f = schedule_lr(cfg, step)?;
        let snapshot = policy.params().to_vec();
        let lr = T::lit(lr_f);
        let params = policy.params_mut();
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (p, gi) in params.iter_mut().zip(&g) {
                    *p -= lr * *gi;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
                let t = (step + 1) as i32;
                let c1 = T::one() - b1.powi(t);
                let c2 = T::one() - b2.powi(t);
                for (i, p) in params.iter_mut().enumerate() {
                    let gi = g[i];
                    adam.m[i] = b1 * adam.m[i] + (T::one() - b1) * gi;
                    adam.v[i] = b2 * adam.v[i] + (T::one() - b2) * gi * gi;
                    let mhat = adam.m[i] / c1;
                    let vhat = adam.v[i] / c2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
        if policy.params().iter().any(|v| !v.is_finite()) {
            policy.params_mut().copy_from_slice(&snapshot);
            return Err(diverged("parameters became non-finite".into(), &policy, metrics));
        }
        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            match measure(spec, &policy, ref_policy, data.triples, data.domain, done, lr_f) {
                Ok(row) if row.loss.is_finite() => metrics.push(row),
                Ok(row) => {
                    policy.params_mut().copy_from_slice(&snapshot);
                    return Err(diverged(format!("full-data loss {} after update", row.loss), &policy, metrics));
                }
                Err(Error::NonFinite(m) | Error::Support(m)) => {
                    policy.params_mut().copy_from_slice(&snapshot);
                    return Err(diverged(m, &policy, metrics));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
    let checkpoint = policy.checkpoint();
    Ok(TrainOutcome {
        policy,
        metrics,
        checkpoint,
    })
}

/// Extremal and final values of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub name: String,
    pub initial_chosen_logp: f64,
    pub final_chosen_logp: f64,
    pub min_chosen_logp: f64,
    /// `initial − min` of `mean_chosen_logp` over the run.
    pub chosen_decline: f64,
    pub initial_margin: f64,
    pub final_margin: f64,
    pub max_margin: f64,
    pub final_reverse_kl: Option<f64>,
    pub min_reverse_kl: Option<f64>,
}

pub const SUMMARY_HEADER: [&str; 10] = [
    "run",
    "initial_chosen_logp",
    "final_chosen_logp",
    "min_chosen_logp",
    "chosen_decline",
    "initial_margin",
    "final_margin",
    "max_margin",
    "final_reverse_kl",
    "min_reverse_kl",
];

impl RunSummary {
    pub fn to_tsv(&self) -> String {
        [
            self.name.clone(),
            self.initial_chosen_logp.to_string(),
            self.final_chosen_logp.to_string(),
            self.min_chosen_logp.to_string(),
            self.chosen_decline.to_string(),
            self.initial_margin.to_string(),
            self.final_margin.to_string(),
            self.max_margin.to_string(),
            opt_cell(self.final_reverse_kl),
            opt_cell(self.min_reverse_kl),
        ]
        .join("\t")
    }
}

pub fn summaries_to_tsv(rows: &[RunSummary]) -> String {
    let mut out = SUMMARY_HEADER.join("\t");
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_tsv());
        out.push('\n');
    }
    out
}

pub fn summarize(name: &str, log: &[MetricsRow]) -> Result<RunSummary> {
    let (first, last) = match (log.first(), log.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::invalid(format!("run `{name}` has an empty log"))),
    };
    let min_chosen = log.iter().map(|r| r.mean_chosen_logp).fold(f64::INFINITY, f64::min);
    let kls: Vec<f64> = log.iter().filter_map(|r| r.reverse_kl_to_chosen).collect();
    Ok(RunSummary {
        name: name.to_string(),
        initial_chosen_logp: first.mean_chosen_logp,
        final_chosen_logp: last.mean_chosen_logp,
        min_chosen_logp: min_chosen,
        chosen_decline: first.mean_chosen_logp - min_chosen,
        initial_margin: first.margin,
        final_margin: last.margin,
        max_margin: log.iter().map(|r| r.margin).fold(f64::NEG_INFINITY, f64::max),
        final_reverse_kl: last.reverse_kl_to_chosen,
        min_reverse_kl: (!kls.is_empty()).then(|| kls.iter().copied().fold(f64::INFINITY, f64::min)),
    })
}

/// Summarizes runs that share one step grid.
pub fn compare_runs(logs: &[(String, Vec<MetricsRow>)]) -> Result<Vec<RunSummary>> {
    let (_, reference) = logs.first().ok_or_else(|| Error::invalid("no runs to compare"))?;
    for (name, log) in logs {
        if log.len() != reference.len() || log.iter().zip(reference).any(|(a, b)| a.step != b.step) {
            return Err(Error::invalid(format!("run `{name}` does not share the step grid of `{}`", logs[0].0)));
        }
    }
    logs.iter().map(|(name, log)| summarize(name, log)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_domain, GenConfig, PairSampler};
    use crate::dre::HKind;
    use crate::policy::{clone_frozen, TabularSoftmaxPolicy, TinySeqPolicy};
    use crate::tabular::PolicyTable;
    use approx::assert_abs_diff_eq;

    fn world(seed: u64, pairs: usize) -> (TabularDomain<f64>, Vec<PreferenceTriple>) {
        let t = build_domain::<f64>(&GenConfig {
            seed,
            ..GenConfig::default()
        })
        .unwrap();
        let s = PairSampler::new(&t.domain).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..t.domain.num_prompts())
            .flat_map(|x| (0..pairs).map(move |_| x))
            .map(|x| s.sample(x, &mut rng).unwrap())
            .collect();
        (t.domain, data)
    }

    fn sgd(lr: f64, steps: usize) -> OptimConfig {
        OptimConfig {
            optimizer: Optimizer::Sgd,
            lr,
            steps,
            ..OptimConfig::default()
        }
    }

    #[test]
    fn schedule_examples() {
        let cfg = OptimConfig {
            schedule: Schedule::CosineWarmup { warmup_fraction: 0.1 },
            lr: 0.5,
            steps: 100,
            ..OptimConfig::default()
        };
        assert_eq!(schedule_lr(&cfg, 0).unwrap(), 0.0);
        assert_eq!(schedule_lr(&cfg, 1).unwrap(), 0.05);
        assert_eq!(schedule_lr(&cfg, 10).unwrap(), 0.5);
        assert!(schedule_lr(&cfg, 99).unwrap() < 0.01 * 0.5);
        assert!(schedule_lr(&cfg, 100).is_err());
        let lrs: Vec<f64> = (10..100).map(|s| schedule_lr(&cfg, s).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        let flat = OptimConfig { lr: 0.3, ..cfg };
        let flat = OptimConfig {
            schedule: Schedule::Constant,
            ..flat
        };
        assert!((0..100).all(|s| schedule_lr(&flat, s).unwrap() == 0.3));
    }

    #[test]
    fn config_validation() {
        let bad = OptimConfig {
            schedule: Schedule::CosineWarmup { warmup_fraction: 1.0 },
            ..OptimConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(OptimConfig { lr: -1.0, ..OptimConfig::default() }.validate().is_err());
        assert!(OptimConfig {
            grad_clip: Some(0.0),
            ..OptimConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn zero_lr_leaves_parameters_untouched() {
        let (d, data) = world(1, 16);
        let p = TabularSoftmaxPolicy::from_reference(&d).unwrap();
        let r = clone_frozen(&p);
        for opt in [Optimizer::Sgd, Optimizer::adam()] {
            let cfg = OptimConfig {
                optimizer: opt,
                lr: 0.0,
                steps: 20,
                ..OptimConfig::default()
            };
            let out = train(p.clone(), &r, TrainData { triples: &data, domain: Some(&d) }, &LossSpec::dil(HKind::Lsif), &cfg).unwrap();
            assert_eq!(out.policy.params(), p.params());
        }
    }

    #[test]
    fn sft_single_prompt_is_monotone() {
        let t = build_domain::<f64>(&GenConfig {
            num_prompts: 1,
            ..GenConfig::default()
        })
        .unwrap();
        let s = PairSampler::new(&t.domain).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data: Vec<_> = (0..40).map(|_| s.sample(0, &mut rng).unwrap()).collect();
        let p = TabularSoftmaxPolicy::from_reference(&t.domain).unwrap();
        let r = clone_frozen(&p);
        let cfg = OptimConfig {
            batch_size: data.len(),
            ..sgd(0.5, 100)
        };
        let out = train(p, &r, TrainData { triples: &data, domain: None }, &LossSpec::sft(), &cfg).unwrap();
        assert_eq!(out.metrics.len(), 101);
        for w in out.metrics.windows(2) {
            assert!(w[1].loss <= w[0].loss + 1e-12, "{} -> {}", w[0].loss, w[1].loss);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (d, data) = world(2, 12);
        let run = || {
            let p = TinySeqPolicy::<f64>::new(d.vocab_size(), 6, 4, 3).unwrap();
            let r = clone_frozen(&p);
            let cfg = OptimConfig {
                steps: 15,
                batch_size: 5,
                seed: 9,
                ..OptimConfig::default()
            };
            let out = train(p, &r, TrainData { triples: &data, domain: Some(&d) }, &LossSpec::dpo(0.1).unwrap(), &cfg).unwrap();
            metrics_to_tsv(&out.metrics)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn margin_identity_and_tsv_round_trip() {
        let (d, data) = world(3, 8);
        let p = TabularSoftmaxPolicy::from_reference(&d).unwrap();
        let r = clone_frozen(&p);
        let out = train(p, &r, TrainData { triples: &data, domain: Some(&d) }, &LossSpec::dil(HKind::Bce), &sgd(0.5, 10)).unwrap();
        for row in &out.metrics {
            assert!((row.margin - (row.mean_chosen_logp - row.mean_rejected_logp)).abs() < 1e-9);
        }
        let text = metrics_to_tsv(&out.metrics);
        assert!(text.starts_with("step\tloss\tmean_chosen_logp"));
        assert_eq!(metrics_from_tsv(&text).unwrap(), out.metrics);
        let tiny_row = MetricsRow {
            reverse_kl_to_chosen: None,
            ..out.metrics[0].clone()
        };
        assert!(tiny_row.to_tsv().contains("\tNA\t"));
        assert_eq!(MetricsRow::from_tsv(&tiny_row.to_tsv()).unwrap(), tiny_row);
    }

    #[test]
    fn gradient_clip_bounds_sgd_update() {
        let (d, data) = world(4, 8);
        let mut p = TabularSoftmaxPolicy::from_reference(&d).unwrap();
        let r = clone_frozen(&p);
        let spec = LossSpec::dil(HKind::Lsif);
        for step in 0..10 {
            let cfg = OptimConfig {
                grad_clip: Some(0.05),
                seed: step,
                ..sgd(2.0, 1)
            };
            let before = p.params().to_vec();
            let out = train(p, &r, TrainData { triples: &data, domain: None }, &spec, &cfg).unwrap();
            let delta: f64 = out.policy.params().iter().zip(&before).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            assert!(delta <= 2.0 * 0.05 * (1.0 + 1e-12), "{delta}");
            p = out.policy;
        }
    }

    /// Tabular policy whose log-probabilities turn NaN once the first
    /// logit exceeds a threshold.
    #[derive(Debug, Clone)]
    struct Faulty {
        inner: TabularSoftmaxPolicy<f64>,
        threshold: f64,
    }

    impl Policy<f64> for Faulty {
        fn layout(&self) -> crate::policy::Layout {
            self.inner.layout()
        }

        fn params(&self) -> &[f64] {
            self.inner.params()
        }

        fn log_prob(&self, x: &crate::data::TokenSeq, y: &crate::data::TokenSeq) -> Result<f64> {
            let lp = self.inner.log_prob(x, y)?;
            Ok(if self.inner.params()[0] > self.threshold { f64::NAN } else { lp })
        }

        fn accumulate_grad_log_prob(&self, x: &crate::data::TokenSeq, y: &crate::data::TokenSeq, scale: f64, grad: &mut [f64]) -> Result<f64> {
            self.inner.accumulate_grad_log_prob(x, y, scale, grad)?;
            self.log_prob(x, y)
        }

        fn checkpoint(&self) -> Checkpoint<f64> {
            self.inner.checkpoint()
        }
    }

    impl TrainablePolicy<f64> for Faulty {
        fn params_mut(&mut self) -> &mut [f64] {
            self.inner.params_mut()
        }
    }

    #[test]
    fn divergence_reports_last_good_checkpoint() {
        let (d, data) = world(5, 8);
        let inner = TabularSoftmaxPolicy::from_reference(&d).unwrap();
        let r = clone_frozen(&inner);
        let p = Faulty {
            threshold: inner.params()[0] + 0.5,
            inner,
        };
        let triples: Vec<_> = data.iter().filter(|t| t.chosen == *d.response(0, 0)).cloned().collect();
        assert!(!triples.is_empty());
        let err = train(p, &r, TrainData { triples: &triples, domain: None }, &LossSpec::sft(), &sgd(0.05, 500)).unwrap_err();
        match err {
            TrainError::Diverged { step, last_good, metrics, .. } => {
                assert!(step >= 1);
                assert!(last_good.params.values[0] <= r.params()[0] + 0.5);
                assert!(last_good.params.values.iter().all(|v| v.is_finite()));
                assert_eq!(metrics.len(), step + 1);
            }
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn evaluate_examples() {
        let (d, _) = world(6, 1);
        let logits = (0..d.num_prompts()).map(|x| d.pi_chosen(x).iter().map(f64::ln).collect()).collect();
        let chosen = TabularSoftmaxPolicy::from_logits(&d, logits).unwrap();
        let reference = TabularSoftmaxPolicy::from_reference(&d).unwrap();
        let e = evaluate(&chosen, &reference, &d).unwrap();
        assert!(e.reverse_kl_to_chosen < 1e-10);
        assert!(e.forward_kl_to_chosen < 1e-10);

        let e = evaluate(&reference, &reference, &d).unwrap();
        let direct: f64 = (0..d.num_prompts())
            .map(|x| d.pi_ref(x).iter().zip(d.reward(x)).map(|(p, r)| p * r).sum::<f64>())
            .sum::<f64>()
            / d.num_prompts() as f64;
        assert_abs_diff_eq!(e.expected_true_reward, direct, epsilon = 1e-12);
        assert_eq!(e.reference_log_ratio, 0.0);

        let tiny = TinySeqPolicy::<f64>::with_defaults(d.vocab_size(), 1).unwrap();
        let table: PolicyTable<f64> = tiny.policy_table(&d).unwrap();
        for x in 0..d.num_prompts() {
            assert!((table.row(x).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(evaluate(&tiny, &tiny, &d).unwrap().reverse_kl_to_chosen > 0.0);
    }

    #[test]
    fn lsif_training_moves_toward_chosen() {
        let t = build_domain::<f64>(&GenConfig {
            num_prompts: 4,
            responses_per_prompt: 8,
            seed: 8,
            ..GenConfig::default()
        })
        .unwrap();
        let d = &t.domain;
        let s = PairSampler::new(d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<_> = (0..4).flat_map(|x| (0..200).map(move |_| x)).map(|x| s.sample(x, &mut rng).unwrap()).collect();
        let p = TabularSoftmaxPolicy::from_reference(d).unwrap();
        let r = clone_frozen(&p);
        let cfg = OptimConfig {
            lr: 0.05,
            steps: 400,
            batch_size: 64,
            eval_every: 50,
            ..OptimConfig::default()
        };
        let out = train(p.clone(), &r, TrainData { triples: &data, domain: Some(d) }, &LossSpec::dil(HKind::Lsif), &cfg).unwrap();
        let before = evaluate(&p, &r, d).unwrap().reverse_kl_to_chosen;
        let after = evaluate(&out.policy, &r, d).unwrap().reverse_kl_to_chosen;
        assert!(after < before, "{before} -> {after}");
        assert_eq!(out.metrics.iter().map(|m| m.step).collect::<Vec<_>>(), vec![0, 50, 100, 150, 200, 250, 300, 350, 400]);
    }

    #[test]
    fn compare_examples() {
        let (d, data) = world(7, 8);
        let p = TabularSoftmaxPolicy::from_reference(&d).unwrap();
        let r = clone_frozen(&p);
        let log = train(p, &r, TrainData { triples: &data, domain: Some(&d) }, &LossSpec::dpo(0.5).unwrap(), &sgd(0.5, 12)).unwrap().metrics;
        let s = compare_runs(&[("a".into(), log.clone()), ("b".into(), log.clone())]).unwrap();
        assert_eq!(
            RunSummary {
                name: "b".into(),
                ..s[0].clone()
            },
            s[1]
        );
        assert!(s[0].chosen_decline >= 0.0);
        assert!(compare_runs(&[]).is_err());
        assert!(compare_runs(&[("a".into(), log.clone()), ("b".into(), log[..5].to_vec())]).is_err());
        let table = summaries_to_tsv(&s);
        assert_eq!(table.lines().count(), 3);
        assert!(table.lines().next().unwrap().contains("chosen_decline"));
    }
}
