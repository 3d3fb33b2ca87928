//! Self-contained verification suites.
//!
//! Every suite generates its own domains from a seed, runs a set of checks
//! and reports each one as a measured value against a threshold. The same
//! suites back the `dilab verify` command and the acceptance tests.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{PreferenceTriple, TokenSeq};
use crate::datagen::{binomial_z, build_domain, chi_square_gof, derive_chosen_distribution, GenConfig, PairSampler, RewardSpec};
use crate::dre::{cpc_loss, cpc_optimal_critic_check, fit_tabular_ratio, max_ratio_error, FitConfig, HKind};
use crate::error::{Error, Result};
use crate::losses::{dpo_loss, loss_and_grad, LossSpec};
use crate::policy::{check_policy_gradient, TabularSoftmaxPolicy, TinySeqPolicy, TrainablePolicy};
use crate::tabular::{check_bilevel_equivalence, il_reward_loss_equivalence, self_normalization_check, TabularDomain};

pub const RANDOM_DOMAINS: usize = 50;
pub const PERTURBATIONS: usize = 200;
pub const DPO_CPC_PAIRS: usize = 10_000;
pub const DPO_CPC_BETAS: [f64; 4] = [0.01, 0.1, 1.0, 2.5];
pub const REWARD_LOSS_PAIRS: usize = 1_000;
pub const RECOVERY_DOMAINS: usize = 5;
pub const CPC_BETAS: [f64; 2] = [0.1, 1.0];
pub const GRADIENT_POINTS: usize = 10;
pub const BT_DRAWS: usize = 100_000;
pub const BT_ALPHA: f64 = 0.001;
pub const BT_MAX_Z: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Prop1,
    DreRecovery,
    DpoCpc,
    Gradients,
    SelfNorm,
    BtStats,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Prop1,
        Suite::DreRecovery,
        Suite::DpoCpc,
        Suite::Gradients,
        Suite::SelfNorm,
        Suite::BtStats,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Prop1 => "prop1",
            Suite::DreRecovery => "dre-recovery",
            Suite::DpoCpc => "dpo-cpc",
            Suite::Gradients => "gradients",
            Suite::SelfNorm => "self-norm",
            Suite::BtStats => "bt-stats",
        }
    }

    /// Parses a `--suite` argument; `all` expands to every suite.
    pub fn parse_selection(s: &str) -> Result<Vec<Suite>> {
        if s == "all" {
            return Ok(Suite::ALL.to_vec());
        }
        Ok(vec![s.parse()?])
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL.into_iter().find(|suite| suite.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Suite::ALL.iter().map(|s| s.name()).collect();
            Error::invalid(format!("unknown suite `{s}`; valid: {}, all", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Bound {
    /// Passes when `value < threshold`.
    Below,
    /// Passes when `value > threshold`.
    Above,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: Bound,
    pub threshold: f64,
    pub pass: bool,
}

impl Check {
    pub fn below(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self::new(name.into(), value, Bound::Below, threshold)
    }

    pub fn above(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self::new(name.into(), value, Bound::Above, threshold)
    }

    fn new(name: String, value: f64, bound: Bound, threshold: f64) -> Self {
        let pass = match bound {
            Bound::Below => value < threshold,
            Bound::Above => value > threshold,
        };
        Self {
            name,
            value,
            bound,
            threshold,
            pass,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Replaces the threshold of every upper-bound check.
    pub tol: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub seed: u64,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failed(&self) -> usize {
        self.checks.iter().filter(|c| !c.pass).count()
    }

    /// One `key=value` line per check.
    pub fn check_lines(&self) -> Vec<String> {
        self.checks
            .iter()
            .map(|c| {
                let op = match c.bound {
                    Bound::Below => "<",
                    Bound::Above => ">",
                };
                format!(
                    "check suite={} name={} value={:e} bound={op} threshold={:e} pass={}",
                    self.suite, c.name, c.value, c.threshold, c.pass
                )
            })
            .collect()
    }

    pub fn summary_line(&self) -> String {
        format!(
            "suite={} seed={} checks={} failed={} pass={}",
            self.suite,
            self.seed,
            self.checks.len(),
            self.failed(),
            self.pass()
        )
    }
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<SuiteReport> {
    if let Some(tol) = opts.tol {
        if !(tol >= 0.0 && tol.is_finite()) {
            return Err(Error::invalid(format!("tol must be a finite non-negative number, got {tol}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut checks = match suite {
        Suite::Prop1 => prop1(&mut rng)?,
        Suite::DreRecovery => dre_recovery(&mut rng)?,
        Suite::DpoCpc => dpo_cpc(&mut rng),
        Suite::Gradients => gradients(&mut rng)?,
        Suite::SelfNorm => self_norm(&mut rng)?,
        Suite::BtStats => bt_stats(&mut rng)?,
    };
    if let Some(tol) = opts.tol {
        for c in checks.iter_mut().filter(|c| c.bound == Bound::Below) {
            *c = Check::below(std::mem::take(&mut c.name), c.value, tol);
        }
    }
    Ok(SuiteReport {
        suite,
        seed: opts.seed,
        checks,
    })
}

/// A random world with at most `max_prompts` prompts and between 2 and
/// `max_responses` responses per prompt.
pub fn random_domain<R: Rng + ?Sized>(rng: &mut R, max_prompts: usize, max_responses: usize) -> Result<TabularDomain<f64>> {
    let cfg = GenConfig {
        num_prompts: rng.gen_range(1..=max_prompts),
        responses_per_prompt: rng.gen_range(2..=max_responses),
        ..random_config(rng)
    };
    Ok(build_domain::<f64>(&cfg)?.domain)
}

/// A random world with exactly the given shape.
pub fn random_domain_of_shape<R: Rng + ?Sized>(rng: &mut R, prompts: usize, responses: usize) -> Result<TabularDomain<f64>> {
    let cfg = GenConfig {
        num_prompts: prompts,
        responses_per_prompt: responses,
        ..random_config(rng)
    };
    Ok(build_domain::<f64>(&cfg)?.domain)
}

fn random_config<R: Rng + ?Sized>(rng: &mut R) -> GenConfig {
    GenConfig {
        reward: RewardSpec::Gaussian {
            scale: rng.gen_range(0.5..2.0),
        },
        ref_concentration: rng.gen_range(0.5..2.0),
        seed: rng.gen(),
        ..GenConfig::default()
    }
}

fn prop1(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let mut max_tv = 0.0_f64;
    let mut min_gap = f64::INFINITY;
    for _ in 0..RANDOM_DOMAINS {
        let d = random_domain(rng, 8, 16)?;
        let rep = check_bilevel_equivalence(&d, 1e-10, PERTURBATIONS, rng)?;
        max_tv = max_tv.max(rep.upper_level_tv);
        min_gap = min_gap.min(rep.lower_level_gap);
    }
    let mut max_loss_diff = 0.0_f64;
    for _ in 0..REWARD_LOSS_PAIRS {
        let (rw, rl): (f64, f64) = (rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0));
        let (lhs, rhs) = il_reward_loss_equivalence(rw, rl);
        max_loss_diff = max_loss_diff.max((lhs - rhs).abs());
    }
    Ok(vec![
        Check::below("max_tv_to_chosen", max_tv, 1e-10),
        Check::above("min_perturbation_gap", min_gap, 0.0),
        Check::below("max_reward_loss_form_diff", max_loss_diff, 1e-12),
    ])
}

fn dre_recovery(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let domains = (0..RECOVERY_DOMAINS)
        .map(|_| random_domain_of_shape(rng, 4, 8))
        .collect::<Result<Vec<_>>>()?;
    let mut checks = Vec::new();
    for h in [HKind::Lsif, HKind::Ukl, HKind::Bce] {
        let mut worst = 0.0_f64;
        for d in &domains {
            let fit = fit_tabular_ratio(h, d, &FitConfig::default())?;
            worst = worst.max(max_ratio_error(&fit.model, d));
        }
        checks.push(Check::below(format!("max_ratio_error_{h}"), worst, 1e-3));
    }
    let mut worst = 0.0_f64;
    for d in &domains {
        for beta in CPC_BETAS {
            let rep = cpc_optimal_critic_check(d, beta, 1e-3)?;
            worst = worst.max(rep.max_pair_error * beta);
        }
    }
    checks.push(Check::below("max_cpc_score_diff_error", worst, 1e-3));
    Ok(checks)
}

fn dpo_cpc(rng: &mut ChaCha8Rng) -> Vec<Check> {
    let mut worst = 0.0_f64;
    for _ in 0..DPO_CPC_PAIRS {
        let (fw, fl) = (rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0));
        for beta in DPO_CPC_BETAS {
            let diff = (dpo_loss(fw, fl, beta) - cpc_loss(1.0, beta * fw, beta * fl)).abs();
            worst = worst.max(diff);
        }
    }
    vec![Check::below("max_dpo_cpc_diff", worst, 1e-12)]
}

/// Every loss the trainer accepts, with two DPO temperatures.
pub fn gradient_specs() -> Vec<LossSpec> {
    vec![
        LossSpec::dil(HKind::Lsif),
        LossSpec::dil(HKind::Ukl),
        LossSpec::dil(HKind::Bce),
        LossSpec::dpo(0.1).expect("positive beta"),
        LossSpec::dpo(2.5).expect("positive beta"),
        LossSpec::sft(),
        LossSpec::bt_reward(),
    ]
}

fn gradients(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let mut checks = Vec::new();

    let d = random_domain_of_shape(rng, 3, 6)?;
    let tab_ref = TabularSoftmaxPolicy::from_reference(&d)?;
    let tab_batch = domain_batch(&d, rng, 12)?;

    let vocab = 6;
    let seq_ref = TinySeqPolicy::<f64>::new(vocab, 5, 4, rng.gen())?;
    let seq_batch = token_batch(vocab, rng, 4)?;

    for spec in gradient_specs() {
        let worst = worst_fd_error(&tab_ref, &spec, &tab_batch, 1.0, 1e-5, rng)?;
        checks.push(Check::below(format!("tabular_{spec}"), worst, 1e-5));

        let mut spec = spec;
        spec.ratio_config.length_normalize = true;
        let worst = worst_fd_error(&seq_ref, &spec, &seq_batch, 0.3, 1e-4, rng)?;
        checks.push(Check::below(format!("neural_{spec}"), worst, 1e-4));
    }
    Ok(checks)
}

fn worst_fd_error<P: TrainablePolicy<f64>>(
    reference: &P,
    spec: &LossSpec,
    batch: &[PreferenceTriple],
    spread: f64,
    eps: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut worst = 0.0_f64;
    for _ in 0..GRADIENT_POINTS {
        let mut p = reference.clone();
        for w in p.params_mut() {
            *w += rng.gen_range(-spread..spread);
        }
        let rep = check_policy_gradient(&p, eps, GRADIENT_POINTS, rng, |q| {
            loss_and_grad(spec, q, reference, batch).map(|(v, g)| (v, g.values))
        })?;
        worst = worst.max(rep.max_rel_error);
    }
    Ok(worst)
}

fn domain_batch(d: &TabularDomain<f64>, rng: &mut ChaCha8Rng, n: usize) -> Result<Vec<PreferenceTriple>> {
    (0..n)
        .map(|_| {
            let x = rng.gen_range(0..d.num_prompts());
            let k = d.num_responses(x);
            let a = rng.gen_range(0..k);
            let b = (a + rng.gen_range(1..k)) % k;
            PreferenceTriple::new(d.prompt(x).clone(), d.response(x, a).clone(), d.response(x, b).clone())
        })
        .collect()
}

fn token_batch(vocab: u32, rng: &mut ChaCha8Rng, n: usize) -> Result<Vec<PreferenceTriple>> {
    let mut seq = |len: usize| TokenSeq::new((0..len).map(|_| rng.gen_range(0..vocab)).collect(), vocab);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let (x, a, b) = (seq(2)?, seq(3)?, seq(3)?);
        if a != b {
            out.push(PreferenceTriple::new(x, a, b)?);
        }
    }
    Ok(out)
}

fn self_norm(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let mut worst = 0.0_f64;
    for _ in 0..RANDOM_DOMAINS {
        let d = random_domain(rng, 8, 16)?;
        worst = worst.max(self_normalization_check(&d)?.max_deviation);
    }
    Ok(vec![Check::below("max_partition_deviation", worst, 1e-12)])
}

fn bt_stats(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let cfg = GenConfig {
        seed: rng.gen(),
        ..GenConfig::default()
    };
    let d = build_domain::<f64>(&cfg)?.domain;
    let sampler = PairSampler::new(&d)?;
    let mut min_p = f64::INFINITY;
    for x in 0..d.num_prompts() {
        let counts = sampler.chosen_counts(x, BT_DRAWS, rng)?;
        let rep = chi_square_gof(&counts, d.pi_chosen(x).as_slice())?;
        min_p = min_p.min(rep.p_value);
    }
    checks.push(Check::above("min_chi_square_p_value", min_p, BT_ALPHA));

    for (label, gap, expected) in [("zero_gap", 0.0, 0.5), ("gap_ln3", 3.0_f64.ln(), 0.75)] {
        let two = TabularDomain::from_tables(vec![vec![0.5, 0.5]], vec![vec![gap, 0.0]], 1.0, vec![vec![0.5, 0.5]])?;
        let two = two.with_chosen(derive_chosen_distribution(&two)?)?;
        let counts = PairSampler::new(&two)?.chosen_counts(0, BT_DRAWS, rng)?;
        let z = binomial_z(counts[0], BT_DRAWS as u64, expected);
        checks.push(Check::below(format!("rate_z_{label}"), z.abs(), BT_MAX_Z));
    }
    Ok(checks)
}
