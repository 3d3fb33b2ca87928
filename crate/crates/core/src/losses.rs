//! Policy-parameterized alignment losses and their gradients.
//!
//! Every pairwise loss is a function of the log-ratios
//! `f = ln π_θ(y|x) − ln π_ref(y|x)` of the chosen and rejected responses.
//! Gradients compose `dℓ/df` with `∇ ln π_θ`; the reference policy is a
//! constant.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{PreferenceTriple, TokenSeq};
use crate::dre::HKind;
use crate::error::{Error, Result};
use crate::numeric::{sigmoid, softplus};
use crate::policy::{ParamVector, Policy};
use crate::scalar::Real;

pub const DEFAULT_CLAMP: f64 = 30.0;
pub const DEFAULT_DPO_BETA: f64 = 0.1;

/// Stable identifiers accepted by [`LossSpec::from_name`].
pub const LOSS_NAMES: [&str; 6] = ["dil-lsif", "dil-ukl", "dil-bce", "dpo", "sft", "bt-reward"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRatioConfig {
    pub length_normalize: bool,
    pub clamp: Option<f64>,
}

impl Default for LogRatioConfig {
    fn default() -> Self {
        Self {
            length_normalize: false,
            clamp: Some(DEFAULT_CLAMP),
        }
    }
}

impl LogRatioConfig {
    pub fn validate(&self) -> Result<()> {
        match self.clamp {
            Some(c) if !(c > 0.0 && c.is_finite()) => Err(Error::invalid(format!("clamp must be positive, got {c}"))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LossKind {
    Dil { h: HKind },
    Dpo { beta: f64 },
    Sft,
    BtReward,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Dil { h: HKind::Lsif } => "dil-lsif",
            LossKind::Dil { h: HKind::Ukl } => "dil-ukl",
            LossKind::Dil { h: HKind::Bce } => "dil-bce",
            LossKind::Dpo { .. } => "dpo",
            LossKind::Sft => "sft",
            LossKind::BtReward => "bt-reward",
        }
    }

    pub fn is_pairwise(&self) -> bool {
        !matches!(self, LossKind::Sft)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub ratio_config: LogRatioConfig,
}

impl LossSpec {
    pub fn new(kind: LossKind, ratio_config: LogRatioConfig) -> Result<Self> {
        if let LossKind::Dpo { beta } = kind {
            if !(beta > 0.0 && beta.is_finite()) {
                return Err(Error::invalid(format!("dpo beta must be positive, got {beta}")));
            }
        }
        ratio_config.validate()?;
        Ok(Self { kind, ratio_config })
    }

    pub fn dil(h: HKind) -> Self {
        Self {
            kind: LossKind::Dil { h },
            ratio_config: LogRatioConfig::default(),
        }
    }

    pub fn dpo(beta: f64) -> Result<Self> {
        Self::new(LossKind::Dpo { beta }, LogRatioConfig::default())
    }

    pub fn sft() -> Self {
        Self {
            kind: LossKind::Sft,
            ratio_config: LogRatioConfig::default(),
        }
    }

    pub fn bt_reward() -> Self {
        Self {
            kind: LossKind::BtReward,
            ratio_config: LogRatioConfig::default(),
        }
    }

    /// Builds a spec from its stable name; `beta` applies to `dpo` only.
    pub fn from_name(name: &str, beta: Option<f64>, ratio_config: LogRatioConfig) -> Result<Self> {
        let kind = match name.trim() {
            "dil-lsif" => LossKind::Dil { h: HKind::Lsif },
            "dil-ukl" => LossKind::Dil { h: HKind::Ukl },
            "dil-bce" => LossKind::Dil { h: HKind::Bce },
            "dpo" => LossKind::Dpo {
                beta: beta.unwrap_or(DEFAULT_DPO_BETA),
            },
            "sft" => LossKind::Sft,
            "bt-reward" => LossKind::BtReward,
            other => {
                return Err(Error::invalid(format!(
                    "unknown loss `{other}`; valid names: {}",
                    LOSS_NAMES.join(", ")
                )))
            }
        };
        Self::new(kind, ratio_config)
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            LossKind::Dpo { beta } => write!(f, "dpo(beta={beta})"),
            k => f.write_str(k.name()),
        }
    }
}

impl FromStr for LossSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_name(s, None, LogRatioConfig::default())
    }
}

/// Log-ratio together with `df / d ln π_θ(y|x)`, which is `1/|y|` under
/// length normalization, 1 otherwise, and 0 where the clamp is active.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioTerm<T> {
    pub value: T,
    pub log_prob: T,
    pub ref_log_prob: T,
    pub slope: T,
}

pub fn log_ratio_term<T: Real, P: Policy<T> + ?Sized, Q: Policy<T> + ?Sized>(
    policy: &P,
    ref_policy: &Q,
    x: &TokenSeq,
    y: &TokenSeq,
    cfg: &LogRatioConfig,
) -> Result<RatioTerm<T>> {
    let lp = policy.log_prob(x, y)?;
    let lr = ref_policy.log_prob(x, y)?;
    if !lr.is_finite() {
        return Err(Error::Support(format!(
            "reference probability of response {:?} is zero",
            y.tokens()
        )));
    }
    let mut slope = if cfg.length_normalize {
        T::one() / T::from_usize_lossy(y.len())
    } else {
        T::one()
    };
    let mut value = (lp - lr) * slope;
    if let Some(c) = cfg.clamp {
        let c = T::lit(c);
        if value > c || value < -c {
            value = value.max(-c).min(c);
            slope = T::zero();
        }
    }
    Ok(RatioTerm {
        value,
        log_prob: lp,
        ref_log_prob: lr,
        slope,
    })
}

pub fn log_ratio<T: Real, P: Policy<T> + ?Sized, Q: Policy<T> + ?Sized>(
    policy: &P,
    ref_policy: &Q,
    x: &TokenSeq,
    y: &TokenSeq,
    cfg: &LogRatioConfig,
) -> Result<T> {
    log_ratio_term(policy, ref_policy, x, y, cfg).map(|t| t.value)
}

/// `ℓ₁(f_w) + ℓ₋₁(f_l)`.
pub fn dil_loss<T: Real>(h: HKind, f_w: T, f_l: T) -> T {
    h.ell1(f_w) + h.ell_neg1(f_l)
}

/// `−ln σ(β(f_w − f_l))`.
pub fn dpo_loss<T: Real>(f_w: T, f_l: T, beta: T) -> T {
    softplus(-beta * (f_w - f_l))
}

/// `−ln σ(r_w − r_l)`.
pub fn bt_reward_loss<T: Real>(r_w: T, r_l: T) -> T {
    softplus(r_l - r_w)
}

/// `−mean ln π_θ(y|x)` over `(prompt, chosen)` pairs.
pub fn sft_loss<T: Real, P: Policy<T> + ?Sized>(policy: &P, batch: &[(TokenSeq, TokenSeq)]) -> Result<T> {
    if batch.is_empty() {
        return Err(Error::invalid("sft batch is empty"));
    }
    let mut total = T::zero();
    for (x, y) in batch {
        total += policy.log_prob(x, y)?;
    }
    Ok(-total / T::from_usize_lossy(batch.len()))
}

/// `(ℓ, ∂ℓ/∂f_w, ∂ℓ/∂f_l)` for a pairwise loss kind.
pub fn pair_loss_and_slopes<T: Real>(kind: &LossKind, f_w: T, f_l: T) -> Result<(T, T, T)> {
    Ok(match *kind {
        LossKind::Dil { h } => (dil_loss(h, f_w, f_l), h.ell1_grad(f_w), h.ell_neg1_grad(f_l)),
        LossKind::Dpo { beta } => {
            let b = T::lit(beta);
            let s = b * sigmoid(-b * (f_w - f_l));
            (dpo_loss(f_w, f_l, b), -s, s)
        }
        LossKind::BtReward => {
            let s = sigmoid(f_l - f_w);
            (bt_reward_loss(f_w, f_l), -s, s)
        }
        LossKind::Sft => return Err(Error::invalid("sft is not a pairwise loss")),
    })
}

/// Per-example quantities reused by the trainer's metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairTerms<T> {
    pub loss: T,
    pub chosen: RatioTerm<T>,
    pub rejected: RatioTerm<T>,
}

pub fn pair_terms<T: Real, P: Policy<T> + ?Sized, Q: Policy<T> + ?Sized>(
    spec: &LossSpec,
    policy: &P,
    ref_policy: &Q,
    triple: &PreferenceTriple,
) -> Result<PairTerms<T>> {
    let chosen = log_ratio_term(policy, ref_policy, &triple.prompt, &triple.chosen, &spec.ratio_config)?;
    let rejected = log_ratio_term(policy, ref_policy, &triple.prompt, &triple.rejected, &spec.ratio_config)?;
    let loss = match spec.kind {
        LossKind::Sft => -chosen.log_prob,
        ref k => pair_loss_and_slopes(k, chosen.value, rejected.value)?.0,
    };
    Ok(PairTerms { loss, chosen, rejected })
}

/// Batch-mean loss and its exact gradient in the parameters of `policy`.
pub fn loss_and_grad<T: Real, P: Policy<T> + ?Sized, Q: Policy<T> + ?Sized>(
    spec: &LossSpec,
    policy: &P,
    ref_policy: &Q,
    batch: &[PreferenceTriple],
) -> Result<(T, ParamVector<T>)> {
    if batch.is_empty() {
        return Err(Error::invalid("loss batch is empty"));
    }
    let inv_n = T::one() / T::from_usize_lossy(batch.len());
    let mut grad = ParamVector::zeros(policy.layout());
    let mut total = T::zero();
    for t in batch {
        if spec.kind == LossKind::Sft {
            total -= policy.accumulate_grad_log_prob(&t.prompt, &t.chosen, -inv_n, &mut grad.values)?;
            continue;
        }
        let cfg = &spec.ratio_config;
        let w = log_ratio_term(policy, ref_policy, &t.prompt, &t.chosen, cfg)?;
        let l = log_ratio_term(policy, ref_policy, &t.prompt, &t.rejected, cfg)?;
        let (loss, d_w, d_l) = pair_loss_and_slopes(&spec.kind, w.value, l.value)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("{} loss at f_w={}, f_l={}", spec.name(), w.value, l.value)));
        }
        total += loss;
        let sw = d_w * w.slope * inv_n;
        if sw != T::zero() {
            policy.accumulate_grad_log_prob(&t.prompt, &t.chosen, sw, &mut grad.values)?;
        }
        let sl = d_l * l.slope * inv_n;
        if sl != T::zero() {
            policy.accumulate_grad_log_prob(&t.prompt, &t.rejected, sl, &mut grad.values)?;
        }
    }
    Ok((total * inv_n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dre::cpc_loss;
    use crate::policy::{check_policy_gradient, clone_frozen, TabularSoftmaxPolicy, TinySeqPolicy, TrainablePolicy};
    use crate::tabular::TabularDomain;
    use crate::tabular::tests::random_domain;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn all_specs() -> Vec<LossSpec> {
        vec![
            LossSpec::dil(HKind::Lsif),
            LossSpec::dil(HKind::Ukl),
            LossSpec::dil(HKind::Bce),
            LossSpec::dpo(0.1).unwrap(),
            LossSpec::dpo(2.5).unwrap(),
            LossSpec::sft(),
            LossSpec::bt_reward(),
        ]
    }

    fn seq(t: &[u32], v: u32) -> TokenSeq {
        TokenSeq::new(t.to_vec(), v).unwrap()
    }

    fn tabular_batch(d: &TabularDomain<f64>, rng: &mut ChaCha8Rng, n: usize) -> Vec<PreferenceTriple> {
        (0..n)
            .map(|_| {
                let x = rng.gen_range(0..d.num_prompts());
                let k = d.num_responses(x);
                let a = rng.gen_range(0..k);
                let b = (a + rng.gen_range(1..k)) % k;
                PreferenceTriple::new(d.prompt(x).clone(), d.response(x, a).clone(), d.response(x, b).clone()).unwrap()
            })
            .collect()
    }

    #[test]
    fn log_ratio_examples() {
        let d = TabularDomain::from_tables(vec![vec![0.2, 0.8]], vec![vec![0.0; 2]], 1.0, vec![vec![0.5; 2]]).unwrap();
        let r = TabularSoftmaxPolicy::from_reference(&d).unwrap();
        let p = TabularSoftmaxPolicy::from_logits(&d, vec![vec![0.8_f64.ln(), 0.2_f64.ln()]]).unwrap();
        let cfg = LogRatioConfig::default();
        let f = log_ratio(&p, &r, d.prompt(0), d.response(0, 0), &cfg).unwrap();
        assert_abs_diff_eq!(f, 4.0_f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(f, 1.386294, epsilon = 1e-6);
        assert_eq!(log_ratio(&r, &r, d.prompt(0), d.response(0, 1), &cfg).unwrap(), 0.0);
    }

    #[test]
    fn length_normalization_divides_by_token_count() {
        let v = 5;
        let p = TinySeqPolicy::<f64>::new(v, 4, 3, 1).unwrap();
        let r = TinySeqPolicy::<f64>::new(v, 4, 3, 2).unwrap();
        let (x, y) = (seq(&[0, 1], v), seq(&[2, 3, 4, 0], v));
        let raw = log_ratio(&p, &r, &x, &y, &LogRatioConfig::default()).unwrap();
        let cfg = LogRatioConfig {
            length_normalize: true,
            clamp: None,
        };
        assert_eq!(log_ratio(&p, &r, &x, &y, &cfg).unwrap(), raw / 4.0);
    }

    #[test]
    fn clamp_bounds_ratio_and_stops_gradient() {
        let d = TabularDomain::from_tables(vec![vec![0.5; 2]], vec![vec![0.0; 2]], 1.0, vec![vec![0.5; 2]]).unwrap();
        let r = TabularSoftmaxPolicy::from_reference(&d).unwrap();
        let p = TabularSoftmaxPolicy::from_logits(&d, vec![vec![0.0, -80.0]]).unwrap();
        let cfg = LogRatioConfig {
            length_normalize: false,
            clamp: Some(5.0),
        };
        let t = log_ratio_term(&p, &r, d.prompt(0), d.response(0, 1), &cfg).unwrap();
        assert_eq!(t.value, -5.0);
        assert_eq!(t.slope, 0.0);
        assert!(LogRatioConfig {
            length_normalize: false,
            clamp: Some(0.0)
        }
        .validate()
        .is_err());
    }

    #[test]
    fn scalar_loss_examples() {
        assert_abs_diff_eq!(dil_loss(HKind::Lsif, 0.0_f64, 0.0), -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(dil_loss(HKind::Bce, 0.0_f64, 0.0), 2.0 * 2.0_f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(dil_loss(HKind::Ukl, 0.0_f64, 0.0), 1.0, epsilon = 1e-15);

        assert_abs_diff_eq!(dpo_loss(0.7_f64, 0.7, 0.1), 2.0_f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(dpo_loss(3.0_f64.ln(), 0.0, 1.0), -(0.75_f64.ln()), epsilon = 1e-15);
        assert_abs_diff_eq!(dpo_loss(3.0_f64.ln(), 0.0, 1.0), 0.287682, epsilon = 1e-6);

        assert_abs_diff_eq!(bt_reward_loss(1.0_f64, 1.0), 2.0_f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(bt_reward_loss(10.0_f64, 0.0), 4.54e-5, epsilon = 1e-7);
        let (_, rhs) = crate::tabular::il_reward_loss_equivalence(1.3_f64, -0.4);
        assert_abs_diff_eq!(bt_reward_loss(1.3_f64, -0.4), rhs, epsilon = 1e-12);
    }

    #[test]
    fn dpo_equals_cpc_on_scaled_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let (fw, fl) = (rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0));
            let beta: f64 = rng.gen_range(0.01..3.0);
            let diff = (dpo_loss(fw, fl, beta) - cpc_loss(1.0, beta * fw, beta * fl)).abs();
            assert!(diff <= 1e-12, "{fw} {fl} {beta}: {diff}");
        }
    }

    #[test]
    fn lsif_chosen_gradient_never_vanishes() {
        for fw in [-30.0_f64, -5.0, 0.0, 5.0, 30.0] {
            let (_, d_w, _) = pair_loss_and_slopes(&LossKind::Dil { h: HKind::Lsif }, fw, 0.0).unwrap();
            assert_eq!(d_w, -fw.exp());
            assert!(d_w < 0.0);
        }
        let dpo = LossKind::Dpo { beta: 1.0 };
        let slopes: Vec<f64> = [0.0_f64, 5.0, 20.0, 40.0]
            .iter()
            .map(|m| pair_loss_and_slopes(&dpo, *m, 0.0).unwrap().1.abs())
            .collect();
        assert!(slopes.windows(2).all(|w| w[1] < w[0]));
        assert!(slopes[3] < 1e-17);
    }

    #[test]
    fn sft_examples() {
        let d = TabularDomain::from_tables(vec![vec![0.25; 4]], vec![vec![0.0; 4]], 1.0, vec![vec![0.25; 4]]).unwrap();
        let p = TabularSoftmaxPolicy::uniform(&d).unwrap();
        let batch = vec![(d.prompt(0).clone(), d.response(0, 2).clone()); 3];
        assert_abs_diff_eq!(sft_loss(&p, &batch).unwrap(), 4.0_f64.ln(), epsilon = 1e-15);
        assert!(sft_loss::<f64, _>(&p, &[]).is_err());

        let sharp = TabularSoftmaxPolicy::from_logits(&d, vec![vec![-800.0, -800.0, 0.0, -800.0]]).unwrap();
        assert_eq!(sft_loss(&sharp, &batch).unwrap(), 0.0);
    }

    #[test]
    fn sft_descends_monotonically() {
        let d = TabularDomain::from_tables(vec![vec![0.25; 4]], vec![vec![0.0; 4]], 1.0, vec![vec![0.25; 4]]).unwrap();
        let mut p = TabularSoftmaxPolicy::uniform(&d).unwrap();
        let r = clone_frozen(&p);
        let batch: Vec<PreferenceTriple> = [(0, 1), (0, 2), (3, 2)]
            .iter()
            .map(|&(a, b)| PreferenceTriple::new(d.prompt(0).clone(), d.response(0, a).clone(), d.response(0, b).clone()).unwrap())
            .collect();
        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            let (v, g) = loss_and_grad(&LossSpec::sft(), &p, &r, &batch).unwrap();
            assert!(v <= prev + 1e-12);
            prev = v;
            for (w, gi) in p.params_mut().iter_mut().zip(&g.values) {
                *w -= 0.5 * gi;
            }
        }
    }

    #[test]
    fn lsif_at_reference_pushes_chosen_logit_up() {
        let d = TabularDomain::from_tables(vec![vec![0.5; 2]], vec![vec![0.0; 2]], 1.0, vec![vec![0.5; 2]]).unwrap();
        let p = TabularSoftmaxPolicy::from_reference(&d).unwrap();
        let r = clone_frozen(&p);
        let batch = vec![PreferenceTriple::new(d.prompt(0).clone(), d.response(0, 0).clone(), d.response(0, 1).clone()).unwrap()];
        let spec = LossSpec::dil(HKind::Lsif);
        let (_, g) = loss_and_grad(&spec, &p, &r, &batch).unwrap();
        // descent direction on the chosen logit is positive
        assert!(-g.values[0] > 0.0);
        assert_abs_diff_eq!(g.values[0], -1.0, epsilon = 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rep = check_policy_gradient(&p, 1e-5, 2, &mut rng, |q| loss_and_grad(&spec, q, &r, &batch).map(|(v, g)| (v, g.values))).unwrap();
        assert!(rep.max_rel_error < 1e-6);
    }

    #[test]
    fn sft_ignores_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = random_domain(&mut rng, 3, 5);
        let p = TabularSoftmaxPolicy::uniform(&d).unwrap();
        let r1 = TabularSoftmaxPolicy::from_reference(&d).unwrap();
        let mut r2 = r1.clone();
        r2.params_mut()[0] += 3.0;
        let batch = tabular_batch(&d, &mut rng, 8);
        let a = loss_and_grad(&LossSpec::sft(), &p, &r1, &batch).unwrap();
        let b = loss_and_grad(&LossSpec::sft(), &p, &r2, &batch).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tabular_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let d = random_domain(&mut rng, 3, 6);
        let r = TabularSoftmaxPolicy::from_reference(&d).unwrap();
        let batch = tabular_batch(&d, &mut rng, 12);
        for spec in all_specs() {
            for point in 0..10 {
                let mut p = r.clone();
                for w in p.params_mut() {
                    *w += rng.gen_range(-1.0..1.0);
                }
                let rep = check_policy_gradient(&p, 1e-5, 10, &mut rng, |q| {
                    loss_and_grad(&spec, q, &r, &batch).map(|(v, g)| (v, g.values))
                })
                .unwrap();
                assert!(rep.max_rel_error < 1e-5, "{spec} point {point}: {rep:?}");
            }
        }
    }

    #[test]
    fn neural_gradients_match_finite_differences() {
        let v = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let r = TinySeqPolicy::<f64>::new(v, 5, 4, 100).unwrap();
        let batch: Vec<PreferenceTriple> = (0..4)
            .map(|_| {
                let mut s = |n| seq(&(0..n).map(|_| rng.gen_range(0..v)).collect::<Vec<_>>(), v);
                let (x, a, mut b) = (s(2), s(3), s(3));
                while b == a {
                    b = s(3);
                }
                PreferenceTriple::new(x, a, b).unwrap()
            })
            .collect();
        for mut spec in all_specs() {
            spec.ratio_config.length_normalize = true;
            for point in 0..10 {
                let mut p = r.clone();
                for w in p.params_mut() {
                    *w += rng.gen_range(-0.3..0.3);
                }
                let rep = check_policy_gradient(&p, 1e-4, 10, &mut rng, |q| {
                    loss_and_grad(&spec, q, &r, &batch).map(|(v, g)| (v, g.values))
                })
                .unwrap();
                assert!(rep.max_rel_error < 1e-4, "{spec} point {point}: {rep:?}");
            }
        }
    }

    #[test]
    fn frozen_reference_gives_zero_ratio() {
        let p = TinySeqPolicy::<f64>::with_defaults(7, 3).unwrap();
        let r = clone_frozen(&p);
        let (x, y) = (seq(&[1, 2, 3], 7), seq(&[4, 5], 7));
        assert_eq!(log_ratio(&p, &r, &x, &y, &LogRatioConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn spec_names_round_trip() {
        for name in LOSS_NAMES {
            let s: LossSpec = name.parse().unwrap();
            assert_eq!(s.name(), name);
        }
        let e = "ipo".parse::<LossSpec>().unwrap_err().to_string();
        assert!(e.contains("dil-lsif") && e.contains("sft"));
        assert!(LossSpec::dpo(0.0).is_err());
        assert_eq!(LossSpec::from_name("dpo", Some(0.5), LogRatioConfig::default()).unwrap().to_string(), "dpo(beta=0.5)");
    }

    proptest! {
        #[test]
        fn single_token_normalization_is_noop(seed in 0_u64..1000, spec_i in 0_usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = random_domain(&mut rng, 2, 5);
            let r = TabularSoftmaxPolicy::from_reference(&d).unwrap();
            let mut p = r.clone();
            for w in p.params_mut() {
                *w += rng.gen_range(-1.0..1.0);
            }
            let batch = tabular_batch(&d, &mut rng, 5);
            let mut spec = all_specs()[spec_i];
            let plain = loss_and_grad(&spec, &p, &r, &batch).unwrap();
            spec.ratio_config.length_normalize = true;
            prop_assert_eq!(plain, loss_and_grad(&spec, &p, &r, &batch).unwrap());
        }

        #[test]
        fn batch_loss_is_mean_and_permutation_invariant(seed in 0_u64..1000, spec_i in 0_usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = random_domain(&mut rng, 3, 4);
            let r = TabularSoftmaxPolicy::from_reference(&d).unwrap();
            let mut p = r.clone();
            for w in p.params_mut() {
                *w += rng.gen_range(-1.0..1.0);
            }
            let spec = all_specs()[spec_i];
            let batch = tabular_batch(&d, &mut rng, 9);
            let (v, _) = loss_and_grad(&spec, &p, &r, &batch).unwrap();
            let mean: f64 = batch.iter().map(|t| pair_terms(&spec, &p, &r, t).unwrap().loss).sum::<f64>() / 9.0;
            prop_assert!((v - mean).abs() < 1e-12);
            let mut shuffled = batch.clone();
            shuffled.reverse();
            shuffled.rotate_left(seed as usize % 9);
            let (v2, _) = loss_and_grad(&spec, &p, &r, &shuffled).unwrap();
            prop_assert!((v - v2).abs() < 1e-12);
        }
    }
}
