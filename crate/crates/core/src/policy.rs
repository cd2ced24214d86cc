//! Thompson-sampling policy over posterior reward draws.
//!
//! The reward of action `a` at context `x` is its effect against control,
//! so control's reward is identically zero and it wins a draw only when
//! every other action's reward is negative.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bayes::PosteriorModel;
use crate::design::ContextValue;
use crate::error::{Error, Result};

pub const DEFAULT_DRAWS: usize = 10_000;
pub const MIN_DRAWS: usize = 1_000;

/// Ordered action labels; the first is control.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpace {
    pub actions: Vec<i64>,
}

impl ActionSpace {
    pub fn new(actions: Vec<i64>) -> Result<Self> {
        if actions.len() < 2 {
            return Err(Error::Domain("an action space needs control and at least one action".into()));
        }
        Ok(ActionSpace { actions })
    }
    pub fn control(&self) -> i64 {
        self.actions[0]
    }
}

/// Named covariate values for one decision.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContextVector {
    pub values: BTreeMap<String, ContextValue>,
}

impl ContextVector {
    pub fn new<S: AsRef<str>>(values: &[(S, ContextValue)]) -> Self {
        ContextVector {
            values: values.iter().map(|(k, v)| (k.as_ref().to_string(), v.clone())).collect(),
        }
    }
}

/// Joint reward draws: `draws[(d, a)]` is draw `d` for non-control action `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardDistribution {
    pub actions: ActionSpace,
    pub draws: DMatrix<f64>,
    pub context: ContextVector,
    pub model_id: String,
    pub seed: u64,
}

impl RewardDistribution {
    pub fn from_draws(actions: ActionSpace, draws: DMatrix<f64>) -> Result<Self> {
        if draws.ncols() != actions.actions.len() - 1 {
            return Err(Error::Contract(format!(
                "{} reward columns for {} non-control actions",
                draws.ncols(),
                actions.actions.len() - 1
            )));
        }
        if draws.nrows() < MIN_DRAWS {
            return Err(Error::Domain(format!(
                "{} draws; at least {MIN_DRAWS} are required",
                draws.nrows()
            )));
        }
        if draws.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("reward draws must be finite".into()));
        }
        Ok(RewardDistribution {
            actions,
            draws,
            context: ContextVector::default(),
            model_id: String::new(),
            seed: 0,
        })
    }

    pub fn m(&self) -> usize {
        self.draws.nrows()
    }

    /// Mean reward per non-control action.
    pub fn mean(&self) -> Vec<f64> {
        self.draws.column_iter().map(|c| c.mean()).collect()
    }
}

/// Samples rewards at `context`; every action uses the same coefficient draw.
pub fn infer_reward(
    posterior: &PosteriorModel,
    context: &ContextVector,
    m: usize,
    seed: u64,
) -> Result<RewardDistribution> {
    if m < MIN_DRAWS {
        return Err(Error::Domain(format!("{m} draws; at least {MIN_DRAWS} are required")));
    }
    let layout = posterior.layout();
    let fx = layout.encoder.encode_context(&context.values)?;
    let k = layout.treated_arms();
    let contrasts = DMatrix::from_fn(layout.p(), k, |i, j| layout.effect_contrast(j, &fx)[i]);
    let coef = posterior.sample_coefficients(m, seed);
    let draws = coef.tr_mul(&contrasts);
    let mut out = RewardDistribution::from_draws(ActionSpace::new(layout.arms.clone())?, draws)?;
    out.context = context.clone();
    out.model_id = posterior.id().to_string();
    out.seed = seed;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankResult {
    pub actions: Vec<i64>,
    pub p_best: Vec<f64>,
    /// Action with the highest mean reward (control when every mean is negative).
    pub argmax: i64,
    pub seed: u64,
    pub m: usize,
}

/// Probability that each action (control first) has the largest reward.
pub fn infer_rank(rewards: &RewardDistribution, seed: u64) -> RankResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rewards.m();
    let k = rewards.draws.ncols();
    let mut wins = vec![0usize; k + 1];
    let mut ties = Vec::with_capacity(k + 1);
    for d in 0..m {
        let mut best = 0.0;
        ties.clear();
        ties.push(0);
        for a in 0..k {
            let r = rewards.draws[(d, a)];
            if r > best {
                best = r;
                ties.clear();
                ties.push(a + 1);
            } else if r == best {
                ties.push(a + 1);
            }
        }
        let winner = if ties.len() == 1 {
            ties[0]
        } else {
            ties[rng.random_range(0..ties.len())]
        };
        wins[winner] += 1;
    }
    let means = rewards.mean();
    let mut argmax = 0;
    let mut best = 0.0;
    for (a, mu) in means.iter().enumerate() {
        if *mu > best {
            best = *mu;
            argmax = a + 1;
        }
    }
    RankResult {
        actions: rewards.actions.actions.clone(),
        p_best: wins.iter().map(|w| *w as f64 / m as f64).collect(),
        argmax: rewards.actions.actions[argmax],
        seed,
        m,
    }
}

/// Samples one action from `p_best`.
pub fn decide(rank: &RankResult, seed: u64) -> i64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in rank.p_best.iter().enumerate() {
        if *p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return rank.actions[i];
        }
    }
    rank.actions[last]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayes::{fit_bayesian, PriorSpec};
    use crate::design::{add_metric, CovariateSpec};
    use crate::frame::{load_table_from_reader, ColumnRole, Role, Schema};
    use rand_distr::{Distribution, Normal};

    fn normal_draws(spec: &[(f64, f64)], m: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dists: Vec<Normal<f64>> = spec.iter().map(|(mu, sd)| Normal::new(*mu, *sd).unwrap()).collect();
        DMatrix::from_fn(m, spec.len(), |_, a| dists[a].sample(&mut rng))
    }

    #[test]
    fn separated_action_dominates() {
        let draws = normal_draws(&[(10.0, 0.1), (0.0, 0.1)], 10_000, 1);
        let r = RewardDistribution::from_draws(ActionSpace::new(vec![0, 1, 2]).unwrap(), draws).unwrap();
        let rank = infer_rank(&r, 7);
        assert!(rank.p_best[1] >= 0.999);
        assert_eq!(rank.argmax, 1);
        assert!((rank.p_best.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn control_wins_when_all_negative() {
        let draws = DMatrix::from_element(2000, 2, -1.0);
        let r = RewardDistribution::from_draws(ActionSpace::new(vec![0, 1, 2]).unwrap(), draws).unwrap();
        let rank = infer_rank(&r, 3);
        assert_eq!(rank.p_best, [1.0, 0.0, 0.0]);
        assert_eq!(rank.argmax, 0);
    }

    #[test]
    fn exact_ties_split_uniformly() {
        let draws = DMatrix::from_element(20_000, 2, 1.0);
        let r = RewardDistribution::from_draws(ActionSpace::new(vec![0, 1, 2]).unwrap(), draws).unwrap();
        let rank = infer_rank(&r, 3);
        assert_eq!(rank.p_best[0], 0.0);
        assert!((rank.p_best[1] - 0.5).abs() < 3.0 * (0.25f64 / 20_000.0).sqrt());
    }

    #[test]
    fn decide_contracts() {
        let rank = RankResult {
            actions: vec![0, 1, 2],
            p_best: vec![1.0, 0.0, 0.0],
            argmax: 0,
            seed: 0,
            m: 1000,
        };
        assert!((0..100).all(|s| decide(&rank, s) == 0));
        let half = RankResult {
            actions: vec![0, 1],
            p_best: vec![0.5, 0.5],
            ..rank
        };
        let n = 10_000;
        let zeros = (0..n).filter(|s| decide(&half, *s) == 0).count() as f64 / n as f64;
        assert!((zeros - 0.5).abs() < 0.015);
        assert_eq!(decide(&half, 42), decide(&half, 42));
    }

    #[test]
    fn too_few_draws_rejected() {
        let draws = DMatrix::from_element(10, 1, 1.0);
        assert!(RewardDistribution::from_draws(ActionSpace::new(vec![0, 1]).unwrap(), draws).is_err());
    }

    #[test]
    fn rewards_from_posterior_are_seeded_and_validate_context() {
        let csv = "A,dev,y\n0,a,1\n0,b,2\n1,a,3\n1,b,5\n0,a,1.5\n1,b,4.2\n0,b,2.2\n1,a,2.8\n";
        let roles = vec![
            ColumnRole::new(Role::IntentToTreat, "A"),
            ColumnRole::new(Role::Covariate, "dev"),
            ColumnRole::new(Role::Metric, "y"),
        ];
        let frame = load_table_from_reader(csv.as_bytes(), &Schema::new(roles).unwrap()).unwrap();
        let (input, _) = add_metric(&frame, &["y"], &CovariateSpec::new(&["dev"])).unwrap();
        let post = fit_bayesian(&input, &PriorSpec::default()).unwrap();
        let ctx = ContextVector::new(&[("dev", ContextValue::Str("b".into()))]);
        let a = infer_reward(&post, &ctx, 2000, 5).unwrap();
        let b = infer_reward(&post, &ctx, 2000, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(infer_rank(&a, 1), infer_rank(&b, 1));
        let missing = ContextVector::default();
        assert!(matches!(infer_reward(&post, &missing, 2000, 5), Err(Error::Context(_))));
        let unseen = ContextVector::new(&[("dev", ContextValue::Str("z".into()))]);
        assert!(matches!(infer_reward(&post, &unseen, 2000, 5), Err(Error::Context(_))));
    }
}
