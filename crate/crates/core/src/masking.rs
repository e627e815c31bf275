//! Dirichlet modality allocation under a fixed visible-token budget.
//!
//! Each sample draws `λ ~ Dir(α, α, α)`, turns `B·λ` into integer per-modality
//! visible counts that always sum to `B`, and then picks that many visible
//! positions per modality uniformly at random. Mask bit `true` means visible.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::{Modality, TokenSet};

/// Allocation and per-modality masks for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub lambda: [f64; 3],
    pub counts: [usize; 3],
    /// Empty until [`materialize_masks`] runs.
    pub masks: [Vec<bool>; 3],
    pub alpha: f64,
    pub budget: usize,
}

impl MaskPlan {
    /// Plan with explicit visible counts; λ is set to `counts / B`.
    pub fn from_counts(counts: [usize; 3], sizes: [usize; 3], budget: usize) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total != budget {
            return Err(Error::Argument(format!(
                "visible counts {counts:?} sum to {total}, the budget is {budget}"
            )));
        }
        for m in Modality::ALL {
            let i = m.index();
            if counts[i] > sizes[i] {
                return Err(Error::Argument(format!(
                    "{} has {} tokens, cannot keep {} visible",
                    m.name(),
                    sizes[i],
                    counts[i]
                )));
            }
        }
        let b = budget.max(1) as f64;
        Ok(Self {
            lambda: counts.map(|c| c as f64 / b),
            counts,
            masks: Default::default(),
            alpha: f64::NAN,
            budget,
        })
    }

    pub fn total_visible(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn is_materialized(&self) -> bool {
        self.masks.iter().any(|m| !m.is_empty())
    }

    /// Mask for one modality.
    pub fn mask(&self, m: Modality) -> &[bool] {
        &self.masks[m.index()]
    }

    /// Visible and hidden indices for one modality, ascending.
    pub fn partition(&self, m: Modality) -> (Vec<usize>, Vec<usize>) {
        partition(self.mask(m))
    }
}

/// Ascending visible (`true`) and hidden (`false`) index lists.
pub fn partition(mask: &[bool]) -> (Vec<usize>, Vec<usize>) {
    let mut vis = Vec::new();
    let mut hid = Vec::new();
    for (i, &b) in mask.iter().enumerate() {
        if b {
            vis.push(i);
        } else {
            hid.push(i);
        }
    }
    (vis, hid)
}

/// Draws `λ ~ Dir(α, α, α)` via normalized Gamma variates.
pub fn sample_dirichlet<R: Rng>(alpha: f64, rng: &mut R) -> Result<[f64; 3]> {
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::Argument(format!("invalid Dirichlet concentration {alpha}: {e}")))?;
    loop {
        let draws: [f64; 3] = std::array::from_fn(|_| gamma.sample(rng));
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return Ok(draws.map(|d| d / total));
        }
    }
}

/// Largest-remainder apportionment of `total` by `weights` (ties go to the
/// lower index). Weights must not all be zero unless `total` is 0.
fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if total == 0 || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Integer visible counts for allocation `lambda`: largest-remainder rounding
/// of `B·λ`, then any count above its modality size is capped and the
/// overflow re-apportioned over the unsaturated modalities by their λ (or by
/// spare capacity if those λ are all zero) until every count fits.
pub fn counts_from_lambda(lambda: [f64; 3], budget: usize, sizes: [usize; 3]) -> Result<[usize; 3]> {
    let capacity: usize = sizes.iter().sum();
    if budget > capacity {
        return Err(Error::Argument(format!(
            "budget {budget} exceeds the {capacity} available tokens"
        )));
    }
    let mut counts: [usize; 3] = apportion(&lambda, budget)
        .try_into()
        .expect("three modalities");
    let mut saturated = [false; 3];
    loop {
        let mut overflow = 0;
        for i in 0..3 {
            if counts[i] >= sizes[i] {
                overflow += counts[i] - sizes[i];
                counts[i] = sizes[i];
                saturated[i] = true;
            }
        }
        if overflow == 0 {
            return Ok(counts);
        }
        let open: Vec<usize> = (0..3).filter(|&i| !saturated[i]).collect();
        let mut weights: Vec<f64> = open.iter().map(|&i| lambda[i]).collect();
        if weights.iter().sum::<f64>() <= 0.0 {
            weights = open.iter().map(|&i| (sizes[i] - counts[i]) as f64).collect();
        }
        for (&i, extra) in open.iter().zip(apportion(&weights, overflow)) {
            counts[i] += extra;
        }
    }
}

/// Draws λ and the matching visible counts; masks are left empty.
pub fn sample_allocation<R: Rng>(
    alpha: f64,
    budget: usize,
    sizes: [usize; 3],
    rng: &mut R,
) -> Result<MaskPlan> {
    let capacity: usize = sizes.iter().sum();
    if budget > capacity {
        return Err(Error::Argument(format!(
            "budget {budget} exceeds the {capacity} available tokens"
        )));
    }
    let lambda = sample_dirichlet(alpha, rng)?;
    let counts = counts_from_lambda(lambda, budget, sizes)?;
    Ok(MaskPlan {
        lambda,
        counts,
        masks: Default::default(),
        alpha,
        budget,
    })
}

/// Picks `counts[m]` visible positions per modality uniformly without replacement.
pub fn materialize_masks<R: Rng>(
    mut plan: MaskPlan,
    sizes: [usize; 3],
    rng: &mut R,
) -> Result<MaskPlan> {
    for m in Modality::ALL {
        let i = m.index();
        if plan.counts[i] > sizes[i] {
            return Err(Error::Argument(format!(
                "{} count {} exceeds {} tokens",
                m.name(),
                plan.counts[i],
                sizes[i]
            )));
        }
        let mut mask = vec![false; sizes[i]];
        for j in index::sample(rng, sizes[i], plan.counts[i]) {
            mask[j] = true;
        }
        plan.masks[i] = mask;
    }
    Ok(plan)
}

/// Full per-sample draw: allocation followed by masks.
pub fn sample_plan<R: Rng>(
    alpha: f64,
    budget: usize,
    sizes: [usize; 3],
    rng: &mut R,
) -> Result<MaskPlan> {
    let plan = sample_allocation(alpha, budget, sizes, rng)?;
    materialize_masks(plan, sizes, rng)
}

/// Complementary visible/hidden views of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedViews<T> {
    pub modality: Modality,
    pub visible_tokens: Tensor<T>,
    pub visible_pos: Tensor<T>,
    /// Raw (pre-projection) patch rows at hidden positions.
    pub hidden_targets: Tensor<T>,
    pub visible_idx: Vec<usize>,
    pub hidden_idx: Vec<usize>,
}

/// Splits `tokens` (and the matching raw patches) by `mask`.
pub fn split_views<T: Scalar>(
    tokens: &TokenSet<T>,
    raw: &Tensor<T>,
    mask: &[bool],
) -> Result<MaskedViews<T>> {
    if mask.len() != tokens.len() || raw.rows() != tokens.len() {
        return Err(Error::Argument(format!(
            "mask of length {} for {} tokens and {} raw patches",
            mask.len(),
            tokens.len(),
            raw.rows()
        )));
    }
    let (visible_idx, hidden_idx) = partition(mask);
    Ok(MaskedViews {
        modality: tokens.modality,
        visible_tokens: tokens.tokens.gather_rows(&visible_idx),
        visible_pos: tokens.pos.gather_rows(&visible_idx),
        hidden_targets: raw.gather_rows(&hidden_idx),
        visible_idx,
        hidden_idx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SIZES: [usize; 3] = [196, 196, 196];

    #[test]
    fn simplex_vertex_takes_whole_budget() {
        assert_eq!(counts_from_lambda([1.0, 0.0, 0.0], 96, SIZES).unwrap(), [96, 0, 0]);
    }

    #[test]
    fn exact_fractions_round_exactly() {
        assert_eq!(counts_from_lambda([0.5, 0.3, 0.2], 10, SIZES).unwrap(), [5, 3, 2]);
    }

    #[test]
    fn remainder_ties_favor_rgb_then_depth() {
        let third = 1.0 / 3.0;
        assert_eq!(counts_from_lambda([third; 3], 10, SIZES).unwrap(), [4, 3, 3]);
        assert_eq!(counts_from_lambda([third; 3], 11, SIZES).unwrap(), [4, 4, 3]);
    }

    #[test]
    fn overflow_is_redistributed_by_residual_lambda() {
        // rgb wants 9 of 10 but only has 4 tokens; 5 spill over depth:pc = 3:1.
        let c = counts_from_lambda([0.9, 0.075, 0.025], 10, [4, 20, 20]).unwrap();
        assert_eq!(c[0], 4);
        assert_eq!(c.iter().sum::<usize>(), 10);
        assert_eq!(c, [4, 5, 1]);
    }

    #[test]
    fn overflow_with_zero_residual_lambda_uses_capacity() {
        let c = counts_from_lambda([1.0, 0.0, 0.0], 10, [4, 2, 10]).unwrap();
        assert_eq!(c.iter().sum::<usize>(), 10);
        assert!(c.iter().zip([4, 2, 10]).all(|(c, l)| *c <= l));
        assert_eq!(c[0], 4);
    }

    #[test]
    fn infeasible_budget_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_allocation(1.0, 13, [4, 4, 4], &mut rng),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            sample_allocation(0.0, 4, [4, 4, 4], &mut rng),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn full_and_empty_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plan = MaskPlan::from_counts([4, 0, 2], [4, 3, 5], 6).unwrap();
        let plan = materialize_masks(plan, [4, 3, 5], &mut rng).unwrap();
        assert_eq!(plan.masks[0], vec![true; 4]);
        assert_eq!(plan.masks[1], vec![false; 3]);
        assert_eq!(plan.masks[2].iter().filter(|b| **b).count(), 2);
    }

    #[test]
    fn from_counts_enforces_budget() {
        assert!(MaskPlan::from_counts([4, 4, 4], [4, 4, 4], 6).is_err());
        assert!(MaskPlan::from_counts([5, 1, 0], [4, 4, 4], 6).is_err());
    }

    #[test]
    fn seeded_plans_are_reproducible() {
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            (0..5)
                .map(|_| sample_plan(1.0, 96, SIZES, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn split_direct_indexing() {
        let tokens = Tensor::<f64>::from_f64(3, 2, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let ts = TokenSet::new(tokens.clone(), tokens.map(|v| -v), Modality::Depth).unwrap();
        let raw = Tensor::from_f64(3, 1, &[10.0, 11.0, 12.0]);
        let v = split_views(&ts, &raw, &[true, false, true]).unwrap();
        assert_eq!(v.visible_idx, vec![0, 2]);
        assert_eq!(v.hidden_idx, vec![1]);
        assert_eq!(v.visible_tokens.data(), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(v.hidden_targets.data(), &[11.0]);

        let all = split_views(&ts, &raw, &[true; 3]).unwrap();
        assert_eq!(all.visible_tokens, ts.tokens);
        assert_eq!(all.hidden_targets.rows(), 0);

        assert!(matches!(
            split_views(&ts, &raw, &[true, false]),
            Err(Error::Argument(_))
        ));
    }
}
