//! Sequential projection along a linear extension, multi-head combination
//! (mixture / hard / Gumbel-softmax), and the poset-respecting override
//! audit.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Halfspace, EPS_FEAS};
use crate::linalg::{self, softmax};
use crate::poset::{LinearExtension, PosetError, SafetyPoset};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompositionError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Poset(#[from] PosetError),
    #[error("head combiner needs at least one head")]
    EmptyHeads,
    #[error("got {controls} head controls for {heads} heads")]
    HeadCountMismatch { controls: usize, heads: usize },
}

/// A feasibility flip recorded during sequential projection: enforcing
/// `enforced_constraint` at `step` drove `flipped_constraint` from feasible
/// to infeasible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverrideEvent {
    /// 1-based position in the projection sequence.
    pub step: usize,
    pub enforced_constraint: usize,
    pub flipped_constraint: usize,
    pub margin_before: f64,
    pub margin_after: f64,
}

/// One linear extension bound to one nominal-policy head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    pub extension: LinearExtension,
    pub head_index: usize,
}

impl ProjectionHead {
    /// Validates the extension against the scenario poset.
    pub fn new(
        extension: LinearExtension,
        poset: &SafetyPoset,
        head_index: usize,
    ) -> Result<Self, CompositionError> {
        extension.check_against(poset)?;
        Ok(Self { extension, head_index })
    }

    /// Skips poset validation; used by the order-sensitivity ablation.
    pub fn new_unchecked(extension: LinearExtension, head_index: usize) -> Self {
        Self { extension, head_index }
    }
}

/// Applies the per-constraint projections in extension order:
/// `u(0) = u_nom`, `u(k) = proj_{j_k}(u(k-1))`. Returns the final control
/// and every feasibility flip along the way. The halfspace slice is indexed
/// by constraint id.
pub fn sequential_project(
    halfspaces: &[Halfspace],
    ext: &LinearExtension,
    u_nom: &[f64],
) -> Result<(Vec<f64>, Vec<OverrideEvent>), CompositionError> {
    assert_eq!(
        halfspaces.len(),
        ext.len(),
        "one halfspace per poset constraint required"
    );
    let mut u = u_nom.to_vec();
    let mut events = Vec::new();
    let mut margins: Vec<f64> = halfspaces.iter().map(|h| h.margin(&u)).collect();
    // An override concerns constraints already enforced at an earlier step;
    // a constraint not yet reached in the sequence cannot be overridden.
    let mut enforced = vec![false; halfspaces.len()];
    for (k, &j) in ext.order().iter().enumerate() {
        u = halfspaces[j].project(&u)?;
        for (i, h) in halfspaces.iter().enumerate() {
            let after = h.margin(&u);
            if enforced[i] && margins[i] >= -EPS_FEAS && after < -EPS_FEAS {
                events.push(OverrideEvent {
                    step: k + 1,
                    enforced_constraint: j,
                    flipped_constraint: i,
                    margin_before: margins[i],
                    margin_after: after,
                });
            }
            margins[i] = after;
        }
        enforced[j] = true;
    }
    Ok((u, events))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CombineMode {
    Mixture,
    Hard,
    Gumbel,
}

/// Combines per-head safe controls into a single output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadCombiner {
    pub mode: CombineMode,
    /// Mixture logits (softmax -> alpha) in `Mixture` mode, selection logits
    /// in `Hard` mode, Gumbel logits in `Gumbel` mode.
    pub logits: Vec<f64>,
    pub temperature: f64,
}

/// How the combiner arrived at its output, with everything needed for
/// backpropagation through the combination.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionInfo {
    /// Simplex weights applied to the head controls. One-hot for hard or
    /// inference-time gumbel selection.
    pub weights: Vec<f64>,
    /// Selected head for hard / argmax paths.
    pub selected: Option<usize>,
    /// Gumbel noise drawn for this call (training mode only), kept so the
    /// same forward pass can be replayed exactly.
    pub gumbel_noise: Option<Vec<f64>>,
}

impl HeadCombiner {
    pub fn new(mode: CombineMode, logits: Vec<f64>, temperature: f64) -> Self {
        assert!(temperature > 0.0, "temperature must be positive");
        Self { mode, logits, temperature }
    }

    pub fn head_count(&self) -> usize {
        self.logits.len()
    }

    fn argmax(v: &[f64]) -> usize {
        // ties resolve to the lowest index
        let mut best = 0;
        for (i, &x) in v.iter().enumerate().skip(1) {
            if x > v[best] {
                best = i;
            }
        }
        best
    }

    /// Combines head controls. `rng` enables stochastic Gumbel sampling
    /// (training); with `None`, gumbel mode falls back to deterministic
    /// argmax over its logits (inference).
    pub fn combine<R: Rng>(
        &self,
        head_controls: &[Vec<f64>],
        rng: Option<&mut R>,
    ) -> Result<(Vec<f64>, SelectionInfo), CompositionError> {
        if self.logits.is_empty() {
            return Err(CompositionError::EmptyHeads);
        }
        if head_controls.len() != self.logits.len() {
            return Err(CompositionError::HeadCountMismatch {
                controls: head_controls.len(),
                heads: self.logits.len(),
            });
        }
        let m = head_controls[0].len();
        match self.mode {
            CombineMode::Mixture => {
                let weights = softmax(&self.logits);
                let out = weighted_sum(head_controls, &weights, m);
                Ok((out, SelectionInfo { weights, selected: None, gumbel_noise: None }))
            }
            CombineMode::Hard => {
                let sel = Self::argmax(&self.logits);
                let mut weights = vec![0.0; self.logits.len()];
                weights[sel] = 1.0;
                Ok((
                    head_controls[sel].clone(),
                    SelectionInfo { weights, selected: Some(sel), gumbel_noise: None },
                ))
            }
            CombineMode::Gumbel => match rng {
                Some(rng) => {
                    let noise: Vec<f64> = (0..self.logits.len())
                        .map(|_| {
                            let u: f64 = rng.gen_range(1e-12..1.0);
                            -(-u.ln()).ln()
                        })
                        .collect();
                    let perturbed: Vec<f64> = self
                        .logits
                        .iter()
                        .zip(&noise)
                        .map(|(&l, &g)| (l + g) / self.temperature)
                        .collect();
                    let weights = softmax(&perturbed);
                    let out = weighted_sum(head_controls, &weights, m);
                    Ok((out, SelectionInfo { weights, selected: None, gumbel_noise: Some(noise) }))
                }
                None => {
                    let sel = Self::argmax(&self.logits);
                    let mut weights = vec![0.0; self.logits.len()];
                    weights[sel] = 1.0;
                    Ok((
                        head_controls[sel].clone(),
                        SelectionInfo { weights, selected: Some(sel), gumbel_noise: None },
                    ))
                }
            },
        }
    }

    /// Replays a gumbel combination with previously drawn noise.
    pub fn combine_with_noise(
        &self,
        head_controls: &[Vec<f64>],
        noise: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let perturbed: Vec<f64> = self
            .logits
            .iter()
            .zip(noise)
            .map(|(&l, &g)| (l + g) / self.temperature)
            .collect();
        let weights = softmax(&perturbed);
        let m = head_controls[0].len();
        (weighted_sum(head_controls, &weights, m), weights)
    }
}

fn weighted_sum(controls: &[Vec<f64>], weights: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m];
    for (c, &w) in controls.iter().zip(weights) {
        linalg::axpy(w, c, &mut out);
    }
    out
}

/// Checks every override event against the poset: a flip is permitted only
/// when the flipped constraint has strictly lower priority than the enforced
/// one. Returns the offending events.
pub fn audit_poset_respecting(events: &[OverrideEvent], poset: &SafetyPoset) -> Vec<OverrideEvent> {
    events
        .iter()
        .filter(|e| !poset.precedes(e.flipped_constraint, e.enforced_constraint))
        .cloned()
        .collect()
}

/// Per-maximal-constraint feasibility report for the mixture-safety
/// precondition: a simplex mixture of head outputs satisfies a maximal
/// constraint iff every head does.
#[derive(Debug, Clone, PartialEq)]
pub struct MixturePreconditionReport {
    /// (constraint id, per-head feasibility) for each maximal constraint.
    pub per_maximal: Vec<(usize, Vec<bool>)>,
}

impl MixturePreconditionReport {
    pub fn all_pass(&self) -> bool {
        self.per_maximal.iter().all(|(_, heads)| heads.iter().all(|&f| f))
    }

    /// Maximal constraints violated by at least one head.
    pub fn flagged(&self) -> Vec<usize> {
        self.per_maximal
            .iter()
            .filter(|(_, heads)| heads.iter().any(|&f| !f))
            .map(|(id, _)| *id)
            .collect()
    }
}

pub fn check_mixture_safety_preconditions(
    head_controls: &[Vec<f64>],
    halfspaces: &[Halfspace],
    poset: &SafetyPoset,
) -> MixturePreconditionReport {
    let per_maximal = poset
        .maximal_elements()
        .into_iter()
        .map(|j| {
            let feas: Vec<bool> = head_controls.iter().map(|u| halfspaces[j].contains(u)).collect();
            (j, feas)
        })
        .collect();
    MixturePreconditionReport { per_maximal }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ext(order: &[usize]) -> LinearExtension {
        LinearExtension::new_unchecked(order.to_vec())
    }

    #[test]
    fn orthogonal_pair_commutes_without_events() {
        let hs = vec![
            Halfspace::new(vec![1.0, 0.0], 1.0, 0),
            Halfspace::new(vec![0.0, 1.0], 1.0, 1),
        ];
        for order in [[0, 1], [1, 0]] {
            let (u, events) = sequential_project(&hs, &ext(&order), &[0.0, 0.0]).unwrap();
            assert_relative_eq!(u[0], 1.0, epsilon = 1e-15);
            assert_relative_eq!(u[1], 1.0, epsilon = 1e-15);
            assert!(events.is_empty());
        }
    }

    #[test]
    fn conflicting_pair_records_override() {
        let hs = vec![
            Halfspace::new(vec![1.0, 0.0], 1.0, 0),
            Halfspace::new(vec![-1.0, 0.0], 0.0, 1),
        ];
        let (u, events) = sequential_project(&hs, &ext(&[0, 1]), &[0.0, 0.0]).unwrap();
        assert_relative_eq!(u[0], 0.0, epsilon = 1e-15);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].step, 2);
        assert_eq!(events[0].enforced_constraint, 1);
        assert_eq!(events[0].flipped_constraint, 0);
    }

    #[test]
    fn empty_constraint_set_is_identity() {
        let hs: Vec<Halfspace> = vec![];
        let (u, events) = sequential_project(&hs, &ext(&[]), &[0.3, -0.7]).unwrap();
        assert_eq!(u, vec![0.3, -0.7]);
        assert!(events.is_empty());
    }

    #[test]
    fn last_constraint_exactly_satisfied() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        use rand::Rng;
        for _ in 0..1000 {
            let n = rng.gen_range(1..=4);
            let hs: Vec<Halfspace> = (0..n)
                .map(|id| {
                    let a: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
                    let a = if crate::linalg::norm(&a) < 0.1 { vec![1.0, 0.0] } else { a };
                    Halfspace::new(a, rng.gen_range(-2.0..2.0), id)
                })
                .collect();
            let order: Vec<usize> = (0..n).collect();
            let u0: Vec<f64> = (0..2).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let (u, _) = sequential_project(&hs, &ext(&order), &u0).unwrap();
            assert!(hs[n - 1].margin(&u) >= -EPS_FEAS);
        }
    }

    #[test]
    fn orthogonal_antichain_extensions_agree() {
        let hs = vec![
            Halfspace::new(vec![1.0, 0.0, 0.0], 0.5, 0),
            Halfspace::new(vec![0.0, 1.0, 0.0], -0.2, 1),
            Halfspace::new(vec![0.0, 0.0, 1.0], 1.5, 2),
        ];
        let poset = SafetyPoset::antichain(3);
        let u0 = [0.1, -0.9, 0.4];
        let mut outputs = Vec::new();
        for e in poset.enumerate_linear_extensions(100) {
            let (u, _) = sequential_project(&hs, &e, &u0).unwrap();
            outputs.push(u);
        }
        for o in &outputs[1..] {
            for (a, b) in o.iter().zip(&outputs[0]) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn mixture_degenerate_weight_returns_head() {
        // logits peaked enough that softmax underflows to exactly (1, 0, 0)
        let combiner = HeadCombiner::new(CombineMode::Mixture, vec![1000.0, 0.0, 0.0], 1.0);
        let heads = vec![vec![1.0, 2.0], vec![-1.0, 0.0], vec![0.0, 0.0]];
        let (u, info) = combiner.combine::<ChaCha8Rng>(&heads, None).unwrap();
        assert_eq!(info.weights, vec![1.0, 0.0, 0.0]);
        assert_eq!(u, vec![1.0, 2.0]);
    }

    #[test]
    fn hard_mode_argmax_and_tie_break() {
        let heads = vec![vec![1.0], vec![2.0]];
        let c = HeadCombiner::new(CombineMode::Hard, vec![0.1, 2.0], 1.0);
        let (u, _) = c.combine::<ChaCha8Rng>(&heads, None).unwrap();
        assert_eq!(u, vec![2.0]);

        let tie = HeadCombiner::new(CombineMode::Hard, vec![1.0, 1.0], 1.0);
        let (_, info) = tie.combine::<ChaCha8Rng>(&heads, None).unwrap();
        assert_eq!(info.selected, Some(0));
    }

    #[test]
    fn mixture_stays_in_common_halfspace() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        use rand::Rng;
        for _ in 0..200 {
            let a: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let a = if crate::linalg::norm(&a) < 0.1 { vec![1.0, 0.0] } else { a };
            let h = Halfspace::new(a, rng.gen_range(-2.0..2.0), 0);
            let heads: Vec<Vec<f64>> = (0..3)
                .map(|_| {
                    let raw: Vec<f64> = (0..2).map(|_| rng.gen_range(-4.0..4.0)).collect();
                    h.project(&raw).unwrap()
                })
                .collect();
            let c = HeadCombiner::new(
                CombineMode::Mixture,
                vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                1.0,
            );
            let (u, info) = c.combine::<ChaCha8Rng>(&heads, None).unwrap();
            assert_relative_eq!(info.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert!(h.margin(&u) >= -1e-9);
        }
    }

    #[test]
    fn gumbel_training_weights_on_simplex_and_deterministic() {
        let heads = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let c = HeadCombiner::new(CombineMode::Gumbel, vec![0.3, -0.3], 1.0);
        let mut rng1 = ChaCha8Rng::seed_from_u64(5);
        let mut rng2 = ChaCha8Rng::seed_from_u64(5);
        let (u1, i1) = c.combine(&heads, Some(&mut rng1)).unwrap();
        let (u2, _) = c.combine(&heads, Some(&mut rng2)).unwrap();
        assert_eq!(u1, u2);
        let w = i1.weights;
        assert!(w.iter().all(|&v| v >= 0.0));
        assert_relative_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);

        // replay with stored noise reproduces the same output
        let (u3, _) = c.combine_with_noise(&heads, i1.gumbel_noise.as_ref().unwrap());
        assert_eq!(u1, u3);
    }

    #[test]
    fn gumbel_low_temperature_matches_hard_pick() {
        let heads = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]];
        let logits = vec![0.2, -0.4, 0.1];
        let c = HeadCombiner::new(CombineMode::Gumbel, logits.clone(), 1e-4);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (u, info) = c.combine(&heads, Some(&mut rng)).unwrap();
            let noise = info.gumbel_noise.unwrap();
            let perturbed: Vec<f64> = logits.iter().zip(&noise).map(|(&l, &g)| l + g).collect();
            let mut best = 0;
            for (i, &p) in perturbed.iter().enumerate() {
                if p > perturbed[best] {
                    best = i;
                }
            }
            for (a, b) in u.iter().zip(&heads[best]) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn gumbel_inference_is_pure_argmax() {
        let heads = vec![vec![1.0], vec![2.0]];
        let c = HeadCombiner::new(CombineMode::Gumbel, vec![0.0, 1.0], 1.0);
        let (u, info) = c.combine::<ChaCha8Rng>(&heads, None).unwrap();
        assert_eq!(u, vec![2.0]);
        assert_eq!(info.selected, Some(1));
    }

    #[test]
    fn empty_heads_rejected() {
        let c = HeadCombiner::new(CombineMode::Mixture, vec![], 1.0);
        assert_eq!(
            c.combine::<ChaCha8Rng>(&[], None).unwrap_err(),
            CompositionError::EmptyHeads
        );
    }

    #[test]
    fn audit_permits_higher_priority_overrides_only() {
        let poset = SafetyPoset::new(2, [(0, 1)]).unwrap();
        assert!(audit_poset_respecting(&[], &poset).is_empty());

        let permitted = OverrideEvent {
            step: 2,
            enforced_constraint: 1,
            flipped_constraint: 0,
            margin_before: 0.1,
            margin_after: -0.2,
        };
        assert!(audit_poset_respecting(&[permitted.clone()], &poset).is_empty());

        let violating = OverrideEvent {
            step: 2,
            enforced_constraint: 0,
            flipped_constraint: 1,
            margin_before: 0.1,
            margin_after: -0.2,
        };
        let bad = audit_poset_respecting(&[violating.clone()], &poset);
        assert_eq!(bad, vec![violating]);
    }

    /// Generates antichain halfspace sets satisfying the Lemma B.1
    /// compatibility conditions: pairwise nonnegative normal dot products
    /// with a common feasible point.
    fn compatible_antichain(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<Halfspace> {
        use rand::Rng;
        loop {
            let normals: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    // same orthant keeps pairwise dots nonnegative
                    (0..m).map(|_| rng.gen_range(0.05..2.0)).collect()
                })
                .collect();
            let anchor: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let hs: Vec<Halfspace> = normals
                .into_iter()
                .enumerate()
                .map(|(id, a)| {
                    let slack = rng.gen_range(0.0..1.0);
                    let c = crate::linalg::dot(&a, &anchor) - slack;
                    Halfspace::new(a, c, id)
                })
                .collect();
            let ok = hs.iter().enumerate().all(|(i, hi)| {
                hs.iter()
                    .skip(i + 1)
                    .all(|hj| crate::linalg::dot(&hi.a, &hj.a) >= 0.0)
            });
            if ok {
                return hs;
            }
        }
    }

    #[test]
    fn compatible_antichain_rollouts_have_zero_violations() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        use rand::Rng;
        let poset = SafetyPoset::antichain(3);
        let exts = poset.enumerate_linear_extensions(6);
        for _ in 0..1000 {
            let hs = compatible_antichain(&mut rng, 3, 2);
            let u0: Vec<f64> = (0..2).map(|_| rng.gen_range(-4.0..4.0)).collect();
            for e in &exts {
                let (_, events) = sequential_project(&hs, e, &u0).unwrap();
                let violations = audit_poset_respecting(&events, &poset);
                assert!(violations.is_empty(), "violations: {:?}", violations);
            }
        }
    }

    #[test]
    fn mixture_precondition_report() {
        let poset = SafetyPoset::new(2, [(0, 1)]).unwrap();
        let hs = vec![
            Halfspace::new(vec![1.0, 0.0], 0.0, 0),
            Halfspace::new(vec![0.0, 1.0], 0.0, 1),
        ];
        let ok_heads = vec![vec![1.0, 1.0], vec![-5.0, 2.0]];
        let rep = check_mixture_safety_preconditions(&ok_heads, &hs, &poset);
        assert!(rep.all_pass());
        assert!(rep.flagged().is_empty());

        let bad_heads = vec![vec![1.0, 1.0], vec![1.0, -2.0]];
        let rep = check_mixture_safety_preconditions(&bad_heads, &hs, &poset);
        assert!(!rep.all_pass());
        assert_eq!(rep.flagged(), vec![1]);
    }

    #[test]
    fn mixture_feasibility_equals_all_heads_conjunction() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        use rand::Rng;
        let poset = SafetyPoset::antichain(2);
        for _ in 0..500 {
            let hs = compatible_antichain(&mut rng, 2, 2);
            let heads: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..2).map(|_| rng.gen_range(-4.0..4.0)).collect())
                .collect();
            let rep = check_mixture_safety_preconditions(&heads, &hs, &poset);
            let weights = softmax(&[
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]);
            let mixed = weighted_sum(&heads, &weights, 2);
            if rep.all_pass() {
                for h in &hs {
                    assert!(h.margin(&mixed) >= -1e-9);
                }
            }
        }
    }
}
