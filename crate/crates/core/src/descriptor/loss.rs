//! Pixel-wise contrastive loss with its analytic gradient.

use serde::{Deserialize, Serialize};

use super::DescriptorMap;
use crate::correspondence::{PixelMatchSet, PixelPair};
use crate::error::{domain_err, Result};
use crate::geometry::Pixel;

/// How the three non-match classes are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonMatchNormalization {
    /// Each class divided by its own count of active (margin-violating) pairs, then summed.
    #[default]
    PerClass,
    /// All classes pooled and divided by the total active count.
    Pooled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveLoss {
    pub total: f64,
    pub matched: f64,
    pub nonmatched: f64,
    /// Non-match term of each class (object-object, object-background,
    /// background-background) before summation; zeros in pooled mode.
    pub per_class: [f64; 3],
    /// Number of active non-match pairs per class.
    pub active: [usize; 3],
}

/// dL/d(map) for both maps, laid out like [`DescriptorMap::values`].
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub map_a: Vec<f64>,
    pub map_b: Vec<f64>,
}

fn check_pairs(map_a: &DescriptorMap, map_b: &DescriptorMap, pairs: &[PixelPair]) -> Result<()> {
    for (a, b) in pairs {
        if !map_a.contains(*a) || !map_b.contains(*b) {
            return Err(domain_err!(
                "pair ({}, {}) -> ({}, {}) out of bounds",
                a.x,
                a.y,
                b.x,
                b.y
            ));
        }
    }
    Ok(())
}

fn distance(map_a: &DescriptorMap, a: Pixel, map_b: &DescriptorMap, b: Pixel) -> f64 {
    map_a
        .at(a)
        .iter()
        .zip(map_b.at(b))
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Loss value only.
pub fn contrastive_loss(
    map_a: &DescriptorMap,
    map_b: &DescriptorMap,
    pairs: &PixelMatchSet,
    margin: f64,
    mode: NonMatchNormalization,
) -> Result<ContrastiveLoss> {
    evaluate(map_a, map_b, pairs, margin, mode, None)
}

/// Loss value and its gradient with respect to both descriptor maps.
pub fn contrastive_loss_with_grad(
    map_a: &DescriptorMap,
    map_b: &DescriptorMap,
    pairs: &PixelMatchSet,
    margin: f64,
    mode: NonMatchNormalization,
) -> Result<(ContrastiveLoss, LossGradient)> {
    let mut grad = LossGradient {
        map_a: vec![0.0; map_a.values.len()],
        map_b: vec![0.0; map_b.values.len()],
    };
    let loss = evaluate(map_a, map_b, pairs, margin, mode, Some(&mut grad))?;
    Ok((loss, grad))
}

fn evaluate(
    map_a: &DescriptorMap,
    map_b: &DescriptorMap,
    pairs: &PixelMatchSet,
    margin: f64,
    mode: NonMatchNormalization,
    mut grad: Option<&mut LossGradient>,
) -> Result<ContrastiveLoss> {
    if map_a.dim != map_b.dim {
        return Err(domain_err!(
            "descriptor dimensions differ: {} vs {}",
            map_a.dim,
            map_b.dim
        ));
    }
    if pairs.matches.is_empty() {
        return Err(domain_err!("contrastive loss needs at least one match"));
    }
    if !(margin > 0.0) {
        return Err(domain_err!("margin must be positive"));
    }
    check_pairs(map_a, map_b, &pairs.matches)?;
    for class in pairs.nonmatch_classes() {
        check_pairs(map_a, map_b, class)?;
    }
    let dim = map_a.dim;

    let n_m = pairs.matches.len() as f64;
    let mut matched = 0.0;
    for &(a, b) in &pairs.matches {
        let (va, vb) = (map_a.at(a), map_b.at(b));
        matched += va.iter().zip(vb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        if let Some(g) = grad.as_deref_mut() {
            let (ia, ib) = (map_a.offset(a), map_b.offset(b));
            for k in 0..dim {
                let d = 2.0 * (va[k] - vb[k]) / n_m;
                g.map_a[ia + k] += d;
                g.map_b[ib + k] -= d;
            }
        }
    }
    matched /= n_m;

    // hinge terms per class: (sum of squared hinge, active count, active pairs with distance)
    let classes = pairs.nonmatch_classes();
    let mut sums = [0.0f64; 3];
    let mut active = [0usize; 3];
    let mut active_pairs: [Vec<(PixelPair, f64)>; 3] = Default::default();
    for (c, class) in classes.iter().enumerate() {
        for &(a, b) in class.iter() {
            let d = distance(map_a, a, map_b, b);
            if d < margin {
                sums[c] += (margin - d) * (margin - d);
                active[c] += 1;
                active_pairs[c].push(((a, b), d));
            }
        }
    }
    let mut per_class = [0.0f64; 3];
    let (nonmatched, divisors) = match mode {
        NonMatchNormalization::PerClass => {
            let mut total = 0.0;
            let mut div = [0.0f64; 3];
            for c in 0..3 {
                if active[c] > 0 {
                    per_class[c] = sums[c] / active[c] as f64;
                    total += per_class[c];
                    div[c] = active[c] as f64;
                }
            }
            (total, div)
        }
        NonMatchNormalization::Pooled => {
            let n: usize = active.iter().sum();
            if n > 0 {
                (sums.iter().sum::<f64>() / n as f64, [n as f64; 3])
            } else {
                (0.0, [0.0; 3])
            }
        }
    };
    if let Some(g) = grad.as_deref_mut() {
        for c in 0..3 {
            for &((a, b), d) in &active_pairs[c] {
                // zero subgradient where the descriptors coincide
                if d <= 0.0 {
                    continue;
                }
                let scale = -2.0 * (margin - d) / (d * divisors[c]);
                let (va, vb) = (map_a.at(a), map_b.at(b));
                let (ia, ib) = (map_a.offset(a), map_b.offset(b));
                for k in 0..dim {
                    let diff = scale * (va[k] - vb[k]);
                    g.map_a[ia + k] += diff;
                    g.map_b[ib + k] -= diff;
                }
            }
        }
    }
    Ok(ContrastiveLoss {
        total: matched + nonmatched,
        matched,
        nonmatched,
        per_class,
        active,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair_set(matches: Vec<PixelPair>, oo: Vec<PixelPair>, ob: Vec<PixelPair>, bb: Vec<PixelPair>) -> PixelMatchSet {
        PixelMatchSet {
            matches,
            nonmatch_oo: oo,
            nonmatch_ob: ob,
            nonmatch_bb: bb,
            frame_ids: None,
            shortfall: false,
            empty: false,
        }
    }

    fn px(x: i32, y: i32) -> Pixel {
        Pixel::new(x, y)
    }

    #[test]
    fn zero_when_matches_agree_and_nonmatches_clear_the_margin() {
        let mut a = DescriptorMap::zeros(4, 4, 2);
        a.at_mut(px(0, 0)).copy_from_slice(&[1.0, 0.0]);
        a.at_mut(px(1, 0)).copy_from_slice(&[0.0, 1.0]);
        let b = a.clone();
        let set = pair_set(vec![(px(0, 0), px(0, 0))], vec![(px(0, 0), px(1, 0))], vec![], vec![]);
        let loss = contrastive_loss(&a, &b, &set, 0.5, NonMatchNormalization::PerClass).unwrap();
        assert_eq!(loss.total, 0.0);
        assert_eq!(loss.matched, 0.0);
        assert_eq!(loss.nonmatched, 0.0);
    }

    #[test]
    fn single_nonmatch_at_distance_point_three() {
        let mut a = DescriptorMap::zeros(2, 1, 2);
        let mut b = DescriptorMap::zeros(2, 1, 2);
        b.at_mut(px(1, 0)).copy_from_slice(&[0.3, 0.0]);
        a.at_mut(px(0, 0)).copy_from_slice(&[0.0, 0.0]);
        let set = pair_set(vec![(px(0, 0), px(0, 0))], vec![(px(0, 0), px(1, 0))], vec![], vec![]);
        let loss = contrastive_loss(&a, &b, &set, 0.5, NonMatchNormalization::PerClass).unwrap();
        // (0.5 − 0.3)² / 1; f64 evaluates 0.2² as 0.04000000000000001
        assert!((loss.nonmatched - 0.04).abs() <= 1e-12, "{}", loss.nonmatched);
        assert_eq!(loss.active, [1, 0, 0]);
    }

    #[test]
    fn empty_matches_are_rejected() {
        let a = DescriptorMap::zeros(2, 2, 2);
        let set = pair_set(vec![], vec![], vec![], vec![]);
        assert!(contrastive_loss(&a, &a, &set, 0.5, NonMatchNormalization::PerClass).is_err());
        let set = pair_set(vec![(px(5, 0), px(0, 0))], vec![], vec![], vec![]);
        assert!(contrastive_loss(&a, &a, &set, 0.5, NonMatchNormalization::PerClass).is_err());
    }

    fn random_case(seed: u64, w: usize, h: usize, d: usize) -> (DescriptorMap, DescriptorMap, PixelMatchSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rand_map = |rng: &mut ChaCha8Rng| {
            let mut m = DescriptorMap::zeros(w, h, d);
            m.values.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
            m
        };
        let a = rand_map(&mut rng);
        let b = rand_map(&mut rng);
        let pairs = |n: usize, rng: &mut ChaCha8Rng| -> Vec<PixelPair> {
            (0..n)
                .map(|_| {
                    (
                        px(rng.random_range(0..w as i32), rng.random_range(0..h as i32)),
                        px(rng.random_range(0..w as i32), rng.random_range(0..h as i32)),
                    )
                })
                .collect()
        };
        let set = pair_set(
            pairs(20, &mut rng),
            pairs(30, &mut rng),
            pairs(30, &mut rng),
            pairs(30, &mut rng),
        );
        (a, b, set)
    }

    #[test]
    fn gradient_matches_central_differences() {
        for mode in [NonMatchNormalization::PerClass, NonMatchNormalization::Pooled] {
            let (a, b, set) = random_case(7, 16, 16, 4);
            let (_, grad) = contrastive_loss_with_grad(&a, &b, &set, 0.5, mode).unwrap();
            let h = 1e-6;
            for which in 0..2 {
                let (base, g) = if which == 0 {
                    (&a, &grad.map_a)
                } else {
                    (&b, &grad.map_b)
                };
                for i in 0..base.values.len() {
                    let eval = |delta: f64| {
                        let mut m = base.clone();
                        m.values[i] += delta;
                        let (ma, mb) = if which == 0 { (&m, &b) } else { (&a, &m) };
                        contrastive_loss(ma, mb, &set, 0.5, mode).unwrap().total
                    };
                    let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                    let err = (g[i] - numeric).abs();
                    assert!(
                        err <= 1e-4 * numeric.abs().max(g[i].abs()) + 1e-9,
                        "entry {i}: {} vs {numeric}",
                        g[i]
                    );
                }
            }
        }
    }

    #[test]
    fn coincident_nonmatch_has_zero_gradient() {
        let a = DescriptorMap::zeros(2, 1, 3);
        let set = pair_set(vec![(px(0, 0), px(0, 0))], vec![(px(0, 0), px(1, 0))], vec![], vec![]);
        let (loss, grad) = contrastive_loss_with_grad(&a, &a, &set, 0.5, NonMatchNormalization::PerClass).unwrap();
        assert!((loss.nonmatched - 0.25).abs() < 1e-15);
        assert!(grad.map_a.iter().chain(&grad.map_b).all(|g| *g == 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn loss_is_nonnegative_and_permutation_invariant(seed in 0u64..10_000, rot in 0usize..20) {
            let (a, b, set) = random_case(seed, 6, 5, 3);
            let loss = contrastive_loss(&a, &b, &set, 0.5, NonMatchNormalization::PerClass).unwrap();
            prop_assert!(loss.total >= 0.0 && loss.matched >= 0.0 && loss.nonmatched >= 0.0);
            let mut shuffled = set.clone();
            shuffled.matches.rotate_left(rot);
            shuffled.nonmatch_oo.reverse();
            shuffled.nonmatch_bb.rotate_right(rot);
            let again = contrastive_loss(&a, &b, &shuffled, 0.5, NonMatchNormalization::PerClass).unwrap();
            prop_assert!((loss.total - again.total).abs() <= 1e-12 * loss.total.max(1.0));
            prop_assert_eq!(loss.active, again.active);
        }

        #[test]
        fn match_term_vanishes_iff_descriptors_agree(seed in 0u64..10_000) {
            let (a, _, set) = random_case(seed, 6, 5, 3);
            let only_matches = PixelMatchSet { nonmatch_oo: vec![], nonmatch_ob: vec![], nonmatch_bb: vec![], ..set.clone() };
            let same = contrastive_loss(&a, &a, &pair_set(set.matches.iter().map(|(p, _)| (*p, *p)).collect(), vec![], vec![], vec![]), 0.5, NonMatchNormalization::PerClass).unwrap();
            prop_assert_eq!(same.matched, 0.0);
            let mut b = a.clone();
            b.values.iter_mut().for_each(|v| *v += 0.01);
            let shifted = contrastive_loss(&a, &b, &only_matches, 0.5, NonMatchNormalization::PerClass).unwrap();
            prop_assert!(shifted.matched > 0.0);
        }
    }
}
