//! Reference (non-differentiable) forms of the three distillation losses.
//!
//! Every term is a cross-entropy `H(p_t, p_s) = −Σ p_t·ln p_s` between a
//! teacher and a student distribution, and each double sum over view pairs
//! is taken as a mean so magnitudes do not depend on view counts. The
//! trainer computes the same quantities on the autodiff graph; these
//! versions serve as the specification and as test oracles.

use serde::{Deserialize, Serialize};

use crate::graph::PROB_FLOOR;
use crate::tensor::{Result, TensorError};

use super::heads::ProtoDistribution;

/// `−Σ p_t·ln max(p_s, 1e-8)`.
pub fn cross_entropy(p_t: &ProtoDistribution, p_s: &ProtoDistribution) -> Result<f64> {
    if p_t.k() != p_s.k() {
        return Err(TensorError::Shape(format!(
            "distributions of size {} and {}",
            p_t.k(),
            p_s.k()
        )));
    }
    Ok(-p_t
        .values()
        .iter()
        .zip(p_s.values())
        .map(|(&t, &s)| t * s.max(PROB_FLOOR).ln())
        .sum::<f64>())
}

fn mean(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Class-token loss. Every local crop is compared with every teacher view.
/// Masked view `j` comes from the same crop region as teacher view `j`, so
/// it is compared with all teacher views except `j`.
pub fn loss_classtoken(
    teachers: &[ProtoDistribution],
    locals: &[ProtoDistribution],
    masked: &[ProtoDistribution],
) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0;
    for t in teachers {
        for s in locals {
            sum += cross_entropy(t, s)?;
            n += 1;
        }
    }
    for (j, s) in masked.iter().enumerate() {
        for (i, t) in teachers.iter().enumerate() {
            if i != j {
                sum += cross_entropy(t, s)?;
                n += 1;
            }
        }
    }
    Ok(mean(sum, n))
}

/// Seasonal loss: mean over every (teacher view, seasonal view) pair; zero
/// when the sample has no seasonal images.
pub fn loss_seasonal(
    teachers: &[ProtoDistribution],
    seasonal: &[ProtoDistribution],
) -> Result<f64> {
    let mut sum = 0.0;
    for t in teachers {
        for s in seasonal {
            sum += cross_entropy(t, s)?;
        }
    }
    Ok(mean(sum, teachers.len() * seasonal.len()))
}

/// Masked-patch loss. `teacher[v]` and `student[v]` hold one distribution
/// per grid cell of masked view `v` (the teacher's from the unmasked twin);
/// the loss is the mean cross-entropy over every index in `masks`.
pub fn loss_patch(
    teacher: &[Vec<ProtoDistribution>],
    student: &[Vec<ProtoDistribution>],
    masks: &[Vec<usize>],
) -> Result<f64> {
    if teacher.len() != masks.len() || student.len() != masks.len() {
        return Err(TensorError::Shape(format!(
            "{} teacher grids, {} student grids, {} mask sets",
            teacher.len(),
            student.len(),
            masks.len()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0;
    for ((t, s), mask) in teacher.iter().zip(student).zip(masks) {
        for &i in mask {
            if i >= t.len() || i >= s.len() {
                return Err(TensorError::Shape(format!(
                    "masked index {i} outside a grid of {} cells",
                    t.len().min(s.len())
                )));
            }
            sum += cross_entropy(&t[i], &s[i])?;
            n += 1;
        }
    }
    Ok(mean(sum, n))
}

/// Per-term multipliers on the total loss; the default is the plain sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub classtoken: f64,
    pub season: f64,
    pub patch: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            classtoken: 1.0,
            season: 1.0,
            patch: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("classtoken", self.classtoken),
            ("season", self.season),
            ("patch", self.patch),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(TensorError::Param(format!(
                    "loss weight {name} must be finite and nonnegative, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Losses and collapse monitor for one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_classtoken: f64,
    pub l_season: f64,
    pub l_patch: f64,
    pub l_total: f64,
    pub teacher_entropy: f64,
}

impl LossReport {
    /// Builds a report whose total is the weighted sum of its parts.
    pub fn new(
        l_classtoken: f64,
        l_season: f64,
        l_patch: f64,
        weights: &LossWeights,
        teacher_entropy: f64,
    ) -> Self {
        let l_total = total_loss(l_classtoken, l_season, l_patch, weights);
        Self {
            l_classtoken,
            l_season,
            l_patch,
            l_total,
            teacher_entropy,
        }
    }
}

pub fn total_loss(l_classtoken: f64, l_season: f64, l_patch: f64, weights: &LossWeights) -> f64 {
    weights.classtoken * l_classtoken + weights.season * l_season + weights.patch * l_patch
}

/// Entropy of the mean of `dists`: a batch-level collapse monitor that
/// drops towards zero when every input maps to the same prototype.
pub fn marginal_entropy(dists: &[ProtoDistribution]) -> f64 {
    let Some(first) = dists.first() else {
        return 0.0;
    };
    let mut mean = vec![0.0; first.k()];
    for d in dists {
        mean.iter_mut().zip(d.values()).for_each(|(m, v)| *m += v);
    }
    let n = dists.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    crate::kernels::entropy(&mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pd(v: &[f64]) -> ProtoDistribution {
        ProtoDistribution::new(v.to_vec()).unwrap()
    }

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn classtoken_examples() {
        let hot = ProtoDistribution::one_hot(4, 2);
        let same = vec![hot.clone(); 8];
        assert_eq!(
            loss_classtoken(
                &[hot.clone(), hot.clone()],
                &same,
                &[hot.clone(), hot.clone()]
            )
            .unwrap(),
            0.0
        );
        let u = ProtoDistribution::uniform(16);
        let l = loss_classtoken(
            &[u.clone(), u.clone()],
            &vec![u.clone(); 8],
            &[u.clone(), u.clone()],
        )
        .unwrap();
        assert!((l - 16f64.ln()).abs() < 1e-12);
        let l = loss_classtoken(&[pd(&[1.0, 0.0])], &[pd(&[0.25, 0.75])], &[]).unwrap();
        assert!((l - 2.0 * LN2).abs() < 1e-12);
    }

    #[test]
    fn masked_view_skips_its_own_teacher() {
        let t = [pd(&[1.0, 0.0]), pd(&[0.0, 1.0])];
        // masked view 0 only sees teacher 1, masked view 1 only teacher 0
        let masked = [pd(&[0.5, 0.5]), pd(&[0.25, 0.75])];
        let l = loss_classtoken(&t, &[], &masked).unwrap();
        assert!((l - (LN2 + 4f64.ln()) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn local_order_is_irrelevant() {
        let t = [pd(&[0.7, 0.3]), pd(&[0.2, 0.8])];
        let locals: Vec<_> = (1..=8)
            .map(|i| pd(&[i as f64 / 10.0, 1.0 - i as f64 / 10.0]))
            .collect();
        let mut rev = locals.clone();
        rev.reverse();
        let a = loss_classtoken(&t, &locals, &[]).unwrap();
        let b = loss_classtoken(&t, &rev, &[]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn seasonal_examples() {
        let u = ProtoDistribution::uniform(8);
        assert_eq!(loss_seasonal(&[u.clone(), u.clone()], &[]).unwrap(), 0.0);
        assert!(
            (loss_seasonal(&[u.clone(), u.clone()], &[u.clone(), u.clone(), u.clone()]).unwrap()
                - 8f64.ln())
            .abs()
                < 1e-12
        );
        let h = ProtoDistribution::one_hot(8, 1);
        assert_eq!(
            loss_seasonal(&[h.clone(), h.clone()], &[h.clone(), h.clone(), h]).unwrap(),
            0.0
        );
    }

    #[test]
    fn patch_examples() {
        let u = ProtoDistribution::uniform(32);
        let grid = vec![u.clone(); 9];
        assert_eq!(
            loss_patch(
                &[grid.clone(), grid.clone()],
                &[grid.clone(), grid.clone()],
                &[vec![], vec![]]
            )
            .unwrap(),
            0.0
        );
        let l = loss_patch(
            std::slice::from_ref(&grid),
            std::slice::from_ref(&grid),
            &[vec![0, 2, 4, 6, 8]],
        )
        .unwrap();
        assert!((l - 32f64.ln()).abs() < 1e-12);
        let t = vec![pd(&[1.0, 0.0]); 4];
        let s = vec![pd(&[0.5, 0.5]); 4];
        assert!(
            (loss_patch(
                std::slice::from_ref(&t),
                std::slice::from_ref(&s),
                &[vec![3]]
            )
            .unwrap()
                - LN2)
                .abs()
                < 1e-12
        );
        assert!(matches!(
            loss_patch(&[t], &[s], &[vec![4]]),
            Err(TensorError::Shape(_))
        ));
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w), 0.0);
        assert!((total_loss(LN2, 0.0, LN2, &w) - 2.0 * LN2).abs() < 1e-15);
        let no_season = LossWeights { season: 0.0, ..w };
        assert_eq!(total_loss(1.0, 5.0, 2.0, &no_season), 3.0);
        let r = LossReport::new(0.3, 0.2, 0.1, &w, 1.0);
        assert!((r.l_total - (r.l_classtoken + r.l_season + r.l_patch)).abs() < 1e-12);
    }

    #[test]
    fn shared_distribution_gives_its_entropy() {
        // same views, same heads, equal temperatures, zero centers
        let p = ProtoDistribution::from_logits(&[0.3, -1.0, 2.0, 0.1], 1.0).unwrap();
        let l = loss_classtoken(&[p.clone(), p.clone()], &vec![p.clone(); 8], &[]).unwrap();
        assert!((l - p.entropy()).abs() < 1e-12, "{l} vs {}", p.entropy());
    }

    #[test]
    fn marginal_entropy_detects_collapse() {
        let hot = ProtoDistribution::one_hot(4, 0);
        assert_eq!(marginal_entropy(&[hot.clone(), hot.clone()]), 0.0);
        let spread: Vec<_> = (0..4).map(|i| ProtoDistribution::one_hot(4, i)).collect();
        assert!((marginal_entropy(&spread) - 4f64.ln()).abs() < 1e-12);
    }
}
