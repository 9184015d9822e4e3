//! Supervised, pseudo-label and distillation losses, and the four ways of
//! combining them into one training objective.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{softmax_rows, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossVariant {
    /// Labeled loss plus distillation on the labeled batch.
    Lab,
    /// `Lab` plus the masked pseudo-label loss.
    LabFm,
    /// `Lab` plus distillation on the unlabeled batch.
    LabDist,
    /// All terms.
    Full,
}

impl LossVariant {
    pub const ALL: [LossVariant; 4] = [Self::Lab, Self::LabFm, Self::LabDist, Self::Full];

    pub fn name(self) -> &'static str {
        match self {
            Self::Lab => "lab",
            Self::LabFm => "lab_fm",
            Self::LabDist => "lab_dist",
            Self::Full => "full",
        }
    }

    pub fn uses_fixmatch(self) -> bool {
        matches!(self, Self::LabFm | Self::Full)
    }

    pub fn uses_unlabeled_distill(self) -> bool {
        matches!(self, Self::LabDist | Self::Full)
    }

    pub fn uses_unlabeled(self) -> bool {
        self != Self::Lab
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown loss variant `{s}` (lab, lab_fm, lab_dist, full)")))
    }
}

fn check_alpha(alpha: f32) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Contract(format!("label smoothing must be in [0, 1), got {alpha}")));
    }
    Ok(())
}

/// `(1 - alpha) * onehot(y) + alpha / classes`.
pub fn label_smooth(y: usize, alpha: f32, classes: usize) -> Result<Vec<f32>> {
    check_alpha(alpha)?;
    if y >= classes {
        return Err(Error::Contract(format!("label {y} out of range for {classes} classes")));
    }
    let off = alpha / classes as f32;
    let mut t = vec![off; classes];
    t[y] = 1.0 - alpha + off;
    Ok(t)
}

/// Row-major smoothed targets for a batch of labels.
pub fn smoothed_targets(labels: &[usize], alpha: f32, classes: usize) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(labels.len() * classes);
    for &y in labels {
        out.extend(label_smooth(y, alpha, classes)?);
    }
    Ok(out)
}

fn batch_dims(g: &Graph, logits: Var) -> Result<(usize, usize)> {
    match g.shape(logits) {
        [b, c] => Ok((*b, *c)),
        s => Err(Error::Dimension(format!("expected [B, C] logits, got {s:?}"))),
    }
}

/// Cross entropy of maxnet logits against smoothed labels, batch mean.
pub fn labeled_loss(g: &mut Graph, logits: Var, labels: &[usize], alpha: f32) -> Result<Var> {
    let (b, c) = batch_dims(g, logits)?;
    if labels.len() != b {
        return Err(Error::Dimension(format!("{} labels for a batch of {b}", labels.len())));
    }
    let targets = smoothed_targets(labels, alpha, c)?;
    g.soft_cross_entropy(logits, &targets)
}

/// Arg-max labels of weak-view probabilities and the strict confidence mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub labels: Vec<usize>,
    pub mask: Vec<bool>,
}

impl PseudoLabels {
    pub fn from_probs(probs: &[f32], classes: usize, tau: f32) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::Contract(format!("confidence threshold must be in (0, 1), got {tau}")));
        }
        if classes == 0 || probs.len() % classes != 0 {
            return Err(Error::Dimension(format!(
                "{} probabilities do not split into rows of {classes}",
                probs.len()
            )));
        }
        let mut labels = Vec::with_capacity(probs.len() / classes);
        let mut mask = Vec::with_capacity(labels.capacity());
        for row in probs.chunks(classes) {
            // first maximal entry wins ties
            let (arg, best) = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });
            labels.push(arg);
            mask.push(best > tau);
        }
        Ok(Self { labels, mask })
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Masked pseudo-label loss on strong-view logits, normalized by the full
/// batch size. Pseudo-labels are constants. Returns the loss and the number
/// of samples that passed the threshold.
pub fn fixmatch_loss(
    g: &mut Graph,
    weak_probs: &[f32],
    strong_logits: Var,
    tau: f32,
    alpha: f32,
) -> Result<(Var, usize)> {
    let (b, c) = batch_dims(g, strong_logits)?;
    if weak_probs.len() != b * c {
        return Err(Error::Dimension(format!(
            "{} weak-view probabilities for {b}x{c} strong logits",
            weak_probs.len()
        )));
    }
    let pseudo = PseudoLabels::from_probs(weak_probs, c, tau)?;
    let targets = smoothed_targets(&pseudo.labels, alpha, c)?;
    let weights: Vec<f32> = pseudo.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let loss = g.weighted_cross_entropy(strong_logits, &targets, &weights)?;
    Ok((loss, pseudo.count()))
}

/// Cross entropy of student logits against the softmax of constant teacher
/// logits, batch mean.
pub fn distill_loss(g: &mut Graph, teacher_logits: &[f32], student_logits: Var) -> Result<Var> {
    let (b, c) = batch_dims(g, student_logits)?;
    if teacher_logits.len() != b * c {
        return Err(Error::Dimension(format!(
            "{} teacher logits for {b}x{c} student logits",
            teacher_logits.len()
        )));
    }
    let targets = softmax_rows(teacher_logits, c);
    g.soft_cross_entropy(student_logits, &targets)
}

/// The graph nodes of every loss term computed in one step.
#[derive(Debug, Clone, Default)]
pub struct LossParts {
    pub labeled: Option<Var>,
    /// Pseudo-label loss and its mask count.
    pub fixmatch: Option<(Var, usize)>,
    /// One term per student on the labeled batch.
    pub distill_labeled: Vec<Var>,
    /// One term per student on the unlabeled batch, same order.
    pub distill_unlabeled: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepLossReport {
    pub labeled_term: f32,
    pub fm_term: f32,
    pub fm_mask_count: usize,
    /// Per student, labeled plus (when enabled) unlabeled distillation.
    pub distill_terms: Vec<f32>,
    pub total: f32,
}

impl StepLossReport {
    pub fn distill_sum(&self) -> f32 {
        self.distill_terms.iter().sum()
    }
}

/// Sums the terms enabled by `variant` into one scalar node.
pub fn compose_step_loss(
    g: &mut Graph,
    variant: LossVariant,
    parts: &LossParts,
) -> Result<(Var, StepLossReport)> {
    let labeled = parts
        .labeled
        .ok_or_else(|| Error::Contract("the labeled loss term is required".into()))?;
    let mut report = StepLossReport {
        labeled_term: g.value(labeled)[0],
        ..StepLossReport::default()
    };
    let mut total = labeled;
    if variant.uses_fixmatch() {
        let (fm, count) = parts.fixmatch.ok_or_else(|| {
            Error::Contract(format!("variant {variant} needs the pseudo-label term"))
        })?;
        report.fm_term = g.value(fm)[0];
        report.fm_mask_count = count;
        total = g.add(total, fm)?;
    }
    let unlabeled = variant.uses_unlabeled_distill();
    if unlabeled && parts.distill_unlabeled.len() != parts.distill_labeled.len() {
        return Err(Error::Contract(format!(
            "variant {variant} needs {} unlabeled distillation terms, got {}",
            parts.distill_labeled.len(),
            parts.distill_unlabeled.len()
        )));
    }
    for (i, &d) in parts.distill_labeled.iter().enumerate() {
        let mut term = g.value(d)[0];
        total = g.add(total, d)?;
        if unlabeled {
            let du = parts.distill_unlabeled[i];
            term += g.value(du)[0];
            total = g.add(total, du)?;
        }
        report.distill_terms.push(term);
    }
    report.total = g.value(total)[0];
    Ok((total, report))
}

/// A scalar zero that carries no gradient, for terms that were skipped.
pub fn zero_term(g: &mut Graph) -> Var {
    g.input(Tensor::scalar(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamSet;

    #[test]
    fn smoothing_values() {
        assert_eq!(label_smooth(2, 0.0, 4).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        let t = label_smooth(3, 0.1, 10).unwrap();
        assert!((t[3] - 0.91).abs() < 1e-7);
        assert!(t.iter().enumerate().all(|(i, v)| i == 3 || (v - 0.01).abs() < 1e-7));
        assert!((t.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert!(matches!(label_smooth(10, 0.1, 10), Err(Error::Contract(_))));
        assert!(matches!(label_smooth(0, 1.0, 10), Err(Error::Contract(_))));
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let ps = ParamSet::new();
        let mut g = Graph::new(&ps);
        let z = g.leaf(Tensor::zeros(&[3, 10]));
        let l = labeled_loss(&mut g, z, &[0, 4, 9], 0.1).unwrap();
        assert!((g.value(l)[0] - 10f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn confident_sample_on_uniform_strong_logits() {
        let ps = ParamSet::new();
        let mut g = Graph::new(&ps);
        let z = g.leaf(Tensor::zeros(&[1, 4]));
        let (l, n) = fixmatch_loss(&mut g, &[0.0, 0.01, 0.99, 0.0], z, 0.95, 0.0).unwrap();
        assert_eq!(n, 1);
        assert!((g.value(l)[0] - 4f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn threshold_is_strict() {
        let p = PseudoLabels::from_probs(&[0.95, 0.05, 0.05, 0.95, 0.951, 0.049], 2, 0.95).unwrap();
        assert_eq!(p.mask, vec![false, false, true]);
        assert_eq!(p.labels, vec![0, 1, 0]);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in LossVariant::ALL {
            assert_eq!(v.name().parse::<LossVariant>().unwrap(), v);
        }
        assert!("semi".parse::<LossVariant>().is_err());
    }

    #[test]
    fn lab_ignores_unlabeled_parts_and_full_requires_them() {
        let ps = ParamSet::new();
        let mut g = Graph::new(&ps);
        let a = g.leaf(Tensor::scalar(1.5));
        let d = g.leaf(Tensor::scalar(0.25));
        let u = g.leaf(Tensor::scalar(0.5));
        let parts = LossParts {
            labeled: Some(a),
            fixmatch: None,
            distill_labeled: vec![d],
            distill_unlabeled: vec![u],
        };
        let (_, r) = compose_step_loss(&mut g, LossVariant::Lab, &parts).unwrap();
        assert_eq!(r.total, 1.75);
        assert_eq!(r.distill_terms, vec![0.25]);
        assert!(matches!(
            compose_step_loss(&mut g, LossVariant::Full, &parts),
            Err(Error::Contract(_))
        ));
        let (_, r) = compose_step_loss(&mut g, LossVariant::LabDist, &parts).unwrap();
        assert_eq!(r.total, 2.25);
    }
}
