//! Loss terms over tape variables, the loss weights and the per-step report.

use handsplit_tape::{Element, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Heatmap regression: mean absolute difference.
pub fn pose_loss<T: Element>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    Ok(tape.l1_loss(pred, target)?)
}

/// Image reconstruction: mean absolute difference.
pub fn recon_loss<T: Element>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    Ok(tape.l1_loss(pred, target)?)
}

/// Cycle-reconstructed image against the original.
pub fn cycle_image_loss<T: Element>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    Ok(tape.l1_loss(pred, target)?)
}

/// Heatmaps decoded from a re-encoded pose feature against ground truth.
pub fn cycle_pose_loss<T: Element>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    Ok(tape.l1_loss(pred, target)?)
}

/// Re-encoded feature against its source feature. The target is detached
/// here, so nothing upstream of it receives gradient from this term.
pub fn dual_feature_loss<T: Element>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let fixed = tape.detach(target);
    Ok(tape.l1_loss(pred, fixed)?)
}

fn check_scores<T: Element>(tape: &Tape<T>, scores: Var) -> Result<()> {
    if tape.value(scores).data().iter().all(|s| (0.0..=1.0).contains(&s.f64())) {
        Ok(())
    } else {
        Err(Error::InvalidArgument("discriminator scores must lie in [0, 1]".into()))
    }
}

fn bce_against<T: Element>(tape: &mut Tape<T>, scores: Var, label: f64) -> Result<Var> {
    check_scores(tape, scores)?;
    let target = tape.constant(Tensor::full(tape.shape(scores), T::lit(label)));
    Ok(tape.bce_loss(scores, target)?)
}

/// `-mean log D(real) - mean log(1 - D(fake))`. The fake scores must come
/// from images that were detached from the generator.
pub fn discriminator_loss<T: Element>(tape: &mut Tape<T>, real: Var, fake: Var) -> Result<Var> {
    let r = bce_against(tape, real, 1.0)?;
    let f = bce_against(tape, fake, 0.0)?;
    Ok(tape.add(r, f)?)
}

/// Non-saturating generator loss `-mean log D(fake)`.
pub fn generator_loss<T: Element>(tape: &mut Tape<T>, fake: Var) -> Result<Var> {
    bce_against(tape, fake, 1.0)
}

/// Both adversarial losses from one set of scores, `(L_D, L_G)`.
pub fn gan_losses<T: Element>(tape: &mut Tape<T>, real: Var, fake: Var) -> Result<(Var, Var)> {
    Ok((discriminator_loss(tape, real, fake)?, generator_loss(tape, fake)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub recon: f64,
    pub gan_d: f64,
    pub gan_g: f64,
    pub cycle_img: f64,
    pub dual_pose: f64,
    pub dual_img: f64,
    pub cycle_pose: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { recon: 1.0, gan_d: 0.01, gan_g: 0.01, cycle_img: 1.0, dual_pose: 0.1, dual_img: 0.1, cycle_pose: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (term, w) in Term::ALL.iter().skip(1).map(|t| (t, self.weight(*t))) {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("loss weight `{}` must be finite and >= 0, got {w}", term.name())));
            }
        }
        Ok(())
    }

    /// The pose term has unit weight.
    pub fn weight(&self, term: Term) -> f64 {
        match term {
            Term::Pose => 1.0,
            Term::Recon => self.recon,
            Term::GanD => self.gan_d,
            Term::GanG => self.gan_g,
            Term::CycleImg => self.cycle_img,
            Term::DualPose => self.dual_pose,
            Term::DualImg => self.dual_img,
            Term::CyclePose => self.cycle_pose,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    Pose,
    Recon,
    GanD,
    GanG,
    CycleImg,
    DualPose,
    DualImg,
    CyclePose,
}

impl Term {
    pub const ALL: [Term; 8] = [
        Term::Pose,
        Term::Recon,
        Term::GanD,
        Term::GanG,
        Term::CycleImg,
        Term::DualPose,
        Term::DualImg,
        Term::CyclePose,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::Pose => "pose",
            Term::Recon => "recon",
            Term::GanD => "gan_d",
            Term::GanG => "gan_g",
            Term::CycleImg => "cycle_img",
            Term::DualPose => "dual_pose",
            Term::DualImg => "dual_img",
            Term::CyclePose => "cycle_pose",
        }
    }
}

/// A term evaluated on the x instances and on the y instances of a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairValue {
    pub x: f64,
    pub y: f64,
}

impl PairValue {
    pub fn sum(&self) -> f64 {
        self.x + self.y
    }
}

/// Values of whichever terms were computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Terms {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<PairValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recon: Option<PairValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gan_d: Option<PairValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gan_g: Option<PairValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cycle_img: Option<PairValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dual_pose: Option<PairValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dual_img: Option<PairValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cycle_pose: Option<PairValue>,
}

impl Terms {
    pub fn get(&self, term: Term) -> Option<PairValue> {
        *self.slot(term)
    }

    pub fn set(&mut self, term: Term, value: PairValue) {
        *self.slot_mut(term) = Some(value);
    }

    fn slot(&self, term: Term) -> &Option<PairValue> {
        match term {
            Term::Pose => &self.pose,
            Term::Recon => &self.recon,
            Term::GanD => &self.gan_d,
            Term::GanG => &self.gan_g,
            Term::CycleImg => &self.cycle_img,
            Term::DualPose => &self.dual_pose,
            Term::DualImg => &self.dual_img,
            Term::CyclePose => &self.cycle_pose,
        }
    }

    fn slot_mut(&mut self, term: Term) -> &mut Option<PairValue> {
        match term {
            Term::Pose => &mut self.pose,
            Term::Recon => &mut self.recon,
            Term::GanD => &mut self.gan_d,
            Term::GanG => &mut self.gan_g,
            Term::CycleImg => &mut self.cycle_img,
            Term::DualPose => &mut self.dual_pose,
            Term::DualImg => &mut self.dual_img,
            Term::CyclePose => &mut self.cycle_pose,
        }
    }
}

/// One logged step: every computed term and the weighted total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    #[serde(flatten)]
    pub terms: Terms,
    pub total: f64,
}

impl LossReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// `L_p + recon*L_I + gan_d*L_D + gan_g*L_G + cycle_img*L_cycle-img
/// + cycle_pose*L_cycle-pose + dual_img*L_dual-img + dual_pose*L_dual-pose`,
/// each `L` being the x value plus the y value. Every term in `required`
/// must be present; absent optional terms contribute nothing.
pub fn total_loss(terms: &Terms, w: &LossWeights, required: &[Term]) -> Result<f64> {
    if let Some(t) = required.iter().find(|t| terms.get(**t).is_none()) {
        return Err(Error::InvalidArgument(format!("loss term `{}` is required but was not computed", t.name())));
    }
    Ok(Term::ALL.iter().filter_map(|&t| terms.get(t).map(|v| w.weight(t) * v.sum())).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_leave_pose() {
        let mut terms = Terms::default();
        for t in Term::ALL {
            terms.set(t, PairValue { x: 0.3, y: 0.2 });
        }
        let w = LossWeights {
            recon: 0.0,
            gan_d: 0.0,
            gan_g: 0.0,
            cycle_img: 0.0,
            dual_pose: 0.0,
            dual_img: 0.0,
            cycle_pose: 0.0,
        };
        assert_eq!(total_loss(&terms, &w, &[Term::Pose]).unwrap(), 0.5);
    }

    #[test]
    fn missing_required_term_rejected() {
        let err = total_loss(&Terms::default(), &LossWeights::default(), &[Term::Pose]).unwrap_err();
        assert!(err.to_string().contains("`pose`"));
    }

    #[test]
    fn negative_weight_rejected() {
        let w = LossWeights { dual_img: -0.1, ..Default::default() };
        assert!(w.validate().unwrap_err().to_string().contains("dual_img"));
    }
}
