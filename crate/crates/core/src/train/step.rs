//! Computation graphs of one training step.

use handsplit_tape::{BindMode, Bound, Tape, TapeError, Tensor, Var};

use super::config::{Mode, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::{self, PairValue, Term};
use crate::nets::{Bindings, FrozenDecoders, NetworkSet, Subnet};

/// Images `[2b, 1, s, s]` and heatmaps `[2b, k, s, s]`, x rows first.
pub struct StepInput {
    pub images: Tensor<f32>,
    pub heatmaps: Tensor<f32>,
    pub b: usize,
}

/// Generator-side graph: the loss terms as `(x, y)` scalars on the tape.
pub(crate) struct GenGraph {
    pub tape: Tape<f32>,
    pub live: Bindings,
    pub live_nets: Vec<Subnet>,
    pub terms: Vec<(Term, Var, Var)>,
    /// Detached generated images for the discriminator, with the row
    /// ranges that belong to x.
    pub fakes: Option<(Tensor<f32>, Vec<(usize, usize)>)>,
}

impl GenGraph {
    pub fn value(&self, term: Term) -> Option<PairValue> {
        self.terms.iter().find(|t| t.0 == term).map(|&(_, x, y)| PairValue {
            x: self.tape.value(x).data()[0] as f64,
            y: self.tape.value(y).data()[0] as f64,
        })
    }
}

/// Maps a non-finite tape value to the loss term being built.
fn guard<V>(step: u64, term: Term, r: Result<V>) -> Result<V> {
    match r {
        Err(Error::Tape(TapeError::NonFinite { .. })) => Err(Error::NonFinite { step, term: term.name() }),
        other => other,
    }
}

fn halves(tape: &mut Tape<f32>, v: Var, b: usize) -> Result<(Var, Var)> {
    Ok((tape.slice_batch(v, 0, b)?, tape.slice_batch(v, b, b)?))
}

/// `[v_0..b, v_b..2b]` reordered as `[v_b..2b, v_0..b]`.
fn swap_halves(tape: &mut Tape<f32>, v: Var, b: usize) -> Result<Var> {
    let (x, y) = halves(tape, v, b)?;
    Ok(tape.concat_batch(&[y, x])?)
}

type LossFn = fn(&mut Tape<f32>, Var, Var) -> Result<Var>;

/// A loss on the x half and on the y half of `pred` against `target`.
fn split_loss(tape: &mut Tape<f32>, f: LossFn, pred: Var, target: Var, b: usize) -> Result<(Var, Var)> {
    let (px, py) = halves(tape, pred, b)?;
    let (tx, ty) = halves(tape, target, b)?;
    Ok((f(tape, px, tx)?, f(tape, py, ty)?))
}

fn block(tape: &mut Tape<f32>, v: Var, i: usize, b: usize) -> Result<Var> {
    Ok(tape.slice_batch(v, i * b, b)?)
}

fn rows(tape: &mut Tape<f32>, v: Var, ranges: &[(usize, usize)]) -> Result<Var> {
    let parts = ranges.iter().map(|&(s, n)| tape.slice_batch(v, s, n)).collect::<Result<Vec<_>, _>>()?;
    Ok(tape.concat_batch(&parts)?)
}

fn x_rows(b: usize, blocks: usize) -> Vec<(usize, usize)> {
    (0..blocks).step_by(2).map(|i| (i * b, b)).collect()
}

fn y_rows(b: usize, blocks: usize) -> Vec<(usize, usize)> {
    (1..blocks).step_by(2).map(|i| (i * b, b)).collect()
}

pub(crate) fn live_nets(cfg: &TrainConfig) -> Vec<Subnet> {
    let mut nets = vec![Subnet::Stem, Subnet::PoseHead, Subnet::PoseDecoder];
    if cfg.mode.uses_images() {
        nets.extend([Subnet::AppearanceHead, Subnet::ImageDecoder]);
    }
    nets
}

pub(crate) fn gan_g_active(cfg: &TrainConfig) -> bool {
    cfg.mode.uses_images() && cfg.weights.gan_g > 0.0
}

pub(crate) fn gan_d_active(cfg: &TrainConfig) -> bool {
    cfg.mode.uses_images() && cfg.weights.gan_d > 0.0
}

/// Builds stages (a)-(d) of the unpaired step, or the swap graph of the
/// paired step, for whichever terms `cfg.mode` uses.
pub(crate) fn generator_graph(
    nets: &NetworkSet<f32>,
    frozen: &FrozenDecoders<f32>,
    cfg: &TrainConfig,
    input: &StepInput,
    step: u64,
) -> Result<GenGraph> {
    let b = input.b;
    let mut tape = Tape::new();
    let live_list = live_nets(cfg);
    let mut modes: Vec<(Subnet, BindMode)> = live_list.iter().map(|&n| (n, BindMode::Live)).collect();
    if gan_g_active(cfg) {
        modes.push((Subnet::Discriminator, BindMode::Frozen));
    }
    let live = nets.bind(&mut tape, &modes);
    let u = tape.constant(input.images.clone());
    let heat = tape.constant(input.heatmaps.clone());
    let mut terms = Vec::new();

    // (a) pose branch
    let (h, p) = guard(step, Term::Pose, (|| {
        let h = nets.stem(&mut tape, &live, u)?;
        let p = nets.run(Subnet::PoseHead, &mut tape, &live, h)?;
        let ph = nets.decode_pose(&mut tape, &live, p)?;
        let (lx, ly) = split_loss(&mut tape, losses::pose_loss, ph, heat, b)?;
        terms.push((Term::Pose, lx, ly));
        Ok((h, p))
    })())?;
    if !cfg.mode.uses_images() {
        return Ok(GenGraph { tape, live, live_nets: live_list, terms, fakes: None });
    }

    // (a)/(b) reconstruction and mixing
    let (a, generated, blocks, mixed) = guard(step, Term::Recon, (|| {
        let a = nets.run(Subnet::AppearanceHead, &mut tape, &live, h)?;
        // the paired swap is the pose encoder's appearance supervision
        let detach = cfg.detach_pose_into_image_decoder && cfg.mode != Mode::PairedSupervised;
        let p_in = if detach { tape.detach(p) } else { p };
        let (recon, generated, blocks, mixed) = match cfg.mode {
            Mode::SelfDisentangle => {
                // rows: x, y, xy, yx
                let a_v = swap_halves(&mut tape, a, b)?;
                let pp = tape.concat_batch(&[p_in, p_in])?;
                let aa = tape.concat_batch(&[a, a_v])?;
                let all = nets.decode_image(&mut tape, &live, pp, aa)?;
                let recon = tape.slice_batch(all, 0, 2 * b)?;
                let mixed = tape.slice_batch(all, 2 * b, 2 * b)?;
                if cfg.gan_on_mixed {
                    (recon, all, 4, Some(mixed))
                } else {
                    (recon, recon, 2, Some(mixed))
                }
            }
            Mode::PairedSupervised => {
                // each member rebuilt from its sibling's pose and its own appearance
                let p_sib = swap_halves(&mut tape, p_in, b)?;
                let recon = nets.decode_image(&mut tape, &live, p_sib, a)?;
                (recon, recon, 2, None)
            }
            _ => {
                let recon = nets.decode_image(&mut tape, &live, p_in, a)?;
                (recon, recon, 2, None)
            }
        };
        let (lx, ly) = split_loss(&mut tape, losses::recon_loss, recon, u, b)?;
        terms.push((Term::Recon, lx, ly));
        Ok((a, generated, blocks, mixed))
    })())?;

    if gan_g_active(cfg) {
        guard(step, Term::GanG, (|| {
            let scores = nets.discriminate(&mut tape, &live, generated)?;
            let sx = rows(&mut tape, scores, &x_rows(b, blocks))?;
            let sy = rows(&mut tape, scores, &y_rows(b, blocks))?;
            let (lx, ly) = (losses::generator_loss(&mut tape, sx)?, losses::generator_loss(&mut tape, sy)?);
            terms.push((Term::GanG, lx, ly));
            Ok(())
        })())?;
    }
    let fakes = gan_d_active(cfg).then(|| (tape.value(generated).clone(), x_rows(b, blocks)));

    if let Some(mixed) = mixed {
        // (c) re-encode the mixed images
        let on_mixed = cfg.train_pose_estimator_on_mixed;
        let (stem_c, pose_c) = if on_mixed {
            (live.get(Subnet::Stem)?.clone(), live.get(Subnet::PoseHead)?.clone())
        } else {
            (
                nets.store(Subnet::Stem).bind(&mut tape, BindMode::Frozen),
                nets.store(Subnet::PoseHead).bind(&mut tape, BindMode::Frozen),
            )
        };
        let image_c: Bound = if cfg.freeze_cycle_evaluators {
            frozen.image.bind(&mut tape, BindMode::Frozen)
        } else {
            live.get(Subnet::ImageDecoder)?.clone()
        };
        let p_hat = guard(step, Term::CycleImg, (|| {
            let h2 = nets.run_with(Subnet::Stem, &mut tape, &stem_c, mixed)?;
            // p_hat rows: x, y; a_hat rows: y, x
            let p_hat = nets.run_with(Subnet::PoseHead, &mut tape, &pose_c, h2)?;
            let a_hat = nets.run(Subnet::AppearanceHead, &mut tape, &live, h2)?;
            let p_v = swap_halves(&mut tape, p, b)?;
            let p_v = tape.detach(p_v);
            let a_u = tape.detach(a);
            let pp = tape.concat_batch(&[p_hat, p_v])?;
            let aa = tape.concat_batch(&[a_u, a_hat])?;
            // rows: x via p_hat, y via p_hat, y via a_hat, x via a_hat
            let cyc = nets.decode_image_with(&mut tape, &image_c, pp, aa)?;
            let (ux, uy) = halves(&mut tape, u, b)?;
            let mut part = |i: usize, target: Var| -> Result<Var> {
                let c = block(&mut tape, cyc, i, b)?;
                losses::cycle_image_loss(&mut tape, c, target)
            };
            let (c0, c3) = (part(0, ux)?, part(3, ux)?);
            let (c1, c2) = (part(1, uy)?, part(2, uy)?);
            let lx = tape.lincomb(&[(c0, 0.5), (c3, 0.5)])?;
            let ly = tape.lincomb(&[(c1, 0.5), (c2, 0.5)])?;
            terms.push((Term::CycleImg, lx, ly));

            let (dx, dy) = split_loss(&mut tape, losses::dual_feature_loss, p_hat, p, b)?;
            terms.push((Term::DualPose, dx, dy));
            let a_v = swap_halves(&mut tape, a, b)?;
            let (ay, ax) = split_loss(&mut tape, losses::dual_feature_loss, a_hat, a_v, b)?;
            terms.push((Term::DualImg, ax, ay));
            Ok(p_hat)
        })())?;

        // (d) heatmaps from the re-encoded pose feature
        guard(step, Term::CyclePose, (|| {
            let pose_d: Bound = if on_mixed || !cfg.freeze_cycle_evaluators {
                live.get(Subnet::PoseDecoder)?.clone()
            } else {
                frozen.pose.bind(&mut tape, BindMode::Frozen)
            };
            let pt = nets.run_with(Subnet::PoseDecoder, &mut tape, &pose_d, p_hat)?;
            let (lx, ly) = split_loss(&mut tape, losses::cycle_pose_loss, pt, heat, b)?;
            terms.push((Term::CyclePose, lx, ly));
            Ok(())
        })())?;
    }
    Ok(GenGraph { tape, live, live_nets: live_list, terms, fakes })
}

/// Discriminator-side graph on detached images; returns `(tape, bound, L_D^x, L_D^y)`.
pub(crate) fn discriminator_graph(
    nets: &NetworkSet<f32>,
    real: &Tensor<f32>,
    fakes: &Tensor<f32>,
    fake_x_rows: &[(usize, usize)],
    b: usize,
    step: u64,
) -> Result<(Tape<f32>, Bound, Var, Var)> {
    let mut tape = Tape::new();
    let bound = nets.store(Subnet::Discriminator).bind(&mut tape, BindMode::Live);
    guard(step, Term::GanD, (|| {
        let r = tape.constant(real.clone());
        let f = tape.constant(fakes.clone());
        let n_fake = fakes.shape()[0];
        let all = tape.concat_batch(&[r, f])?;
        let scores = nets.discriminate_with(&mut tape, &bound, all)?;
        let shift = |ranges: &[(usize, usize)]| ranges.iter().map(|&(s, n)| (s + 2 * b, n)).collect::<Vec<_>>();
        let fx_rows = shift(fake_x_rows);
        let fy_rows: Vec<(usize, usize)> = shift(&complement(fake_x_rows, n_fake));
        let (rx, ry) = (tape.slice_batch(scores, 0, b)?, tape.slice_batch(scores, b, b)?);
        let fx = rows(&mut tape, scores, &fx_rows)?;
        let fy = rows(&mut tape, scores, &fy_rows)?;
        let lx = losses::discriminator_loss(&mut tape, rx, fx)?;
        let ly = losses::discriminator_loss(&mut tape, ry, fy)?;
        Ok((lx, ly))
    })())
    .map(|(lx, ly)| (tape, bound, lx, ly))
}

fn complement(ranges: &[(usize, usize)], n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut at = 0;
    for &(s, len) in ranges {
        if s > at {
            out.push((at, s - at));
        }
        at = s + len;
    }
    if at < n {
        out.push((at, n - at));
    }
    out
}

/// Objective `sum_t w_t * (x_t + y_t)` over the selected terms.
pub(crate) fn objective(g: &mut GenGraph, cfg: &TrainConfig, select: &[Term]) -> Result<Option<Var>> {
    let parts: Vec<(Var, f64)> = g
        .terms
        .iter()
        .filter(|t| select.contains(&t.0) && cfg.weights.weight(t.0) > 0.0)
        .flat_map(|&(t, x, y)| {
            let w = cfg.weights.weight(t);
            [(x, w), (y, w)]
        })
        .collect();
    if parts.is_empty() {
        return Ok(None);
    }
    Ok(Some(g.tape.lincomb(&parts)?))
}
