use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{Activation, KeyMask, LayerParams, LinkFn, TransformerParams};
use crate::em::EtaSchedule;
use crate::error::{Error, Result};
use crate::prompt::{TokenKind, TokenLayout};

/// Constants frozen into the construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConstants {
    pub beta: f64,
    pub alpha: f64,
    pub t_prime: f64,
    /// `alpha / M_u`, zero without unlabeled samples.
    pub alpha1: f64,
    /// `T'`.
    pub alpha2: f64,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
}

impl EmConstants {
    pub fn schedule(&self) -> EtaSchedule {
        EtaSchedule {
            alpha: self.alpha,
            t_prime: self.t_prime,
        }
    }
}

fn set_block(m: &mut DMatrix<f64>, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, block: &DMatrix<f64>) {
    m.view_mut((rows.start, cols.start), (rows.len(), cols.len())).copy_from(block);
}

/// Build the four layers whose rollout runs EM with posterior scores under
/// `W`, step sizes `alpha / (T' + t)` and labeled-data initialization.
///
/// 1. softmax, reasoning keys to unlabeled queries: per-sample posteriors
///    pooled over all reasoning blocks, written to the posterior workspace;
/// 2. linear, unlabeled keys to reasoning queries: aggregated posterior mass,
///    then the shrink part of the update;
/// 3. linear, unlabeled keys to reasoning queries: the pull toward the
///    posterior-weighted samples;
/// 4. relu, labeled keys to reasoning queries: `(C / N) sum_j [y_j = i] x_j`,
///    active only at step 0.
pub fn build_em_transformer(
    layout: &TokenLayout,
    w: &DMatrix<f64>,
    beta: f64,
    schedule: &EtaSchedule,
    n_labeled: usize,
    n_unlabeled: usize,
) -> Result<TransformerParams> {
    let (d, c) = (layout.d, layout.classes);
    if w.shape() != (d, d) {
        return Err(Error::layout(format!("W must be {d}x{d}, got {:?}", w.shape())));
    }
    if !w.iter().all(|v| v.is_finite()) || !beta.is_finite() {
        return Err(Error::param("W and beta must be finite"));
    }
    let schedule = EtaSchedule::new(schedule.alpha, schedule.t_prime)?;
    let dh = layout.height();
    let zero = || DMatrix::<f64>::zeros(dh, dh);
    let eye_c = DMatrix::<f64>::identity(c, c);
    let eye_d = DMatrix::<f64>::identity(d, d);
    let one = |r: usize| r..r + 1;

    let alpha1 = if n_unlabeled > 0 {
        schedule.alpha / n_unlabeled as f64
    } else {
        0.0
    };
    let alpha2 = schedule.t_prime;

    let mut qk1 = zero();
    set_block(&mut qk1, layout.slot_b(), layout.x(), &w.transpose());
    qk1[(layout.norm_row(), layout.unlabeled_flag_row())] = 1.0;
    qk1[(layout.step_row(), layout.unlabeled_flag_row())] = beta;
    let mut v1 = zero();
    set_block(&mut v1, layout.slot_c(), layout.slot_a(), &eye_c);

    let mut qk2 = zero();
    qk2[(layout.unlabeled_flag_row(), layout.step_row())] = alpha1;
    let mut v2 = zero();
    set_block(&mut v2, layout.slot_d(), layout.slot_c(), &eye_c);

    let mut qk3 = zero();
    set_block(&mut qk3, layout.slot_c(), layout.slot_d(), &eye_c);
    let mut v3 = zero();
    set_block(&mut v3, layout.slot_b(), layout.x(), &eye_d);

    let mut qk4 = zero();
    set_block(&mut qk4, layout.y(), layout.slot_a(), &eye_c);
    set_block(&mut qk4, one(layout.labeled_flag_row()), one(layout.step_row()), &DMatrix::from_element(1, 1, -1.0));
    let init_scale = if n_labeled > 0 {
        c as f64 / n_labeled as f64
    } else {
        0.0
    };
    let mut v4 = zero();
    set_block(&mut v4, layout.slot_b(), layout.x(), &(eye_d * init_scale));

    let layers = vec![
        LayerParams {
            qk: qk1,
            v: v1,
            activation: Activation::Softmax,
            key_mask: KeyMask::only(TokenKind::Reasoning, TokenKind::Unlabeled),
            link: LinkFn::GateUnlabeled,
        },
        LayerParams {
            qk: qk2,
            v: v2,
            activation: Activation::Linear,
            key_mask: KeyMask::only(TokenKind::Unlabeled, TokenKind::Reasoning),
            link: LinkFn::EmShrink { alpha1, alpha2 },
        },
        LayerParams {
            qk: qk3,
            v: v3,
            activation: Activation::Linear,
            key_mask: KeyMask::only(TokenKind::Unlabeled, TokenKind::Reasoning),
            link: LinkFn::ClearWorkspace,
        },
        LayerParams {
            qk: qk4,
            v: v4,
            activation: Activation::Relu,
            key_mask: KeyMask::only(TokenKind::Labeled, TokenKind::Reasoning),
            link: LinkFn::Identity,
        },
    ];
    Ok(TransformerParams {
        layers,
        layout: *layout,
        constants: EmConstants {
            beta,
            alpha: schedule.alpha,
            t_prime: schedule.t_prime,
            alpha1,
            alpha2,
            n_labeled,
            n_unlabeled,
        },
        w: w.clone(),
        norm_form: w.clone(),
    })
}
