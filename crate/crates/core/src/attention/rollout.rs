use nalgebra::DMatrix;

use super::{attention_forward, mlp_forward, TransformerParams};
use crate::error::{Error, Result};
use crate::numeric::all_finite;
use crate::prompt::{reasoning_block, MeanEstimates, PromptState};

/// Mean estimates read from consecutive reasoning blocks; `steps[0]` is the
/// estimate the rollout started from.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanTrajectory {
    pub steps: Vec<MeanEstimates>,
}

impl MeanTrajectory {
    pub fn last(&self) -> &MeanEstimates {
        self.steps.last().expect("trajectory has a starting step")
    }
}

/// One pass through all four layers and their link functions.
pub fn transformer_forward(params: &TransformerParams, state: &PromptState) -> Result<DMatrix<f64>> {
    if *state.layout() != params.layout {
        return Err(Error::layout("prompt layout differs from the transformer layout"));
    }
    let kinds = state.token_kinds();
    let mut h = state.h().clone();
    for (k, layer) in params.layers.iter().enumerate() {
        h = attention_forward(&h, layer, &kinds)?;
        if !all_finite(&h) {
            return Err(Error::overflow(format!("attention layer {}", k + 1)));
        }
        h = mlp_forward(&h, &layer.link, &params.layout)?;
        if !all_finite(&h) {
            return Err(Error::overflow(format!("link function of layer {}", k + 1)));
        }
    }
    Ok(h)
}

/// Run `T` chain-of-thought steps, each appending the last `C` output columns
/// of a forward pass as the next reasoning block.
pub fn cot_rollout(
    params: &TransformerParams,
    state: &PromptState,
    t_steps: usize,
) -> Result<(MeanTrajectory, PromptState)> {
    if t_steps == 0 {
        return Err(Error::param("T must be at least 1"));
    }
    let k = &params.constants;
    if state.n_labeled() != k.n_labeled || state.n_unlabeled() != k.n_unlabeled {
        return Err(Error::layout(format!(
            "transformer built for N = {}, M_u = {} but prompt has N = {}, M_u = {}",
            k.n_labeled,
            k.n_unlabeled,
            state.n_labeled(),
            state.n_unlabeled()
        )));
    }
    let lay = params.layout;
    let mut state = state.clone();
    let mut steps = vec![state.decode_means(state.steps())?];
    for _ in 0..t_steps {
        let out = transformer_forward(params, &state)?;
        let last = out.ncols() - lay.classes;
        let b = lay.slot_b();
        let means = MeanEstimates::new(out.view((b.start, last), (b.len(), lay.classes)).into_owned());
        let block = reasoning_block(&lay, &means, state.steps() + 1, &params.norm_form)?;
        state = state.append_reasoning(&block)?;
        steps.push(means);
    }
    Ok((MeanTrajectory { steps }, state))
}
