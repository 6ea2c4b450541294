//! Single-head attention and token-wise link layers, the explicit four-layer
//! EM transformer, and the chain-of-thought rollout.

mod construct;
mod io;
mod rollout;

pub use construct::{build_em_transformer, EmConstants};
pub use io::{load_params, save_params, ParamsFile, PARAMS_VERSION};
pub use rollout::{cot_rollout, transformer_forward, MeanTrajectory};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::{TokenKind, TokenLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    /// Softmax over the allowed keys of each query.
    Softmax,
    Linear,
    Relu,
}

/// Which `(key kind, query kind)` pairs may interact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyMask {
    allowed: [[bool; 3]; 3],
}

fn kind_index(k: TokenKind) -> usize {
    match k {
        TokenKind::Labeled => 0,
        TokenKind::Unlabeled => 1,
        TokenKind::Reasoning => 2,
    }
}

impl KeyMask {
    pub fn all() -> Self {
        KeyMask {
            allowed: [[true; 3]; 3],
        }
    }

    /// Only keys of kind `keys` feed queries of kind `queries`.
    pub fn only(keys: TokenKind, queries: TokenKind) -> Self {
        let mut allowed = [[false; 3]; 3];
        allowed[kind_index(keys)][kind_index(queries)] = true;
        KeyMask { allowed }
    }

    pub fn allows(&self, key: TokenKind, query: TokenKind) -> bool {
        self.allowed[kind_index(key)][kind_index(query)]
    }
}

/// Exact token-wise maps applied after each attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LinkFn {
    Identity,
    /// Multiply the posterior workspace by the unlabeled flag.
    GateUnlabeled,
    /// Turn the aggregated posterior mass into the shrink part of the mean
    /// update and leave `alpha1 / (tau + alpha2) e_i` for the next layer.
    EmShrink { alpha1: f64, alpha2: f64 },
    /// Zero both workspaces.
    ClearWorkspace,
}

/// One attention layer in product form: `scores[a, b] = h_a^T QK h_b` for key
/// `a` and query `b`, output `H + V H sigma(scores)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub qk: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub activation: Activation,
    pub key_mask: KeyMask,
    pub link: LinkFn,
}

/// The four constructed layers with the constants they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams {
    pub layers: Vec<LayerParams>,
    pub layout: TokenLayout,
    pub constants: EmConstants,
    /// Trainable first-layer matrix.
    pub w: DMatrix<f64>,
    /// Quadratic form stored in the norm slot of new reasoning blocks.
    pub norm_form: DMatrix<f64>,
}

/// One attention layer over all tokens of `h`. `kinds[c]` is the kind of column `c`.
pub fn attention_forward(h: &DMatrix<f64>, layer: &LayerParams, kinds: &[TokenKind]) -> Result<DMatrix<f64>> {
    let dh = h.nrows();
    if layer.qk.shape() != (dh, dh) || layer.v.shape() != (dh, dh) {
        return Err(Error::layout(format!(
            "layer matrices must be {dh}x{dh}, got QK {:?} and V {:?}",
            layer.qk.shape(),
            layer.v.shape()
        )));
    }
    if kinds.len() != h.ncols() {
        return Err(Error::layout("one token kind per column required"));
    }
    let l = h.ncols();
    let scores = h.transpose() * (&layer.qk * h);
    let mut weights = DMatrix::zeros(l, l);
    for b in 0..l {
        let keys: Vec<usize> = (0..l).filter(|&a| layer.key_mask.allows(kinds[a], kinds[b])).collect();
        if keys.is_empty() {
            continue;
        }
        match layer.activation {
            Activation::Softmax => {
                let s: Vec<f64> = keys.iter().map(|&a| scores[(a, b)]).collect();
                for (&a, p) in keys.iter().zip(crate::numeric::softmax(&s)) {
                    weights[(a, b)] = p;
                }
            }
            Activation::Linear => {
                for &a in &keys {
                    weights[(a, b)] = scores[(a, b)];
                }
            }
            Activation::Relu => {
                for &a in &keys {
                    weights[(a, b)] = scores[(a, b)].max(0.0);
                }
            }
        }
    }
    Ok(h + &layer.v * (h * weights))
}

/// Apply a link function to every column independently.
pub fn mlp_forward(h: &DMatrix<f64>, link: &LinkFn, layout: &TokenLayout) -> Result<DMatrix<f64>> {
    if h.nrows() != layout.height() {
        return Err(Error::layout(format!(
            "token height {} does not match layout height {}",
            h.nrows(),
            layout.height()
        )));
    }
    let mut out = h.clone();
    let gamma = layout.slot_c();
    let agg = layout.slot_d();
    match *link {
        LinkFn::Identity => {}
        LinkFn::GateUnlabeled => {
            for mut col in out.column_iter_mut() {
                let g = col[layout.unlabeled_flag_row()];
                col.rows_mut(gamma.start, gamma.len()).scale_mut(g);
            }
        }
        LinkFn::EmShrink { alpha1, alpha2 } => {
            let a = layout.slot_a();
            let b = layout.slot_b();
            for mut col in out.column_iter_mut() {
                let tau = col[layout.step_row()];
                if tau > 0.0 {
                    let coef = col.rows(a.start, a.len()).dot(&col.rows(agg.start, agg.len()));
                    let shrink = coef / (tau * (tau + alpha2));
                    let mu = col.rows(b.start, b.len()) * (1.0 - shrink);
                    col.rows_mut(b.start, b.len()).copy_from(&mu);
                    let e = col.rows(a.start, a.len()) * (alpha1 / (tau + alpha2));
                    col.rows_mut(agg.start, agg.len()).copy_from(&e);
                } else {
                    col.rows_mut(agg.start, agg.len()).fill(0.0);
                }
            }
        }
        LinkFn::ClearWorkspace => {
            for mut col in out.column_iter_mut() {
                col.rows_mut(gamma.start, gamma.len()).fill(0.0);
                col.rows_mut(agg.start, agg.len()).fill(0.0);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(qk: DMatrix<f64>, v: DMatrix<f64>, activation: Activation) -> LayerParams {
        LayerParams {
            qk,
            v,
            activation,
            key_mask: KeyMask::all(),
            link: LinkFn::Identity,
        }
    }

    #[test]
    fn zero_value_matrix_is_identity() {
        let h = DMatrix::from_fn(4, 5, |r, c| (r as f64 - c as f64) * 0.3);
        let kinds = vec![TokenKind::Reasoning; 5];
        for act in [Activation::Softmax, Activation::Linear, Activation::Relu] {
            let out = attention_forward(&h, &layer(DMatrix::identity(4, 4), DMatrix::zeros(4, 4), act), &kinds).unwrap();
            assert_eq!(out, h);
        }
    }

    #[test]
    fn two_token_hand_computation() {
        // D = 2, tokens h1 = (1, 0), h2 = (0.5, 1), QK = [[1, 2], [0, 1]], V = [[0, 0], [1, 0]].
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        let qk = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        let v = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]);
        let kinds = [TokenKind::Reasoning; 2];
        // Scores s[a][b] = h_a^T QK h_b.
        let s11 = 1.0;
        let s21 = 0.5;
        let s12 = 2.5;
        let s22 = 0.5 * 2.5 + 1.0;
        // V h_a = (0, first entry of h_a).
        let lin = attention_forward(&h, &layer(qk.clone(), v.clone(), Activation::Linear), &kinds).unwrap();
        assert!((lin[(1, 0)] - (0.0 + 1.0 * s11 + 0.5 * s21)).abs() < 1e-15);
        assert!((lin[(1, 1)] - (1.0 + 1.0 * s12 + 0.5 * s22)).abs() < 1e-15);
        assert_eq!(lin.row(0), h.row(0));
        let sm = attention_forward(&h, &layer(qk, v, Activation::Softmax), &kinds).unwrap();
        let p11 = s11.exp() / (s11.exp() + s21.exp());
        assert!((sm[(1, 0)] - (p11 * 1.0 + (1.0 - p11) * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn softmax_weights_normalize_over_allowed_keys() {
        // With V picking out a constant-one row, each query receives exactly its total weight.
        let mut h = DMatrix::from_fn(3, 6, |r, c| ((r * 5 + c * 3) % 7) as f64 * 0.4 - 1.0);
        h.row_mut(2).fill(1.0);
        let mut v = DMatrix::zeros(3, 3);
        v[(1, 2)] = 1.0;
        let qk = DMatrix::from_fn(3, 3, |r, c| (r + 2 * c) as f64 * 0.3);
        let kinds = [
            TokenKind::Labeled,
            TokenKind::Unlabeled,
            TokenKind::Unlabeled,
            TokenKind::Reasoning,
            TokenKind::Reasoning,
            TokenKind::Reasoning,
        ];
        let mut l = layer(qk, v, Activation::Softmax);
        l.key_mask = KeyMask::only(TokenKind::Reasoning, TokenKind::Unlabeled);
        let out = attention_forward(&h, &l, &kinds).unwrap();
        for c in 0..6 {
            let added = out[(1, c)] - h[(1, c)];
            if kinds[c] == TokenKind::Unlabeled {
                assert!((added - 1.0).abs() < 1e-12);
            } else {
                assert_eq!(added, 0.0);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_a_layout_error() {
        let h = DMatrix::zeros(3, 2);
        let l = layer(DMatrix::zeros(2, 2), DMatrix::zeros(2, 2), Activation::Linear);
        assert!(matches!(
            attention_forward(&h, &l, &[TokenKind::Labeled; 2]),
            Err(Error::Layout(_))
        ));
    }

    #[test]
    fn gate_zeroes_labeled_workspace() {
        let lay = TokenLayout::new(1, 2).unwrap();
        let mut h = DMatrix::from_element(lay.height(), 2, 0.5);
        h[(lay.labeled_flag_row(), 0)] = 1.0;
        h[(lay.unlabeled_flag_row(), 0)] = 0.0;
        h[(lay.labeled_flag_row(), 1)] = 0.0;
        h[(lay.unlabeled_flag_row(), 1)] = 1.0;
        let out = mlp_forward(&h, &LinkFn::GateUnlabeled, &lay).unwrap();
        for r in lay.slot_c() {
            assert_eq!(out[(r, 0)], 0.0);
            assert_eq!(out[(r, 1)], 0.5);
        }
        assert_eq!(mlp_forward(&h, &LinkFn::Identity, &lay).unwrap(), h);
    }
}
