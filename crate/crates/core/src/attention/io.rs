//! JSON form of [`TransformerParams`]. Only `W`, the norm form and the frozen
//! constants are stored; layers are rebuilt on load.
//!
//! ```json
//! {
//!   "version": 1,
//!   "d": 3, "C": 3,
//!   "w": [[...], [...], [...]],          // row-major
//!   "norm_form": [[...], [...], [...]],
//!   "constants": {"beta": 50.0, "alpha": 1.0, "t_prime": 4.0, "alpha1": 0.1,
//!                 "alpha2": 4.0, "n_labeled": 5, "n_unlabeled": 10}
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_em_transformer, EmConstants, TransformerParams};
use crate::error::{Error, Result};
use crate::numeric::{from_rows, to_rows};
use crate::prompt::TokenLayout;

pub const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub version: u32,
    pub d: usize,
    #[serde(rename = "C")]
    pub classes: usize,
    pub w: Vec<Vec<f64>>,
    pub norm_form: Vec<Vec<f64>>,
    pub constants: EmConstants,
}

impl From<&TransformerParams> for ParamsFile {
    fn from(p: &TransformerParams) -> Self {
        ParamsFile {
            version: PARAMS_VERSION,
            d: p.layout.d,
            classes: p.layout.classes,
            w: to_rows(&p.w),
            norm_form: to_rows(&p.norm_form),
            constants: p.constants,
        }
    }
}

impl ParamsFile {
    pub fn into_params(self) -> Result<TransformerParams> {
        if self.version != PARAMS_VERSION {
            return Err(Error::Format(format!(
                "parameter file version {} is not supported (expected {PARAMS_VERSION})",
                self.version
            )));
        }
        let layout = TokenLayout::new(self.d, self.classes)?;
        let w = from_rows(&self.w)?;
        let norm_form = from_rows(&self.norm_form)?;
        if norm_form.shape() != (self.d, self.d) {
            return Err(Error::Format("norm form must be d x d".into()));
        }
        let k = self.constants;
        let mut params = build_em_transformer(&layout, &w, k.beta, &k.schedule(), k.n_labeled, k.n_unlabeled)?;
        params.norm_form = norm_form;
        Ok(params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn save_params(params: &TransformerParams, path: &Path) -> Result<()> {
    std::fs::write(path, ParamsFile::from(params).to_json()?)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<TransformerParams> {
    ParamsFile::from_json(&std::fs::read_to_string(path)?)?.into_params()
}
