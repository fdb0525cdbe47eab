//! JSON checkpoints: model shape, every named parameter slice, and the
//! normalizer needed to evaluate in raw units.
//!
//! Floats are written in shortest round-trip form and parsed with correct
//! rounding, so a save/load cycle is bit-exact.

use std::path::Path;

use lse_icnn::autodiff::ParamStore;
use lse_icnn::datagen::Normalizer;
use lse_icnn::experiments::ExperimentSpec;
use lse_icnn::mixture::{LseModel, ModelConfig};
use serde::{Deserialize, Serialize};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint format_version {0} (expected {FORMAT_VERSION})")]
    Version(u32),
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelConfig,
    pub params: Vec<SliceRecord>,
    /// Absent when the model was trained on raw inputs.
    #[serde(default)]
    pub normalizer: Option<Normalizer>,
    /// The run that produced the model, generator parameters included.
    #[serde(default)]
    pub spec: Option<ExperimentSpec>,
}

impl Checkpoint {
    pub fn new(model: &LseModel, normalizer: Option<Normalizer>, spec: Option<ExperimentSpec>) -> Self {
        let (store, _) = model.to_store();
        let params = store
            .slices()
            .iter()
            .map(|s| SliceRecord { name: s.name.clone(), rows: s.rows, cols: s.cols, values: store.values()[s.range()].to_vec() })
            .collect();
        Self { format_version: FORMAT_VERSION, model: model.config(), params, normalizer, spec }
    }

    /// Rebuilds the model, checking every slice against the declared shape.
    pub fn to_model(&self) -> Result<LseModel, CheckpointError> {
        if self.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version(self.format_version));
        }
        let template = LseModel::new(self.model, 0).map_err(|e| CheckpointError::Invalid(e.to_string()))?;
        let (reference, slices) = template.to_store();
        if reference.slices().len() != self.params.len() {
            return Err(CheckpointError::Invalid(format!(
                "expected {} parameter slices, found {}",
                reference.slices().len(),
                self.params.len()
            )));
        }
        let mut store = ParamStore::new();
        for (want, got) in reference.slices().iter().zip(&self.params) {
            if want.name != got.name || want.rows != got.rows || want.cols != got.cols {
                return Err(CheckpointError::Invalid(format!(
                    "slice `{}` ({}x{}) does not match expected `{}` ({}x{})",
                    got.name, got.rows, got.cols, want.name, want.rows, want.cols
                )));
            }
            if got.values.len() != got.rows * got.cols {
                return Err(CheckpointError::Invalid(format!("slice `{}` holds {} values", got.name, got.values.len())));
            }
            if got.values.iter().any(|v| !v.is_finite()) {
                return Err(CheckpointError::Invalid(format!("slice `{}` has non-finite values", got.name)));
            }
            store.push(got.name.clone(), got.rows, got.cols, &got.values);
        }
        for id in slices.hidden_weights() {
            if store.get(id).iter().any(|&w| w < 0.0) {
                return Err(CheckpointError::Invalid(format!("negative entry in `{}`", store.slice(id).name)));
            }
        }
        if let Some(n) = &self.normalizer {
            let d = self.model.input_dim;
            if n.mean.len() != d || n.std.len() != d || n.std.iter().any(|&s| !(s > 0.0)) || !(n.psi_scale > 0.0) {
                return Err(CheckpointError::Invalid("normalizer does not match the model inputs".into()));
            }
        }
        Ok(LseModel::from_store(&store, &slices))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("finite parameters serialize") + "\n"
    }

    pub fn from_json(s: &str) -> Result<Self, CheckpointError> {
        let ck: Self = serde_json::from_str(s)?;
        ck.to_model()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Value and input gradient in raw units.
pub fn evaluate(model: &LseModel, normalizer: Option<&Normalizer>, x: &[f64]) -> Result<(f64, Vec<f64>), String> {
    match normalizer {
        None => Ok((model.forward(x).map_err(|e| e.to_string())?, model.input_gradient(x).map_err(|e| e.to_string())?)),
        Some(nz) => {
            let u = nz.normalize_inputs(x);
            let psi = nz.psi_scale * model.forward(&u).map_err(|e| e.to_string())?;
            let g = nz.denormalize_gradient(&model.input_gradient(&u).map_err(|e| e.to_string())?);
            Ok((psi, g))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> LseModel {
        LseModel::new(ModelConfig { input_dim: 2, n_modes: 3, n_hidden_layers: 2, hidden_width: 4 }, 7).unwrap()
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let m = model();
        let nz = Normalizer { mean: vec![0.1, -0.3], std: vec![0.7, 1.0 / 3.0], psi_scale: std::f64::consts::PI };
        let ck = Checkpoint::new(&m, Some(nz), None);
        let text = ck.to_json();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_json(), text);
        let m2 = back.to_model().unwrap();
        let (a, _) = m.to_store();
        let (b, _) = m2.to_store();
        let bits = |s: &ParamStore| s.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn rejects_bad_checkpoints() {
        let ck = Checkpoint::new(&model(), None, None);

        let mut v = ck.clone();
        v.format_version = 99;
        assert!(matches!(v.to_model(), Err(CheckpointError::Version(99))));

        let mut neg = ck.clone();
        let w = neg.params.iter_mut().find(|s| s.name == "mode0.W2").expect("hidden weight slice");
        w.values[0] = -1.0;
        assert!(neg.to_model().is_err());

        let mut short = ck.clone();
        short.params.pop();
        assert!(short.to_model().is_err());

        let text = ck.to_json().replacen("\"format_version\"", "\"extra\": 1,\n  \"format_version\"", 1);
        assert!(matches!(Checkpoint::from_json(&text), Err(CheckpointError::Json(_))));
    }
}
