//! On-disk format of released generative models.

use serde::{Deserialize, Serialize};

use crate::accountant::PrivacySpec;
use crate::ddpm::{self, DiffusionModel};
use crate::error::{Error, Result};
use crate::log::SimpleEventLog;
use crate::travag::TravagRelease;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "snake_case")]
pub enum ReleasedModel {
    Travag(TravagRelease),
    Ddpm(DiffusionModel),
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    #[serde(flatten)]
    model: ReleasedModel,
}

impl ReleasedModel {
    pub fn kind(&self) -> &'static str {
        match self {
            ReleasedModel::Travag(_) => "travag",
            ReleasedModel::Ddpm(_) => "ddpm",
        }
    }

    /// Consumed budget; `None` for models trained without noise.
    pub fn privacy(&self) -> Option<PrivacySpec> {
        match self {
            ReleasedModel::Travag(m) => m.privacy,
            ReleasedModel::Ddpm(m) => m.privacy,
        }
    }

    pub fn training_cases(&self) -> u64 {
        match self {
            ReleasedModel::Travag(m) => m.training_cases,
            ReleasedModel::Ddpm(m) => m.training_cases,
        }
    }

    /// Draws `count` cases. Reads no data and spends no budget.
    pub fn sample(&self, count: usize, seed: u64) -> Result<SimpleEventLog> {
        match self {
            ReleasedModel::Travag(m) => m.sample(count, seed),
            ReleasedModel::Ddpm(m) => ddpm::generate(m, count, seed),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile { format_version: MODEL_FORMAT_VERSION, model: self.clone() };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::ModelFormat(format!("not a model file: {e}")))?;
        match value.get("format_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(MODEL_FORMAT_VERSION) => {}
            Some(v) => {
                return Err(Error::ModelFormat(format!(
                    "format_version {v} is not supported (expected {MODEL_FORMAT_VERSION})"
                )))
            }
            None => return Err(Error::ModelFormat("missing format_version".into())),
        }
        let file: ModelFile = serde_json::from_value(value)
            .map_err(|e| Error::ModelFormat(format!("format_version {MODEL_FORMAT_VERSION}: {e}")))?;
        Ok(file.model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ddpm::{constant_predictor, NoiseSchedule};
    use crate::encoding::VariantVocabulary;
    use crate::log::TraceVariant;

    fn tiny() -> ReleasedModel {
        let vocab = VariantVocabulary::from_columns(vec![TraceVariant::new(["a"]), TraceVariant::new(["b"])]).unwrap();
        let schedule = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        let mut m = DiffusionModel::new(vocab, schedule, constant_predictor(4, 2, 0.0).unwrap(), 2).unwrap();
        m.training_cases = 7;
        ReleasedModel::Ddpm(m)
    }

    #[test]
    fn round_trip_and_tags() {
        let model = tiny();
        let json = model.to_json().unwrap();
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(value["format_version"], 1);
        assert_eq!(value["kind"], "ddpm");
        assert_eq!(ReleasedModel::from_json(&json).unwrap(), model);
        assert_eq!(model.training_cases(), 7);
    }

    #[test]
    fn rejects_corrupt_files() {
        let err = ReleasedModel::from_json("{\"format_version\": 9, \"kind\": \"ddpm\"}").unwrap_err();
        assert!(err.to_string().contains("format_version 9"), "{err}");
        assert!(ReleasedModel::from_json("garbage").is_err());
        assert!(ReleasedModel::from_json("{\"kind\": \"ddpm\"}").unwrap_err().to_string().contains("format_version"));
        let broken = tiny().to_json().unwrap().replace("\"betas\"", "\"bettas\"");
        let err = ReleasedModel::from_json(&broken).unwrap_err();
        assert!(err.to_string().contains("format_version 1"), "{err}");
    }
}
