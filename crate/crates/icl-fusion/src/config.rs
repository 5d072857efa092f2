//! Application configuration: model, aggregation depth, instruction
//! templates, and training settings, loadable from one JSON file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregator::AggregationConfig;
use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

/// Instruction templates for the three task families. Stored as config
/// strings; `{question}` and `{text}` are substituted at prompt time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InstructionTemplates {
    pub caption: String,
    pub vqa: String,
    pub classification: String,
}

impl Default for InstructionTemplates {
    fn default() -> Self {
        InstructionTemplates {
            caption: "Describe the image in English in one sentence:".into(),
            vqa: "{question} Answer in a word:".into(),
            classification: "is an image with {text} written on it. Is it hateful? Answer:"
                .into(),
        }
    }
}

impl InstructionTemplates {
    /// Caption instruction as the text prefix a label follows.
    pub fn caption_instruction(&self) -> String {
        format!("{} ", self.caption)
    }

    pub fn vqa_instruction(&self, question: &str) -> String {
        format!("{} ", self.vqa.replace("{question}", question))
    }

    pub fn classification_instruction(&self, text: &str) -> String {
        format!("{} ", self.classification.replace("{text}", text))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub model: ModelConfig,
    /// Aggregation layer count; 0 means the full stack.
    pub aggregation_layers: usize,
    pub templates: InstructionTemplates,
    pub train: TrainConfig,
}

impl AppConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.aggregation().validate(&self.model)
    }

    pub fn aggregation(&self) -> AggregationConfig {
        if self.aggregation_layers == 0 {
            AggregationConfig::full(&self.model)
        } else {
            AggregationConfig::new(self.aggregation_layers)
        }
    }

    pub fn load(path: &Path) -> Result<AppConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: AppConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
