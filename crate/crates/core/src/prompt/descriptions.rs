use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Number of descriptions requested per class.
pub const EXPECTED_DESCRIPTIONS: usize = 4;

/// System prompt sent to the language model for each class.
pub const SYSTEM_PROMPT: &str = "Given the input text indicating the category name of a certain object, \
your task involves the following steps:
1. Imagine a scene containing the input object.
2. Generate 4 descriptions about different key appearance features of the input object from the \
imagined scene, with each description having a maximum of 16 words.
3. Output a JSON object containing the following key: {\"description\": <list of 4 descriptions>}";

/// The system prompt followed by the class name as the input text.
pub fn render_system_prompt(class_name: &str) -> String {
    format!("{SYSTEM_PROMPT}\n\nInput: {class_name}\n")
}

/// Parsed descriptions for one class.
///
/// On disk: `{"class_name": "...", "description": ["...", ...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptionFile {
    pub class_name: String,
    #[serde(rename = "description")]
    pub descriptions: Vec<String>,
}

impl DescriptionFile {
    /// Parses a JSON object carrying a `description` list. `class_name` is
    /// taken from the object when present, else from `fallback_class`.
    pub fn from_json_str(text: &str, fallback_class: &str, origin: &str) -> Result<Self> {
        let violation = |reason: &str| Error::SchemaViolation { path: origin.to_string(), reason: reason.to_string() };
        let value: Value = serde_json::from_str(text).map_err(|e| violation(&e.to_string()))?;
        let obj = value.as_object().ok_or_else(|| violation("top level is not an object"))?;
        let list = obj
            .get("description")
            .ok_or_else(|| violation("missing key \"description\""))?
            .as_array()
            .ok_or_else(|| violation("\"description\" is not a list"))?;
        let class_name = match obj.get("class_name") {
            Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
            Some(_) => return Err(violation("\"class_name\" is not a nonempty string")),
            None => fallback_class.to_string(),
        };
        if list.is_empty() {
            return Err(Error::NoDescriptions(class_name));
        }
        let mut descriptions = Vec::with_capacity(list.len());
        for item in list {
            match item.as_str() {
                Some(s) if !s.trim().is_empty() => descriptions.push(s.to_string()),
                _ => return Err(violation("descriptions must be nonempty strings")),
            }
        }
        if descriptions.len() != EXPECTED_DESCRIPTIONS {
            log::warn!(
                "{origin}: class {class_name:?} has {} descriptions, expected {EXPECTED_DESCRIPTIONS}",
                descriptions.len()
            );
        }
        Ok(Self { class_name, descriptions })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("description files always serialize")
    }
}

/// Reads a description file; the class name falls back to the file stem.
pub fn parse_descriptions(path: impl AsRef<Path>) -> Result<DescriptionFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    DescriptionFile::from_json_str(&text, &stem, &path.display().to_string())
}

/// Dataset-level list of description files, one per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptionManifest {
    /// Paths relative to the manifest's directory.
    pub description_files: Vec<String>,
}

pub fn load_description_manifest(path: impl AsRef<Path>) -> Result<Vec<DescriptionFile>> {
    let path = path.as_ref();
    let manifest: DescriptionManifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let base = path.parent().unwrap_or(Path::new("."));
    manifest.description_files.iter().map(|f| parse_descriptions(base.join(f))).collect()
}
