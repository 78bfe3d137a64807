use log::{error, info};
use serde::{Deserialize, Serialize};

use super::{evaluate, train, Metrics, RunConfig, Variant};
use crate::classifier::ClassifierConfig;
use crate::error::Result;
use crate::features::{DatasetManifest, Split};
use crate::prompt::DescriptionFile;

/// One variant's outcome; `error` is set instead of metrics when it failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub classifier: ClassifierConfig,
    pub trainable_parameters: Option<usize>,
    pub final_loss: Option<f64>,
    pub train: Option<Metrics>,
    pub test: Option<Metrics>,
    pub error: Option<String>,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str = "variant,trainable_parameters,final_loss,train_accuracy,test_accuracy,error";

    pub fn csv_line(&self) -> String {
        let opt = |x: Option<f64>| x.map_or_else(String::new, |v| v.to_string());
        format!(
            "{},{},{},{},{},{}",
            self.variant.name(),
            self.trainable_parameters.map_or_else(String::new, |n| n.to_string()),
            opt(self.final_loss),
            opt(self.train.as_ref().map(|m| m.accuracy)),
            opt(self.test.as_ref().map(|m| m.accuracy)),
            self.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
        )
    }
}

fn run_variant(
    manifest: &DatasetManifest,
    descriptions: &[DescriptionFile],
    run: &RunConfig,
    row: &mut AblationRow,
) -> Result<()> {
    let state = train(manifest, descriptions, run)?;
    row.trainable_parameters = Some(state.bank.trainable_parameter_count());
    row.final_loss = state.history.last().map(|r| r.loss);
    let subset = run.train.classes.as_deref();
    row.train = Some(evaluate(manifest, Split::Train, &state, subset)?);
    if !manifest.split(Split::Test).is_empty() {
        row.test = Some(evaluate(manifest, Split::Test, &state, subset)?);
    }
    Ok(())
}

/// Trains and evaluates every [`Variant`] with the same seed and data. A
/// failing variant yields a row with `error` set; the others still run.
pub fn run_ablation(
    manifest: &DatasetManifest,
    descriptions: &[DescriptionFile],
    base: &RunConfig,
) -> Vec<AblationRow> {
    Variant::ALL
        .iter()
        .map(|&variant| {
            let mut run = base.clone();
            run.train.variant = variant;
            let mut row = AblationRow {
                variant,
                classifier: variant.classifier(&base.classifier),
                trainable_parameters: None,
                final_loss: None,
                train: None,
                test: None,
                error: None,
            };
            match run_variant(manifest, descriptions, &run, &mut row) {
                Ok(()) => info!(
                    "variant {}: train accuracy {:.4}",
                    variant.name(),
                    row.train.as_ref().map_or(f64::NAN, |m| m.accuracy)
                ),
                Err(e) => {
                    error!("variant {} failed: {e}", variant.name());
                    row.error = Some(e.to_string());
                }
            }
            row
        })
        .collect()
}
