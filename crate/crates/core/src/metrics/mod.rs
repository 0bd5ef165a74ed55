//! Latent-space and image-quality metrics.

mod features;
mod fid;
mod ppl;
mod separability;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{IoContext, Result};

pub use features::{extract_features, FEATURE_DIM};
pub use fid::{fid, frechet_distance, GaussianStats};
pub use ppl::{perceptual_path_length, perceptual_path_length_with, PathLengthConfig, PathLengthResult};
pub use separability::{
    conditional_entropy, fit_linear_svm, separability_from_scores, separability_score,
    train_attribute_classifier, AttributeClassifier, AttributeResult, ClassifierConfig, LinearSvm,
    SeparabilityConfig, SeparabilityResult, SvmConfig,
};

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = Self::default();
        iter.into_iter().for_each(|x| s.add(x));
        s
    }
}

/// Short hex digest of any serializable configuration echo.
pub fn config_hash<S: Serialize>(config: &S) -> Result<String> {
    let json = serde_json::to_vec(config)?;
    let digest = Sha256::digest(&json);
    Ok(hex::encode(&digest[..8]))
}

/// One emitted metric value with the inputs needed to reproduce it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    /// `z`, `w`, or empty for space-independent metrics.
    pub space: String,
    pub value: f64,
    pub config_hash: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub wall_time_s: f64,
}

pub const REPORT_CSV_HEADER: &str = "metric,space,value,config_hash,seed";

impl MetricReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.metric, self.space, self.value, self.config_hash, self.seed
        )
    }
}

/// Writes `reports.json` and `reports.csv` into `dir`.
pub fn write_reports(dir: &Path, reports: &[MetricReport]) -> Result<()> {
    std::fs::create_dir_all(dir).at(dir)?;
    let json_path = dir.join("reports.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(reports)?).at(&json_path)?;
    let csv_path = dir.join("reports.csv");
    let mut f = std::fs::File::create(&csv_path).at(&csv_path)?;
    writeln!(f, "{REPORT_CSV_HEADER}").at(&csv_path)?;
    for r in reports {
        writeln!(f, "{}", r.csv_row()).at(&csv_path)?;
    }
    Ok(())
}

/// Mean and standard error of the mean.
pub(crate) fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().copied().collect::<CompensatedSum>().total() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .collect::<CompensatedSum>()
        .total()
        / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let s: CompensatedSum = [1.0, 1e100, 1.0, -1e100].into_iter().collect();
        assert_eq!(s.total(), 2.0);
    }

    #[test]
    fn stderr_of_constant_is_zero() {
        assert_eq!(mean_and_stderr(&[2.5; 10]), (2.5, 0.0));
        let (m, se) = mean_and_stderr(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((se - 1.0).abs() < 1e-15);
    }

    #[test]
    fn config_hash_is_stable() {
        let a = config_hash(&serde_json::json!({"a": 1})).unwrap();
        assert_eq!(a, config_hash(&serde_json::json!({"a": 1})).unwrap());
        assert_ne!(a, config_hash(&serde_json::json!({"a": 2})).unwrap());
        assert_eq!(a.len(), 16);
    }
}
