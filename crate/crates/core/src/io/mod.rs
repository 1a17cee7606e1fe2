//! Files in and out: run configuration, detection files, images, the night
//! prior and report writers. Every writer is atomic.

pub mod config;
pub mod detections;
pub mod images;
pub mod output;

use std::path::Path;

use serde::de::DeserializeOwned;

use crate::error::{Error, Result};
use crate::glt::NightPrior;

pub use config::{AitConfig, PathsConfig, RunConfig, SimConfig, SimulationOutput};
pub use detections::{
    load_detections, parse_detections, records_from_pseudo_labels, records_from_sets, write_detections,
    DetectionRecord, ImageId,
};
pub use images::{list_images, read_image, write_image};
pub use output::{write_atomic, write_atomic_with, write_json_atomic};

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Strict JSON decoding that reports the path of the offending value.
pub fn from_json_str<T: DeserializeOwned>(text: &str, source_name: &str) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(text);
    let parse_err = |path: String, message: String| Error::Parse {
        source_name: source_name.to_string(),
        path,
        message,
    };
    let value: T = serde_path_to_error::deserialize(&mut de)
        .map_err(|e| parse_err(e.path().to_string(), e.inner().to_string()))?;
    de.end().map_err(|e| parse_err(".".into(), e.to_string()))?;
    Ok(value)
}

pub fn load_prior(path: &Path) -> Result<NightPrior> {
    let prior: NightPrior = from_json_str(&read_text(path)?, &path.display().to_string())?;
    prior.validate()?;
    Ok(prior)
}

pub fn write_prior(path: &Path, prior: &NightPrior) -> Result<()> {
    write_json_atomic(path, prior)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glt::ChannelStats;

    #[test]
    fn prior_round_trip_and_strictness() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("prior.json");
        let prior = NightPrior {
            stats: ChannelStats {
                mean: vec![0.1, 0.2, 0.3],
                std: vec![0.01, 0.02, 0.03],
            },
            sample_count: 4,
        };
        write_prior(&p, &prior).unwrap();
        assert_eq!(load_prior(&p).unwrap(), prior);

        std::fs::write(&p, r#"{"stats": {"mean": [0.1], "std": [0.1], "median": 1}, "sample_count": 1}"#).unwrap();
        let err = load_prior(&p).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("stats"), "{err}");
    }
}
