//! Built-in experiment configs at desk scale. The JSON files under
//! `presets/` are the single source; each one records its reductions from
//! full scale in the fields it sets.
//!
//! | preset | reduction |
//! |---|---|
//! | `table1-linear-latent` | n = 5000, 1000 epochs, H = 32, 10 replications |
//! | `mixture-mean` | 2000 epochs, H = 32, 10 replications |
//! | `theory-all` | none |
//! | `cv-latent-dim` | n = 1000, 300 epochs, H = 32, B = 1000 |

use super::config::ExperimentConfig;
use crate::error::{Error, Result};

pub const PRESET_NAMES: [&str; 4] = ["table1-linear-latent", "mixture-mean", "theory-all", "cv-latent-dim"];

fn source(name: &str) -> Option<&'static str> {
    Some(match name {
        "table1-linear-latent" => include_str!("../../presets/table1-linear-latent.json"),
        "mixture-mean" => include_str!("../../presets/mixture-mean.json"),
        "theory-all" => include_str!("../../presets/theory-all.json"),
        "cv-latent-dim" => include_str!("../../presets/cv-latent-dim.json"),
        _ => return None,
    })
}

/// The resolved config of a named preset.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let text = source(name).ok_or_else(|| {
        Error::Config(vec![format!(
            "unknown preset `{name}` (known: {})",
            PRESET_NAMES.join(", ")
        )])
    })?;
    ExperimentConfig::from_json(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_resolves_and_round_trips() {
        for name in PRESET_NAMES {
            let c = preset(name).unwrap();
            assert_eq!(c.name, name);
            let again = ExperimentConfig::from_value(&c.resolved()).unwrap();
            assert_eq!(again, c, "{name}");
        }
    }

    #[test]
    fn unknown_preset() {
        assert!(matches!(preset("nope"), Err(Error::Config(_))));
    }
}
