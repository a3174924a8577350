use std::fs;
use std::path::Path;

use clocksync_core::kernel::Configuration;
use clocksync_core::sim::{InitKind, Scenario};

use crate::{io_err, HarnessError, Result};

/// Parses a scenario from TOML, or JSON when the extension is `.json`.
pub fn parse_scenario(text: &str, path: &Path) -> Result<Scenario> {
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(text).map_err(|e| e.to_string())
    } else {
        toml::from_str(text).map_err(|e| e.to_string())
    };
    parsed.map_err(|message| HarnessError::Parse { path: path.into(), message })
}

/// Loads and validates a scenario. An `ExplicitFile` initial state is
/// read relative to the scenario's directory and inlined.
pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut scenario = parse_scenario(&text, path)?;
    if let InitKind::ExplicitFile { path: rel } = &scenario.init {
        let full = path.parent().unwrap_or(Path::new(".")).join(rel);
        let config = load_configuration(&full)?;
        scenario.init = InitKind::Explicit { config };
    }
    scenario.validate()?;
    Ok(scenario)
}

/// Reads a JSON-encoded configuration.
pub fn load_configuration(path: &Path) -> Result<Configuration> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Parse { path: path.into(), message: e.to_string() })
}
