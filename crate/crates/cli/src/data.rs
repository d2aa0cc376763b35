//! Dataset inputs: a directory holding `bundle.json`, a bundle `.json`
//! file, or an energy-style `.csv` table windowed on load.

use std::path::{Path, PathBuf};

use tsxplain_core::datasets::{load_energy_csv, normalize_channels, split, DatasetBundle, NormMode, UciOptions};

use crate::error::{CliError, Result};
use crate::settings::Settings;

pub const BUNDLE_FILE: &str = "bundle.json";
/// Window stride for CSV inputs; denser strides multiply near-duplicate windows.
pub const CSV_STRIDE: usize = 10;
pub const SPLIT_FRACTIONS: [f64; 3] = [0.7, 0.15, 0.15];

pub struct LoadedData {
    /// As read, with splits assigned.
    pub raw: DatasetBundle,
    /// Channel z-scores from train-split statistics.
    pub data: DatasetBundle,
}

fn bundle_path(path: &Path) -> Result<PathBuf> {
    if !path.exists() {
        return Err(CliError::Data(format!("{}: no such file or directory", path.display())));
    }
    Ok(if path.is_dir() { path.join(BUNDLE_FILE) } else { path.to_path_buf() })
}

pub fn read_bundle(path: &Path) -> Result<DatasetBundle> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let b: DatasetBundle = serde_json::from_reader(std::io::BufReader::new(file))
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    b.validate()?;
    Ok(b)
}

/// Resolves the CSV options even for bundle inputs so that the echoed
/// configuration has the same keys for every data source.
pub fn load(settings: &mut Settings, data: Option<PathBuf>) -> Result<LoadedData> {
    let data: String = settings.require("data", data.map(|p| p.display().to_string()))?;
    let defaults = UciOptions::default();
    let opts = UciOptions {
        target: settings.get("target", None, defaults.target.clone())?,
        window: settings.get("window", None, defaults.window)?,
        stride: settings.get("stride", None, CSV_STRIDE)?,
        horizon: settings.get("horizon", None, defaults.horizon)?,
        include_target: settings.get("include_target", None, defaults.include_target)?,
        ..defaults
    };
    let split_seed: u64 = settings.get("split_seed", None, 0)?;
    let path = bundle_path(Path::new(&data))?;
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let raw = if is_csv {
        let mut b = load_energy_csv(&path, &opts)?.bundle;
        split(&mut b, SPLIT_FRACTIONS, split_seed)?;
        b
    } else {
        read_bundle(&path)?
    };
    log::info!("loaded {} samples of {}x{} from {}", raw.len(), raw.seq_len(), raw.channels(), path.display());
    let data = normalize_channels(raw.clone(), NormMode::Zscore);
    Ok(LoadedData { raw, data })
}
