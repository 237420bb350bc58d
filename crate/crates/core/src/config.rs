//! Run configuration: one TOML document with a section per pipeline stage.
//!
//! Unknown keys are rejected at every level. Missing keys take defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{ColumnMap, SplitSpec};
use crate::error::{Error, Result};
use crate::geometry::WorldConstants;
use crate::inference::Stitch;
use crate::metrics::Dims;
use crate::nets::NetConfig;
use crate::sensors::{NoiseSpec, TrajectoryKind};
use crate::training::TrainConfig;

/// One recording on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceSource {
    /// IMU file, or a combined IMU and ground-truth file.
    pub imu: PathBuf,
    /// Separate ground-truth file joined on the time column.
    #[serde(default)]
    pub truth: Option<PathBuf>,
    /// Sequence id; the IMU file stem when unset.
    #[serde(default)]
    pub id: Option<String>,
}

impl SequenceSource {
    pub fn id(&self) -> String {
        self.id.clone().unwrap_or_else(|| {
            self.imu
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Every `*.csv` file in this directory is read as a combined recording.
    pub dir: Option<PathBuf>,
    pub sequences: Vec<SequenceSource>,
    pub columns: ColumnMap,
    pub rate_hz: f64,
    pub stride: usize,
    pub split: SplitSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            sequences: Vec::new(),
            columns: ColumnMap::default(),
            rate_hz: 100.0,
            stride: 50,
            split: SplitSpec::default(),
        }
    }
}

impl DataConfig {
    /// Explicit sources followed by the directory listing in name order.
    pub fn sources(&self) -> Result<Vec<SequenceSource>> {
        let mut out = self.sequences.clone();
        if let Some(dir) = &self.dir {
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(|e| Error::data(format!("{}: {e}", dir.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "csv"))
                .collect();
            files.sort();
            out.extend(files.into_iter().map(|imu| SequenceSource {
                imu,
                truth: None,
                id: None,
            }));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub trajectory: TrajectoryKind,
    pub count: usize,
    pub duration_s: f64,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            trajectory: TrajectoryKind::default(),
            count: 8,
            duration_s: 60.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Window stride; the data stride when unset.
    pub stride: Option<usize>,
    pub stitch: Stitch,
    /// Also score the dead-reckoning baseline.
    pub baseline: bool,
    /// Ids of the sequences to run; when empty, the holdout sequences, or
    /// every sequence if there is no holdout.
    pub sequences: Vec<String>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            stride: None,
            stitch: Stitch::LastWins,
            baseline: true,
            sequences: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub dims: Dims,
    pub rte_horizon_s: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            dims: Dims::Planar,
            rte_horizon_s: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionExportConfig {
    /// Sequence id and window start of the exported window.
    pub sequence: Option<String>,
    pub start: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out: PathBuf,
    pub data: DataConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub noise: NoiseSpec,
    pub world: WorldConstants,
    pub simulation: SimulationConfig,
    pub inference: InferenceConfig,
    pub metrics: MetricsConfig,
    pub attention: AttentionExportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("out"),
            data: DataConfig::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            noise: NoiseSpec::default(),
            world: WorldConstants::default(),
            simulation: SimulationConfig::default(),
            inference: InferenceConfig::default(),
            metrics: MetricsConfig::default(),
            attention: AttentionExportConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        self.noise.validate()?;
        self.data.split.validate()?;
        if self.data.stride == 0 || self.inference.stride == Some(0) {
            return Err(Error::config("strides must be at least 1"));
        }
        if !(self.data.rate_hz > 0.0)
            || !(self.simulation.duration_s > 0.0)
            || !(self.metrics.rte_horizon_s > 0.0)
        {
            return Err(Error::config(
                "rate, duration and RTE horizon must be positive",
            ));
        }
        if ((1.0 / self.data.rate_hz) - self.world.dt).abs() > 1e-12 {
            return Err(Error::config(format!(
                "world.dt {} disagrees with data.rate_hz {}",
                self.world.dt, self.data.rate_hz
            )));
        }
        Ok(())
    }

    pub fn inference_stride(&self) -> usize {
        self.inference.stride.unwrap_or(self.data.stride)
    }

    /// FNV-1a hash of the settings that determine a trained model. Epoch
    /// budgets and patience are left out so a run can be extended.
    pub fn fingerprint(&self) -> Result<String> {
        let train = TrainConfig {
            attitude_epochs: 0,
            cycle1_epochs: 0,
            cycle2_epochs: 0,
            patience: None,
            ..self.train.clone()
        };
        #[derive(Serialize)]
        struct Key<'a> {
            data: &'a DataConfig,
            net: &'a NetConfig,
            train: &'a TrainConfig,
        }
        let text = toml::to_string(&Key {
            data: &self.data,
            net: &self.net,
            train: &train,
        })
        .map_err(|e| Error::config(e.to_string()))?;
        Ok(format!("{:016x}", fnv1a(text.as_bytes())))
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.net.window = 50;
        cfg.train.cycle2_lr = Some(1e-4);
        cfg.data.sequences.push(SequenceSource {
            imu: "a.csv".into(),
            truth: Some("b.csv".into()),
            id: None,
        });
        cfg.simulation.trajectory = TrajectoryKind::Circle {
            radius: 3.0,
            omega: 0.5,
        };
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in [
            "bogus = 1",
            "[net]\nwindw = 3",
            "[train]\nlr = 1e-3\nepochs = 2",
            "[data.split]\ntrain = 1.0\nval = 0.0\ntest = 0.0\nextra = 1",
        ] {
            assert!(
                matches!(RunConfig::from_toml(doc), Err(Error::Config(_))),
                "{doc}"
            );
        }
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for doc in [
            "[net.position]\nd_model = 15",
            "[data]\nstride = 0",
            "[data.split]\ntrain = 0.9\nval = 0.2\ntest = 0.1",
            "[data]\nrate_hz = 50.0",
        ] {
            assert!(
                matches!(RunConfig::from_toml(doc), Err(Error::Config(_))),
                "{doc}"
            );
        }
    }

    #[test]
    fn fingerprint_tracks_model_settings_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out = "elsewhere".into();
        b.metrics.rte_horizon_s = 2.0;
        b.train.cycle1_epochs += 5;
        assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        b.train.lr = 2e-3;
        assert_ne!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
    }

    #[test]
    fn fnv1a_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn directory_sources_are_sorted_csv_files() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["b.csv", "a.csv", "notes.txt"] {
            std::fs::write(dir.path().join(f), "").unwrap();
        }
        let cfg = DataConfig {
            dir: Some(dir.path().into()),
            ..DataConfig::default()
        };
        let ids: Vec<String> = cfg
            .sources()
            .unwrap()
            .iter()
            .map(SequenceSource::id)
            .collect();
        assert_eq!(ids, ["a", "b"]);
    }
}
