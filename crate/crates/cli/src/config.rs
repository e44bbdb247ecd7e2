use crate::CliError;
use mtat_core::diffusion::{DatasetSpec, ToyModelConfig, TrainConfig};
use mtat_core::scheduler::{DistanceMetric, MediatorSchedule};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// The only interpolant implemented: `x_t = (1 − t)·x + t·ε`, velocity target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolant {
    #[default]
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training set size.
    pub size: usize,
    /// Held-out set the FID proxy compares against.
    pub reference_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            size: 256,
            reference_size: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub steps: usize,
    pub samples: usize,
    pub schedule: Option<MediatorSchedule>,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            steps: 20,
            samples: 4,
            schedule: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RedundancySection {
    pub samples: usize,
    /// Evaluate at most this many row pairs per head.
    pub pair_cap: Option<usize>,
    /// Also write the first sample's effective attention maps.
    pub dump_maps: bool,
}

impl Default for RedundancySection {
    fn default() -> Self {
        RedundancySection {
            samples: 2,
            pair_cap: None,
            dump_maps: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub counts: [usize; 3],
    pub metrics: Vec<DistanceMetric>,
    pub rho_max_tenths: u32,
    /// Samples generated per grid point.
    pub samples: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            counts: [4, 16, 64],
            metrics: vec![DistanceMetric::L1],
            rho_max_tenths: 10,
            samples: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlopsSection {
    pub counts: Vec<usize>,
    /// Include the 16×16-token, width-384, 12-layer reference preset.
    pub preset: bool,
}

impl Default for FlopsSection {
    fn default() -> Self {
        FlopsSection {
            counts: vec![4, 16, 64],
            preset: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    /// Token counts; each must be a perfect square.
    pub sizes: Vec<usize>,
    pub hidden: usize,
    pub heads: usize,
    pub mediators: usize,
    /// Timed runs per size; the fastest is reported.
    pub repeats: usize,
    /// Add a mediator run with `n = N` at the smallest size.
    pub degenerate: bool,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            sizes: vec![64, 256, 1024, 4096],
            hidden: 32,
            heads: 1,
            mediators: 16,
            repeats: 1,
            degenerate: true,
        }
    }
}

/// Everything a command needs; the resolved copy written next to the
/// outputs reproduces them exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub interpolant: Interpolant,
    pub model: ToyModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    /// Trained weights for `sample`, `redundancy` and `sweep`; the seeded
    /// initialization is used when absent.
    pub checkpoint: Option<PathBuf>,
    pub sampler: SamplerSection,
    pub redundancy: RedundancySection,
    pub sweep: SweepSection,
    pub flops: FlopsSection,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            interpolant: Interpolant::Linear,
            model: ToyModelConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            checkpoint: None,
            sampler: SamplerSection::default(),
            redundancy: RedundancySection::default(),
            sweep: SweepSection::default(),
            flops: FlopsSection::default(),
            bench: BenchSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            CliError::Config(format!("field `{path}`: {inner}"))
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| e.prefixed(path.display()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn dataset_spec(&self, size: usize) -> DatasetSpec {
        DatasetSpec {
            classes: self.model.classes,
            grid: self.model.grid,
            channels: self.model.channels,
            size,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        if let Some(s) = &self.sampler.schedule {
            s.validate()?;
            for n in s.counts() {
                self.model.mediator_config(n)?;
            }
        }
        if self.sweep.metrics.is_empty() {
            return Err(CliError::Config("sweep.metrics is empty".into()));
        }
        if self.bench.sizes.iter().any(|&n| square_side(n).is_none()) {
            return Err(CliError::Config(format!(
                "bench.sizes must be perfect squares, got {:?}",
                self.bench.sizes
            )));
        }
        Ok(())
    }
}

pub(crate) fn square_side(n: usize) -> Option<usize> {
    let s = (n as f64).sqrt().round() as usize;
    (s > 0 && s * s == n).then_some(s)
}
