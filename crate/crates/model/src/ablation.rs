//! Ablation harness: token size, training frequency set, inference rate and
//! bypassed time conditioning. Every cell shares the seed and the data.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use tavo_core::metrics::EvalOptions;
use tavo_core::synth::{SceneKind, SceneSpec, Sequence};

use crate::checkpoint::load_checkpoint;
use crate::error::{Error, Result};
use crate::infer::evaluate_sequences;
use crate::network::EgomotionNet;
use crate::train::{train, TrainConfig, TrainingData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationName {
    TokenSize,
    FreqSet,
    InferenceRate,
    NoTimeLayers,
}

impl std::str::FromStr for AblationName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token_size" => Ok(AblationName::TokenSize),
            "freq_set" => Ok(AblationName::FreqSet),
            "inference_rate" => Ok(AblationName::InferenceRate),
            "no_time_layers" => Ok(AblationName::NoTimeLayers),
            _ => Err(Error::config(format!(
                "unknown ablation {s:?} (token_size, freq_set, inference_rate, no_time_layers)"
            ))),
        }
    }
}

/// Synthetic train and test sequences shared by every cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub scene: SceneKind,
    pub seed: u64,
    pub train_sequences: usize,
    pub test_sequences: usize,
    /// Overrides the default sequence duration in seconds.
    pub duration: Option<f64>,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            scene: SceneKind::PlaneBoxes,
            seed: 7,
            train_sequences: 8,
            test_sequences: 4,
            duration: None,
        }
    }
}

/// Offset separating test scene seeds from training scene seeds.
pub const TEST_SEED_OFFSET: u64 = 1_000_000;

impl DataSpec {
    pub fn spec(&self, seed: u64) -> SceneSpec {
        let mut s = SceneSpec::desk(seed, self.scene);
        if let Some(d) = self.duration {
            s.motion.duration = d;
        }
        s
    }

    pub fn train_set(&self) -> Result<Vec<Sequence>> {
        (0..self.train_sequences as u64)
            .map(|i| Ok(Sequence::new(&self.spec(self.seed + i))?))
            .collect()
    }

    pub fn test_set(&self) -> Result<Vec<Sequence>> {
        (0..self.test_sequences as u64)
            .map(|i| Ok(Sequence::new(&self.spec(self.seed + TEST_SEED_OFFSET + i))?))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    /// `token_size` cells: frequency scales `K` of the time encoding.
    pub token_sizes: Vec<usize>,
    /// `freq_set` cells: training rate sets in Hz.
    pub frequency_sets: Vec<Vec<f64>>,
    /// `inference_rate` rows in Hz.
    pub inference_rates: Vec<f64>,
    /// Rates at which trained cells are evaluated.
    pub eval_rates: Vec<f64>,
    /// `inference_rate` evaluates this checkpoint instead of training one.
    pub checkpoint: Option<PathBuf>,
    pub train: TrainConfig,
    pub data: DataSpec,
    pub eval: EvalOptions,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            token_sizes: vec![2, 8],
            frequency_sets: vec![vec![12.0, 6.0, 4.0], vec![12.0]],
            inference_rates: vec![12.0, 6.0, 4.0, 2.0],
            eval_rates: vec![12.0],
            checkpoint: None,
            train: TrainConfig::default(),
            data: DataSpec::default(),
            eval: EvalOptions::default(),
        }
    }
}

impl AblationGrid {
    pub fn from_toml(text: &str) -> Result<Self> {
        let g: AblationGrid = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        g.train.validate()?;
        Ok(g)
    }

    fn skip(&self, rate: f64) -> Result<usize> {
        let k = self.train.base_rate / rate;
        if !(rate > 0.0) || (k - k.round()).abs() > 1e-9 || k.round() < 1.0 {
            return Err(Error::config(format!("{rate} Hz is not {} Hz divided by an integer", self.train.base_rate)));
        }
        Ok(k.round() as usize)
    }

    /// Training configurations for each cell of a training ablation.
    pub fn cells(&self, name: AblationName) -> Result<Vec<(String, TrainConfig)>> {
        let base = &self.train;
        let cells: Vec<(String, TrainConfig)> = match name {
            AblationName::TokenSize => self
                .token_sizes
                .iter()
                .map(|k| {
                    let mut c = base.clone();
                    c.model.frequency_scales = *k;
                    (format!("K={k}"), c)
                })
                .collect(),
            AblationName::FreqSet => self
                .frequency_sets
                .iter()
                .map(|set| {
                    let mut c = base.clone();
                    c.frequencies = set.clone();
                    (format!("{{{}}}", fmt_rates(set)), c)
                })
                .collect(),
            AblationName::NoTimeLayers => [true, false]
                .iter()
                .map(|on| {
                    let mut c = base.clone();
                    c.model.time_layers = *on;
                    let label = if *on { "time layers" } else { "no time layers" };
                    (format!("{{{}}} {label}", fmt_rates(&c.frequencies)), c)
                })
                .collect(),
            AblationName::InferenceRate => vec![(format!("{{{}}}", fmt_rates(&base.frequencies)), base.clone())],
        };
        for (_, c) in &cells {
            c.validate()?;
        }
        Ok(cells)
    }
}

fn fmt_rates(rates: &[f64]) -> String {
    rates.iter().map(|r| format!("{r}")).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub eval_rate: f64,
    pub skip: usize,
    pub t_err: f64,
    pub r_err: f64,
    pub ate: f64,
    pub s_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub name: AblationName,
    pub rows: Vec<AblationRow>,
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ablation: {:?}", self.name)?;
        writeln!(
            f,
            "{:<32} {:>8} {:>10} {:>14} {:>10} {:>8}",
            "cell", "rate(Hz)", "t_err(%)", "r_err(°/100m)", "ATE(m)", "s_err"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<32} {:>8} {:>10.4} {:>14.4} {:>10.4} {:>8.4}",
                r.label, r.eval_rate, r.t_err, r.r_err, r.ate, r.s_err
            )?;
        }
        Ok(())
    }
}

fn eval_rows(net: &EgomotionNet, label: &str, rates: &[f64], grid: &AblationGrid, test: &[Sequence]) -> Result<Vec<AblationRow>> {
    rates
        .iter()
        .map(|rate| {
            let k = grid.skip(*rate)?;
            let r = evaluate_sequences(net, test, k, &grid.eval)?;
            Ok(AblationRow {
                label: label.to_string(),
                eval_rate: *rate,
                skip: k,
                t_err: r.t_err,
                r_err: r.r_err,
                ate: r.ate,
                s_err: r.s_err,
            })
        })
        .collect()
}

pub fn run_ablation(name: AblationName, grid: &AblationGrid) -> Result<AblationTable> {
    let cells = grid.cells(name)?;
    let rates = if name == AblationName::InferenceRate {
        &grid.inference_rates
    } else {
        &grid.eval_rates
    };
    for r in rates {
        grid.skip(*r)?;
    }
    let test = grid.data.test_set()?;
    let mut rows = Vec::new();
    if let (AblationName::InferenceRate, Some(path)) = (name, &grid.checkpoint) {
        let (net, _) = load_checkpoint(path)?;
        rows.extend(eval_rows(&net, &path.display().to_string(), rates, grid, &test)?);
        return Ok(AblationTable { name, rows });
    }
    let train_seqs = grid.data.train_set()?;
    for (label, cfg) in cells {
        log::info!("ablation cell {label}");
        let out = train(&cfg, &TrainingData { sequences: &train_seqs }, None)?;
        rows.extend(eval_rows(&out.net, &label, rates, grid, &test)?);
    }
    Ok(AblationTable { name, rows })
}
