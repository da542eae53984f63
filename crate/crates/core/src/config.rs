//! Sectioned `key = value` run configuration.
//!
//! ```text
//! [run]
//! preset = quick
//! seeds = 0,1,2
//!
//! [data]
//! variable = precipitation_like
//!
//! [experiment]
//! loss = L1
//! preproc = learnable
//! ```
//!
//! Presets supply every default, so the `[run] preset` key is resolved
//! before any other entry. Unknown sections and keys are rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::data::{DatasetSpec, Variable};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::model::{parse, parse_list, UNetConfig};
use crate::preprocessing::GammaMode;
use crate::training::{ExperimentSpec, TrainConfig};

pub const SECTIONS: [&str; 4] = ["run", "data", "model", "experiment"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Quick,
    Desk,
    Full,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Quick => "quick",
            Preset::Desk => "desk",
            Preset::Full => "full",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "quick" => Ok(Preset::Quick),
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            other => Err(Error::Config(format!("unknown preset `{other}` (quick | desk | full)"))),
        }
    }
}

impl Preset {
    /// Dataset for this preset. The full preset shares the desk data
    /// shape; only the network and epoch count grow.
    pub fn dataset(self, variable: Variable) -> DatasetSpec {
        match self {
            Preset::Quick => DatasetSpec::quick(variable, 0),
            Preset::Desk | Preset::Full => DatasetSpec::desk(variable, 0),
        }
    }

    pub fn model(self, in_channels: usize) -> UNetConfig {
        match self {
            Preset::Quick => UNetConfig::quick(in_channels),
            Preset::Desk => UNetConfig::desk(in_channels),
            Preset::Full => UNetConfig::full(in_channels),
        }
    }

    pub fn train(self, seed: u64) -> TrainConfig {
        match self {
            Preset::Quick => TrainConfig::quick(seed),
            Preset::Desk => TrainConfig::desk(seed),
            Preset::Full => TrainConfig::full(seed),
        }
    }

    /// Complete configuration for one variable with preset defaults.
    pub fn config(self, variable: Variable) -> LabConfig {
        let model = self.model(variable.input_channels());
        LabConfig {
            preset: self,
            seeds: vec![0, 1, 2],
            jobs: 1,
            data: self.dataset(variable),
            experiment: ExperimentSpec::new(LossKind::L1, GammaMode::None, model, self.train(0)),
        }
    }
}

/// Everything a run needs: data recipe, network, experiment and matrix
/// settings.
#[derive(Clone, Debug, PartialEq)]
pub struct LabConfig {
    pub preset: Preset,
    /// Training seeds of a matrix run.
    pub seeds: Vec<u64>,
    /// Parallel matrix workers.
    pub jobs: usize,
    pub data: DatasetSpec,
    pub experiment: ExperimentSpec,
}

#[derive(Clone, Debug)]
struct Entry {
    section: String,
    key: String,
    value: String,
    origin: String,
}

fn split_key(full: &str) -> Result<(String, String)> {
    let (section, key) = full
        .split_once('.')
        .ok_or_else(|| Error::Config(format!("override `{full}` must look like section.key=value")))?;
    Ok((section.trim().to_string(), key.trim().to_string()))
}

fn parse_entries(text: &str, origin: &str) -> Result<Vec<Entry>> {
    let mut section: Option<String> = None;
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = format!("{origin}:{}", n + 1);
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| Error::Config(format!("{at}: malformed section header `{line}`")))?
                .trim();
            if !SECTIONS.contains(&name) {
                return Err(Error::UnknownKey(format!("[{name}] ({at})")));
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{at}: expected `key = value`, got `{line}`")))?;
        let section = section
            .clone()
            .ok_or_else(|| Error::Config(format!("{at}: `{}` appears before any section header", key.trim())))?;
        out.push(Entry { section, key: key.trim().to_string(), value: value.trim().to_string(), origin: at });
    }
    Ok(out)
}

fn parse_override(text: &str) -> Result<Entry> {
    let (full, value) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{text}` must look like section.key=value")))?;
    let (section, key) = split_key(full)?;
    if !SECTIONS.contains(&section.as_str()) {
        return Err(Error::UnknownKey(full.trim().to_string()));
    }
    Ok(Entry { section, key, value: value.trim().to_string(), origin: "--set".into() })
}

impl LabConfig {
    /// Parses config text, then applies `section.key=value` overrides.
    pub fn parse(text: &str, overrides: &[String]) -> Result<LabConfig> {
        let mut entries = parse_entries(text, "config")?;
        for o in overrides {
            entries.push(parse_override(o)?);
        }
        let last = |section: &str, key: &str| {
            entries.iter().rev().find(|e| e.section == section && e.key == key).map(|e| e.value.clone())
        };
        let preset: Preset = last("run", "preset").map(|v| v.parse()).transpose()?.unwrap_or(Preset::Quick);
        let variable: Variable = last("data", "variable").map(|v| v.parse()).transpose()?.unwrap_or(Variable::PrecipitationLike);
        let mut cfg = preset.config(variable);
        let mut explicit_channels = false;
        for e in &entries {
            let tag = |err: Error| match err {
                Error::UnknownKey(k) => Error::UnknownKey(format!("{}.{k} ({})", e.section, e.origin)),
                Error::Config(m) => Error::Config(format!("{}.{}: {m} ({})", e.section, e.key, e.origin)),
                other => other,
            };
            match e.section.as_str() {
                "run" => cfg.set_run(&e.key, &e.value).map_err(tag)?,
                "data" => cfg.data.set(&e.key, &e.value).map_err(tag)?,
                "model" => {
                    explicit_channels |= e.key == "in_channels";
                    cfg.experiment.model.set(&e.key, &e.value).map_err(tag)?
                }
                "experiment" => cfg.experiment.set(&e.key, &e.value).map_err(tag)?,
                _ => unreachable!("sections are checked while parsing"),
            }
        }
        let channels = cfg.data.variable.input_channels();
        if !explicit_channels {
            cfg.experiment.model.in_channels = channels;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<LabConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, overrides)
    }

    fn set_run(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            // Already resolved before the other entries.
            "preset" => self.preset = value.parse()?,
            "seeds" => self.seeds = parse_list(key, value)?,
            "jobs" => self.jobs = parse(key, value)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.experiment.validate()?;
        let want = self.data.variable.input_channels();
        if self.experiment.model.in_channels != want {
            return Err(Error::Config(format!(
                "model.in_channels = {} but {} data has {want} input channels",
                self.experiment.model.in_channels, self.data.variable
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("run.seeds must list at least one seed".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("run.jobs must be at least 1".into()));
        }
        Ok(())
    }

    /// Sets the training seed and the matrix seed list to `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        self.experiment.train.seed = seed;
        self.seeds = vec![seed];
    }

    /// Fully resolved config text. Parsing it back yields `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut section = |name: &str, kv: Vec<(String, String)>| {
            s.push_str(&format!("[{name}]\n"));
            for (k, v) in kv {
                s.push_str(&format!("{k} = {v}\n"));
            }
            s.push('\n');
        };
        let seeds = self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
        section(
            "run",
            vec![("preset".into(), self.preset.to_string()), ("seeds".into(), seeds), ("jobs".into(), self.jobs.to_string())],
        );
        section("data", self.data.to_kv());
        section("model", self.experiment.model.to_kv());
        section("experiment", self.experiment.to_kv());
        s
    }

    /// Config text preceded by comment lines naming the tool version and
    /// the command that produced the run.
    pub fn manifest(&self, command: &str) -> String {
        format!(
            "# downscale-lab {}\n# command: {command}\n# training seed: {}\n\n{}",
            env!("CARGO_PKG_VERSION"),
            self.experiment.train.seed,
            self.to_text()
        )
    }
}
