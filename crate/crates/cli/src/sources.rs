use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use spandmd::experiments::{
    FileSource, LinearSource, SpanSource, ToySource, DEFAULT_CALIBRATION_IMAGES,
    DEFAULT_EVALUATION_IMAGES,
};
use spandmd::snapshot::ReadOptions;
use spandmd::toymodel::ToySpec;
use spandmd::LinearSystem;

use crate::config::default_seed;

pub const MANIFEST: &str = "manifest.json";

const LINEAR_D: usize = 8;
const LINEAR_DEPTH: usize = 10;
const LINEAR_TOKENS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    /// Seeded toy ViT
    #[default]
    Toy,
    /// Random stable linear system
    Linear,
    /// SDMS files given with --in
    Files,
    /// Analytic calibration curve (calib only)
    Planted,
}

#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct SourceFlags {
    /// Where spans come from
    #[arg(long, value_enum)]
    pub source: Option<SourceKind>,
    /// Seed for weights and inputs [default: $SPANDMD_SEED or 42]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Hidden width
    #[arg(long)]
    pub d: Option<usize>,
    /// Number of blocks
    #[arg(long)]
    pub depth: Option<usize>,
    /// Attention heads (toy)
    #[arg(long)]
    pub heads: Option<usize>,
    /// MLP width (toy)
    #[arg(long)]
    pub d_ff: Option<usize>,
    /// Tokens per image, registers included
    #[arg(long)]
    pub tokens: Option<usize>,
    /// Register tokens per image (toy)
    #[arg(long)]
    pub registers: Option<usize>,
    /// Spectral radius of the random linear system
    #[arg(long)]
    pub rho: Option<f64>,
    /// Calibration images
    #[arg(long)]
    pub images: Option<usize>,
    /// Held-out images
    #[arg(long)]
    pub eval_images: Option<usize>,
    /// SDMS inputs for --source files
    #[arg(long = "in", num_args = 1..)]
    pub inputs: Option<Vec<PathBuf>>,
    /// Leading images of each file used for calibration [default: from manifest.json]
    #[arg(long)]
    pub calib_images: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SourceConfig {
    pub source: SourceKind,
    pub seed: u64,
    pub d: Option<usize>,
    pub depth: Option<usize>,
    pub heads: Option<usize>,
    pub d_ff: Option<usize>,
    pub tokens: Option<usize>,
    pub registers: Option<usize>,
    pub rho: f64,
    pub images: usize,
    pub eval_images: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calib_images: Option<usize>,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            source: SourceKind::Toy,
            seed: default_seed(),
            d: None,
            depth: None,
            heads: None,
            d_ff: None,
            tokens: None,
            registers: None,
            rho: 0.9,
            images: DEFAULT_CALIBRATION_IMAGES,
            eval_images: DEFAULT_EVALUATION_IMAGES,
            inputs: Vec::new(),
            calib_images: None,
        }
    }
}

pub enum Built {
    Toy(ToySource),
    Linear(LinearSource),
    Files(FileSource),
}

impl Built {
    pub fn as_source(&self) -> &dyn SpanSource {
        match self {
            Built::Toy(s) => s,
            Built::Linear(s) => s,
            Built::Files(s) => s,
        }
    }

    pub fn toy(&self) -> Option<&ToySource> {
        match self {
            Built::Toy(s) => Some(s),
            _ => None,
        }
    }
}

impl SourceConfig {
    /// Fills the model dimensions the chosen source uses, so the echoed
    /// config shows concrete values.
    pub fn normalized(mut self) -> Self {
        match self.source {
            SourceKind::Toy => {
                let s = self.toy_spec();
                self.d = Some(s.d);
                self.depth = Some(s.depth);
                self.heads = Some(s.heads);
                self.d_ff = Some(s.d_ff);
                self.tokens = Some(s.t);
                self.registers = Some(s.n_register);
            }
            SourceKind::Linear => {
                self.d.get_or_insert(LINEAR_D);
                self.depth.get_or_insert(LINEAR_DEPTH);
                self.tokens.get_or_insert(LINEAR_TOKENS);
                self.registers = Some(0);
            }
            SourceKind::Files | SourceKind::Planted => {}
        }
        self
    }

    pub fn toy_spec(&self) -> ToySpec {
        let def = ToySpec::default();
        ToySpec {
            seed: self.seed,
            d: self.d.unwrap_or(def.d),
            heads: self.heads.unwrap_or(def.heads),
            d_ff: self.d_ff.unwrap_or(def.d_ff),
            t: self.tokens.unwrap_or(def.t),
            n_register: self.registers.unwrap_or(def.n_register),
            depth: self.depth.unwrap_or(def.depth),
        }
    }

    pub fn linear_system(&self) -> Result<LinearSystem> {
        Ok(LinearSystem::random(
            self.d.unwrap_or(LINEAR_D),
            self.rho,
            self.seed,
        )?)
    }

    pub fn linear_tokens(&self) -> usize {
        self.tokens.unwrap_or(LINEAR_TOKENS)
    }

    pub fn linear_depth(&self) -> usize {
        self.depth.unwrap_or(LINEAR_DEPTH)
    }

    pub fn build(&self) -> Result<Built> {
        Ok(match self.source {
            SourceKind::Toy => Built::Toy(ToySource::new(
                self.toy_spec(),
                self.images,
                self.eval_images,
            )?),
            SourceKind::Linear => Built::Linear(LinearSource::new(
                self.linear_system()?,
                self.linear_tokens(),
                self.images,
                self.eval_images,
                self.linear_depth(),
                self.seed,
            )?),
            SourceKind::Files => {
                if self.inputs.is_empty() {
                    bail!("--source files needs at least one --in file");
                }
                let split = calibration_split(self.calib_images, &self.inputs[0])?;
                Built::Files(FileSource::open(&self.inputs, split, ReadOptions::default())?)
            }
            SourceKind::Planted => bail!("the planted source only drives `sweep calib`"),
        })
    }
}

/// Calibration image count: explicit, else from the `manifest.json` written
/// by `generate` next to `file`.
pub fn calibration_split(explicit: Option<usize>, file: &Path) -> Result<usize> {
    if let Some(n) = explicit {
        return Ok(n);
    }
    let manifest = file.parent().unwrap_or(Path::new(".")).join(MANIFEST);
    let text = fs::read_to_string(&manifest).with_context(|| {
        format!(
            "no --calib-images given and {} is unreadable",
            manifest.display()
        )
    })?;
    let v: Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", manifest.display()))?;
    match v.get("calibration_images").and_then(Value::as_u64) {
        Some(n) => Ok(n as usize),
        None => bail!(
            "{} has no calibration_images; pass --calib-images",
            manifest.display()
        ),
    }
}
