//! Run configuration and the dataset-size experiment.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::{self, BackboneConfig, Composer, TrainConfig};
use crate::error::{Error, IoContext, Result};
use crate::evaluation;
use crate::manifest::{self, DatasetManifest};
use crate::reconstruction::ToyAutoencoderConfig;
use crate::reconstruction::{write_file, SavePolicy};
use crate::robustness::{PostProcessPolicy, SweepSpec};
use crate::seed;
use crate::textures::TextureDatasetConfig;

pub const SNAPSHOT_FILE: &str = "run_config.toml";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Output root; falls back to `FAKEPRINT_OUT`, then the working directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Directory of accounting configs; the bundled ones when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accounting_configs: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecipeConfig {
    /// Training set sizes, counted in real/fake pairs.
    pub sizes: Vec<usize>,
    pub variants: Vec<Composer>,
    pub target_fpr: f64,
}

impl Default for RecipeConfig {
    fn default() -> Self {
        RecipeConfig {
            sizes: vec![250, 1000],
            variants: vec![Composer::Random, Composer::Sync],
            target_fpr: 0.05,
        }
    }
}

/// Everything a run needs, read from one TOML file. Module seeds are
/// overwritten from `seed` by [`RunConfig::resolved`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub tag: String,
    pub seed: u64,
    pub paths: Paths,
    pub textures: TextureDatasetConfig,
    pub autoencoder: ToyAutoencoderConfig,
    pub save_policy: SavePolicy,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub postprocess: PostProcessPolicy,
    pub sweeps: Vec<SweepSpec>,
    pub recipe: RecipeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            tag: "default".into(),
            seed: 0,
            paths: Paths::default(),
            textures: TextureDatasetConfig::default(),
            autoencoder: ToyAutoencoderConfig::default(),
            save_policy: SavePolicy::default(),
            backbone: BackboneConfig::default(),
            train: TrainConfig::default(),
            postprocess: PostProcessPolicy::default(),
            sweeps: Vec::new(),
            recipe: RecipeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse("run config", e.message()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).at(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    pub fn seed_for(&self, label: &str) -> u64 {
        seed::derive(self.seed, label)
    }

    /// Copy with every module seed derived from the global seed.
    pub fn resolved(&self) -> RunConfig {
        let mut c = self.clone();
        c.textures.seed = self.seed_for("textures");
        c.autoencoder.seed = self.seed_for("autoencoder");
        c.train.seed = self.seed_for("train");
        c.postprocess.seed = self.seed_for("postprocess");
        for (i, s) in c.sweeps.iter_mut().enumerate() {
            s.seed = self.seed_for(&format!("sweep/{i}"));
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.autoencoder.validate()?;
        self.train.validate()?;
        self.postprocess.validate()?;
        for s in &self.sweeps {
            s.validate()?;
        }
        let r = &self.recipe;
        if r.sizes.is_empty() || r.sizes.contains(&0) {
            return Err(Error::InvalidArgument("recipe sizes must be nonempty and positive".into()));
        }
        if r.variants.is_empty() {
            return Err(Error::InvalidArgument("recipe needs at least one variant".into()));
        }
        if !(r.target_fpr > 0.0 && r.target_fpr < 1.0) {
            return Err(Error::InvalidArgument(format!("target FPR {} outside (0, 1)", r.target_fpr)));
        }
        Ok(())
    }

    /// Writes `run_config.toml` into `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join(SNAPSHOT_FILE), self.to_toml().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeCell {
    pub size: usize,
    pub variant: Composer,
    /// Percent.
    pub tpr_at_fpr: Option<f64>,
    pub average_precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeTable {
    pub target_fpr: f64,
    pub sizes: Vec<usize>,
    pub variants: Vec<Composer>,
    pub cells: Vec<RecipeCell>,
}

impl RecipeTable {
    pub fn cell(&self, size: usize, variant: Composer) -> Option<&RecipeCell> {
        self.cells.iter().find(|c| c.size == size && c.variant == variant)
    }

    /// Rows are sizes, columns variants; failed cells read `failed`.
    pub fn csv(&self) -> String {
        let mut out = String::from("size");
        for v in &self.variants {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
        for &size in &self.sizes {
            let _ = write!(out, "{size}");
            for &v in &self.variants {
                match self.cell(size, v).and_then(|c| c.tpr_at_fpr) {
                    Some(t) => {
                        let _ = write!(out, ",{t:.2}");
                    }
                    None => out.push_str(",failed"),
                }
            }
            out.push('\n');
        }
        out
    }
}

fn run_cell(
    cfg: &RunConfig,
    pool: &DatasetManifest,
    val: &DatasetManifest,
    test: &DatasetManifest,
    size: usize,
    variant: Composer,
) -> Result<(f64, f64)> {
    // One shuffle for every size, so smaller training sets nest in larger ones.
    let subset = manifest::sample_units(pool, size, cfg.seed_for("recipe/sample"))?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.composer = variant;
    train_cfg.seed = cfg.seed_for(&format!("recipe/train/{variant}"));
    let det = detector::build_detector(&cfg.backbone, cfg.seed_for(&format!("recipe/init/{variant}")))?;
    let outcome = detector::train(det, &subset, val, &train_cfg)?;
    let scores = evaluation::score(&outcome.detector, test)?;
    Ok((
        100.0 * evaluation::tpr_at_fpr(&scores, cfg.recipe.target_fpr)?,
        evaluation::average_precision(&scores)?,
    ))
}

/// Trains one detector per (size, variant) on nested subsamples of the
/// paired `pool` and reports TPR at the target FPR on `test`. A failing cell
/// is recorded and the run continues. With `out_dir`, writes `table.csv`,
/// `cells.json` and the config snapshot there.
pub fn experiment_recipe(
    cfg: &RunConfig,
    pool: &DatasetManifest,
    val: &DatasetManifest,
    test: &DatasetManifest,
    out_dir: Option<&Path>,
) -> Result<RecipeTable> {
    cfg.validate()?;
    pool.require_pairs()?;
    let mut sizes = cfg.recipe.sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();
    let mut table = RecipeTable {
        target_fpr: cfg.recipe.target_fpr,
        sizes: sizes.clone(),
        variants: cfg.recipe.variants.clone(),
        cells: Vec::new(),
    };
    for &size in &sizes {
        for &variant in &cfg.recipe.variants {
            let cell = match run_cell(cfg, pool, val, test, size, variant) {
                Ok((tpr, ap)) => {
                    log::info!("recipe size {size} {variant}: TPR {tpr:.2}% AP {ap:.4}");
                    RecipeCell {
                        size,
                        variant,
                        tpr_at_fpr: Some(tpr),
                        average_precision: Some(ap),
                        error: None,
                    }
                }
                Err(e) => {
                    log::warn!("recipe size {size} {variant} failed: {e}");
                    RecipeCell {
                        size,
                        variant,
                        tpr_at_fpr: None,
                        average_precision: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            table.cells.push(cell);
        }
    }
    if let Some(dir) = out_dir {
        write_file(&dir.join("table.csv"), table.csv().as_bytes())?;
        let json = serde_json::to_string_pretty(&table).expect("table serializes");
        write_file(&dir.join("cells.json"), json.as_bytes())?;
        cfg.write_snapshot(dir)?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::robustness::SweepKind;

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.sweeps.push(SweepSpec::new(SweepKind::ResizeScale, vec![0.5, 1.0]));
        c.save_policy = SavePolicy::Jpeg { lo: 80, hi: 90 };
        c.paths.out = Some("runs".into());
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = RunConfig::from_toml("seed = 3\n[train]\nbatch_size = 32\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.train.schedule, TrainConfig::default().schedule);
        assert!(RunConfig::from_toml("seed = \"x\"").is_err());
    }

    #[test]
    fn resolved_seeds_follow_global_seed() {
        let a = RunConfig { seed: 1, ..Default::default() }.resolved();
        let b = RunConfig { seed: 2, ..Default::default() }.resolved();
        assert_ne!(a.train.seed, b.train.seed);
        assert_ne!(a.textures.seed, a.train.seed);
        assert_eq!(a, a.resolved().resolved());
    }

    #[test]
    fn table_layout() {
        let t = RecipeTable {
            target_fpr: 0.05,
            sizes: vec![100, 500],
            variants: vec![Composer::Random, Composer::Sync],
            cells: vec![
                RecipeCell { size: 100, variant: Composer::Random, tpr_at_fpr: Some(50.0), average_precision: Some(0.7), error: None },
                RecipeCell { size: 100, variant: Composer::Sync, tpr_at_fpr: None, average_precision: None, error: Some("x".into()) },
                RecipeCell { size: 500, variant: Composer::Random, tpr_at_fpr: Some(75.125), average_precision: Some(0.9), error: None },
                RecipeCell { size: 500, variant: Composer::Sync, tpr_at_fpr: Some(80.0), average_precision: Some(0.9), error: None },
            ],
        };
        assert_eq!(t.csv(), "size,Random,Sync\n100,50.00,failed\n500,75.12,80.00\n");
    }
}
