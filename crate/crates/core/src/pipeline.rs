//! End-to-end run: projection, pseudo-labels, one refinement round and
//! evaluation, driven by a single JSON config.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metaimage::{load_mask, load_probability, load_volume, save_volume};
use crate::metrics::{evaluate, label_quality, LabelQuality, MetricReport};
use crate::phantom::{generate, oracle_probabilities, OracleConfig, PhantomSpec};
use crate::projection::{
    back_project, export_mask_png, export_png, import_mask_png, mip_project, project_mask, Axis, Mask2D, Mip2D,
};
use crate::pseudolabel::{
    assemble_pseudolabel, build_background, foreground_mean, region_grow, BackgroundConfig, GrowConfig,
};
use crate::refine::{refine_round, RefineConfig, RefineInputs, RefinementReport};
use crate::volume::{
    normalize_intensity, BinaryVolume, Label, LabelVolume, ProbabilityVolume, ScalarVolume,
};

/// Where the input volume comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Source {
    /// Synthesize a phantom; the annotation is the projected ground truth
    /// and probabilities come from the oracle, whose passes use the
    /// `refine` noise settings (`k`, `mu`, `sigma`).
    Phantom {
        spec: PhantomSpec,
        #[serde(default = "default_quality")]
        quality: f64,
        #[serde(default)]
        oracle_seed: u64,
    },
    Files(FileInputs),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileInputs {
    pub volume: PathBuf,
    /// 2D annotation PNG of the volume's MIP along `axis`.
    pub mask: PathBuf,
    /// Clean network probability volume.
    pub prob: PathBuf,
    /// Stochastic forward passes; their count must equal `refine.k`.
    pub passes: Vec<PathBuf>,
    /// Optional reference segmentation for `metrics.json`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub source: Source,
    #[serde(default)]
    pub axis: Axis,
    /// Min-max normalize the volume before anything else.
    #[serde(default = "yes")]
    pub normalize: bool,
    #[serde(default)]
    pub grow: GrowConfig,
    #[serde(default)]
    pub background: BackgroundConfig,
    #[serde(default)]
    pub refine: RefineConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

fn yes() -> bool {
    true
}

fn default_quality() -> f64 {
    0.9
}

impl PipelineConfig {
    pub fn from_phantom(spec: PhantomSpec) -> Self {
        PipelineConfig {
            source: Source::Phantom {
                spec,
                quality: default_quality(),
                oracle_seed: 0,
            },
            axis: Axis::default(),
            normalize: true,
            grow: GrowConfig::default(),
            background: BackgroundConfig::default(),
            refine: RefineConfig::default(),
            out_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Checks parameters and that every referenced input file exists.
    pub fn validate(&self) -> Result<()> {
        self.grow.validate()?;
        self.background.validate()?;
        self.refine.validate()?;
        match &self.source {
            Source::Phantom { spec, quality, .. } => {
                spec.validate()?;
                if !(*quality > 0.5 && *quality <= 1.0) {
                    return Err(Error::InvalidConfig(format!("quality must lie in (0.5, 1], got {quality}")));
                }
            }
            Source::Files(f) => {
                if f.passes.len() != self.refine.k {
                    return Err(Error::InvalidConfig(format!(
                        "{} pass files listed but refine.k = {}",
                        f.passes.len(),
                        self.refine.k
                    )));
                }
                let all = [&f.volume, &f.mask, &f.prob].into_iter().chain(&f.passes).chain(&f.gt);
                for p in all {
                    if !p.is_file() {
                        return Err(Error::MissingPayload(p.clone()));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Pseudo-label side outputs, written as `conflicts.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSummary {
    pub v_ave: f64,
    pub seeds: usize,
    pub foreground: usize,
    pub background: usize,
    pub conflicts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub segmentation: Option<MetricReport>,
    pub labels: LabelQuality,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineMetrics {
    pub pseudolabel: StageMetrics,
    pub refined: StageMetrics,
}

/// Everything a run produces, in memory.
#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub volume: ScalarVolume,
    pub mip: Mip2D,
    pub mask: Mask2D,
    pub labels: LabelVolume,
    pub summary: PseudoLabelSummary,
    pub refined: LabelVolume,
    pub report: RefinementReport,
    pub metrics: Option<PipelineMetrics>,
}

fn stage_metrics(labels: &LabelVolume, gt: &BinaryVolume) -> Result<StageMetrics> {
    let fg = labels.mask_of(Label::Foreground);
    let segmentation = if fg.count() > 0 && gt.count() > 0 {
        Some(evaluate(&fg, gt)?)
    } else {
        None
    };
    Ok(StageMetrics {
        segmentation,
        labels: label_quality(labels, gt)?,
    })
}

pub fn run(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let (raw, gt) = match &cfg.source {
        Source::Phantom { spec, .. } => {
            let (v, gt) = generate(spec)?;
            (v, Some(gt))
        }
        Source::Files(f) => {
            let v = load_volume(&f.volume)?;
            let gt = f.gt.as_ref().map(load_mask).transpose()?;
            (v, gt)
        }
    };
    let volume = if cfg.normalize { normalize_intensity(&raw)? } else { raw };
    if let Some(gt) = &gt {
        volume.ensure_same_dims(gt)?;
    }

    let mip = mip_project(&volume, cfg.axis);
    let mask = match (&cfg.source, &gt) {
        (Source::Phantom { .. }, Some(gt)) => project_mask(gt, cfg.axis),
        (Source::Files(f), _) => import_mask_png(&f.mask, (mip.width, mip.height))?,
        (Source::Phantom { .. }, None) => unreachable!("phantoms always carry ground truth"),
    };

    let seeds = back_project(&mask, &mip)?;
    let v_ave = foreground_mean(&volume, &seeds)?;
    let s1 = region_grow(&volume, &seeds, &cfg.grow)?;
    let s0 = build_background(&volume, &mask, &mip, v_ave, &cfg.background)?;
    let pl = assemble_pseudolabel(&s1, &s0)?;
    let counts = pl.labels.class_counts();
    let summary = PseudoLabelSummary {
        v_ave,
        seeds: seeds.len(),
        foreground: counts[1],
        background: counts[0],
        conflicts: pl.conflicts.clone(),
    };

    let (clean, passes): (ProbabilityVolume, Vec<ProbabilityVolume>) = match (&cfg.source, &gt) {
        (Source::Phantom { quality, oracle_seed, .. }, Some(gt)) => {
            let oracle = OracleConfig {
                quality: *quality,
                passes: cfg.refine.k,
                pass_mean: cfg.refine.mu,
                pass_std: cfg.refine.sigma,
                seed: *oracle_seed,
            };
            oracle_probabilities(gt, &oracle)?
        }
        (Source::Files(f), _) => (
            load_probability(&f.prob)?,
            f.passes.iter().map(load_probability).collect::<Result<_>>()?,
        ),
        (Source::Phantom { .. }, None) => unreachable!("phantoms always carry ground truth"),
    };
    let inputs = RefineInputs {
        labels: &pl.labels,
        conflicts: &pl.conflicts,
        volume: &volume,
        clean: &clean,
        passes: &passes,
        v_ave,
    };
    let (refined, report) = refine_round(&inputs, &cfg.refine)?;

    let metrics = gt
        .as_ref()
        .map(|gt| -> Result<PipelineMetrics> {
            Ok(PipelineMetrics {
                pseudolabel: stage_metrics(&pl.labels, gt)?,
                refined: stage_metrics(&refined, gt)?,
            })
        })
        .transpose()?;

    Ok(PipelineOutcome {
        volume,
        mip,
        mask,
        labels: pl.labels,
        summary,
        refined,
        report,
        metrics,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl PipelineOutcome {
    /// Writes `labels.mhd`, `refined.mhd`, `report.json`, `metrics.json`
    /// (when ground truth is known), `conflicts.json`, `mip.png` and
    /// `mask.png` into `dir`. Returns the written paths.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        let mut out = |name: &str| {
            let p = dir.join(name);
            written.push(p.clone());
            p
        };
        save_volume(&self.labels, out("labels.mhd"))?;
        save_volume(&self.refined, out("refined.mhd"))?;
        write_json(&out("report.json"), &self.report)?;
        write_json(&out("conflicts.json"), &self.summary)?;
        if let Some(m) = &self.metrics {
            write_json(&out("metrics.json"), m)?;
        }
        export_png(&self.mip, out("mip.png"))?;
        export_mask_png(&self.mask, out("mask.png"))?;
        Ok(written)
    }
}
