use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mipseg::fusion::{downscale_index, feature_retrieve, loss_2d, loss_3d, loss_all, retrieve_probability};
use mipseg::metaimage::{
    load_features, load_index_map, load_labels, load_mask, load_probability, load_volume, read_metaimage,
    save_feature_map, save_index_map, save_volume,
};
use mipseg::metrics::evaluate;
use mipseg::phantom::{generate, oracle_probabilities, OracleConfig, PhantomSpec};
use mipseg::pipeline::{self, PipelineConfig, PseudoLabelSummary};
use mipseg::projection::{back_project, export_png, import_mask_png, mip_project};
use mipseg::pseudolabel::{
    assemble_pseudolabel, build_background, foreground_mean, region_grow, BackgroundConfig, GrowConfig,
};
use mipseg::refine::{refine_round, RefineConfig, RefineInputs};
use mipseg::volume::{normalize_intensity, Connectivity};
use mipseg::{Axis, BinaryVolume, Dims, Error, Label, Mip2D, Result, ScalarVolume};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "mipseg", version, about = "Vessel segmentation from 2D MIP annotations")]
struct Cli {
    /// Worker threads (defaults to all cores). Results do not depend on it.
    #[arg(long, global = true, env = "MIPSEG_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Maximum intensity projection with its index map.
    Mip(MipArgs),
    /// Lift annotated MIP pixels to 3D seed voxels.
    Backproject(BackprojectArgs),
    /// Grow foreground and derive background pseudo-labels.
    Pseudolabel(PseudolabelArgs),
    /// One round of label cleanup and uncertainty-based expansion.
    Refine(RefineArgs),
    /// Retrieve 2D features along a (downscaled) index map.
    Gather(GatherArgs),
    /// Evaluate the 3D and 2D training losses for a prediction.
    Loss(LossArgs),
    /// Compare a predicted mask with a reference.
    Metrics(MetricsArgs),
    /// Render a synthetic vessel phantom.
    Phantom(PhantomArgs),
    /// Run projection, pseudo-labeling, refinement and evaluation.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct VolumeInput {
    #[arg(long)]
    volume: PathBuf,
    /// Use raw intensities instead of min-max normalizing to [0, 1].
    #[arg(long)]
    no_normalize: bool,
}

impl VolumeInput {
    fn load(&self) -> Result<ScalarVolume> {
        let v = load_volume(&self.volume)?;
        if self.no_normalize {
            Ok(v)
        } else {
            normalize_intensity(&v)
        }
    }
}

#[derive(Args)]
struct MipArgs {
    #[command(flatten)]
    input: VolumeInput,
    #[arg(long, default_value = "z")]
    axis: Axis,
    /// 16-bit PNG for annotation.
    #[arg(long)]
    png: Option<PathBuf>,
    /// Index map as a 2D MetaImage.
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct BackprojectArgs {
    #[command(flatten)]
    input: VolumeInput,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, default_value = "z")]
    axis: Axis,
    /// Seed voxels as a binary volume.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PseudolabelArgs {
    #[command(flatten)]
    input: VolumeInput,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, default_value = "z")]
    axis: Axis,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_parser = parse_connectivity)]
    connectivity: Option<Connectivity>,
    /// JSON with optional `grow` and `background` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    conflicts: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PseudolabelConfig {
    grow: GrowConfig,
    background: BackgroundConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Default,
    Tubetk,
}

#[derive(Args)]
struct RefineArgs {
    #[command(flatten)]
    input: VolumeInput,
    #[arg(long)]
    labels: PathBuf,
    /// Clean prediction.
    #[arg(long)]
    prob: PathBuf,
    /// Comma-separated stochastic passes.
    #[arg(long, value_delimiter = ',', required = true)]
    passes: Vec<PathBuf>,
    /// RefineConfig JSON; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    profile: Option<Profile>,
    /// `conflicts.json` from `pseudolabel`, supplying conflicts and v_ave.
    #[arg(long)]
    conflicts: Option<PathBuf>,
    #[arg(long)]
    v_ave: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GatherArgs {
    #[arg(long)]
    features: PathBuf,
    /// Full-resolution index map from `mip --index`.
    #[arg(long)]
    index: PathBuf,
    #[arg(long, default_value_t = 0)]
    level: u32,
    /// Full-resolution depth; defaults to the feature depth times 2^level.
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct LossArgs {
    #[command(flatten)]
    input: VolumeInput,
    /// 3D foreground probabilities.
    #[arg(long)]
    prob: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, default_value = "z")]
    axis: Axis,
    /// 2D foreground probabilities from a 2D branch, as a 2D MetaImage.
    #[arg(long)]
    prob2d: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Also write oracle predictions (`clean.mhd`, `pass1.mhd`, ...) here.
    #[arg(long)]
    oracle_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0.9)]
    quality: f64,
    #[arg(long, default_value_t = 6)]
    passes: usize,
    #[arg(long, default_value_t = 0.1)]
    pass_std: f64,
    #[arg(long, default_value_t = 0)]
    oracle_seed: u64,
}

#[derive(Args)]
struct PipelineArgs {
    /// Full pipeline config JSON.
    #[arg(long, conflicts_with = "spec", required_unless_present = "spec")]
    config: Option<PathBuf>,
    /// Phantom spec JSON; all other settings take defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, value_enum)]
    profile: Option<Profile>,
    /// Defaults to the config's `out_dir`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

fn parse_connectivity(s: &str) -> std::result::Result<Connectivity, String> {
    s.parse::<u8>()
        .map_err(|e| e.to_string())
        .and_then(|n| Connectivity::try_from(n).map_err(|e| e.to_string()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value)?;
    // A closed pipe (`mipseg ... | head`) is not a failure.
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn apply_profile(cfg: &mut RefineConfig, profile: Option<Profile>) {
    if let Some(Profile::Tubetk) = profile {
        cfg.disable_priors = true;
    }
}

#[derive(Serialize)]
struct MipSummary {
    axis: Axis,
    width: usize,
    height: usize,
    depth: usize,
    min: f32,
    max: f32,
}

fn cmd_mip(a: &MipArgs) -> Result<()> {
    let v = a.input.load()?;
    let mip = mip_project(&v, a.axis);
    if let Some(p) = &a.png {
        export_png(&mip, p)?;
    }
    if let Some(p) = &a.index {
        save_index_map(&mip, p)?;
    }
    if a.json {
        let (min, max) = mip
            .intensity
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        print_json(&MipSummary {
            axis: a.axis,
            width: mip.width,
            height: mip.height,
            depth: mip.depth(),
            min,
            max,
        })?;
    }
    Ok(())
}

fn load_mask_for(mip: &Mip2D, path: &Path) -> Result<mipseg::Mask2D> {
    import_mask_png(path, (mip.width, mip.height))
}

#[derive(Serialize)]
struct SeedSummary {
    seeds: usize,
    v_ave: Option<f64>,
}

fn cmd_backproject(a: &BackprojectArgs) -> Result<()> {
    let v = a.input.load()?;
    let mip = mip_project(&v, a.axis);
    let mask = load_mask_for(&mip, &a.mask)?;
    let seeds = back_project(&mask, &mip)?;
    if let Some(out) = &a.out {
        let dims = v.dims();
        let set = BinaryVolume::from_indices(dims, seeds.iter().map(|&s| dims.index_of(s)))?.with_spacing(v.spacing())?;
        save_volume(&set, out)?;
    }
    if a.json {
        let v_ave = if seeds.is_empty() { None } else { Some(foreground_mean(&v, &seeds)?) };
        print_json(&SeedSummary {
            seeds: seeds.len(),
            v_ave,
        })?;
    }
    Ok(())
}

fn cmd_pseudolabel(a: &PseudolabelArgs) -> Result<()> {
    let mut cfg: PseudolabelConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => PseudolabelConfig::default(),
    };
    if let Some(alpha) = a.alpha {
        cfg.grow.alpha = alpha;
    }
    if let Some(c) = a.connectivity {
        cfg.grow.connectivity = c;
    }
    let v = a.input.load()?;
    let mip = mip_project(&v, a.axis);
    let mask = load_mask_for(&mip, &a.mask)?;
    let seeds = back_project(&mask, &mip)?;
    let v_ave = foreground_mean(&v, &seeds)?;
    let s1 = region_grow(&v, &seeds, &cfg.grow)?;
    let s0 = build_background(&v, &mask, &mip, v_ave, &cfg.background)?;
    let pl = assemble_pseudolabel(&s1, &s0)?;
    save_volume(&pl.labels, &a.out)?;
    let counts = pl.labels.class_counts();
    let summary = PseudoLabelSummary {
        v_ave,
        seeds: seeds.len(),
        foreground: counts[1],
        background: counts[0],
        conflicts: pl.conflicts,
    };
    if let Some(p) = &a.conflicts {
        write_json(p, &summary)?;
    }
    if a.json {
        print_json(&serde_json::json!({
            "v_ave": summary.v_ave,
            "seeds": summary.seeds,
            "foreground": summary.foreground,
            "background": summary.background,
            "conflicts": summary.conflicts.len(),
        }))?;
    }
    Ok(())
}

fn cmd_refine(a: &RefineArgs) -> Result<()> {
    let mut cfg: RefineConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => RefineConfig::default(),
    };
    apply_profile(&mut cfg, a.profile);
    let labels = load_labels(&a.labels)?;
    let volume = a.input.load()?;
    let clean = load_probability(&a.prob)?;
    let passes = a.passes.iter().map(load_probability).collect::<Result<Vec<_>>>()?;
    let summary: Option<PseudoLabelSummary> = a.conflicts.as_deref().map(read_json).transpose()?;
    let conflicts = summary.as_ref().map(|s| s.conflicts.clone()).unwrap_or_default();
    let v_ave = match (a.v_ave, &summary) {
        (Some(v), _) => v,
        (None, Some(s)) => s.v_ave,
        (None, None) => {
            let fg = labels.mask_of(Label::Foreground).indices();
            if fg.is_empty() {
                return Err(Error::EmptyClass("foreground"));
            }
            fg.iter().map(|&i| volume.data()[i] as f64).sum::<f64>() / fg.len() as f64
        }
    };
    let inputs = RefineInputs {
        labels: &labels,
        conflicts: &conflicts,
        volume: &volume,
        clean: &clean,
        passes: &passes,
        v_ave,
    };
    let (refined, report) = refine_round(&inputs, &cfg)?;
    save_volume(&refined, &a.out)?;
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    if a.json {
        print_json(&report)?;
    }
    Ok(())
}

fn cmd_gather(a: &GatherArgs) -> Result<()> {
    let f3d = load_features(&a.features)?;
    let (width, height, index) = load_index_map(&a.index)?;
    let depth = a.depth.unwrap_or(f3d.dims.nz << a.level.min(3));
    let mip = Mip2D {
        axis: Axis::Z,
        source_dims: Dims::new(width, height, depth),
        width,
        height,
        intensity: vec![0.0; width * height],
        index,
    };
    if let Some(&bad) = mip.index.iter().find(|&&k| k as usize >= depth) {
        return Err(Error::IndexOutOfRange {
            value: bad as usize,
            limit: depth,
        });
    }
    let level = downscale_index(&mip, a.level)?;
    let out = feature_retrieve(&f3d, &level)?;
    save_feature_map(&out, &a.out)?;
    if a.json {
        print_json(&serde_json::json!({
            "channels": out.channels,
            "width": out.width,
            "height": out.height,
            "level": a.level,
        }))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct LossReport {
    loss_3d: f64,
    /// Foreground, seed and background terms.
    terms_3d: [f64; 3],
    empty_sets: [bool; 3],
    loss_2d: f64,
    dice_from_3d: f64,
    dice_2d: Option<f64>,
    lambda: f64,
    total: f64,
}

fn cmd_loss(a: &LossArgs) -> Result<()> {
    let v = a.input.load()?;
    let p = load_probability(&a.prob)?;
    let labels = load_labels(&a.labels)?;
    labels.ensure_same_dims(&v)?;
    if p.dims() != v.dims() {
        return Err(Error::DimsMismatch {
            expected: v.dims().to_string(),
            found: p.dims().to_string(),
        });
    }
    let mip = mip_project(&v, a.axis);
    let mask = load_mask_for(&mip, &a.mask)?;
    let dims = v.dims();
    let seeds: Vec<usize> = back_project(&mask, &mip)?.iter().map(|&s| dims.index_of(s)).collect();
    let fg = labels.mask_of(Label::Foreground).indices();
    let bg = labels.mask_of(Label::Background).indices();
    let pf = p.to_f64();
    let l3 = loss_3d(&pf, &fg, &seeds, &bg)?;
    for (name, empty) in ["foreground", "seed", "background"].iter().zip(l3.empty) {
        if empty {
            eprintln!("warning: {name} set is empty and contributes 0");
        }
    }
    let p2d = match &a.prob2d {
        Some(path) => {
            let img = read_metaimage(path)?;
            let (d2, _) = img.dims3()?;
            if (d2.nx, d2.ny, d2.nz) != (mip.width, mip.height, 1) {
                return Err(Error::DimsMismatch {
                    expected: format!("{}x{}", mip.width, mip.height),
                    found: d2.to_string(),
                });
            }
            Some(img.data.to_f32().into_iter().map(f64::from).collect::<Vec<_>>())
        }
        None => None,
    };
    let from_3d = retrieve_probability(&p, &mip)?;
    let l2 = loss_2d(&from_3d, p2d.as_deref(), &mask)?;
    let total = loss_all(l3.value, l2.value, a.lambda)?;
    let report = LossReport {
        loss_3d: l3.value,
        terms_3d: l3.terms,
        empty_sets: l3.empty,
        loss_2d: l2.value,
        dice_from_3d: l2.from_3d.value,
        dice_2d: l2.from_2d.map(|t| t.value),
        lambda: a.lambda,
        total,
    };
    if a.json {
        print_json(&report)?;
    } else {
        println!("loss_3d {:.6}  loss_2d {:.6}  total {:.6}", report.loss_3d, report.loss_2d, report.total);
    }
    Ok(())
}

fn cmd_metrics(a: &MetricsArgs) -> Result<()> {
    let pred = load_mask(&a.pred)?;
    let gt = load_mask(&a.gt)?;
    let m = evaluate(&pred, &gt)?;
    if a.json {
        print_json(&m)?;
    } else {
        println!("dsc {:.6}  cldice {:.6}  ahd {:.6}", m.dsc, m.cldice, m.ahd);
    }
    Ok(())
}

fn cmd_phantom(a: &PhantomArgs) -> Result<()> {
    let spec: PhantomSpec = read_json(&a.spec)?;
    let (v, gt) = generate(&spec)?;
    save_volume(&v, &a.out)?;
    save_volume(&gt, &a.gt)?;
    if let Some(dir) = &a.oracle_dir {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        let cfg = OracleConfig {
            quality: a.quality,
            passes: a.passes,
            pass_mean: 0.0,
            pass_std: a.pass_std,
            seed: a.oracle_seed,
        };
        let (clean, passes) = oracle_probabilities(&gt, &cfg)?;
        save_volume(&clean, dir.join("clean.mhd"))?;
        for (k, p) in passes.iter().enumerate() {
            save_volume(p, dir.join(format!("pass{}.mhd", k + 1)))?;
        }
    }
    Ok(())
}

fn cmd_pipeline(a: &PipelineArgs) -> Result<()> {
    let mut cfg = match (&a.config, &a.spec) {
        (Some(p), _) => PipelineConfig::load(p)?,
        (None, Some(p)) => PipelineConfig::from_phantom(read_json(p)?),
        (None, None) => unreachable!("clap requires one of --config and --spec"),
    };
    apply_profile(&mut cfg.refine, a.profile);
    let out_dir = a
        .out_dir
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| Error::InvalidConfig("no output directory: pass --out-dir or set out_dir".into()))?;
    let outcome = pipeline::run(&cfg)?;
    outcome.write(&out_dir)?;
    if a.json {
        print_json(&serde_json::json!({
            "report": outcome.report,
            "metrics": outcome.metrics,
        }))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Mip(a) => cmd_mip(a),
        Command::Backproject(a) => cmd_backproject(a),
        Command::Pseudolabel(a) => cmd_pseudolabel(a),
        Command::Refine(a) => cmd_refine(a),
        Command::Gather(a) => cmd_gather(a),
        Command::Loss(a) => cmd_loss(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Phantom(a) => cmd_phantom(a),
        Command::Pipeline(a) => cmd_pipeline(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(2));
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return ExitCode::from(1);
        }
    };
    match pool.install(|| run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
