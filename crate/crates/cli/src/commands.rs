use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gcrf_core::edits::{propagate, EditSet};
use gcrf_core::eval::sweep;
use gcrf_core::gradcheck::{run_gradcheck, Mutation};
use gcrf_core::image::{ColorFieldLab, GrayImage, RgbImage};
use gcrf_core::io::{decode_png, decode_ppm, encode_png, encode_ppm};
use gcrf_core::metrics::{diversity, error_of_best, MetricsReport, PsnrPoint, SampleSet};
use gcrf_core::pipeline::{read_checkpoint, sample_diverse, train, write_checkpoint, Example, LatentSource, ToyModel};
use gcrf_core::synthetic::{controllability_set, two_mode_set};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{sibling, to_pretty, ColorizeConfig, EvalRunConfig, GradcheckRunConfig, SampleRunConfig, TrainRunConfig};
use crate::error::{CliError, CliResult};

fn is_ppm(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("ppm" | "pnm")
    )
}

fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::file(path, e))
}

fn read_rgb(path: &Path) -> CliResult<RgbImage> {
    let bytes = read_bytes(path)?;
    let img = if is_ppm(path) { decode_ppm(&bytes) } else { decode_png(&bytes) };
    img.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::file(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::file(path, e))
}

fn write_rgb(path: &Path, img: &RgbImage) -> CliResult<()> {
    let bytes = if is_ppm(path) { encode_ppm(img) } else { encode_png(img)? };
    write_bytes(path, &bytes)
}

/// Refuses to write over any input.
fn ensure_distinct(outputs: &[&Path], inputs: &[&Path]) -> CliResult<()> {
    let canon = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    for out in outputs {
        let o = canon(out);
        if inputs.iter().any(|i| canon(i) == o) {
            return Err(CliError::Config(format!("output {} would overwrite an input", out.display())));
        }
    }
    Ok(())
}

/// Sorted image files of a directory, so runs see them in a fixed order.
fn image_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::file(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "ppm" | "pnm")
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Config(format!("{} contains no PNG or PPM images", dir.display())));
    }
    Ok(files)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

#[derive(Debug, Serialize)]
pub struct SolveReport {
    pub residual: f64,
    pub beta: f64,
    /// Distinct constrained grid pixels.
    pub revealed: usize,
    pub edits: usize,
    pub grid_width: usize,
    pub grid_height: usize,
    pub width: usize,
    pub height: usize,
    pub clamped_pixels: usize,
    /// Only field that differs between identical runs.
    pub wall_ms: f64,
}

pub fn colorize(mut cfg: ColorizeConfig) -> CliResult<SolveReport> {
    let (input, edits_path, output) = cfg.validate()?;
    let (input, edits_path, output) = (input.clone(), edits_path.clone(), output.clone());
    let report_path = cfg.report.clone().unwrap_or_else(|| sibling(&output, "report.json"));
    let config_path = sibling(&output, "config.json");
    ensure_distinct(&[&output, &report_path, &config_path], &[&input, &edits_path])?;

    let start = Instant::now();
    let (gray, _) = read_rgb(&input)?.to_lab();
    let text = String::from_utf8(read_bytes(&edits_path)?)
        .map_err(|_| CliError::Config(format!("{} is not UTF-8", edits_path.display())))?;
    let mut edits = EditSet::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", edits_path.display())))?;
    match cfg.beta {
        Some(b) => edits.beta = b,
        None => cfg.beta = Some(edits.beta),
    }
    let result = propagate(&gray, &edits, &cfg.propagate())?;
    let (rgb, clamped_pixels) = RgbImage::from_lab(&gray, &result.field)?;
    let report = SolveReport {
        residual: result.grid_solution.max_residual(),
        beta: edits.beta,
        revealed: result.active_constraints,
        edits: edits.edits.len(),
        grid_width: cfg.grid_width,
        grid_height: cfg.grid_height,
        width: rgb.width,
        height: rgb.height,
        clamped_pixels,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    write_rgb(&output, &rgb)?;
    write_bytes(&report_path, to_pretty(&report).as_bytes())?;
    write_bytes(&config_path, to_pretty(&cfg).as_bytes())?;
    Ok(report)
}

/// Returns the table; a breach is reported after the table is written.
pub fn gradcheck(cfg: &GradcheckRunConfig, mutation: Mutation) -> CliResult<String> {
    let core = cfg.core();
    core.validate()?;
    let report = run_gradcheck(&core, mutation)?;
    let text = report.to_text();
    if let Some(path) = &cfg.report {
        write_bytes(path, text.as_bytes())?;
        write_bytes(&sibling(path, "config.json"), to_pretty(cfg).as_bytes())?;
    }
    print!("{text}");
    if report.passed() {
        Ok(text)
    } else {
        let paths: Vec<&str> = report
            .paths
            .iter()
            .filter(|p| p.max_rel_error > report.tolerance)
            .map(|p| p.path.name())
            .collect();
        Err(CliError::GradcheckBreach {
            tolerance: report.tolerance,
            paths: paths.join(", "),
        })
    }
}

fn training_examples(cfg: &TrainRunConfig, init: &ToyModel) -> CliResult<Vec<Example>> {
    match &cfg.data_dir {
        Some(dir) => image_files(dir)?
            .iter()
            .map(|p| {
                let (gray, color) = read_rgb(p)?.to_lab();
                Ok(init.example(&gray, &color)?)
            })
            .collect(),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed);
            two_mode_set(cfg.images, cfg.grid_width, cfg.grid_height, &mut rng)?
                .iter()
                .map(|(img, _)| Ok(init.example(&img.gray, &img.color)?))
                .collect()
        }
    }
}

pub fn train_cmd(cfg: TrainRunConfig) -> CliResult<gcrf_core::pipeline::TrainReport> {
    let cfg = cfg.normalized();
    cfg.validate()?;
    let report_path = sibling(&cfg.out, "report.json");
    let config_path = sibling(&cfg.out, "config.json");
    if let Some(dir) = &cfg.data_dir {
        let inputs = image_files(dir)?;
        let inputs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
        ensure_distinct(&[&cfg.out, &report_path, &config_path], &inputs)?;
    }
    let init = ToyModel::init(cfg.model(), cfg.seed)?;
    let data = training_examples(&cfg, &init)?;
    let (model, report) = train(&init, &data, &cfg.train()?)?;
    write_bytes(&cfg.out, &write_checkpoint(&model))?;
    write_bytes(&report_path, to_pretty(&report).as_bytes())?;
    write_bytes(&config_path, to_pretty(&cfg).as_bytes())?;
    Ok(report)
}

#[derive(Debug, Serialize)]
pub struct DiversityReport {
    pub n: usize,
    pub files: Vec<String>,
    pub latents: Vec<LatentSource>,
    pub max_residual: f64,
    /// Absent for a single sample.
    pub variance: Option<f64>,
    pub mean_pairwise_ssim: Option<f64>,
    /// Against the input's own chroma; absent for a gray input.
    pub error_of_best: Option<f64>,
}

pub fn sample_cmd(cfg: &SampleRunConfig) -> CliResult<DiversityReport> {
    let (model_path, input) = cfg.validate()?;
    let model = read_checkpoint(&read_bytes(model_path)?)?;
    let (gray, color) = read_rgb(input)?.to_lab();
    let drawn = sample_diverse(&model, &gray, cfg.n, &cfg.options())?;
    let files: Vec<String> = (0..cfg.n).map(|k| format!("sample_{k:02}.png")).collect();
    let report_path = cfg.out_dir.join("diversity.json");
    let config_path = cfg.out_dir.join("config.json");
    let outputs: Vec<PathBuf> = files.iter().map(|f| cfg.out_dir.join(f)).collect();
    let mut all_out: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    all_out.extend([report_path.as_path(), config_path.as_path()]);
    ensure_distinct(&all_out, &[model_path, input])?;

    let has_color = color.a.iter().chain(&color.b).any(|v| v.abs() > 0.5);
    let set = SampleSet::new(drawn.samples.clone(), color)?;
    let (variance, mean_pairwise_ssim) = if cfg.n >= 2 {
        let d = diversity(&set)?;
        (Some(d.variance), Some(d.mean_pairwise_ssim))
    } else {
        (None, None)
    };
    for (path, field) in outputs.iter().zip(&drawn.samples) {
        write_rgb(path, &RgbImage::from_lab(&gray, field)?.0)?;
    }
    let report = DiversityReport {
        n: cfg.n,
        files,
        latents: drawn.latents.iter().map(|l| l.source).collect(),
        max_residual: drawn.max_residual,
        variance,
        mean_pairwise_ssim,
        error_of_best: has_color.then(|| error_of_best(&set)),
    };
    write_bytes(&report_path, to_pretty(&report).as_bytes())?;
    write_bytes(&config_path, to_pretty(cfg).as_bytes())?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub images: usize,
    pub mean: Vec<PsnrPoint>,
    /// Consecutive gains of the mean RGB PSNR.
    pub gaps_db: Vec<f64>,
    pub nondecreasing: bool,
}

struct EvalImage {
    name: String,
    gray: GrayImage,
    color: ColorFieldLab,
}

fn eval_images(cfg: &EvalRunConfig) -> CliResult<Vec<EvalImage>> {
    match &cfg.input_dir {
        Some(dir) => image_files(dir)?
            .iter()
            .map(|p| {
                let (gray, color) = read_rgb(p)?.to_lab();
                Ok(EvalImage {
                    name: file_name(p),
                    gray,
                    color,
                })
            })
            .collect(),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed);
            Ok(controllability_set(cfg.images, cfg.width, cfg.height, &mut rng)?
                .into_iter()
                .enumerate()
                .map(|(i, img)| EvalImage {
                    name: format!("synthetic_{i:03}"),
                    gray: img.gray,
                    color: img.color,
                })
                .collect())
        }
    }
}

/// Image `i` reveals patches with seed `i`, so the synthetic default
/// reproduces the controllability experiment exactly.
pub fn eval_cmd(cfg: &EvalRunConfig) -> CliResult<EvalSummary> {
    cfg.validate()?;
    let summary_path = sibling(&cfg.out, "summary.json");
    let config_path = sibling(&cfg.out, "config.json");
    let mut inputs: Vec<PathBuf> = match &cfg.input_dir {
        Some(dir) => image_files(dir)?,
        None => Vec::new(),
    };
    inputs.extend(cfg.model.clone());
    let inputs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    ensure_distinct(&[&cfg.out, &summary_path, &config_path], &inputs)?;

    let model = match &cfg.model {
        Some(p) => Some(read_checkpoint(&read_bytes(p)?)?),
        None => None,
    };
    let images = eval_images(cfg)?;
    let (propagate_cfg, protocol) = (cfg.propagate(), cfg.protocol());
    let reports: Vec<MetricsReport> = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| -> CliResult<MetricsReport> {
            let psnr = sweep(&img.gray, &img.color, &propagate_cfg, &protocol, i as u64)?;
            let mut report = MetricsReport {
                image: img.name.clone(),
                psnr,
                eob: None,
                var: None,
                mean_pairwise_ssim: None,
            };
            if let Some(model) = &model {
                let opts = gcrf_core::pipeline::SampleOptions {
                    seed: cfg.sample_seed,
                    beta: cfg.beta,
                    ..Default::default()
                };
                let drawn = sample_diverse(model, &img.gray, cfg.samples, &opts)?;
                let set = SampleSet::new(drawn.samples, img.color.clone())?;
                report.eob = Some(error_of_best(&set));
                if cfg.samples >= 2 {
                    let d = diversity(&set)?;
                    report.var = Some(d.variance);
                    report.mean_pairwise_ssim = Some(d.mean_pairwise_ssim);
                }
            }
            Ok(report)
        })
        .collect::<CliResult<_>>()?;

    let n = reports.len() as f64;
    let mean: Vec<PsnrPoint> = cfg
        .counts
        .iter()
        .enumerate()
        .map(|(k, &revealed)| PsnrPoint {
            revealed,
            psnr_rgb: reports.iter().map(|r| r.psnr[k].psnr_rgb).sum::<f64>() / n,
            psnr_lab: reports.iter().map(|r| r.psnr[k].psnr_lab).sum::<f64>() / n,
        })
        .collect();
    let gaps_db: Vec<f64> = mean.windows(2).map(|w| w[1].psnr_rgb - w[0].psnr_rgb).collect();
    let summary = EvalSummary {
        images: reports.len(),
        nondecreasing: gaps_db.iter().all(|&g| g >= 0.0),
        mean,
        gaps_db,
    };
    let mut lines = String::new();
    for r in &reports {
        lines.push_str(&serde_json::to_string(r).expect("reports serialize"));
        lines.push('\n');
    }
    write_bytes(&cfg.out, lines.as_bytes())?;
    write_bytes(&summary_path, to_pretty(&summary).as_bytes())?;
    write_bytes(&config_path, to_pretty(cfg).as_bytes())?;
    Ok(summary)
}
