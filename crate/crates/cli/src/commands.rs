//! Subcommand implementations. Each returns what it wrote so callers (and
//! tests) can inspect results without re-reading files.

use std::fs;
use std::path::{Path, PathBuf};

use ledits::rng;
use ledits::toy_model::{train, Dataset, ShapesDataset, IMAGE_SIDE};
use ledits::{
    component_posterior, edit_inverted, invert, mse, noise_map_stats, EditParams, GaussianMixture,
    GmmPredictor, GrayImage, InversionResult, MlpDenoiser, NoisePredictor, NoiseSchedule,
    StepStats, TrainLog,
};
use rand::Rng as _;
use rayon::prelude::*;

use crate::config::{DataSection, ModelSection, RunConfig};
use crate::error::{CliError, Result};

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub inversion: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, config: &mut RunConfig) {
        if let Some(p) = &self.input {
            config.input = Some(p.clone());
        }
        if let Some(p) = &self.out {
            config.output_dir = p.clone();
        }
        if let Some(s) = self.seed {
            config.seed = s;
        }
        if let Some(p) = &self.inversion {
            config.inversion = Some(p.clone());
        }
    }
}

// Reference fit used to score image outputs by style.
const IMAGE_REFERENCE_SAMPLES: usize = 400;
const IMAGE_REFERENCE_SEED: u64 = 7;

/// Posterior surrogate for "how much of each class" an output carries.
pub enum Reference {
    Points(GaussianMixture, NoiseSchedule),
    Images(GaussianMixture),
}

impl Reference {
    pub fn new(config: &RunConfig, schedule: &NoiseSchedule) -> Self {
        match &config.data {
            DataSection::Mixture(g) => Reference::Points(g.clone(), schedule.clone()),
            DataSection::Images => Reference::Images(ShapesDataset::reference_mixture(
                IMAGE_REFERENCE_SAMPLES,
                IMAGE_REFERENCE_SEED,
            )),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Reference::Points(g, _) | Reference::Images(g) => g.len(),
        }
    }

    pub fn posterior(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(match self {
            Reference::Points(g, s) => component_posterior(x, 0, g, s)?,
            Reference::Images(g) => g.responsibilities(&[ShapesDataset::fill_ratio(x)], 1.0)?,
        })
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn is_images(config: &RunConfig) -> bool {
    matches!(config.data, DataSection::Images)
}

pub fn load_predictor(
    config: &RunConfig,
    schedule: &NoiseSchedule,
) -> Result<Box<dyn NoisePredictor>> {
    match (&config.model, &config.data) {
        (ModelSection::Analytic, DataSection::Mixture(g)) => {
            Ok(Box::new(GmmPredictor::new(g.clone(), schedule.clone())))
        }
        (ModelSection::Analytic, DataSection::Images) => Err(CliError::config(
            "the image domain has no analytic predictor; set model.checkpoint",
        )),
        (ModelSection::Checkpoint(path), _) => {
            let model = MlpDenoiser::load(path)?;
            model.check_compatible(schedule)?;
            let want = match &config.data {
                DataSection::Mixture(g) => g.dim(),
                DataSection::Images => IMAGE_SIDE * IMAGE_SIDE,
            };
            if model.arch().data_dim != want {
                return Err(CliError::config(format!(
                    "checkpoint has data dimension {}, the configured domain needs {want}",
                    model.arch().data_dim
                )));
            }
            Ok(Box::new(model))
        }
    }
}

pub fn read_points(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let parsed: std::result::Result<Vec<f64>, _> =
            record.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(row) => rows.push(row),
            // A non-numeric first line is a header.
            Err(_) if i == 0 => {}
            Err(e) => {
                return Err(CliError::config(format!(
                    "{}: row {}: {e}",
                    path.display(),
                    i + 1
                )));
            }
        }
    }
    Ok(rows)
}

pub fn write_points(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let dim = rows.first().map_or(0, Vec::len);
    w.write_record((0..dim).map(|j| format!("x{j}")))?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// The source vector for invert/edit/sweep, in the model's signed domain.
pub fn load_source(config: &RunConfig) -> Result<Vec<f64>> {
    let path = config
        .input
        .as_deref()
        .ok_or_else(|| CliError::config("no input given (set \"input\" or pass --input)"))?;
    if is_images(config) {
        let img = GrayImage::load(path)?;
        if img.width != IMAGE_SIDE || img.height != IMAGE_SIDE {
            return Err(CliError::config(format!(
                "{}: expected a {IMAGE_SIDE}x{IMAGE_SIDE} image, got {}x{}",
                path.display(),
                img.width,
                img.height
            )));
        }
        Ok(img.to_signed())
    } else {
        let mut rows = read_points(path)?;
        if rows.len() != 1 {
            return Err(CliError::config(format!(
                "{}: expected exactly one source point, found {}",
                path.display(),
                rows.len()
            )));
        }
        Ok(rows.remove(0))
    }
}

/// Writes an edited sample as `<stem>.pgm` or `<stem>.csv`.
pub fn write_sample(config: &RunConfig, dir: &Path, stem: &str, x: &[f64]) -> Result<PathBuf> {
    if is_images(config) {
        let path = dir.join(format!("{stem}.pgm"));
        GrayImage::from_signed(IMAGE_SIDE, IMAGE_SIDE, x)?.save(&path)?;
        Ok(path)
    } else {
        let path = dir.join(format!("{stem}.csv"));
        write_points(&path, &[x.to_vec()])?;
        Ok(path)
    }
}

pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub log: TrainLog,
}

pub fn cmd_train(config: &RunConfig) -> Result<TrainOutput> {
    let schedule = config.schedule.params().build()?;
    let train_config = config.train_config();
    let dataset: &dyn Dataset = match &config.data {
        DataSection::Mixture(g) => g,
        DataSection::Images => &ShapesDataset,
    };
    let (model, log) = train(dataset, &schedule, &train_config)?;

    let dir = &config.output_dir;
    create_dir(dir)?;
    let checkpoint = dir.join("model.bin");
    model.save(&checkpoint)?;
    let log_path = dir.join("train_log.csv");
    let mut w = csv::Writer::from_path(&log_path)?;
    w.write_record(["epoch", "loss"])?;
    for (epoch, loss) in &log.epochs {
        w.write_record([epoch.to_string(), loss.to_string()])?;
    }
    w.flush().map_err(|e| CliError::io(&log_path, e))?;
    Ok(TrainOutput {
        checkpoint,
        log_path,
        log,
    })
}

pub fn cmd_invert(config: &RunConfig) -> Result<PathBuf> {
    let params = config.edit_params();
    let schedule = params.validate()?;
    let predictor = load_predictor(config, &schedule)?;
    let x0 = load_source(config)?;
    let inv = invert(
        &x0,
        predictor.as_ref(),
        &params.inversion_condition,
        &schedule,
        params.seed,
    )?;
    create_dir(&config.output_dir)?;
    let path = config.output_dir.join("inversion.bin");
    inv.save(&path)?;
    Ok(path)
}

pub struct EditSummary {
    pub output: PathBuf,
    pub edited: Vec<f64>,
    pub mse_to_source: f64,
    pub posterior: Vec<f64>,
}

fn posterior_header(n: usize) -> impl Iterator<Item = String> {
    (0..n).map(|k| format!("posterior_{k}"))
}

/// Loads the stored inversion if one is configured, otherwise inverts the
/// input inline.
fn inversion_for(
    config: &RunConfig,
    params: &EditParams,
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
) -> Result<InversionResult> {
    if let Some(path) = &config.inversion {
        let inv = InversionResult::load(path)?;
        inv.check_schedule(schedule)?;
        if let Some(input) = &config.input {
            let x0 = load_source(config)?;
            if x0 != inv.x0 {
                log::warn!(
                    "{} does not match the source stored in {}; editing the stored source",
                    input.display(),
                    path.display()
                );
            }
        }
        return Ok(inv);
    }
    let x0 = load_source(config)?;
    Ok(invert(
        &x0,
        predictor,
        &params.inversion_condition,
        schedule,
        params.seed,
    )?)
}

pub fn cmd_edit(config: &RunConfig) -> Result<EditSummary> {
    let params = config.edit_params();
    let schedule = params.validate()?;
    let predictor = load_predictor(config, &schedule)?;
    let inv = inversion_for(config, &params, predictor.as_ref(), &schedule)?;
    let edited = edit_inverted(&inv, predictor.as_ref(), &params)?.x0;

    let reference = Reference::new(config, &schedule);
    let posterior = reference.posterior(&edited)?;
    let mse_to_source = mse(&edited, &inv.x0);

    let dir = &config.output_dir;
    create_dir(dir)?;
    let output = write_sample(config, dir, "edited", &edited)?;
    let metrics = dir.join("metrics.csv");
    let mut w = csv::Writer::from_path(&metrics)?;
    w.write_record(
        std::iter::once("mse_to_source".to_string()).chain(posterior_header(posterior.len())),
    )?;
    w.write_record(
        std::iter::once(mse_to_source.to_string()).chain(posterior.iter().map(|p| p.to_string())),
    )?;
    w.flush().map_err(|e| CliError::io(&metrics, e))?;
    Ok(EditSummary {
        output,
        edited,
        mse_to_source,
        posterior,
    })
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub index: usize,
    pub skip: usize,
    pub target_scale: f64,
    pub concept_scale: Option<f64>,
    pub output: PathBuf,
    pub mse_to_source: f64,
    pub posterior: Vec<f64>,
}

fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::config("--threads must be >= 1"));
        }
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| CliError::config(format!("thread pool: {e}")))
}

/// Grids skip x target scale (x concept scale). The source is inverted once
/// and every cell edits that same inversion, so cells differ only in their
/// guidance settings.
pub fn cmd_sweep(config: &RunConfig, threads: Option<usize>) -> Result<Vec<SweepCell>> {
    let sweep = config
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::config("sweep command needs a \"sweep\" section"))?;
    if sweep.skips.is_empty() || sweep.target_scales.is_empty() {
        return Err(CliError::config(
            "sweep axes skips and target_scales must be nonempty",
        ));
    }
    let concept_axis: Vec<Option<f64>> = match &sweep.concept_scales {
        Some(v) if v.is_empty() => {
            return Err(CliError::config(
                "concept_scales must be nonempty when given",
            ))
        }
        Some(v) => v.iter().copied().map(Some).collect(),
        None => vec![None],
    };
    let base = config.edit_params();
    let mut cells = Vec::new();
    for &skip in &sweep.skips {
        for &target_scale in &sweep.target_scales {
            for &concept_scale in &concept_axis {
                let mut p = base.clone();
                p.skip = skip;
                p.guidance.target_scale = target_scale;
                if let Some(s) = concept_scale {
                    for c in &mut p.guidance.concepts {
                        c.scale = s;
                    }
                }
                p.validate()?;
                cells.push((skip, target_scale, concept_scale, p));
            }
        }
    }

    let schedule = base.validate()?;
    let predictor = load_predictor(config, &schedule)?;
    let inv = inversion_for(config, &base, predictor.as_ref(), &schedule)?;
    let reference = Reference::new(config, &schedule);
    let cell_dir = config.output_dir.join("sweep");
    create_dir(&cell_dir)?;

    let pool = thread_pool(threads)?;
    let results: Vec<SweepCell> = pool.install(|| {
        cells
            .par_iter()
            .enumerate()
            .map(|(index, (skip, target_scale, concept_scale, p))| {
                let edited = edit_inverted(&inv, predictor.as_ref(), p)?.x0;
                let output = write_sample(config, &cell_dir, &format!("cell_{index:03}"), &edited)?;
                Ok(SweepCell {
                    index,
                    skip: *skip,
                    target_scale: *target_scale,
                    concept_scale: *concept_scale,
                    output,
                    mse_to_source: mse(&edited, &inv.x0),
                    posterior: reference.posterior(&edited)?,
                })
            })
            .collect::<Result<_>>()
    })?;

    let path = config.output_dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let head = [
        "cell",
        "skip",
        "target_scale",
        "concept_scale",
        "mse_to_source",
    ];
    w.write_record(
        head.iter()
            .map(|s| s.to_string())
            .chain(posterior_header(reference.num_classes())),
    )?;
    for c in &results {
        let fixed = [
            c.index.to_string(),
            c.skip.to_string(),
            c.target_scale.to_string(),
            c.concept_scale.map_or(String::new(), |s| s.to_string()),
            c.mse_to_source.to_string(),
        ];
        w.write_record(
            fixed
                .into_iter()
                .chain(c.posterior.iter().map(|p| p.to_string())),
        )?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    Ok(results)
}

pub struct StatsOutput {
    pub path: PathBuf,
    pub steps: Vec<StepStats>,
}

/// Inverts `stats.runs` fresh samples from the data domain and summarises
/// their noise maps per timestep.
pub fn cmd_stats(config: &RunConfig, threads: Option<usize>) -> Result<StatsOutput> {
    let runs = config.stats.runs;
    if runs == 0 {
        return Err(CliError::config("stats.runs must be >= 1"));
    }
    if runs == 1 {
        log::warn!(
            "only one inversion: variances and significance are undefined and reported as NaN"
        );
    }
    let params = config.edit_params();
    let schedule = params.validate()?;
    let predictor = load_predictor(config, &schedule)?;
    let dataset: &(dyn Dataset + Sync) = match &config.data {
        DataSection::Mixture(g) => g,
        DataSection::Images => &ShapesDataset,
    };
    let pool = thread_pool(threads)?;
    let inversions: Vec<InversionResult> = pool.install(|| {
        (0..runs)
            .into_par_iter()
            .map(|i| {
                let mut r = rng::stream(config.seed, i as u64);
                let (x0, _) = dataset.sample(&mut r);
                let seed = r.random::<u64>();
                Ok(invert(
                    &x0,
                    predictor.as_ref(),
                    &params.inversion_condition,
                    &schedule,
                    seed,
                )?)
            })
            .collect::<Result<_>>()
    })?;
    let steps = noise_map_stats(&inversions)?;

    create_dir(&config.output_dir)?;
    let path = config.output_dir.join("noise_stats.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "t",
        "runs",
        "pooled_var",
        "min_coord_var",
        "max_coord_var",
        "lag1_corr",
        "lag1_z",
    ])?;
    for s in &steps {
        let min = s.var.iter().copied().fold(f64::INFINITY, f64::min);
        let max = s.var.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        w.write_record([
            s.t.to_string(),
            s.samples.to_string(),
            s.pooled_var.to_string(),
            min.to_string(),
            max.to_string(),
            s.lag1_corr.to_string(),
            s.lag1_z.to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    Ok(StatsOutput { path, steps })
}
