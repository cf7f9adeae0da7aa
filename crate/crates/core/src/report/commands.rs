use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use latentvision_nn::par;

use super::plot::plot_run;
use super::spec::{RunSpec, RESOLVED_NAME};
use super::table::{collect_runs, ReportTable, SUMMARY_NAME};
use crate::classifier::{Classifier, ClassifierConfig};
use crate::codec::{Codec, QualityConfig};
use crate::pipeline::{
    ingest, load_padded, precompute_latents, DatasetIndex, IngestOptions, LatentStore, PrecomputeReport, Split,
};
use crate::train::{
    evaluate, evaluate_images, load_split_images, pretrain_codec, train_frozen, train_joint, EvalReport, Mode,
    RunMetrics,
};
use crate::{Error, Result};

pub const METRICS_NAME: &str = "metrics.csv";
pub const CLASSIFIER_NAME: &str = "model.classifier";

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

fn load_codec(weights: &Path, quality: Option<u8>) -> Result<Codec> {
    if !weights.is_file() {
        return Err(Error::Config(format!("codec weights {} not found", weights.display())));
    }
    let codec = Codec::load(weights)?;
    if let Some(q) = quality.filter(|&q| q != codec.quality_index()) {
        return Err(Error::Config(format!(
            "{} holds quality {} weights, not quality {q}",
            weights.display(),
            codec.quality_index()
        )));
    }
    Ok(codec)
}

/// File name a codec's weights are saved under.
pub fn codec_file_name(codec: &Codec) -> String {
    format!("{}.codec", codec.config().weights_id)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressRow {
    pub file: String,
    pub height: usize,
    pub width: usize,
    pub bytes: usize,
    pub bpp: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CompressReport {
    pub rows: Vec<CompressRow>,
    /// `(file, error)` for inputs that could not be compressed.
    pub errors: Vec<(String, String)>,
}

impl CompressReport {
    pub fn mean_bpp(&self) -> f64 {
        self.rows.iter().map(|r| r.bpp).sum::<f64>() / self.rows.len() as f64
    }
}

/// Compress each image to `<stem>.lvc` in `out_dir` and write `bpp.csv`
/// and `errors.csv`. Images are reflect-padded for coding; bpp counts the
/// whole stream against the original pixel count. Fails only if no input
/// could be compressed.
pub fn cmd_compress(inputs: &[PathBuf], quality: Option<u8>, weights: &Path, out_dir: &Path) -> Result<CompressReport> {
    let codec = load_codec(weights, quality)?;
    if inputs.is_empty() {
        return Err(Error::Config("no input images".into()));
    }
    let mut stems = BTreeSet::new();
    for p in inputs {
        let stem = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        if !stems.insert(stem.clone()) {
            return Err(Error::Config(format!("two inputs share the output name {stem}.lvc")));
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let results = par::map_slice(inputs, |p| -> Result<CompressRow> {
        let (img, _) = load_padded(p)?;
        let src = image::image_dimensions(p)?;
        let (_, _, stream) = codec.compress(&img)?;
        let bytes = stream.serialize();
        let stem = p.file_stem().unwrap_or_default().to_string_lossy();
        std::fs::write(out_dir.join(format!("{stem}.lvc")), &bytes)?;
        let (w, h) = (src.0 as usize, src.1 as usize);
        Ok(CompressRow {
            file: p.display().to_string(),
            height: h,
            width: w,
            bytes: bytes.len(),
            bpp: bytes.len() as f64 * 8.0 / (h * w) as f64,
        })
    });
    let mut report = CompressReport::default();
    for (p, r) in inputs.iter().zip(results) {
        match r {
            Ok(row) => report.rows.push(row),
            Err(e) => {
                log::warn!("cannot compress {}: {e}", p.display());
                report.errors.push((p.display().to_string(), e.to_string()));
            }
        }
    }
    let mut w = csv::Writer::from_path(out_dir.join("bpp.csv")).map_err(csv_err)?;
    w.write_record(["file", "H", "W", "bytes", "bpp"]).map_err(csv_err)?;
    for r in &report.rows {
        w.write_record([
            r.file.clone(),
            r.height.to_string(),
            r.width.to_string(),
            r.bytes.to_string(),
            format!("{:.6}", r.bpp),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out_dir.join("errors.csv")).map_err(csv_err)?;
    w.write_record(["file", "error"]).map_err(csv_err)?;
    for (f, e) in &report.errors {
        w.write_record([f, e]).map_err(csv_err)?;
    }
    w.flush()?;
    if report.rows.is_empty() {
        return Err(Error::Runtime(format!(
            "none of the {} inputs could be compressed",
            inputs.len()
        )));
    }
    Ok(report)
}

/// Where a dataset lives and how to split it.
#[derive(Clone, Debug)]
pub struct DataSource {
    pub root: PathBuf,
    pub manifest: Option<PathBuf>,
    pub options: IngestOptions,
}

impl DataSource {
    pub fn ingest(&self) -> Result<DatasetIndex> {
        ingest(&self.root, self.manifest.as_deref(), &self.options)
    }
}

/// Precompute `(ŷ, σ̂)` for one split and save the store to `out`.
pub fn cmd_latents(
    data: &DataSource,
    split: Split,
    weights: &Path,
    quality: Option<u8>,
    out: &Path,
) -> Result<(LatentStore, PrecomputeReport)> {
    let codec = load_codec(weights, quality)?;
    let index = data.ingest()?;
    let (store, report) = precompute_latents(&index, split, &codec)?;
    if store.is_empty() {
        return Err(Error::Dataset(format!("no {split:?} images could be encoded")));
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    store.save(out)?;
    Ok((store, report))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: RunMetrics,
    /// Every file written to the output directory, checkpoints excluded.
    pub artifacts: Vec<PathBuf>,
}

fn new_classifier(spec: &RunSpec, index: &DatasetIndex, codec: &Codec) -> Result<Classifier> {
    let latent_channels = codec.config().latent_channels;
    let model = match &spec.classifier.init {
        Some(p) => Classifier::load(p)?,
        None => {
            let mut cfg =
                ClassifierConfig::reduced(index.num_classes(), latent_channels, spec.classifier.width_divisor);
            cfg.sigma_input = spec.classifier.sigma_input;
            Classifier::new(cfg, spec.seed)?
        }
    };
    let c = model.config();
    if c.latent_channels != latent_channels || c.num_classes != index.num_classes() {
        return Err(Error::Config(format!(
            "classifier expects {} channels and {} classes; codec and dataset give {} and {}",
            c.latent_channels,
            c.num_classes,
            latent_channels,
            index.num_classes()
        )));
    }
    Ok(model)
}

/// Run a training spec. Writes the resolved spec, `metrics.csv`,
/// `summary.json`, plots, the final weights, and `checkpoints/`.
pub fn cmd_train(spec: &RunSpec) -> Result<TrainOutcome> {
    let mut spec = spec.clone();
    let root = spec.resolve_root()?;
    spec.validate()?;
    let cfg = spec.train_config();
    let out = spec.output_dir.clone();
    std::fs::create_dir_all(&out)?;
    let resolved = out.join(RESOLVED_NAME);
    std::fs::write(&resolved, spec.to_toml())?;
    let mut artifacts = vec![resolved];
    let ckpt = out.join("checkpoints");

    let data = DataSource {
        root,
        manifest: spec.data.manifest.clone(),
        options: spec.ingest_options(),
    };
    let index = data.ingest()?;
    let start = Instant::now();
    let q = spec.codec.quality_index;
    let metrics = match cfg.mode {
        Mode::Codec => {
            let mut codec = match &spec.codec.weights {
                Some(w) => load_codec(w, Some(q))?,
                None => Codec::new(QualityConfig::scaled(q, spec.codec.width_divisor)?, spec.seed)?,
            };
            let train = load_split_images(&index, Split::Train)?;
            let val = load_split_images(&index, Split::Val)?;
            let m = pretrain_codec(&cfg, &mut codec, &train.images, &val.images, Some(&ckpt))?;
            let p = out.join(codec_file_name(&codec));
            codec.save(&p)?;
            artifacts.push(p);
            m
        }
        Mode::Frozen => {
            let weights = spec.codec.weights.as_deref().expect("validated");
            let codec = load_codec(weights, Some(q))?;
            let mut model = new_classifier(&spec, &index, &codec)?;
            let (train, rep) = precompute_latents(&index, Split::Train, &codec)?;
            let (val, rep_val) = precompute_latents(&index, Split::Val, &codec)?;
            let skipped = rep.skipped.len() + rep_val.skipped.len();
            if skipped > 0 {
                log::warn!("{skipped} images could not be encoded and were left out");
            }
            let m = train_frozen(&cfg, &codec, &mut model, &train, &val, Some(&ckpt))?;
            let p = out.join(CLASSIFIER_NAME);
            model.save(&p)?;
            artifacts.push(p);
            m
        }
        Mode::Joint => {
            let weights = spec.codec.weights.as_deref().expect("validated");
            let mut codec = load_codec(weights, Some(q))?;
            let mut model = new_classifier(&spec, &index, &codec)?;
            let m = train_joint(&cfg, &mut codec, &mut model, &index, Some(&ckpt))?;
            let p = out.join(CLASSIFIER_NAME);
            model.save(&p)?;
            artifacts.push(p);
            let p = out.join(format!("{}-joint.codec", codec.config().weights_id));
            codec.save(&p)?;
            artifacts.push(p);
            m
        }
    };
    log::info!(
        "{} run finished in {:.1}s",
        cfg.mode.as_str(),
        start.elapsed().as_secs_f64()
    );
    let csv = out.join(METRICS_NAME);
    metrics.write_csv(&csv)?;
    let summary = out.join(SUMMARY_NAME);
    metrics.write_summary(&summary)?;
    artifacts.extend([csv, summary]);
    artifacts.extend(plot_run(&metrics, &out)?);
    Ok(TrainOutcome { metrics, artifacts })
}

/// What to evaluate a classifier on.
#[derive(Clone, Debug)]
pub enum EvalSource {
    Store(PathBuf),
    Dataset {
        data: DataSource,
        split: Split,
        weights: PathBuf,
    },
}

/// Evaluate a classifier checkpoint; writes a `metric,value` CSV to `out`
/// if given.
pub fn cmd_eval(checkpoint: &Path, source: &EvalSource, quality: Option<u8>, out: Option<&Path>) -> Result<EvalReport> {
    let model = Classifier::load(checkpoint)?;
    let (report, classes) = match source {
        EvalSource::Store(p) => {
            if !p.is_file() {
                return Err(Error::Config(format!("latent store {} not found", p.display())));
            }
            let store = LatentStore::load(p)?;
            if let Some(q) = quality.filter(|&q| q != store.quality_index) {
                return Err(Error::Config(format!(
                    "store holds quality {} latents, not quality {q}",
                    store.quality_index
                )));
            }
            (evaluate(&model, &store)?, store.classes.clone())
        }
        EvalSource::Dataset { data, split, weights } => {
            let codec = load_codec(weights, quality)?;
            let index = data.ingest()?;
            (evaluate_images(&model, &codec, &index, *split)?, index.classes.clone())
        }
    };
    if let Some(path) = out {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["metric", "value"]).map_err(csv_err)?;
        let mut rows = vec![
            ("count".to_string(), report.count.to_string()),
            ("loss".to_string(), format!("{:.6}", report.loss)),
            ("top1".to_string(), format!("{:.4}", report.top1)),
            ("top5".to_string(), format!("{:.4}", report.top5)),
            ("mean_bpp".to_string(), format!("{:.6}", report.mean_bpp)),
        ];
        for (name, acc) in classes.iter().zip(&report.per_class_accuracy) {
            rows.push((format!("accuracy[{name}]"), format!("{acc:.4}")));
        }
        for (k, v) in rows {
            w.write_record([k, v]).map_err(csv_err)?;
        }
        w.flush()?;
    }
    Ok(report)
}

/// Gather run summaries into `report.md` and `report.csv` in `out_dir`.
pub fn cmd_report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<ReportTable> {
    if run_dirs.is_empty() {
        return Err(Error::Config("no run directories given".into()));
    }
    let runs = collect_runs(run_dirs);
    let table = ReportTable::from_runs(runs.iter().map(|(_, m)| m))?;
    table.write(out_dir)?;
    Ok(table)
}
