use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use mitoloc::config::RunConfig;
use mitoloc::data::manifest::parse_centroids;
use mitoloc::data::synth::{generate_synthetic, SynthConfig};
use mitoloc::data::{DatasetManifest, Split};
use mitoloc::evaluation::{auc, image_level_metrics, match_detections, prf1, Counts, MetricSummary};
use mitoloc::inference::{map_to_png, read_detections_csv, write_detections_csv, DetectionRow, Predictor, ThresholdPolicy};
use mitoloc::numerics::Checkpoint;
use mitoloc::overlay::render_overlay;
use mitoloc::stain::{estimate_pooled_profile, estimate_stain_profile, normalize, StainProfile};
use mitoloc::train::{
    ablate as run_ablation, evaluate_split, read_metrics_log, write_run_files, PreparedData, SplitMetrics, Trainer,
};
use mitoloc::HeadConfig;
use serde::Serialize;

use crate::error::CliError;
use crate::{AblateArgs, EvalArgs, InferArgs, OverlayArgs, StainArgs, SynthArgs, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "tif", "tiff"];

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// `path` itself, or the images directly inside it sorted by name.
fn list_images(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| CliError::data(path.display(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(CliError::Data(format!("no images found in {}", path.display())));
    }
    Ok(out)
}

fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).map_err(|e| CliError::data(path.display(), e))?.to_rgb8())
}

fn save_image<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save(path).map_err(|e| CliError::data(path.display(), e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::data(path.display(), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::data(path.display(), e))
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_patches: a.n,
        patch_size: a.size,
        positive_fraction: a.positive_fraction,
        n_patients: a.patients,
        rng_seed: a.seed,
        ..Default::default()
    };
    cfg.validate().map_err(CliError::Config)?;
    let m = generate_synthetic(&cfg, &a.out)?;
    let pos = m.records.iter().filter(|r| r.label).count();
    println!("wrote {} patches ({pos} positive) to {}", m.records.len(), a.out.display());
    for split in [Split::Train, Split::Val, Split::Test] {
        println!("  {split}: {}", m.split(split).count());
    }
    println!("match radius for this geometry: {}", cfg.match_radius);
    Ok(())
}

pub fn stainnorm(a: &StainArgs) -> Result<()> {
    let target = match &a.target {
        Some(p) => estimate_stain_profile(&read_rgb(p)?)?,
        None => StainProfile::REFERENCE,
    };
    let paths = list_images(&a.input)?;
    let images = paths.iter().map(|p| read_rgb(p)).collect::<Result<Vec<_>>>()?;
    create_dir(&a.output)?;
    println!("target {target}");
    let pooled = if a.per_image {
        None
    } else {
        let refs: Vec<&RgbImage> = images.iter().collect();
        let p = estimate_pooled_profile(&refs)?;
        println!("source {p}");
        Some(p)
    };
    for (path, img) in paths.iter().zip(&images) {
        let source = match pooled {
            Some(p) => p,
            None => {
                let p = estimate_stain_profile(img).map_err(|e| CliError::data(path.display(), e))?;
                println!("{} {p}", stem(path));
                p
            }
        };
        let out = normalize(img, &source, &target)?;
        save_image(&out, &a.output.join(path.file_name().expect("listed files have names")).with_extension("png"))?;
    }
    println!("normalized {} images into {}", images.len(), a.output.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct MetricsReport {
    checkpoint: String,
    split: String,
    threshold: f64,
    image: MetricSummary,
    localization: MetricSummary,
    counts: Counts,
}

fn report(checkpoint: &str, split: &str, threshold: f64, m: &SplitMetrics) -> MetricsReport {
    MetricsReport {
        checkpoint: checkpoint.into(),
        split: split.into(),
        threshold,
        image: m.image,
        localization: m.localization,
        counts: m.counts,
    }
}

fn print_metrics_table(rows: &[MetricsReport]) {
    println!(
        "{:<10} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
        "model", "img F1", "img AUC", "loc P", "loc R", "loc F1", "thresh"
    );
    for r in rows {
        println!(
            "{:<10} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>9.4}",
            r.checkpoint,
            r.image.f1,
            r.image.auc.unwrap_or(f64::NAN),
            r.localization.precision,
            r.localization.recall,
            r.localization.f1,
            r.threshold
        );
    }
}

fn load_data(cfg: &RunConfig) -> Result<PreparedData> {
    let path = cfg.manifest.as_ref().ok_or_else(|| CliError::Config("data.manifest is not set".into()))?;
    let manifest = DatasetManifest::load(path)?;
    Ok(PreparedData::load(&manifest, cfg)?)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(out) = &a.out {
        cfg.output_dir = out.clone();
    }
    let data = load_data(&cfg)?;
    let dir = cfg.output_dir.clone();
    create_dir(&dir)?;
    write_text(&dir.join("config.txt"), &cfg.to_text())?;
    let mut trainer = if a.resume {
        let state = Checkpoint::load(&dir.join("last.ckpt"))?;
        let best_path = dir.join("best.ckpt");
        let best = if best_path.exists() { Some(Checkpoint::load(&best_path)?) } else { None };
        let log = read_metrics_log(&dir.join("metrics.csv"))?;
        let t = Trainer::resume(&cfg, &data, &state, best, log)?;
        println!("resuming after epoch {}", t.epoch);
        t
    } else {
        Trainer::new(&cfg, &data)?
    };
    trainer.fit(|t, row| {
        println!(
            "epoch {:>3}  loss {:.4}  val AUC {:.3}  val image F1 {:.3}  val loc F1 {:.3}",
            row.epoch, row.train_loss, row.val_auc, row.val_image_f1, row.val_loc_f1
        );
        write_run_files(&dir, t).map_err(|source| {
            mitoloc::data::DataError::Io { path: dir.display().to_string(), source }.into()
        })
    })?;
    write_run_files(&dir, &trainer).map_err(|e| CliError::data(dir.display(), e))?;

    let (split, samples) = if data.test.is_empty() { ("val", &data.val) } else { ("test", &data.test) };
    let mut rows = Vec::new();
    if let Some(best) = &trainer.best {
        let (model, policy) = trainer.best_model()?;
        let m = evaluate_split(&model, samples, &policy, &cfg)?;
        println!("best epoch {} (val image F1 {:.3})", best.epoch, best.val_image_f1);
        rows.push(report("best", split, policy.value, &m));
    }
    let last_policy = ThresholdPolicy::fixed(trainer.last_threshold).map_err(|e| CliError::Numeric(e.to_string()))?;
    let m = evaluate_split(&trainer.model, samples, &last_policy, &cfg)?;
    rows.push(report("last", split, last_policy.value, &m));
    println!("{split} split:");
    print_metrics_table(&rows);
    let json = serde_json::to_string_pretty(&rows).expect("plain data serializes");
    write_text(&dir.join(format!("{split}_metrics.json")), &json)?;
    Ok(())
}

pub fn infer(a: &InferArgs) -> Result<()> {
    let mut predictor = Predictor::load(&a.checkpoint)?;
    if let Some(t) = a.threshold {
        predictor.policy = ThresholdPolicy::fixed(t).map_err(|e| CliError::Config(e.to_string()))?;
    }
    if let Some(m) = a.min_area {
        predictor.min_area = m;
    }
    if a.no_stain_normalize {
        predictor.stain_target = None;
    }
    // Stain groups: the whole input, or one per patient of a manifest.
    let mut groups: BTreeMap<String, Vec<(String, RgbImage)>> = BTreeMap::new();
    match (&a.manifest, &a.input) {
        (Some(m), _) => {
            let manifest = DatasetManifest::load(m)?;
            let split = parse_split(&a.split)?;
            for r in manifest.records.iter().filter(|r| split.is_none_or(|s| r.split == s)) {
                groups.entry(r.patient_id.clone()).or_default().push((r.id.clone(), manifest.load_image(r)?));
            }
        }
        (None, Some(input)) => {
            for p in list_images(input)? {
                let img = read_rgb(&p)?;
                groups.entry(String::new()).or_default().push((stem(&p), img));
            }
        }
        (None, None) => return Err(CliError::Config("give --input or --manifest".into())),
    }
    let mut ids = Vec::new();
    let mut results = Vec::new();
    for (_, group) in groups {
        let (names, images): (Vec<String>, Vec<RgbImage>) = group.into_iter().unzip();
        results.extend(predictor.run(&predictor.prepare(&images))?);
        ids.extend(names);
    }
    if let Some(dir) = &a.maps {
        create_dir(dir)?;
    }
    let mut rows = Vec::new();
    let mut scores = String::from("image_id,score\n");
    for (id, r) in ids.iter().zip(&results) {
        scores.push_str(&format!("{id},{}\n", r.maps.global));
        rows.extend(r.detections.iter().map(|d| DetectionRow { image_id: id.to_string(), row: d.row, col: d.col, score: d.score }));
        if let Some(dir) = &a.maps {
            save_image(&map_to_png(&r.maps.full)?, &dir.join(format!("{id}_map.png")))?;
        }
    }
    write_detections_csv(&a.out, &rows).map_err(|e| CliError::data(a.out.display(), e))?;
    if let Some(p) = &a.scores {
        write_text(p, &scores)?;
    }
    println!(
        "{} detections in {} images (threshold {:.4}) -> {}",
        rows.len(),
        ids.len(),
        predictor.policy.value,
        a.out.display()
    );
    Ok(())
}

fn parse_split(s: &str) -> Result<Option<Split>> {
    match s {
        "all" => Ok(None),
        s => Ok(Some(s.parse().map_err(CliError::Config)?)),
    }
}

fn read_scores(path: &Path) -> Result<BTreeMap<String, f64>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::data(path.display(), e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || CliError::Data(format!("{}:{}: expected image_id,score", path.display(), i + 1));
        let (id, s) = line.split_once(',').ok_or_else(bad)?;
        out.insert(id.trim().to_string(), s.trim().parse().map_err(|_| bad())?);
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct EvalReport {
    split: String,
    radius: f64,
    n_images: usize,
    localization: MetricSummary,
    counts: Counts,
    image: Option<MetricSummary>,
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let split = parse_split(&a.split)?;
    let detections = read_detections_csv(&a.detections).map_err(|e| CliError::data(a.detections.display(), e))?;
    let scores = a.scores.as_deref().map(read_scores).transpose()?;
    let records: Vec<_> = manifest.records.iter().filter(|r| split.is_none_or(|s| r.split == s)).collect();
    if records.is_empty() {
        return Err(CliError::Data(format!("split {} of {} is empty", a.split, a.manifest.display())));
    }
    let mut counts = Counts::default();
    let (mut flagged, mut image_scores, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for r in &records {
        let dets = detections.get(&r.id).map(Vec::as_slice).unwrap_or_default();
        let points: Vec<(f64, f64)> = dets.iter().map(|d| d.position()).collect();
        counts += match_detections(&points, &r.centroids, a.radius)?.counts();
        let best = dets.iter().map(|d| d.score).fold(0.0, f64::max);
        let score = match &scores {
            Some(s) => *s.get(&r.id).ok_or_else(|| CliError::Data(format!("no score for image {}", r.id)))?,
            None => best,
        };
        flagged.push(if dets.is_empty() { 0.0 } else { 1.0 });
        image_scores.push(score);
        labels.push(r.label);
    }
    // An image is called positive when it has at least one detection.
    let image = image_level_metrics(&flagged, &labels, 0.5).ok().map(|mut m| {
        m.auc = auc(&image_scores, &labels).ok();
        m
    });
    let rep = EvalReport { split: a.split.clone(), radius: a.radius, n_images: records.len(), localization: prf1(counts), counts, image };

    println!("{} images, split {}, radius {}", rep.n_images, rep.split, rep.radius);
    println!("{:<14} {:>9} {:>9} {:>9}", "", "Precision", "Recall", "F1");
    let l = rep.localization;
    println!("{:<14} {:>9.3} {:>9.3} {:>9.3}   (tp {} fp {} fn {})", "localization", l.precision, l.recall, l.f1, counts.tp, counts.fp, counts.fn_);
    if let Some(m) = &rep.image {
        println!(
            "{:<14} {:>9.3} {:>9.3} {:>9.3}   (accuracy {:.3}, AUC {})",
            "image",
            m.precision,
            m.recall,
            m.f1,
            m.accuracy.unwrap_or(f64::NAN),
            m.auc.map_or("n/a".into(), |v| format!("{v:.3}"))
        );
    }
    if let Some(p) = &a.report {
        write_text(p, &serde_json::to_string_pretty(&rep).expect("plain data serializes"))?;
    }
    Ok(())
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let base = a.config.load()?;
    let variants: Vec<RunConfig> = if a.stages.is_empty() {
        HeadConfig::ablation_variants().iter().map(|h| RunConfig { head: *h, ..base.clone() }).collect()
    } else {
        a.stages
            .iter()
            .map(|&s| {
                let mut c = base.clone();
                c.backbone.num_stages = s;
                c.validate().map(|_| c)
            })
            .collect::<std::result::Result<_, _>>()?
    };
    let data = load_data(&base)?;
    let results = run_ablation(&variants, &data);
    let mut csv = String::from("variant,num_stages,image_f1,loc_f1,error\n");
    println!("{:<16} {:>6} {:>9} {:>9}", "variant", "stages", "image F1", "loc F1");
    for r in &results {
        match &r.error {
            None => println!("{:<16} {:>6} {:>9.3} {:>9.3}", r.label, r.num_stages, r.image_f1, r.loc_f1),
            Some(e) => println!("{:<16} {:>6} failed: {e}", r.label, r.num_stages),
        }
        let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        csv.push_str(&format!("{},{},{},{},{err}\n", r.label, r.num_stages, r.image_f1, r.loc_f1));
    }
    if let Some(p) = &a.out {
        write_text(p, &csv)?;
    }
    if results.iter().all(|r| r.error.is_some()) {
        return Err(CliError::Numeric("every variant failed".into()));
    }
    Ok(())
}

pub fn overlay(a: &OverlayArgs) -> Result<()> {
    let img = read_rgb(&a.image)?;
    let id = a.image_id.clone().unwrap_or_else(|| stem(&a.image));
    let detections: Vec<(f64, f64)> = match &a.detections {
        Some(p) => read_detections_csv(p)
            .map_err(|e| CliError::data(p.display(), e))?
            .remove(&id)
            .unwrap_or_default()
            .iter()
            .map(|d| d.position())
            .collect(),
        None => Vec::new(),
    };
    let annotations = match (&a.annotations, &a.manifest) {
        (Some(s), _) => parse_centroids(s).map_err(CliError::Config)?,
        (None, Some(m)) => DatasetManifest::load(m)?
            .records
            .into_iter()
            .find(|r| r.id == id)
            .ok_or_else(|| CliError::Data(format!("image {id} is not in {}", m.display())))?
            .centroids,
        (None, None) => Vec::new(),
    };
    let (out, rep) = render_overlay(&img, &detections, &annotations, a.radius)?;
    save_image(&out, &a.out)?;
    println!("tp {} fp {} fn {} -> {}", rep.tp, rep.fp, rep.fn_, a.out.display());
    Ok(())
}
