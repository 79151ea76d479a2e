//! Command-level pipeline: gen, fit, train, embed, classify, retrieve,
//! eval. Each command is a pure function of (config, disk state); outputs
//! are byte-stable given the same config and seed.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use serde::Serialize;

use crate::config::RunConfig;
use crate::datagen::{build_dataset, fit_nerf, load_manifest, save_manifest, BuildRequest, Dataset};
use crate::downstream::{
    embed_dataset, evaluate_classifier, retrieve, train_classifier, Classifier, DistanceMetric, EmbeddingStore,
    RetrievalResult,
};
use crate::fields::preset;
use crate::gmn::GmnParams;
use crate::scenes::render_gt;
use crate::training::{train_framework, FrameworkModel, LossMode, TrainData, TrainOutcome};
use crate::{mix, Error, Result};

pub fn dataset_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.out_dir.join("dataset")
}

pub fn model_dir(cfg: &RunConfig, mode: LossMode) -> PathBuf {
    cfg.paths.out_dir.join("models").join(mode.tag())
}

pub fn embeddings_path(cfg: &RunConfig, mode: LossMode) -> PathBuf {
    cfg.paths.out_dir.join("embeddings").join(format!("{}.ngc", mode.tag()))
}

pub fn report_dir(cfg: &RunConfig, mode: LossMode) -> PathBuf {
    cfg.paths.out_dir.join("reports").join(mode.tag())
}

#[derive(Debug, Serialize)]
pub struct GenSummary {
    pub scenes: usize,
    pub checkpoints: usize,
    pub excluded_scenes: Vec<String>,
    pub mean_psnr_db: f64,
    pub manifest_path: PathBuf,
}

/// Generate scenes and fit every (scene, family) checkpoint.
pub fn cmd_gen(cfg: &RunConfig, force: bool, unseen_variants: bool) -> Result<GenSummary> {
    let dir = dataset_dir(cfg);
    if dir.join("manifest.json").exists() && !force {
        return Err(Error::Invalid(format!(
            "{} already holds a dataset; pass --force to regenerate",
            dir.display()
        )));
    }
    let families: Vec<_> = cfg
        .data
        .families
        .iter()
        .map(|n| (n.clone(), preset(&cfg.data.arch_set, n).expect("validated preset")))
        .collect();
    let variants: Vec<_> = if unseen_variants {
        cfg.data
            .variants
            .iter()
            .map(|n| (n.clone(), preset(&cfg.data.arch_set, n).expect("validated preset")))
            .collect()
    } else {
        Vec::new()
    };
    let req = BuildRequest {
        num_scenes: cfg.data.num_scenes,
        classes: cfg.data.classes.clone(),
        views: cfg.data.views,
        image_size: cfg.data.image_size,
        camera_distance: cfg.data.camera_distance,
        splits: cfg.data.splits,
        families,
        variants,
        fit: cfg.nerf_fit.clone(),
        seed: cfg.seed,
        save_gt_pngs: cfg.data.save_gt_pngs,
    };
    let summary = build_dataset(&dir, &req)?;
    Ok(GenSummary {
        scenes: summary.manifest.scenes.len(),
        checkpoints: summary.fitted,
        excluded_scenes: summary.excluded_scenes,
        mean_psnr_db: summary.mean_psnr,
        manifest_path: dir.join("manifest.json"),
    })
}

#[derive(Debug, Serialize)]
pub struct FitSummary {
    pub refitted: usize,
    pub present: usize,
}

/// Complete a dataset: fit any checkpoint files missing from the manifest
/// directory (all of them under --force).
pub fn cmd_fit(cfg: &RunConfig, force: bool) -> Result<FitSummary> {
    let dir = dataset_dir(cfg);
    let manifest = load_manifest(&dir)?;
    let mut refitted = 0;
    let mut present = 0;
    for (si, scene) in manifest.scenes.iter().enumerate() {
        let mut gt_views = None;
        for (fam, rel) in &scene.checkpoints {
            let path = dir.join(rel);
            if path.exists() && !force {
                present += 1;
                continue;
            }
            let views = gt_views.get_or_insert_with(|| {
                scene.spec.camera_rig().iter().map(|p| render_gt(&scene.spec, p)).collect::<Vec<_>>()
            });
            let arch = manifest
                .archs
                .get(fam)
                .ok_or_else(|| Error::Format(format!("manifest missing arch for family {fam}")))?;
            let fam_idx = manifest
                .families
                .iter()
                .chain(manifest.variant_families.iter())
                .position(|f| f == fam)
                .unwrap_or(0);
            let ckpt = fit_nerf::<f32>(
                &scene.spec,
                views,
                arch,
                fam,
                &cfg.nerf_fit,
                mix(&[manifest.seed, 0xF17BA5E, si as u64, fam_idx as u64]),
            )?;
            ckpt.save(&path)?;
            refitted += 1;
        }
    }
    save_manifest(&dir, &manifest)?;
    Ok(FitSummary { refitted, present })
}

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub mode: String,
    pub steps: usize,
    pub final_loss: f64,
    pub final_render_loss: f64,
    pub final_contrastive_loss: f64,
    pub best_path: PathBuf,
    pub last_path: PathBuf,
}

pub fn cmd_train(cfg: &RunConfig, mode_override: Option<LossMode>, resume: bool) -> Result<TrainSummary> {
    let mut train_cfg = cfg.framework.clone();
    if let Some(mode) = mode_override {
        train_cfg.mode = mode;
    }
    let dataset = Dataset::load(&dataset_dir(cfg))?;
    if train_cfg.mode.uses_contrastive() && dataset.manifest.families.len() < 2 {
        return Err(Error::Config(
            "mode c/rc requires the multi-architecture dataset: a single-family dataset has no positive pairs"
                .into(),
        ));
    }
    let data = TrainData::load(dataset)?;
    let out = model_dir(cfg, train_cfg.mode);
    let outcome: TrainOutcome = train_framework(&data, &train_cfg, &out, cfg.seed, resume)?;
    Ok(TrainSummary {
        mode: train_cfg.mode.tag().to_string(),
        steps: outcome.steps_run,
        final_loss: outcome.final_losses.total,
        final_render_loss: outcome.final_losses.render,
        final_contrastive_loss: outcome.final_losses.contrastive,
        best_path: outcome.best_path,
        last_path: outcome.last_path,
    })
}

/// Load the trained encoder for a mode (best-val checkpoint).
pub fn load_encoder(cfg: &RunConfig, mode: LossMode) -> Result<GmnParams<f32>> {
    let mut train_cfg = cfg.framework.clone();
    train_cfg.mode = mode;
    let path = model_dir(cfg, mode).join("best.ngc");
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path,
            hint: format!("run `nerfgraph train --mode {}` first", mode.tag()),
        });
    }
    let (model, _, _) = FrameworkModel::load(&path, &train_cfg)?;
    Ok(model.encoder)
}

/// Embed every checkpoint (training families plus any fitted variants).
pub fn cmd_embed(cfg: &RunConfig, mode: LossMode) -> Result<PathBuf> {
    let dataset = Dataset::load(&dataset_dir(cfg))?;
    let encoder = load_encoder(cfg, mode)?;
    let mut families = dataset.manifest.families.clone();
    families.extend(dataset.manifest.variant_families.clone());
    let store = embed_dataset(&dataset, &encoder, &families)?;
    let path = embeddings_path(cfg, mode);
    store.save(&path)?;
    Ok(path)
}

fn load_embeddings(cfg: &RunConfig, mode: LossMode) -> Result<EmbeddingStore> {
    let path = embeddings_path(cfg, mode);
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path,
            hint: format!("run `nerfgraph embed --mode {}` first", mode.tag()),
        });
    }
    EmbeddingStore::load(&path)
}

/// Train on one family set ("MLP" | "TRI" | "HASH" | "ALL") and evaluate
/// on another, mirroring the reference protocol: classifier fits the train
/// split, accuracy is reported on the test split.
pub fn cmd_classify(cfg: &RunConfig, mode: LossMode, train_on: &str, test_on: &str) -> Result<f64> {
    let store = load_embeddings(cfg, mode)?;
    let dataset = Dataset::load(&dataset_dir(cfg))?;
    let train = family_split(&store, &dataset, train_on, "train")?;
    let test = family_split(&store, &dataset, test_on, "test")?;
    let clf = train_classifier(&train, &dataset.manifest.classes, &cfg.classifier, mix(&[cfg.seed, 0xC1F]))?;
    evaluate_classifier(&clf, &test)
}

fn family_split(
    store: &EmbeddingStore,
    dataset: &Dataset,
    family: &str,
    split: &str,
) -> Result<EmbeddingStore> {
    let known = family == "ALL"
        || dataset.manifest.families.iter().any(|f| f == family)
        || dataset.manifest.variant_families.iter().any(|f| f == family);
    if !known {
        return Err(Error::Config(format!("unknown family {family:?}")));
    }
    let base_families = &dataset.manifest.families;
    let out = store.filter(|r| {
        let fam_ok = match family {
            "ALL" => base_families.iter().any(|f| f == &r.family),
            f => r.family == f,
        };
        fam_ok && (split == "all" || r.split == split)
    });
    if out.is_empty() {
        return Err(Error::Invalid(format!("no embeddings for family {family} split {split}")));
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct RetrieveSummary {
    pub query: String,
    pub gallery: String,
    pub metric: DistanceMetric,
    pub result: RetrievalResult,
}

pub fn cmd_retrieve(
    cfg: &RunConfig,
    mode: LossMode,
    query_fam: &str,
    gallery_fam: &str,
    ks: &[usize],
) -> Result<RetrieveSummary> {
    let store = load_embeddings(cfg, mode)?;
    let dataset = Dataset::load(&dataset_dir(cfg))?;
    let queries = family_split(&store, &dataset, query_fam, &cfg.retrieval.split)?;
    let gallery = family_split(&store, &dataset, gallery_fam, &cfg.retrieval.split)?;
    let result = retrieve(&queries, &gallery, ks, cfg.retrieval.metric)?;
    Ok(RetrieveSummary {
        query: query_fam.to_string(),
        gallery: gallery_fam.to_string(),
        metric: cfg.retrieval.metric,
        result,
    })
}

// ─── eval report ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct ClassificationCell {
    pub train_on: String,
    pub test_on: String,
    pub accuracy: f64,
    pub n_test: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RetrievalCell {
    pub query: String,
    pub gallery: String,
    pub gallery_size: usize,
    pub recall: BTreeMap<usize, f64>,
    pub random_baseline: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantCell {
    pub variant: String,
    pub base_family: String,
    pub accuracy: f64,
    pub n_test: usize,
    pub chance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub mode: String,
    pub classes: Vec<String>,
    pub families: Vec<String>,
    /// Cross-family rows (train family x test family) plus the ALL row.
    pub classification: Vec<ClassificationCell>,
    /// All ordered family pairs, per distance metric.
    pub retrieval: BTreeMap<String, Vec<RetrievalCell>>,
    pub variants: Vec<VariantCell>,
}

fn base_family_of(variant: &str) -> String {
    variant.split('-').next().unwrap_or(variant).to_string()
}

pub fn cmd_eval(cfg: &RunConfig, mode: LossMode) -> Result<EvalReport> {
    let store = load_embeddings(cfg, mode)?;
    let dataset = Dataset::load(&dataset_dir(cfg))?;
    let families = dataset.manifest.families.clone();
    let classes = dataset.manifest.classes.clone();

    // classifiers per training set, reused across test columns
    let mut classification = Vec::new();
    let mut train_sets: Vec<String> = families.clone();
    train_sets.push("ALL".into());
    for train_on in &train_sets {
        let train = family_split(&store, &dataset, train_on, "train")?;
        let clf: Classifier =
            train_classifier(&train, &classes, &cfg.classifier, mix(&[cfg.seed, 0xC1F]))?;
        for test_on in &families {
            let test = family_split(&store, &dataset, test_on, "test")?;
            classification.push(ClassificationCell {
                train_on: train_on.clone(),
                test_on: test_on.clone(),
                accuracy: evaluate_classifier(&clf, &test)?,
                n_test: test.len(),
            });
        }
        // unseen-architecture columns, evaluated on val+test scenes
        if train_on == "ALL" || families.contains(train_on) {
            for variant in &dataset.manifest.variant_families {
                if train_on != "ALL" && base_family_of(variant) != *train_on {
                    continue;
                }
                let vstore = store.filter(|r| &r.family == variant && (r.split == "test" || r.split == "val"));
                if vstore.is_empty() {
                    continue;
                }
                classification.push(ClassificationCell {
                    train_on: train_on.clone(),
                    test_on: variant.clone(),
                    accuracy: evaluate_classifier(&clf, &vstore)?,
                    n_test: vstore.len(),
                });
            }
        }
    }

    // retrieval over all ordered family pairs, both metrics
    let mut retrieval = BTreeMap::new();
    for metric in [DistanceMetric::Euclidean, DistanceMetric::Cosine] {
        let mut cells = Vec::new();
        for qf in &families {
            for gf in &families {
                if qf == gf {
                    continue;
                }
                let queries = family_split(&store, &dataset, qf, &cfg.retrieval.split)?;
                let gallery = family_split(&store, &dataset, gf, &cfg.retrieval.split)?;
                let res = retrieve(&queries, &gallery, &cfg.retrieval.ks, metric)?;
                cells.push(RetrievalCell {
                    query: qf.clone(),
                    gallery: gf.clone(),
                    gallery_size: res.gallery_size,
                    recall: res.recall,
                    random_baseline: res.random_baseline,
                });
            }
        }
        let name = match metric {
            DistanceMetric::Euclidean => "euclidean",
            DistanceMetric::Cosine => "cosine",
        };
        retrieval.insert(name.to_string(), cells);
    }

    // pooled variant row used by the unseen-architecture smoke check
    let mut variants = Vec::new();
    if !dataset.manifest.variant_families.is_empty() {
        for variant in &dataset.manifest.variant_families {
            let base = base_family_of(variant);
            let train = family_split(&store, &dataset, &base, "train")?;
            let clf = train_classifier(&train, &classes, &cfg.classifier, mix(&[cfg.seed, 0xC1F]))?;
            let vstore = store.filter(|r| &r.family == variant && (r.split == "test" || r.split == "val"));
            if vstore.is_empty() {
                continue;
            }
            variants.push(VariantCell {
                variant: variant.clone(),
                base_family: base,
                accuracy: evaluate_classifier(&clf, &vstore)?,
                n_test: vstore.len(),
                chance: 100.0 / classes.len() as f64,
            });
        }
    }

    let report = EvalReport {
        mode: mode.tag().to_string(),
        classes,
        families,
        classification,
        retrieval,
        variants,
    };
    write_report(cfg, mode, &report)?;
    Ok(report)
}

fn write_report(cfg: &RunConfig, mode: LossMode, report: &EvalReport) -> Result<()> {
    let dir = report_dir(cfg, mode);
    std::fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    let json_path = dir.join("eval.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(report)?).map_err(Error::io(&json_path))?;
    let txt_path = dir.join("eval.txt");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&txt_path).map_err(Error::io(&txt_path))?);
    render_text_report(report, &mut f).map_err(Error::io(&txt_path))?;
    Ok(())
}

/// Aligned-column text tables echoing the reference layouts.
pub fn render_text_report(report: &EvalReport, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "mode {}\n", report.mode)?;
    writeln!(out, "classification accuracy (%)")?;
    let mut test_cols: Vec<String> = Vec::new();
    for c in &report.classification {
        if !test_cols.contains(&c.test_on) {
            test_cols.push(c.test_on.clone());
        }
    }
    write!(out, "{:>10} |", "train \\ test")?;
    for t in &test_cols {
        write!(out, "{t:>10}")?;
    }
    writeln!(out)?;
    writeln!(out, "{}", "-".repeat(13 + 10 * test_cols.len()))?;
    let mut train_rows: Vec<String> = Vec::new();
    for c in &report.classification {
        if !train_rows.contains(&c.train_on) {
            train_rows.push(c.train_on.clone());
        }
    }
    for tr in &train_rows {
        write!(out, "{tr:>10} |")?;
        for tc in &test_cols {
            match report.classification.iter().find(|c| &c.train_on == tr && &c.test_on == tc) {
                Some(c) => write!(out, "{:>10.1}", c.accuracy)?,
                None => write!(out, "{:>10}", "-")?,
            }
        }
        writeln!(out)?;
    }
    for (metric, cells) in &report.retrieval {
        writeln!(out, "\nretrieval recall@k (%), {metric} distance")?;
        let ks: Vec<usize> = cells.first().map(|c| c.recall.keys().copied().collect()).unwrap_or_default();
        write!(out, "{:>12} |", "query/gallery")?;
        for k in &ks {
            write!(out, "{:>9}", format!("@{k}"))?;
        }
        writeln!(out, "{:>10}", "random@1")?;
        writeln!(out, "{}", "-".repeat(15 + 9 * ks.len() + 10))?;
        for c in cells {
            write!(out, "{:>12} |", format!("{}/{}", c.query, c.gallery))?;
            for k in &ks {
                write!(out, "{:>9.2}", c.recall[k])?;
            }
            writeln!(out, "{:>10.2}", c.random_baseline[&ks[0]])?;
        }
    }
    if !report.variants.is_empty() {
        writeln!(out, "\nunseen-architecture classification (val+test scenes)")?;
        for v in &report.variants {
            writeln!(
                out,
                "{:>10} (base {:>5}): {:>6.1}% over {} items (chance {:.1}%)",
                v.variant, v.base_family, v.accuracy, v.n_test, v.chance
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_base_family_of_variants() {
        assert_eq!(base_family_of("MLP-1L"), "MLP");
        assert_eq!(base_family_of("HASH-3N"), "HASH");
        assert_eq!(base_family_of("TRI"), "TRI");
    }
}
