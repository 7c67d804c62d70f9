//! End-to-end orchestration: configuration, per-stage commands working over an
//! output directory with conventional file names, the in-memory ablation
//! pipeline, and hyperparameter sweeps.
//!
//! Directory conventions (all under the `--out` directory):
//! `manifest.json`, `drone.uvf` / `satellite.uvf` / `apv.uvf`, `images/`,
//! `stage1.ckpt`, `stage2.ckpt`, `drone_labels.json` / `satellite_labels.json`,
//! `stage1_trace.json`, `associations.json`, `report.json`, `sweep.json`,
//! `sweep.csv`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::apv::{color_transfer, global_stats, read_ppm, write_ppm};
use crate::ckpt::{CheckpointHeader, TensorInfo};
use crate::cluster::{dbscan, PseudoLabels};
use crate::eval::{
    association_accuracy, average_precision, cluster_purity, rank_gallery, recall_at_k,
    view_probe, RelevanceMap,
};
use crate::hgfc::{
    consistency_scores, cosine_similarity_matrix, export_associations, greedy_associate,
    mutual_filter, read_associations, topk_neighbors, weighted_vote, Association,
    AssociationMap, VoteMode,
};
use crate::nn::Affine;
use crate::stage1::{
    load_checkpoint as load_stage1_checkpoint, run_stage1, save_checkpoint as save_stage1_checkpoint,
    EncoderParams, Stage1Config, Stage1Output,
};
use crate::stage2::{build_pairs, run_stage2, Stage2Config, Stage2Model, Stage2Output};
use crate::store::{
    l2_normalize, read_vector_file, write_vector_file, EmbeddingSet, Manifest, ManifestEntry,
    ViewTag,
};
use crate::synth::{generate, SynthConfig, SynthDataset};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DbscanSettings {
    pub eps: f64,
    pub min_samples: usize,
    /// Satellite galleries typically hold one image per location; clustering
    /// them with the drone-side density requirement would mark everything as
    /// noise, so the satellite view gets its own minimum.
    pub min_samples_satellite: usize,
}

impl Default for DbscanSettings {
    fn default() -> Self {
        DbscanSettings {
            eps: 0.25,
            min_samples: 4,
            min_samples_satellite: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

impl TrainSettings {
    fn stage1_default() -> Self {
        TrainSettings {
            epochs: 10,
            lr: 0.1,
            batch: 24,
        }
    }

    fn stage2_default() -> Self {
        TrainSettings {
            epochs: 20,
            lr: 0.01,
            batch: 24,
        }
    }
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings::stage1_default()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct HgfcSettings {
    pub k: usize,
    pub consist_threshold: f64,
    pub vote_mode: VoteMode,
}

impl Default for HgfcSettings {
    fn default() -> Self {
        HgfcSettings {
            k: 2,
            consist_threshold: 0.5,
            vote_mode: VoteMode::Cluster,
        }
    }
}

/// Fully resolved pipeline configuration; the JSON report embeds it verbatim.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub temperature: f64,
    pub lambda: f64,
    pub memory_momentum: f64,
    pub encoder_dim: usize,
    /// Warm-start the stage-1 encoder at the identity map; see
    /// [`Stage1Config::identity_init`].
    pub identity_init: bool,
    pub disc_hidden: usize,
    pub disc_lr: f64,
    pub dbscan: DbscanSettings,
    pub stage1: TrainSettings,
    pub stage2: TrainSettings,
    pub hgfc: HgfcSettings,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            temperature: 0.05,
            lambda: 0.1,
            memory_momentum: 0.2,
            encoder_dim: 64,
            identity_init: true,
            disc_hidden: 16,
            disc_lr: 0.05,
            dbscan: DbscanSettings::default(),
            stage1: TrainSettings::stage1_default(),
            stage2: TrainSettings::stage2_default(),
            hgfc: HgfcSettings::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let config: PipelineConfig =
            serde_json::from_str(&raw).map_err(|e| Error::Config(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.memory_momentum) {
            return Err(Error::Config("memory_momentum must lie in [0,1]".into()));
        }
        if self.encoder_dim == 0 || self.disc_hidden == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.hgfc.k == 0 {
            return Err(Error::Config("hgfc.k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.hgfc.consist_threshold) {
            return Err(Error::Config("hgfc.consist_threshold must lie in [0,1]".into()));
        }
        self.synth.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Command-line overrides; `None` keeps the config value.
    pub fn apply_overrides(
        &mut self,
        seed: Option<u64>,
        k: Option<usize>,
        lambda: Option<f64>,
        vote_mode: Option<VoteMode>,
    ) {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(k) = k {
            self.hgfc.k = k;
        }
        if let Some(l) = lambda {
            self.lambda = l;
        }
        if let Some(m) = vote_mode {
            self.hgfc.vote_mode = m;
        }
    }

    pub fn stage1_config(&self, lambda: f64) -> Stage1Config {
        Stage1Config {
            epochs: self.stage1.epochs,
            lr: self.stage1.lr,
            batch: self.stage1.batch,
            temperature: self.temperature,
            lambda,
            memory_momentum: self.memory_momentum,
            dbscan_eps: self.dbscan.eps,
            dbscan_min_samples: self.dbscan.min_samples,
            dbscan_min_samples_satellite: self.dbscan.min_samples_satellite,
            encoder_dim: self.encoder_dim,
            identity_init: self.identity_init,
            disc_hidden: self.disc_hidden,
            disc_lr: self.disc_lr,
            seed: self.seed,
        }
    }

    pub fn stage2_config(&self) -> Stage2Config {
        Stage2Config {
            epochs: self.stage2.epochs,
            lr: self.stage2.lr,
            batch: self.stage2.batch,
            temperature: self.temperature,
            seed: self.seed,
        }
    }
}

/// How drones are paired with satellites before Stage 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Hgfc,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct RetrievalMetrics {
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub map: f64,
}

/// Metrics of one full dual-stage run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunMetrics {
    pub label: String,
    pub seed: u64,
    pub lambda: f64,
    pub strategy: Strategy,
    pub k: usize,
    pub association_accuracy: Option<f64>,
    pub association_coverage: f64,
    pub drone_clusters: usize,
    pub satellite_clusters: usize,
    pub purity_drone: Option<f64>,
    pub purity_satellite: Option<f64>,
    pub probe_raw: f64,
    pub probe_trained: f64,
    pub drone_to_satellite: RetrievalMetrics,
    pub satellite_to_drone: RetrievalMetrics,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Report {
    pub config: PipelineConfig,
    pub rows: Vec<RunMetrics>,
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut raw = serde_json::to_string_pretty(value).expect("report serializes");
    raw.push('\n');
    std::fs::write(path, raw).map_err(|e| Error::io(path.display().to_string(), e))
}

fn retrieval_metrics(
    queries: &EmbeddingSet,
    gallery: &EmbeddingSet,
    query_classes: &[u32],
    gallery_classes: &[u32],
) -> Result<RetrievalMetrics> {
    let ranking = rank_gallery(queries, gallery)?;
    let relevance = RelevanceMap::from_classes(query_classes, gallery_classes);
    Ok(RetrievalMetrics {
        recall_at_1: recall_at_k(&ranking, &relevance, 1)?,
        recall_at_5: recall_at_k(&ranking, &relevance, 5)?,
        recall_at_10: recall_at_k(&ranking, &relevance, 10)?,
        map: average_precision(&ranking, &relevance)?,
    })
}

/// Runs HGFC association with the given settings over already-encoded
/// features.
pub fn associate_hgfc(
    enc_drone: &EmbeddingSet,
    enc_sat: &EmbeddingSet,
    enc_apv: &EmbeddingSet,
    drone_labels: &PseudoLabels,
    sat_labels: &PseudoLabels,
    settings: &HgfcSettings,
) -> Result<AssociationMap> {
    let sim_ru = cosine_similarity_matrix(enc_drone, enc_sat)?;
    let sim_pu = cosine_similarity_matrix(enc_apv, enc_sat)?;
    let g_ru = topk_neighbors(&sim_ru, settings.k)?;
    let g_pu = topk_neighbors(&sim_pu, settings.k)?;
    let scores = consistency_scores(&g_ru, &g_pu, enc_sat.count(), settings.k)?;
    let kept = mutual_filter(&sim_ru, &g_ru, &g_pu, &scores, settings.consist_threshold)?;
    weighted_vote(&kept, sat_labels, drone_labels, settings.vote_mode)
}

/// One full dual-stage run over an in-memory dataset. `lambda` and `strategy`
/// are explicit so ablation rows can vary them without touching the config.
pub fn run_variant(
    config: &PipelineConfig,
    data: &SynthDataset,
    label: &str,
    lambda: f64,
    strategy: Strategy,
) -> Result<RunMetrics> {
    let stage1 = run_stage1(
        &data.drone,
        &data.satellite,
        &data.apv,
        &config.stage1_config(lambda),
    )?;
    let encoder = &stage1.encoder;
    let enc_drone = encoder.encode_set(&data.drone)?;
    let enc_sat = encoder.encode_set(&data.satellite)?;
    let enc_apv = encoder.encode_set(&data.apv)?;

    // Fresh pseudo-labels from the final encoder.
    let drone_labels = dbscan(&enc_drone, config.dbscan.eps, config.dbscan.min_samples)?;
    let sat_labels = dbscan(
        &enc_sat,
        config.dbscan.eps,
        config.dbscan.min_samples_satellite,
    )?;

    let assoc = match strategy {
        Strategy::Greedy => {
            let sim = cosine_similarity_matrix(&enc_drone, &enc_sat)?;
            greedy_associate(&sim, Some(&sat_labels))?
        }
        Strategy::Hgfc => associate_hgfc(
            &enc_drone,
            &enc_sat,
            &enc_apv,
            &drone_labels,
            &sat_labels,
            &config.hgfc,
        )?,
    };

    let drone_classes = data.manifest.classes_for_view(ViewTag::Drone)?;
    let sat_classes = data.manifest.classes_for_view(ViewTag::Satellite)?;
    let assoc_score = association_accuracy(&assoc, &drone_classes, &sat_labels, &sat_classes)?;

    // Stage 2 on the surviving pairs; retrieval uses the contrastive head.
    let pairs = build_pairs(&assoc, &data.drone, &data.satellite, &sat_labels)?;
    let stage2 = run_stage2(&pairs, stage1.encoder.clone(), &config.stage2_config())?;
    let q_feats = stage2.model.retrieval_features(&data.drone)?;
    let g_feats = stage2.model.retrieval_features(&data.satellite)?;

    // View-separability probes on stage-1 features vs raw inputs.
    let (raw_set, views) = stack_views(&data.drone, &data.satellite, &data.apv)?;
    let trained_vectors = encoder.encode(&raw_set.vectors, raw_set.count())?;
    let trained_set = EmbeddingSet::new(
        config.encoder_dim,
        trained_vectors,
        raw_set.ids.clone(),
        raw_set.view,
    )?;
    let probe_raw = view_probe(&raw_set, &views, config.seed)?;
    let probe_trained = view_probe(&trained_set, &views, config.seed)?;

    Ok(RunMetrics {
        label: label.to_string(),
        seed: config.seed,
        lambda,
        strategy,
        k: config.hgfc.k,
        association_accuracy: assoc_score.accuracy,
        association_coverage: assoc_score.coverage,
        drone_clusters: drone_labels.num_clusters(),
        satellite_clusters: sat_labels.num_clusters(),
        purity_drone: cluster_purity(&drone_labels, &drone_classes)?,
        purity_satellite: cluster_purity(&sat_labels, &sat_classes)?,
        probe_raw,
        probe_trained,
        drone_to_satellite: retrieval_metrics(&q_feats, &g_feats, &drone_classes, &sat_classes)?,
        satellite_to_drone: retrieval_metrics(&g_feats, &q_feats, &sat_classes, &drone_classes)?,
    })
}

fn stack_views(
    drone: &EmbeddingSet,
    satellite: &EmbeddingSet,
    apv: &EmbeddingSet,
) -> Result<(EmbeddingSet, Vec<ViewTag>)> {
    let mut vectors = drone.vectors.clone();
    vectors.extend_from_slice(&satellite.vectors);
    vectors.extend_from_slice(&apv.vectors);
    let mut ids = drone.ids.clone();
    ids.extend(satellite.ids.iter().cloned());
    ids.extend(apv.ids.iter().cloned());
    let mut views = vec![ViewTag::Drone; drone.count()];
    views.extend(vec![ViewTag::Satellite; satellite.count()]);
    views.extend(vec![ViewTag::Apv; apv.count()]);
    let set = EmbeddingSet::new(drone.dim, vectors, ids, ViewTag::Drone)?;
    Ok((set, views))
}

/// Generates the dataset for a pipeline run; `--seed` moves the data along
/// with the training.
fn dataset_for(config: &PipelineConfig) -> Result<SynthDataset> {
    let mut synth = config.synth.clone();
    synth.seed = config.seed;
    generate(&synth)
}

/// The three-row ablation: greedy baseline without adversarial bridging,
/// graph filtering without bridging, and the full method.
pub fn ablation_rows(config: &PipelineConfig) -> Result<Vec<RunMetrics>> {
    let data = dataset_for(config)?;
    Ok(vec![
        run_variant(config, &data, "baseline", 0.0, Strategy::Greedy)?,
        run_variant(config, &data, "baseline+hgfc", 0.0, Strategy::Hgfc)?,
        run_variant(
            config,
            &data,
            "baseline+hgfc+vaab",
            config.lambda,
            Strategy::Hgfc,
        )?,
    ])
}

/// Single full-method row.
pub fn full_row(config: &PipelineConfig) -> Result<RunMetrics> {
    let data = dataset_for(config)?;
    run_variant(config, &data, "full", config.lambda, Strategy::Hgfc)
}

/// Which hyperparameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    /// Graph neighborhood size, 1 through 4.
    K,
    /// Adversarial weight, 0.1 through 1.0 in steps of 0.1.
    Lambda,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" => Ok(SweepParam::K),
            "lambda" => Ok(SweepParam::Lambda),
            other => Err(Error::Param(format!("unknown sweep parameter `{other}`"))),
        }
    }
}

pub fn sweep_rows(config: &PipelineConfig, param: SweepParam) -> Result<Vec<RunMetrics>> {
    let mut rows = Vec::new();
    match param {
        SweepParam::K => {
            for k in 1..=4usize {
                let mut cfg = config.clone();
                cfg.hgfc.k = k;
                let data = dataset_for(&cfg)?;
                rows.push(run_variant(
                    &cfg,
                    &data,
                    &format!("k={k}"),
                    cfg.lambda,
                    Strategy::Hgfc,
                )?);
            }
        }
        SweepParam::Lambda => {
            for i in 1..=10u32 {
                let lambda = i as f64 / 10.0;
                let data = dataset_for(config)?;
                rows.push(run_variant(
                    config,
                    &data,
                    &format!("lambda={lambda:.1}"),
                    lambda,
                    Strategy::Hgfc,
                )?);
            }
        }
    }
    Ok(rows)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// CSV rendering of sweep rows, header included.
pub fn sweep_csv(rows: &[RunMetrics]) -> String {
    let mut out = String::from(
        "label,seed,k,lambda,association_accuracy,association_coverage,\
         recall1_drone_to_satellite,map_drone_to_satellite,\
         recall1_satellite_to_drone,map_satellite_to_drone\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.label,
            r.seed,
            r.k,
            r.lambda,
            fmt_opt(r.association_accuracy),
            r.association_coverage,
            r.drone_to_satellite.recall_at_1,
            r.drone_to_satellite.map,
            r.satellite_to_drone.recall_at_1,
            r.satellite_to_drone.map,
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Directory-based commands
// ---------------------------------------------------------------------------

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// `synth`: generates the dataset and writes manifest, feature files, and
/// (when enabled) the procedural images.
pub fn cmd_synth(config: &PipelineConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let data = dataset_for(config)?;
    data.manifest.write(&out.join("manifest.json"))?;
    write_vector_file(&data.drone, &out.join("drone.uvf"))?;
    write_vector_file(&data.satellite, &out.join("satellite.uvf"))?;
    write_vector_file(&data.apv, &out.join("apv.uvf"))?;
    if !data.images.is_empty() {
        ensure_dir(&out.join("images"))?;
        for (rel, image) in &data.images {
            write_ppm(image, &out.join(rel))?;
        }
    }
    Ok(())
}

/// Outcome summary of the `apv` color-transfer command.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ApvSummary {
    pub processed: usize,
    pub failures: Vec<ApvFailure>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ApvFailure {
    pub id: String,
    pub error: String,
}

/// `apv`: recolors every drone image toward pooled satellite statistics and
/// records the results in the manifest (existing `<id>#apv` entries are
/// updated in place). Per-image failures are collected, not fatal.
pub fn cmd_apv(out: &Path) -> Result<ApvSummary> {
    let manifest_path = out.join("manifest.json");
    let mut manifest = Manifest::read(&manifest_path)?;

    let drone_images: Vec<(String, String)> = manifest
        .entries
        .iter()
        .filter(|e| e.view == ViewTag::Drone)
        .filter_map(|e| e.image_path.as_ref().map(|p| (e.id.clone(), p.clone())))
        .collect();
    if drone_images.is_empty() {
        return Ok(ApvSummary {
            processed: 0,
            failures: vec![],
        });
    }

    let mut sat_images = Vec::new();
    for e in manifest.entries.iter().filter(|e| e.view == ViewTag::Satellite) {
        if let Some(p) = &e.image_path {
            sat_images.push(read_ppm(&out.join(p))?);
        }
    }
    if sat_images.is_empty() {
        return Err(Error::Data(
            "no satellite images to derive target statistics from".into(),
        ));
    }
    let target = global_stats(&sat_images)?;

    ensure_dir(&out.join("images"))?;
    let mut summary = ApvSummary {
        processed: 0,
        failures: vec![],
    };
    for (id, rel) in drone_images {
        let apv_id = format!("{id}#apv");
        let apv_rel = format!("images/{apv_id}.ppm");
        let result = read_ppm(&out.join(&rel))
            .and_then(|img| color_transfer(&img, &target))
            .and_then(|apv| write_ppm(&apv, &out.join(&apv_rel)));
        match result {
            Ok(()) => {
                summary.processed += 1;
                match manifest.entries.iter_mut().find(|e| e.id == apv_id) {
                    Some(entry) => entry.image_path = Some(apv_rel),
                    None => manifest.entries.push(ManifestEntry {
                        id: apv_id,
                        view: ViewTag::Apv,
                        image_path: Some(apv_rel),
                        class_id: None,
                    }),
                }
            }
            Err(e) => summary.failures.push(ApvFailure {
                id,
                error: e.to_string(),
            }),
        }
    }
    manifest.write(&manifest_path)?;
    Ok(summary)
}

fn load_view(out: &Path, manifest: &Manifest, file: &str, view: ViewTag) -> Result<EmbeddingSet> {
    let set = read_vector_file(&out.join(file), view)?;
    let ids = manifest.ids_for_view(view);
    if ids.len() != set.count() {
        return Err(Error::Data(format!(
            "{file} holds {} rows but the manifest lists {} {view} entries",
            set.count(),
            ids.len()
        )));
    }
    l2_normalize(&set.with_ids(ids)?)
}

fn load_all_views(out: &Path) -> Result<(Manifest, EmbeddingSet, EmbeddingSet, EmbeddingSet)> {
    let manifest = Manifest::read(&out.join("manifest.json"))?;
    let drone = load_view(out, &manifest, "drone.uvf", ViewTag::Drone)?;
    let satellite = load_view(out, &manifest, "satellite.uvf", ViewTag::Satellite)?;
    let apv = load_view(out, &manifest, "apv.uvf", ViewTag::Apv)?;
    Ok((manifest, drone, satellite, apv))
}

/// `stage1`: trains on the feature files in `out`, then writes the checkpoint,
/// the per-view pseudo-labels, and the loss trace.
pub fn cmd_stage1(config: &PipelineConfig, out: &Path) -> Result<Stage1Output> {
    let (_, drone, satellite, apv) = load_all_views(out)?;
    let result = run_stage1(&drone, &satellite, &apv, &config.stage1_config(config.lambda))?;
    save_stage1_checkpoint(
        &out.join("stage1.ckpt"),
        &result.encoder,
        &result.discriminator,
        serde_json::to_value(config).expect("config serializes"),
        config.stage1.epochs,
    )?;
    result
        .drone_labels
        .write_json(&drone.ids, &out.join("drone_labels.json"))?;
    result
        .sat_labels
        .write_json(&satellite.ids, &out.join("satellite_labels.json"))?;
    write_json(&result.loss_trace, &out.join("stage1_trace.json"))?;
    Ok(result)
}

/// `associate`: encodes with the stage-1 checkpoint, re-clusters, runs HGFC,
/// and writes pseudo-labels plus `associations.json`.
pub fn cmd_associate(config: &PipelineConfig, out: &Path) -> Result<AssociationMap> {
    let (_, drone, satellite, apv) = load_all_views(out)?;
    let (encoder, _) = load_stage1_checkpoint(&out.join("stage1.ckpt"))?;
    let enc_drone = encoder.encode_set(&drone)?;
    let enc_sat = encoder.encode_set(&satellite)?;
    let enc_apv = encoder.encode_set(&apv)?;
    let drone_labels = dbscan(&enc_drone, config.dbscan.eps, config.dbscan.min_samples)?;
    let sat_labels = dbscan(
        &enc_sat,
        config.dbscan.eps,
        config.dbscan.min_samples_satellite,
    )?;
    let assoc = associate_hgfc(
        &enc_drone,
        &enc_sat,
        &enc_apv,
        &drone_labels,
        &sat_labels,
        &config.hgfc,
    )?;
    drone_labels.write_json(&drone.ids, &out.join("drone_labels.json"))?;
    sat_labels.write_json(&satellite.ids, &out.join("satellite_labels.json"))?;
    let export = export_associations(&assoc, &drone.ids, &satellite.ids)?;
    crate::hgfc::write_associations(&export, &out.join("associations.json"))?;
    Ok(assoc)
}

/// Rebuilds an index-based association map from the exported JSON.
fn import_associations(
    out: &Path,
    drone: &EmbeddingSet,
    satellite: &EmbeddingSet,
) -> Result<AssociationMap> {
    let export = read_associations(&out.join("associations.json"))?;
    let drone_index: HashMap<&str, usize> = drone
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let sat_index: HashMap<&str, usize> = satellite
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut assoc: Vec<Option<Association>> = vec![None; drone.count()];
    for pair in &export.pairs {
        let &i = drone_index
            .get(pair.drone_id.as_str())
            .ok_or_else(|| Error::Data(format!("unknown drone id `{}`", pair.drone_id)))?;
        let &j = sat_index
            .get(pair.sat_rep_id.as_str())
            .ok_or_else(|| Error::Data(format!("unknown satellite id `{}`", pair.sat_rep_id)))?;
        assoc[i] = Some(Association {
            sat_cluster: pair.sat_cluster,
            sat_rep: j,
            weight: pair.weight,
        });
    }
    Ok(AssociationMap { assoc })
}

const STAGE2_TENSORS: usize = 8;

/// Serializes a Stage-2 model (encoder plus three heads) as a checkpoint.
pub fn save_stage2_checkpoint(
    path: &Path,
    model: &Stage2Model,
    config_echo: serde_json::Value,
    epoch: usize,
) -> Result<()> {
    let t = |name: &str, l: &Affine| {
        vec![
            TensorInfo {
                name: format!("{name}.weight"),
                rows: l.in_dim,
                cols: l.out_dim,
            },
            TensorInfo {
                name: format!("{name}.bias"),
                rows: 1,
                cols: l.out_dim,
            },
        ]
    };
    let mut tensors = t("encoder", &model.encoder.layer);
    tensors.extend(t("f_ctr", &model.f_ctr));
    tensors.extend(t("f_cls", &model.f_cls));
    tensors.extend(t("f_dsa", &model.f_dsa));
    let header = CheckpointHeader {
        tensors,
        config: config_echo,
        epoch,
    };
    crate::ckpt::save(
        path,
        &header,
        &[
            &model.encoder.layer.weight,
            &model.encoder.layer.bias,
            &model.f_ctr.weight,
            &model.f_ctr.bias,
            &model.f_cls.weight,
            &model.f_cls.bias,
            &model.f_dsa.weight,
            &model.f_dsa.bias,
        ],
    )
}

pub fn load_stage2_checkpoint(path: &Path) -> Result<Stage2Model> {
    let (header, mut tensors) = crate::ckpt::load(path)?;
    if header.tensors.len() != STAGE2_TENSORS {
        return Err(Error::Format(format!(
            "expected {STAGE2_TENSORS} tensors in stage-2 checkpoint, found {}",
            header.tensors.len()
        )));
    }
    let mut take_layer = |at: usize| -> Affine {
        let info = &header.tensors[at];
        Affine {
            in_dim: info.rows,
            out_dim: info.cols,
            weight: std::mem::take(&mut tensors[at]),
            bias: std::mem::take(&mut tensors[at + 1]),
        }
    };
    Ok(Stage2Model {
        encoder: EncoderParams {
            layer: take_layer(0),
        },
        f_ctr: take_layer(2),
        f_cls: take_layer(4),
        f_dsa: take_layer(6),
    })
}

/// `stage2`: trains the heads on the filtered pairs recorded by `associate`
/// and writes `stage2.ckpt`.
pub fn cmd_stage2(config: &PipelineConfig, out: &Path) -> Result<Stage2Output> {
    let (_, drone, satellite, _) = load_all_views(out)?;
    let (encoder, _) = load_stage1_checkpoint(&out.join("stage1.ckpt"))?;
    let sat_labels = PseudoLabels::read_json(&satellite.ids, &out.join("satellite_labels.json"))?;
    let assoc = import_associations(out, &drone, &satellite)?;
    let pairs = build_pairs(&assoc, &drone, &satellite, &sat_labels)?;
    let result = run_stage2(&pairs, encoder, &config.stage2_config())?;
    save_stage2_checkpoint(
        &out.join("stage2.ckpt"),
        &result.model,
        serde_json::to_value(config).expect("config serializes"),
        config.stage2.epochs,
    )?;
    Ok(result)
}

/// Retrieval scores of a trained stage-2 model, both directions.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub config: PipelineConfig,
    pub drone_to_satellite: RetrievalMetrics,
    pub satellite_to_drone: RetrievalMetrics,
}

/// `eval`: scores the stage-2 checkpoint against the manifest's ground-truth
/// classes and writes `metrics.json`.
pub fn cmd_eval(config: &PipelineConfig, out: &Path) -> Result<EvalReport> {
    let (manifest, drone, satellite, _) = load_all_views(out)?;
    let model = load_stage2_checkpoint(&out.join("stage2.ckpt"))?;
    let q = model.retrieval_features(&drone)?;
    let g = model.retrieval_features(&satellite)?;
    let drone_classes = manifest.classes_for_view(ViewTag::Drone)?;
    let sat_classes = manifest.classes_for_view(ViewTag::Satellite)?;
    let report = EvalReport {
        config: config.clone(),
        drone_to_satellite: retrieval_metrics(&q, &g, &drone_classes, &sat_classes)?,
        satellite_to_drone: retrieval_metrics(&g, &q, &sat_classes, &drone_classes)?,
    };
    write_json(&report, &out.join("metrics.json"))?;
    Ok(report)
}

/// `pipeline`: the full in-memory run; with `ablation` it produces the
/// three-row comparison instead of a single row. Writes `report.json`.
pub fn cmd_pipeline(config: &PipelineConfig, out: &Path, ablation: bool) -> Result<Report> {
    ensure_dir(out)?;
    let rows = if ablation {
        ablation_rows(config)?
    } else {
        vec![full_row(config)?]
    };
    let report = Report {
        config: config.clone(),
        rows,
    };
    write_json(&report, &out.join("report.json"))?;
    Ok(report)
}

/// `sweep`: varies one hyperparameter and writes `sweep.json` plus
/// `sweep.csv`.
pub fn cmd_sweep(config: &PipelineConfig, out: &Path, param: SweepParam) -> Result<Report> {
    ensure_dir(out)?;
    let rows = sweep_rows(config, param)?;
    let report = Report {
        config: config.clone(),
        rows,
    };
    write_json(&report, &out.join("sweep.json"))?;
    std::fs::write(out.join("sweep.csv"), sweep_csv(&report.rows))
        .map_err(|e| Error::io(out.join("sweep.csv").display().to_string(), e))?;
    Ok(report)
}

/// Returns a path inside the output directory; exposed for the CLI binary.
pub fn out_path(out: &Path, file: &str) -> PathBuf {
    out.join(file)
}
