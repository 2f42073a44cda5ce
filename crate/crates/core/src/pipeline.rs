//! Stage runners over a working directory.
//!
//! Every stage reads its inputs from, and writes its outputs to, fixed
//! relative paths under one directory (see [`layout`]), so stages can be
//! re-run independently and in any order once their inputs exist.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{is_informative, normalize_attention};
use crate::config::PipelineConfig;
use crate::distill::{apply_head, train_distill, DistillHead, DistillPair};
use crate::embedding::{CategorySpace, EmbeddingKind, EmbeddingTable, Matrix};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Detection, EvalReport, GroundTruth};
use crate::geometry::{augment_proposals, iou, JitterConfig, ProposalRole, ProposalSet};
use crate::infer::{infer_image, InferenceConfig, ScoreComponents, SmiModel};
use crate::io;
use crate::io::Split;
use crate::prototype::{train_base_background, train_prototypes, ClassifierBank, PrototypeBank, Sample, TrainConfig};
use crate::pseudolabel::{filter_base, kmeans, select_top_n, ClusterModel, KMeansParams, PseudoLabelSet};
use crate::rng::derive_seed;
use crate::synth::{self, SyntheticDataset, World};

/// Relative locations of every file the stages exchange.
pub mod layout {
    pub const IMAGES: &str = "images.tsv";
    pub const CATEGORIES: &str = "categories.json";
    pub const GT_TRAIN: &str = "gt_train.tsv";
    pub const GT_TEST: &str = "gt_test.tsv";
    pub const PROPOSALS_TRAIN: &str = "proposals_train.tsv";
    pub const PROPOSALS_TEST: &str = "proposals_test.tsv";
    pub const PROPOSALS_INF: &str = "proposals_inf.tsv";
    pub const PROPOSALS_AUG: &str = "proposals_aug.tsv";
    pub const REGION_TRAIN: &str = "embeddings/region_train.bin";
    pub const RAW_TRAIN: &str = "embeddings/raw_train.bin";
    pub const RAW_TEST: &str = "embeddings/raw_test.bin";
    pub const REGION_AUG: &str = "embeddings/region_aug.bin";
    pub const RAW_AUG: &str = "embeddings/raw_aug.bin";
    pub const TEXT_BASE: &str = "embeddings/text_base.bin";
    pub const TEXT_NOVEL: &str = "embeddings/text_novel.bin";
    pub const ATTENTION_DIR: &str = "attention";
    pub const WORLD: &str = "world.json";
    pub const PSEUDO_LABELS: &str = "pseudo_labels.tsv";
    pub const BACKGROUND_IDS: &str = "background_ids.tsv";
    pub const FILTERED_BASE: &str = "filtered_base.tsv";
    pub const CLUSTER_CENTERS: &str = "models/cluster_centers.bin";
    pub const PROTOTYPES: &str = "models/prototypes.bin";
    pub const DISTILL_HEAD: &str = "models/distill_head.bin";
    pub const BASE_CLASSIFIER: &str = "models/base_classifier.bin";
    pub const TRACE_DISTILL: &str = "traces/distill.tsv";
    pub const TRACE_BASE: &str = "traces/base_classifier.tsv";
    pub const TRACE_PROTOTYPE: &str = "traces/prototype.tsv";
    pub const TRACE_KMEANS: &str = "traces/kmeans.tsv";
    pub const DETECTIONS: &str = "detections.tsv";
    pub const REPORT_JSON: &str = "report.json";
    pub const REPORT_TXT: &str = "report.txt";
    pub const ABLATION_JSON: &str = "ablation.json";
    pub const ABLATION_TXT: &str = "ablation.txt";
}

pub const BACKGROUND_KEY: &str = "background";
const DISTILL_HEAD_KIND: &str = "distill_head";

/// Working directory plus per-artifact overrides. Overrides are keyed by
/// the default relative path (e.g. `embeddings/raw_test.bin`); relative
/// override values resolve against the root.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
    pub overrides: BTreeMap<String, PathBuf>,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            overrides: BTreeMap::new(),
        }
    }

    pub fn with_overrides(root: impl Into<PathBuf>, overrides: BTreeMap<String, PathBuf>) -> Self {
        Self {
            root: root.into(),
            overrides,
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        match self.overrides.get(rel) {
            Some(p) => io::resolve(&self.root, p),
            None => self.root.join(rel),
        }
    }

    pub fn attention_path(&self, image_id: &str) -> PathBuf {
        self.path(layout::ATTENTION_DIR).join(format!("{image_id}.bin"))
    }

    fn exists(&self, rel: &str) -> bool {
        self.path(rel).exists()
    }
}

fn write_trace(path: &Path, header: &str, trace: &[f64]) -> Result<()> {
    let mut text = format!("# {header}\n");
    for (i, v) in trace.iter().enumerate() {
        text.push_str(&format!("{i}\t{v}\n"));
    }
    io::write_text(path, &text)
}

/// Proposal indices grouped by image, in order of first appearance.
fn group_by_image(set: &ProposalSet) -> Vec<(String, Vec<usize>)> {
    let mut pos: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, p) in set.proposals.iter().enumerate() {
        let g = *pos.entry(p.image_id.as_str()).or_insert_with(|| {
            groups.push((p.image_id.clone(), Vec::new()));
            groups.len() - 1
        });
        groups[g].1.push(i);
    }
    groups
}

fn subset(set: &ProposalSet, idx: &[usize], role: ProposalRole) -> ProposalSet {
    ProposalSet::new(role, idx.iter().map(|&i| set.proposals[i].clone()).collect())
}

/// Rows of `table` in the order of `keys`.
fn lookup_rows(table: &EmbeddingTable, keys: &[String], what: &str) -> Result<Matrix> {
    let index = table.index();
    let mut m = Matrix::zeros(keys.len(), table.dim());
    for (r, k) in keys.iter().enumerate() {
        let i = *index
            .get(k.as_str())
            .ok_or_else(|| Error::invalid(format!("{what} has no row for `{k}`")))?;
        m.row_mut(r).copy_from_slice(table.get(i));
    }
    Ok(m)
}

/// Applies the distillation head to every raw descriptor.
pub fn roi_features(head: &DistillHead, raw: &EmbeddingTable) -> Result<EmbeddingTable> {
    let rows = raw
        .vectors
        .iter_rows()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|r| apply_head(head, r))
        .collect::<Result<Vec<_>>>()?;
    let m = if rows.is_empty() {
        Matrix::zeros(0, head.output_dim())
    } else {
        Matrix::from_rows(&rows)?
    };
    EmbeddingTable::new(EmbeddingKind::RoiFeature, raw.keys.clone(), m)
}

pub fn write_distill_head(path: &Path, head: &DistillHead) -> Result<()> {
    let (d, d_in) = (head.output_dim(), head.input_dim());
    let mut m = Matrix::zeros(d, d_in + 1);
    for i in 0..d {
        let row = m.row_mut(i);
        row[..d_in].copy_from_slice(head.weight.row(i));
        row[d_in] = head.bias[i];
    }
    io::write_matrix(path, DISTILL_HEAD_KIND, &m, &[])
}

pub fn read_distill_head(path: &Path) -> Result<DistillHead> {
    let f = io::read_matrix(path)?;
    if f.header.kind != DISTILL_HEAD_KIND || f.matrix.cols() < 2 {
        return Err(Error::format(
            format!("distillation head {}", path.display()),
            format!("expected kind `{DISTILL_HEAD_KIND}` with >= 2 columns"),
        ));
    }
    let (d, d_in) = (f.matrix.rows(), f.matrix.cols() - 1);
    let mut weight = Matrix::zeros(d, d_in);
    let mut bias = Vec::with_capacity(d);
    for (i, row) in f.matrix.iter_rows().enumerate() {
        weight.row_mut(i).copy_from_slice(&row[..d_in]);
        bias.push(row[d_in]);
    }
    DistillHead::new(weight, bias)
}

pub fn read_cluster_model(path: &Path) -> Result<ClusterModel> {
    let t = io::read_embeddings_of(path, EmbeddingKind::ClusterCenter)?;
    Ok(ClusterModel {
        k: t.len(),
        centers: t.vectors,
        inertia: f64::NAN,
        inertia_trace: Vec::new(),
        iterations: 0,
    })
}

fn text_rows(ws: &Workspace, rel: &str, kind: EmbeddingKind, names: &[String]) -> Result<Matrix> {
    let t = io::read_embeddings_of(&ws.path(rel), kind)?;
    lookup_rows(&t, names, &format!("text embedding file {}", ws.path(rel).display()))
}

fn with_seed(cfg: &TrainConfig, seed: u64, tag: &str) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(seed, tag),
        ..cfg.clone()
    }
}

pub fn run_synth(ws: &Workspace, cfg: &PipelineConfig) -> Result<SyntheticDataset> {
    let mut ds = synth::generate(&cfg.synth)?;
    ds.categories.k_unknown = cfg.pseudolabel.k;
    write_dataset(ws, &ds)?;
    info!(
        "synth: {} images, {} train / {} test proposals",
        ds.images.len(),
        ds.proposals_train.len(),
        ds.proposals_test.len()
    );
    Ok(ds)
}

pub fn write_dataset(ws: &Workspace, ds: &SyntheticDataset) -> Result<()> {
    io::write_images(&ws.path(layout::IMAGES), &ds.images)?;
    io::write_json(&ws.path(layout::CATEGORIES), &ds.categories)?;
    io::write_ground_truth(&ws.path(layout::GT_TRAIN), &ds.gt_train)?;
    io::write_ground_truth(&ws.path(layout::GT_TEST), &ds.gt_test)?;
    io::write_proposals(&ws.path(layout::PROPOSALS_TRAIN), &ds.proposals_train)?;
    io::write_proposals(&ws.path(layout::PROPOSALS_TEST), &ds.proposals_test)?;
    io::write_embeddings(&ws.path(layout::REGION_TRAIN), &ds.region_train)?;
    io::write_embeddings(&ws.path(layout::RAW_TRAIN), &ds.raw_train)?;
    io::write_embeddings(&ws.path(layout::RAW_TEST), &ds.raw_test)?;
    io::write_embeddings(&ws.path(layout::TEXT_BASE), &ds.text_base)?;
    io::write_embeddings(&ws.path(layout::TEXT_NOVEL), &ds.text_novel)?;
    for (id, map) in &ds.attention {
        io::write_attention(&ws.attention_path(id), map)?;
    }
    io::write_json(&ws.path(layout::WORLD), &ds.world)
}

/// Keeps training proposals whose attention region mean reaches one. The
/// keys of the rejected ones are written alongside for inspection.
pub fn run_select(ws: &Workspace, cfg: &PipelineConfig) -> Result<ProposalSet> {
    let raw = io::read_proposals(&ws.path(layout::PROPOSALS_TRAIN), ProposalRole::Raw)?;
    let keys = raw.keys();
    let groups = group_by_image(&raw);
    let verdicts = groups
        .par_iter()
        .map(|(id, idx)| {
            let map = io::read_attention(&ws.attention_path(id))?;
            let mask = normalize_attention(&map, &cfg.attention);
            Ok(idx
                .iter()
                .map(|&i| (i, is_informative(&mask, &raw.proposals[i].bbox, &cfg.attention)))
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut kept = Vec::new();
    let mut background = Vec::new();
    for (i, keep) in verdicts.into_iter().flatten() {
        if keep {
            kept.push(raw.proposals[i].clone());
        } else {
            background.push(keys[i].clone());
        }
    }
    let out = ProposalSet::new(ProposalRole::Informative, kept);
    io::write_proposals(&ws.path(layout::PROPOSALS_INF), &out)?;
    io::write_ids(&ws.path(layout::BACKGROUND_IDS), &background)?;
    info!("select: kept {} of {} proposals", out.len(), raw.len());
    Ok(out)
}

/// Adds square jitters of extreme-aspect proposals. When the synthetic world
/// is present, the augmented set is also embedded.
pub fn run_augment(ws: &Workspace, cfg: &PipelineConfig) -> Result<ProposalSet> {
    let inf = io::read_proposals(&ws.path(layout::PROPOSALS_INF), ProposalRole::Informative)?;
    let images = io::read_images(&ws.path(layout::IMAGES))?;
    let sizes: HashMap<&str, (u32, u32)> = images.iter().map(|i| (i.image_id.as_str(), (i.width, i.height))).collect();
    let mut out = Vec::with_capacity(inf.len());
    for (id, idx) in group_by_image(&inf) {
        let &(w, h) = sizes
            .get(id.as_str())
            .ok_or_else(|| Error::invalid(format!("image `{id}` is missing from {}", layout::IMAGES)))?;
        let jc = JitterConfig {
            alpha_log_ratio: cfg.jitter.alpha_log_ratio,
            sigma_jitter: cfg.jitter.sigma_jitter,
            seed: derive_seed(cfg.seed, &format!("augment:{id}")),
            image_width: w,
            image_height: h,
        };
        jc.validate()?;
        out.extend(augment_proposals(&subset(&inf, &idx, ProposalRole::Informative), &jc).proposals);
    }
    let aug = ProposalSet::new(ProposalRole::Augmented, out);
    io::write_proposals(&ws.path(layout::PROPOSALS_AUG), &aug)?;
    if ws.exists(layout::WORLD) {
        let world: World = io::read_json(&ws.path(layout::WORLD))?;
        let (region, raw) = world.encode_set(&aug)?;
        io::write_embeddings(&ws.path(layout::REGION_AUG), &region)?;
        io::write_embeddings(&ws.path(layout::RAW_AUG), &raw)?;
    }
    info!("augment: {} -> {} proposals", inf.len(), aug.len());
    Ok(aug)
}

/// Background-labelled training samples for the base classifier: proposals
/// matching a base box at IoU >= 0.5 take its class, all others background.
fn base_samples<'a>(
    proposals: &ProposalSet,
    features: &'a Matrix,
    gts: &[GroundTruth],
    base_names: &[String],
) -> Vec<Sample<'a>> {
    let class_index: HashMap<&str, usize> = base_names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut by_image: HashMap<&str, Vec<&GroundTruth>> = HashMap::new();
    for g in gts {
        by_image.entry(g.image_id.as_str()).or_default().push(g);
    }
    proposals
        .proposals
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut label = base_names.len();
            let mut best = 0.0;
            for g in by_image.get(p.image_id.as_str()).into_iter().flatten() {
                let v = iou(&p.bbox, &g.bbox);
                if v >= 0.5 && v > best {
                    if let Some(&c) = class_index.get(g.class.as_str()) {
                        best = v;
                        label = c;
                    }
                }
            }
            (features.row(i), label)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillSummary {
    pub distill_trace: Vec<f64>,
    pub base_trace: Vec<f64>,
}

/// Trains the distillation head on augmented proposals, then the background
/// row of the base classifier on distilled training features.
pub fn run_train_distill(ws: &Workspace, cfg: &PipelineConfig) -> Result<DistillSummary> {
    let aug = io::read_proposals(&ws.path(layout::PROPOSALS_AUG), ProposalRole::Augmented)?;
    let keys = aug.keys();
    let region = io::read_embeddings_of(&ws.path(layout::REGION_AUG), EmbeddingKind::Region)?;
    let raw_aug = io::read_embeddings_of(&ws.path(layout::RAW_AUG), EmbeddingKind::RawDescriptor)?;
    let targets = lookup_rows(&region, &keys, layout::REGION_AUG)?;
    let inputs = lookup_rows(&raw_aug, &keys, layout::RAW_AUG)?;
    if keys.is_empty() {
        return Err(Error::invalid("no augmented proposals to distill from"));
    }
    let pairs: Vec<DistillPair<'_>> = inputs.iter_rows().zip(targets.iter_rows()).collect();
    let init = DistillHead::random(targets.cols(), inputs.cols(), derive_seed(cfg.seed, "distill-init"));
    let (head, distill_trace) = train_distill(&init, &pairs, &with_seed(&cfg.distill, cfg.seed, "distill"))?;
    write_distill_head(&ws.path(layout::DISTILL_HEAD), &head)?;
    write_trace(&ws.path(layout::TRACE_DISTILL), "epoch\tloss", &distill_trace)?;
    info!(
        "train-distill: L1 {:.4} -> {:.4}",
        distill_trace[0],
        distill_trace[distill_trace.len() - 1]
    );

    let categories: CategorySpace = io::read_json(&ws.path(layout::CATEGORIES))?;
    let text_base = text_rows(ws, layout::TEXT_BASE, EmbeddingKind::TextBase, &categories.base)?;
    let train = io::read_proposals(&ws.path(layout::PROPOSALS_TRAIN), ProposalRole::Raw)?;
    let gts = io::read_ground_truth(&ws.path(layout::GT_TRAIN))?;
    let raw_train = io::read_embeddings_of(&ws.path(layout::RAW_TRAIN), EmbeddingKind::RawDescriptor)?;
    let raw_rows = lookup_rows(&raw_train, &train.keys(), layout::RAW_TRAIN)?;
    let feats = roi_features(
        &head,
        &EmbeddingTable::new(EmbeddingKind::RawDescriptor, train.keys(), raw_rows)?,
    )?;
    let samples = base_samples(&train, &feats.vectors, &gts, &categories.base);
    let bg_label = categories.base.len();
    let mut bg = vec![0.0; head.output_dim()];
    let mut n_bg = 0;
    for (x, _) in samples.iter().filter(|(_, l)| *l == bg_label) {
        bg.iter_mut().zip(x.iter()).for_each(|(b, v)| *b += v);
        n_bg += 1;
    }
    if n_bg == 0 {
        for r in text_base.iter_rows() {
            bg.iter_mut().zip(r).for_each(|(b, v)| *b -= v);
        }
    }
    let bank = ClassifierBank::new(&text_base, &bg)?;
    let (bank, base_trace) = train_base_background(&samples, &bank, &with_seed(&cfg.base, cfg.seed, "base"))?;
    let mut names = categories.base.clone();
    names.push(BACKGROUND_KEY.to_string());
    io::write_matrix(
        &ws.path(layout::BASE_CLASSIFIER),
        EmbeddingKind::BaseClassifier.as_str(),
        &bank.rows,
        &names,
    )?;
    write_trace(&ws.path(layout::TRACE_BASE), "epoch\tloss", &base_trace)?;
    Ok(DistillSummary {
        distill_trace,
        base_trace,
    })
}

#[derive(Debug, Clone)]
pub struct PseudoLabelOutput {
    pub labels: PseudoLabelSet,
    /// Keys of the base-covered augmented proposals. They are left out of
    /// clustering only when filtering is on, and always serve as background
    /// negatives for the prototypes.
    pub filtered: Vec<String>,
    pub clusters: ClusterModel,
}

/// Finds base-covered proposals, optionally removes them, clusters the rest
/// and keeps the `top_n` closest members of every cluster.
pub fn pseudolabel_stage(
    aug: &ProposalSet,
    region: &EmbeddingTable,
    gt_base: &[GroundTruth],
    cfg: &PipelineConfig,
    filter: bool,
) -> Result<PseudoLabelOutput> {
    let keys = aug.keys();
    let f = filter_base(aug, gt_base);
    let removed = f.removed_indices;
    let kept: Vec<usize> = if filter { f.kept_indices } else { (0..aug.len()).collect() };
    let kept_keys: Vec<String> = kept.iter().map(|&i| keys[i].clone()).collect();
    let table = EmbeddingTable::new(
        EmbeddingKind::Region,
        kept_keys.clone(),
        lookup_rows(region, &kept_keys, "region embeddings")?,
    )?;
    let points: Vec<&[f64]> = table.vectors.iter_rows().collect();
    let params = KMeansParams {
        k: cfg.pseudolabel.k,
        seed: derive_seed(cfg.seed, "kmeans"),
        max_iter: cfg.pseudolabel.max_iter,
        tol: cfg.pseudolabel.tol,
    };
    let clusters = kmeans(&points, &params)?;
    let labels = select_top_n(&clusters, &table, cfg.pseudolabel.top_n)?;
    Ok(PseudoLabelOutput {
        labels,
        filtered: removed.iter().map(|&i| keys[i].clone()).collect(),
        clusters,
    })
}

pub fn unknown_keys(k: usize) -> Vec<String> {
    (1..=k).map(CategorySpace::unknown_name).collect()
}

pub fn run_pseudolabel(ws: &Workspace, cfg: &PipelineConfig) -> Result<PseudoLabelOutput> {
    let aug = io::read_proposals(&ws.path(layout::PROPOSALS_AUG), ProposalRole::Augmented)?;
    let region = io::read_embeddings_of(&ws.path(layout::REGION_AUG), EmbeddingKind::Region)?;
    let gts = io::read_ground_truth(&ws.path(layout::GT_TRAIN))?;
    let out = pseudolabel_stage(&aug, &region, &gts, cfg, cfg.pseudolabel.filter_base)?;
    io::write_pseudo_labels(&ws.path(layout::PSEUDO_LABELS), &out.labels)?;
    io::write_ids(&ws.path(layout::FILTERED_BASE), &out.filtered)?;
    io::write_matrix(
        &ws.path(layout::CLUSTER_CENTERS),
        EmbeddingKind::ClusterCenter.as_str(),
        &out.clusters.centers,
        &unknown_keys(out.clusters.k),
    )?;
    write_trace(&ws.path(layout::TRACE_KMEANS), "iteration\tinertia", &out.clusters.inertia_trace)?;
    info!(
        "pseudolabel: {} labels over k={}, {} base-covered removed, inertia {:.4}",
        out.labels.len(),
        out.clusters.k,
        out.filtered.len(),
        out.clusters.inertia
    );
    Ok(out)
}

fn augmented_features(ws: &Workspace, head: &DistillHead) -> Result<EmbeddingTable> {
    let aug = io::read_proposals(&ws.path(layout::PROPOSALS_AUG), ProposalRole::Augmented)?;
    let keys = aug.keys();
    let raw = io::read_embeddings_of(&ws.path(layout::RAW_AUG), EmbeddingKind::RawDescriptor)?;
    let rows = lookup_rows(&raw, &keys, layout::RAW_AUG)?;
    roi_features(head, &EmbeddingTable::new(EmbeddingKind::RawDescriptor, keys, rows)?)
}

/// Rows of `features` for the base-covered proposals.
fn background_features(features: &EmbeddingTable, filtered: &[String]) -> Result<EmbeddingTable> {
    let rows = lookup_rows(features, filtered, layout::FILTERED_BASE)?;
    EmbeddingTable::new(features.kind, filtered.to_vec(), rows)
}

/// Initializes prototypes from the clusters and the background row from the
/// mean feature of the base-covered proposals, then trains on pseudo-labels
/// with those proposals as background negatives.
pub fn train_proto_stage(
    pl: &PseudoLabelOutput,
    features: &EmbeddingTable,
    cfg: &PipelineConfig,
) -> Result<(PrototypeBank, Vec<f64>)> {
    let background = background_features(features, &pl.filtered)?;
    let negatives: Vec<&[f64]> = background.vectors.iter_rows().collect();
    let init = PrototypeBank::from_clusters(&pl.clusters, &negatives)?;
    train_prototypes(
        &pl.labels,
        features,
        &pl.filtered,
        &init,
        &with_seed(&cfg.prototype, cfg.seed, "prototype"),
    )
}

pub fn run_train_proto(ws: &Workspace, cfg: &PipelineConfig) -> Result<(PrototypeBank, Vec<f64>)> {
    let head = read_distill_head(&ws.path(layout::DISTILL_HEAD))?;
    let features = augmented_features(ws, &head)?;
    let pl = PseudoLabelOutput {
        labels: io::read_pseudo_labels(&ws.path(layout::PSEUDO_LABELS))?,
        filtered: io::read_ids(&ws.path(layout::FILTERED_BASE))?,
        clusters: read_cluster_model(&ws.path(layout::CLUSTER_CENTERS))?,
    };
    let (bank, trace) = train_proto_stage(&pl, &features, cfg)?;
    let mut keys = unknown_keys(bank.k());
    keys.push(BACKGROUND_KEY.to_string());
    io::write_matrix(
        &ws.path(layout::PROTOTYPES),
        EmbeddingKind::Prototype.as_str(),
        &bank.prototypes,
        &keys,
    )?;
    write_trace(&ws.path(layout::TRACE_PROTOTYPE), "epoch\tloss", &trace)?;
    info!("train-proto: CE {:.4} -> {:.4}", trace[0], trace[trace.len() - 1]);
    Ok((bank, trace))
}

/// Everything inference needs, loaded once.
#[derive(Debug, Clone)]
pub struct InferenceInputs {
    pub categories: CategorySpace,
    pub novel_text: Matrix,
    pub base: (Vec<String>, ClassifierBank),
    pub test: ProposalSet,
    pub features: EmbeddingTable,
}

pub fn load_inference_inputs(ws: &Workspace) -> Result<InferenceInputs> {
    let categories: CategorySpace = io::read_json(&ws.path(layout::CATEGORIES))?;
    let novel_text = text_rows(ws, layout::TEXT_NOVEL, EmbeddingKind::TextNovel, &categories.novel)?;
    let base_file = io::read_embeddings_of(&ws.path(layout::BASE_CLASSIFIER), EmbeddingKind::BaseClassifier)?;
    let mut names = categories.base.clone();
    names.push(BACKGROUND_KEY.to_string());
    let base_rows = lookup_rows(&base_file, &names, layout::BASE_CLASSIFIER)?;
    let base = (categories.base.clone(), ClassifierBank::from_matrix(base_rows)?);
    let head = read_distill_head(&ws.path(layout::DISTILL_HEAD))?;
    let test = io::read_proposals(&ws.path(layout::PROPOSALS_TEST), ProposalRole::Raw)?;
    let keys = test.keys();
    let raw = io::read_embeddings_of(&ws.path(layout::RAW_TEST), EmbeddingKind::RawDescriptor)?;
    let rows = lookup_rows(&raw, &keys, layout::RAW_TEST)?;
    let features = roi_features(&head, &EmbeddingTable::new(EmbeddingKind::RawDescriptor, keys, rows)?)?;
    Ok(InferenceInputs {
        categories,
        novel_text,
        base,
        test,
        features,
    })
}

pub fn read_prototypes(path: &Path, k: usize) -> Result<PrototypeBank> {
    let t = io::read_embeddings_of(path, EmbeddingKind::Prototype)?;
    let mut keys = unknown_keys(k);
    keys.push(BACKGROUND_KEY.to_string());
    PrototypeBank::new(lookup_rows(&t, &keys, &format!("prototype file {}", path.display()))?)
}

/// Scores every test image in parallel; detections come back in image order.
pub fn infer_stage(
    inputs: &InferenceInputs,
    prototypes: &PrototypeBank,
    clusters: &ClusterModel,
    cfg: &InferenceConfig,
) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let model = SmiModel::new(
        inputs.categories.novel.clone(),
        inputs.novel_text.clone(),
        prototypes.clone(),
        clusters,
        Some(inputs.base.clone()),
        cfg,
    )?;
    let per_image = group_by_image(&inputs.test)
        .par_iter()
        .map(|(_, idx)| {
            let props: Vec<_> = idx.iter().map(|&i| inputs.test.proposals[i].clone()).collect();
            let feats: Vec<Vec<f64>> = idx.iter().map(|&i| inputs.features.get(i).to_vec()).collect();
            infer_image(&props, &feats, &model, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

pub fn run_infer(ws: &Workspace, cfg: &PipelineConfig) -> Result<Vec<Detection>> {
    let inputs = load_inference_inputs(ws)?;
    let clusters = read_cluster_model(&ws.path(layout::CLUSTER_CENTERS))?;
    let prototypes = read_prototypes(&ws.path(layout::PROTOTYPES), clusters.k)?;
    let dets = infer_stage(&inputs, &prototypes, &clusters, &cfg.inference)?;
    io::write_detections(&ws.path(layout::DETECTIONS), &dets)?;
    info!("infer: {} detections over {} proposals", dets.len(), inputs.test.len());
    Ok(dets)
}

pub fn run_eval(ws: &Workspace) -> Result<EvalReport> {
    let categories: CategorySpace = io::read_json(&ws.path(layout::CATEGORIES))?;
    let dets = io::read_detections(&ws.path(layout::DETECTIONS))?;
    let gts = io::read_ground_truth(&ws.path(layout::GT_TEST))?;
    let report = evaluate(&dets, &gts, &categories);
    io::write_json(&ws.path(layout::REPORT_JSON), &report)?;
    io::write_text(&ws.path(layout::REPORT_TXT), &report.to_table())?;
    info!("eval: mAP novel {:.3}, base {:.3}, HM {:.3}", report.map_novel, report.map_base, report.hm);
    Ok(report)
}

/// Runs every stage whose outputs are missing (all of them with `force`).
pub fn run_all(ws: &Workspace, cfg: &PipelineConfig, force: bool) -> Result<EvalReport> {
    if force || !ws.exists(layout::IMAGES) {
        run_synth(ws, cfg)?;
    }
    if force || !ws.exists(layout::PROPOSALS_INF) {
        run_select(ws, cfg)?;
    }
    if force || !ws.exists(layout::PROPOSALS_AUG) {
        run_augment(ws, cfg)?;
    }
    if force || !ws.exists(layout::DISTILL_HEAD) || !ws.exists(layout::BASE_CLASSIFIER) {
        run_train_distill(ws, cfg)?;
    }
    if force || !ws.exists(layout::PSEUDO_LABELS) || !ws.exists(layout::CLUSTER_CENTERS) {
        run_pseudolabel(ws, cfg)?;
    }
    if force || !ws.exists(layout::PROTOTYPES) {
        run_train_proto(ws, cfg)?;
    }
    if force || !ws.exists(layout::DETECTIONS) {
        run_infer(ws, cfg)?;
    }
    run_eval(ws)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub components: ScoreComponents,
    pub filter_base: bool,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn get(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<18} {:>8} {:>8} {:>8} {:>8}\n", "variant", "N", "B", "A", "HM");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<18} {:>8.1} {:>8.1} {:>8.1} {:>8.1}\n",
                r.variant,
                r.report.map_novel * 100.0,
                r.report.map_base * 100.0,
                r.report.map_all * 100.0,
                r.report.hm * 100.0
            ));
        }
        out
    }
}

pub const ABLATION_COMPONENTS: [&str; 6] = ["d", "p", "d+p", "p+l", "d+l", "d+p+l"];

pub fn parse_components(label: &str) -> Result<ScoreComponents> {
    let mut c = ScoreComponents {
        distill: false,
        prototype: false,
        objectness: false,
    };
    for part in label.split('+') {
        match part.trim() {
            "d" => c.distill = true,
            "p" => c.prototype = true,
            "l" => c.objectness = true,
            other => return Err(Error::config("components", format!("unknown component `{other}`"))),
        }
    }
    Ok(c)
}

/// Score-component ablation plus a run without base filtering. Missing
/// upstream stages are run first.
pub fn run_ablate(ws: &Workspace, cfg: &PipelineConfig) -> Result<AblationReport> {
    run_all(ws, cfg, false)?;
    let inputs = load_inference_inputs(ws)?;
    let gts = io::read_ground_truth(&ws.path(layout::GT_TEST))?;
    let clusters = read_cluster_model(&ws.path(layout::CLUSTER_CENTERS))?;
    let prototypes = read_prototypes(&ws.path(layout::PROTOTYPES), clusters.k)?;
    let score = |prototypes: &PrototypeBank, clusters: &ClusterModel, components: ScoreComponents| {
        let icfg = InferenceConfig {
            components,
            ..cfg.inference.clone()
        };
        let dets = infer_stage(&inputs, prototypes, clusters, &icfg)?;
        Ok::<_, Error>(evaluate(&dets, &gts, &inputs.categories))
    };
    let mut rows = Vec::new();
    for label in ABLATION_COMPONENTS {
        let components = parse_components(label)?;
        rows.push(AblationRow {
            variant: label.to_string(),
            components,
            filter_base: cfg.pseudolabel.filter_base,
            report: score(&prototypes, &clusters, components)?,
        });
    }

    let aug = io::read_proposals(&ws.path(layout::PROPOSALS_AUG), ProposalRole::Augmented)?;
    let region = io::read_embeddings_of(&ws.path(layout::REGION_AUG), EmbeddingKind::Region)?;
    let gt_train = io::read_ground_truth(&ws.path(layout::GT_TRAIN))?;
    let head = read_distill_head(&ws.path(layout::DISTILL_HEAD))?;
    let features = augmented_features(ws, &head)?;
    for filter in [true, false] {
        let pl = pseudolabel_stage(&aug, &region, &gt_train, cfg, filter)?;
        let (bank, _) = train_proto_stage(&pl, &features, cfg)?;
        rows.push(AblationRow {
            variant: if filter { "filter" } else { "no-filter" }.to_string(),
            components: ScoreComponents::ALL,
            filter_base: filter,
            report: score(&bank, &pl.clusters, ScoreComponents::ALL)?,
        });
    }
    let report = AblationReport { rows };
    io::write_json(&ws.path(layout::ABLATION_JSON), &report)?;
    io::write_text(&ws.path(layout::ABLATION_TXT), &report.to_table())?;
    Ok(report)
}

/// Test images of `images.tsv`, in file order.
pub fn test_images(ws: &Workspace) -> Result<Vec<String>> {
    Ok(io::read_images(&ws.path(layout::IMAGES))?
        .into_iter()
        .filter(|i| i.split == Split::Test)
        .map(|i| i.image_id)
        .collect())
}
