//! Synthetic benchmark generator.
//!
//! Produces planted scenes with base and novel objects, class-agnostic
//! proposals with IoU-derived objectness, region embeddings, raw detector
//! descriptors, class text embeddings and attention maps. The generator also
//! keeps a [`World`] so that boxes created later in the pipeline (jittered
//! proposals) can be embedded the same way, standing in for the external
//! encoder.
//!
//! Region embedding of a box whose best-overlapping object has class `c` and
//! IoU `q`:
//!
//! ```text
//! u = q * dir_c + (1 - q) * dir_bg(image) + noise * (2 - q) * g / sqrt(d)
//! v = u / |u|,    raw = R u + raw_noise * g' / sqrt(d)
//! ```
//!
//! with `g, g'` standard normal vectors drawn from a seed derived from the
//! image index and the exact box coordinates.

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMap, Grid};
use crate::embedding::{dot, normalized, CategorySpace, EmbeddingKind, EmbeddingTable, Matrix};
use crate::error::{Error, Result};
use crate::eval::GroundTruth;
use crate::geometry::{iou, BBox, Proposal, ProposalRole, ProposalSet};
use crate::io::{ImageInfo, Split};
use crate::rng::derive_seed_words;

const ATTENTION_BACKGROUND: f64 = -0.3;
const ATTENTION_PEAK: f64 = 0.8;
const ATTENTION_NOISE: f64 = 0.03;
/// Coordinate jitter, as a fraction of object size, for each planted
/// proposal around an object.
const PROPOSAL_SPREAD: [f64; 6] = [0.03, 0.08, 0.14, 0.22, 0.32, 0.45];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_images: usize,
    pub image_width: u32,
    pub image_height: u32,
    pub num_base_classes: usize,
    pub num_novel_classes: usize,
    /// Object classes that appear in scenes but are never annotated.
    pub num_extra_classes: usize,
    /// Appearance modes per class; each sits `mode_spread` radians from the
    /// class text direction.
    pub modes_per_class: usize,
    pub mode_spread: f64,
    pub embedding_dim: usize,
    /// Angle in radians between any two class directions.
    pub class_separation: f64,
    pub embedding_noise: f64,
    /// Angle in radians by which each class text embedding leans towards one
    /// background texture, away from the visual class direction.
    pub text_misalignment: f64,
    /// Attention bump standard deviation as a fraction of object size.
    pub attention_bump_sigma: f64,
    /// Attention reaching background cells, added on top of the bumps.
    pub attention_background: f64,
    /// Background proposals per object proposal.
    pub background_proposal_rate: f64,
    /// Fraction of background proposals that the proposal network scores
    /// like objects, with objectness drawn from `[0.5, 1]`.
    pub confident_background_fraction: f64,
    /// Fraction of planted objects with aspect ratio in `[3, 6]`.
    pub extreme_ratio_fraction: f64,
    pub attention_grid: usize,
    pub train_fraction: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub proposals_per_object: usize,
    pub num_background_textures: usize,
    pub objectness_noise: f64,
    pub raw_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            num_images: 200,
            image_width: 512,
            image_height: 512,
            num_base_classes: 4,
            num_novel_classes: 2,
            num_extra_classes: 0,
            modes_per_class: 1,
            mode_spread: 0.5,
            embedding_dim: 64,
            class_separation: 0.6,
            embedding_noise: 0.8,
            text_misalignment: 0.0,
            attention_bump_sigma: 0.35,
            attention_background: 0.0,
            background_proposal_rate: 1.0,
            confident_background_fraction: 0.1,
            extreme_ratio_fraction: 0.3,
            attention_grid: 16,
            train_fraction: 0.75,
            min_objects: 2,
            max_objects: 5,
            proposals_per_object: 5,
            num_background_textures: 3,
            objectness_noise: 0.05,
            raw_noise: 0.02,
        }
    }
}

impl SynthConfig {
    pub fn num_classes(&self) -> usize {
        self.num_base_classes + self.num_novel_classes + self.num_extra_classes
    }

    pub fn validate(&self) -> Result<()> {
        let k = |name: &str| format!("synth.{name}");
        if self.num_images < 2 {
            return Err(Error::config(k("num_images"), "need at least one train and one test image"));
        }
        if self.image_width < 16 || self.image_height < 16 {
            return Err(Error::config(k("image_width"), "images must be at least 16x16"));
        }
        if self.num_base_classes == 0 || self.num_novel_classes == 0 {
            return Err(Error::config(k("num_novel_classes"), "need at least one base and one novel class"));
        }
        if self.modes_per_class == 0 {
            return Err(Error::config(k("modes_per_class"), "must be >= 1"));
        }
        if !(0.0..=std::f64::consts::FRAC_PI_2).contains(&self.mode_spread) {
            return Err(Error::config(k("mode_spread"), "must lie in [0, pi/2]"));
        }
        if self.embedding_dim < self.basis_size() {
            return Err(Error::config(
                k("embedding_dim"),
                format!("must be at least {} for this many classes, modes and textures", self.basis_size()),
            ));
        }
        let cos = self.class_separation.cos();
        if !(self.class_separation <= std::f64::consts::FRAC_PI_2 + 1e-12 && cos < 0.9) {
            return Err(Error::config(
                k("class_separation"),
                "must lie in (acos 0.9, pi/2] so pairwise class cosines stay below 0.9",
            ));
        }
        if !(self.embedding_noise >= 0.0 && self.raw_noise >= 0.0 && self.objectness_noise >= 0.0) {
            return Err(Error::config(k("embedding_noise"), "noise levels must be >= 0"));
        }
        if !(0.0..=std::f64::consts::FRAC_PI_2).contains(&self.text_misalignment) {
            return Err(Error::config(k("text_misalignment"), "must lie in [0, pi/2]"));
        }
        if !(self.attention_bump_sigma >= 0.0 && self.attention_bump_sigma.is_finite()) {
            return Err(Error::config(k("attention_bump_sigma"), "must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.extreme_ratio_fraction) {
            return Err(Error::config(k("extreme_ratio_fraction"), "must lie in [0, 1]"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config(k("train_fraction"), "must lie in (0, 1)"));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::config(k("min_objects"), "need 1 <= min_objects <= max_objects"));
        }
        if self.proposals_per_object == 0 || self.proposals_per_object > PROPOSAL_SPREAD.len() {
            return Err(Error::config(
                k("proposals_per_object"),
                format!("must lie in 1..={}", PROPOSAL_SPREAD.len()),
            ));
        }
        if self.attention_grid < 2 {
            return Err(Error::config(k("attention_grid"), "must be >= 2"));
        }
        if !(0.0..=1.0).contains(&self.confident_background_fraction) {
            return Err(Error::config(k("confident_background_fraction"), "must lie in [0, 1]"));
        }
        if self.background_proposal_rate < 0.0 || self.num_background_textures == 0 {
            return Err(Error::config(k("background_proposal_rate"), "rate must be >= 0 with >= 1 texture"));
        }
        Ok(())
    }

    /// Orthonormal directions the world is built from.
    fn basis_size(&self) -> usize {
        let modes = if self.modes_per_class > 1 { self.modes_per_class } else { 0 };
        1 + self.num_classes() * (1 + modes) + self.num_background_textures
    }

    pub fn base_names(&self) -> Vec<String> {
        (1..=self.num_base_classes).map(|i| format!("base-{i}")).collect()
    }

    pub fn novel_names(&self) -> Vec<String> {
        (1..=self.num_novel_classes).map(|i| format!("novel-{i}")).collect()
    }

    pub fn extra_names(&self) -> Vec<String> {
        (1..=self.num_extra_classes).map(|i| format!("extra-{i}")).collect()
    }
}

/// One planted image, including objects that are not annotated in the
/// released ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneImage {
    pub image_id: String,
    pub index: usize,
    pub width: u32,
    pub height: u32,
    pub split: Split,
    pub texture: usize,
    pub objects: Vec<PlantedObject>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedObject {
    pub bbox: BBox,
    pub class: usize,
    pub mode: usize,
}

/// Everything needed to embed an arbitrary box of a generated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub seed: u64,
    pub embedding_noise: f64,
    pub raw_noise: f64,
    pub class_names: Vec<String>,
    pub class_dirs: Vec<Vec<f64>>,
    /// Per class, the appearance directions region embeddings are built on.
    pub mode_dirs: Vec<Vec<Vec<f64>>>,
    pub background_dirs: Vec<Vec<f64>>,
    /// `d x d` map from semantic vectors to raw descriptors.
    pub projection: Vec<Vec<f64>>,
    pub images: Vec<SceneImage>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn orthonormal_basis(rng: &mut ChaCha8Rng, count: usize, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian_vec(rng, d);
        for b in &basis {
            let c = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        if let Ok(u) = normalized(&v) {
            if dot(&v, &v) > 1e-6 {
                basis.push(u);
            }
        }
    }
    basis
}

impl World {
    /// Text embedding of `class`: its direction rotated by `angle` towards
    /// background texture `class mod T`.
    pub fn text_dir(&self, class: usize, angle: f64) -> Vec<f64> {
        let bg = &self.background_dirs[class % self.background_dirs.len()];
        let (c, s) = (angle.cos(), angle.sin());
        self.class_dirs[class].iter().zip(bg).map(|(x, y)| c * x + s * y).collect()
    }

    pub fn image(&self, image_id: &str) -> Option<&SceneImage> {
        self.images.iter().find(|i| i.image_id == image_id)
    }

    /// Best-overlapping planted object of `b` and its IoU.
    pub fn best_object<'a>(&self, image: &'a SceneImage, b: &BBox) -> Option<(&'a PlantedObject, f64)> {
        let mut best: Option<(&PlantedObject, f64)> = None;
        for o in &image.objects {
            let v = iou(&o.bbox, b);
            if v > 0.0 && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((o, v));
            }
        }
        best
    }

    /// Region embedding and raw descriptor of box `b` in `image`.
    pub fn encode(&self, image: &SceneImage, b: &BBox) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.class_dirs[0].len();
        let words = [
            2,
            image.index as u64,
            b.x1.to_bits(),
            b.y1.to_bits(),
            b.x2.to_bits(),
            b.y2.to_bits(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_words(self.seed, &words));
        let (dir, q) = match self.best_object(image, b) {
            Some((o, q)) => (&self.mode_dirs[o.class][o.mode], q),
            None => (&self.mode_dirs[0][0], 0.0),
        };
        let bg = &self.background_dirs[image.texture];
        let scale = self.embedding_noise * (2.0 - q) / (d as f64).sqrt();
        let noise = gaussian_vec(&mut rng, d);
        let u: Vec<f64> = (0..d)
            .map(|i| q * dir[i] + (1.0 - q) * bg[i] + scale * noise[i])
            .collect();
        let raw_scale = self.raw_noise / (d as f64).sqrt();
        let raw_noise = gaussian_vec(&mut rng, d);
        let raw: Vec<f64> = self
            .projection
            .iter()
            .zip(&raw_noise)
            .map(|(row, n)| dot(row, &u) + raw_scale * n)
            .collect();
        Ok((normalized(&u)?, raw))
    }

    /// Embeds every proposal of `set`; both tables are keyed by
    /// [`ProposalSet::keys`].
    pub fn encode_set(&self, set: &ProposalSet) -> Result<(EmbeddingTable, EmbeddingTable)> {
        let keys = set.keys();
        let d = self.class_dirs[0].len();
        let mut regions = Matrix::zeros(set.len(), d);
        let mut raws = Matrix::zeros(set.len(), self.projection.len());
        for (i, p) in set.proposals.iter().enumerate() {
            let image = self
                .image(&p.image_id)
                .ok_or_else(|| Error::invalid(format!("image `{}` is not part of the synthetic world", p.image_id)))?;
            let (v, raw) = self.encode(image, &p.bbox)?;
            regions.row_mut(i).copy_from_slice(&v);
            raws.row_mut(i).copy_from_slice(&raw);
        }
        Ok((
            EmbeddingTable::new(EmbeddingKind::Region, keys.clone(), regions)?,
            EmbeddingTable::new(EmbeddingKind::RawDescriptor, keys, raws)?,
        ))
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub world: World,
    pub categories: CategorySpace,
    pub images: Vec<ImageInfo>,
    /// Base-class annotations of training images only.
    pub gt_train: Vec<GroundTruth>,
    /// All annotations of test images.
    pub gt_test: Vec<GroundTruth>,
    pub proposals_train: ProposalSet,
    pub proposals_test: ProposalSet,
    pub region_train: EmbeddingTable,
    pub raw_train: EmbeddingTable,
    pub raw_test: EmbeddingTable,
    pub text_base: EmbeddingTable,
    pub text_novel: EmbeddingTable,
    pub attention: Vec<(String, AttentionMap)>,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn plant_objects(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<PlantedObject> {
    let (w, h) = (cfg.image_width as f64, cfg.image_height as f64);
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<PlantedObject> = Vec::with_capacity(n);
    for _ in 0..n {
        let class = rng.random_range(0..cfg.num_classes());
        let mode = rng.random_range(0..cfg.modes_per_class);
        let extreme = rng.random::<f64>() < cfg.extreme_ratio_fraction;
        let (ratio, long) = if extreme {
            (uniform(rng, 3.0, 6.0), uniform(rng, 90.0, 180.0))
        } else {
            (uniform(rng, 1.0, 1.8), uniform(rng, 40.0, 110.0))
        };
        let long = long.min(w.min(h) - 10.0);
        let short = (long / ratio).max(4.0);
        let (bw, bh) = if rng.random::<bool>() { (long, short) } else { (short, long) };
        for _ in 0..50 {
            let x1 = uniform(rng, 4.0, w - bw - 4.0);
            let y1 = uniform(rng, 4.0, h - bh - 4.0);
            let b = BBox { x1, y1, x2: x1 + bw, y2: y1 + bh };
            if objects.iter().all(|o| o.bbox.intersection_area(&b) == 0.0) {
                objects.push(PlantedObject { bbox: b, class, mode });
                break;
            }
        }
    }
    objects
}

fn perturbed(b: &BBox, spread: f64, w: f64, h: f64, rng: &mut ChaCha8Rng) -> Option<BBox> {
    let (bw, bh) = (b.width(), b.height());
    let mut n = || -> f64 { StandardNormal.sample(rng) };
    let cand = BBox {
        x1: b.x1 + n() * spread * bw,
        y1: b.y1 + n() * spread * bh,
        x2: b.x2 + n() * spread * bw,
        y2: b.y2 + n() * spread * bh,
    }
    .clip(w, h);
    (cand.width() >= 2.0 && cand.height() >= 2.0).then_some(cand)
}

fn background_box(w: f64, h: f64, rng: &mut ChaCha8Rng) -> BBox {
    let side = uniform(rng, 30.0, 150.0);
    let ratio = uniform(rng, 1.0, 2.0);
    let (bw, bh) = if rng.random::<bool>() { (side, side / ratio) } else { (side / ratio, side) };
    let x1 = uniform(rng, 0.0, w - bw);
    let y1 = uniform(rng, 0.0, h - bh);
    BBox { x1, y1, x2: x1 + bw, y2: y1 + bh }
}

fn attention_map(cfg: &SynthConfig, objects: &[PlantedObject], rng: &mut ChaCha8Rng) -> AttentionMap {
    let g = cfg.attention_grid;
    let (w, h) = (cfg.image_width as f64, cfg.image_height as f64);
    let step_x = (w - 1.0) / (g - 1) as f64;
    let step_y = (h - 1.0) / (g - 1) as f64;
    let mut data = Vec::with_capacity(g * g);
    for r in 0..g {
        let y = r as f64 * step_y;
        for c in 0..g {
            let x = c as f64 * step_x;
            let mut a = ATTENTION_BACKGROUND + cfg.attention_background;
            for PlantedObject { bbox: b, .. } in objects {
                let (cx, cy) = b.center();
                let sx = (cfg.attention_bump_sigma * b.width()).max(0.5 * step_x);
                let sy = (cfg.attention_bump_sigma * b.height()).max(0.5 * step_y);
                let e = ((x - cx) / sx).powi(2) + ((y - cy) / sy).powi(2);
                a += ATTENTION_PEAK * (-0.5 * e).exp();
            }
            let noise: f64 = StandardNormal.sample(rng);
            data.push(a + ATTENTION_NOISE * noise);
        }
    }
    AttentionMap {
        grid: Grid { rows: g, cols: g, data },
        image_width: cfg.image_width,
        image_height: cfg.image_height,
    }
}

fn build_world(cfg: &SynthConfig) -> World {
    let d = cfg.embedding_dim;
    let c = cfg.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_words(cfg.seed, &[0]));
    let basis = orthonormal_basis(&mut rng, cfg.basis_size(), d);
    let cos = cfg.class_separation.cos().max(0.0);
    let (a, b) = (cos.sqrt(), (1.0 - cos).sqrt());
    let class_dirs: Vec<Vec<f64>> = (0..c)
        .map(|i| (0..d).map(|j| a * basis[0][j] + b * basis[1 + i][j]).collect())
        .collect();
    let t = cfg.num_background_textures;
    let background_dirs = basis[1 + c..1 + c + t].to_vec();
    let mode_dirs = if cfg.modes_per_class > 1 {
        let (mc, ms) = (cfg.mode_spread.cos(), cfg.mode_spread.sin());
        let offsets = &basis[1 + c + t..];
        class_dirs
            .iter()
            .enumerate()
            .map(|(i, dir)| {
                (0..cfg.modes_per_class)
                    .map(|m| {
                        let e = &offsets[i * cfg.modes_per_class + m];
                        dir.iter().zip(e).map(|(x, y)| mc * x + ms * y).collect()
                    })
                    .collect()
            })
            .collect()
    } else {
        class_dirs.iter().map(|dir| vec![dir.clone()]).collect()
    };
    let scale = 1.0 / (d as f64).sqrt();
    let projection = (0..d)
        .map(|_| gaussian_vec(&mut rng, d).into_iter().map(|v| v * scale).collect())
        .collect();
    let mut class_names = cfg.base_names();
    class_names.extend(cfg.novel_names());
    class_names.extend(cfg.extra_names());
    World {
        seed: cfg.seed,
        embedding_noise: cfg.embedding_noise,
        raw_noise: cfg.raw_noise,
        class_names,
        class_dirs,
        mode_dirs,
        background_dirs,
        projection,
        images: Vec::new(),
    }
}

pub fn image_id(index: usize) -> String {
    format!("img{index:05}")
}

pub fn generate(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut world = build_world(cfg);
    let (w, h) = (cfg.image_width as f64, cfg.image_height as f64);
    let n_train = ((cfg.num_images as f64 * cfg.train_fraction).round() as usize).clamp(1, cfg.num_images - 1);
    let categories = CategorySpace::new(cfg.base_names(), cfg.novel_names(), 0)?;

    let mut images = Vec::new();
    let mut gt_train = Vec::new();
    let mut gt_test = Vec::new();
    let mut proposals_train = Vec::new();
    let mut proposals_test = Vec::new();
    let mut attention = Vec::new();

    for index in 0..cfg.num_images {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_words(cfg.seed, &[1, index as u64]));
        let id = image_id(index);
        let split = if index < n_train { Split::Train } else { Split::Test };
        let objects = plant_objects(cfg, &mut rng);
        let texture = rng.random_range(0..cfg.num_background_textures);

        let mut boxes = Vec::new();
        for PlantedObject { bbox: b, .. } in &objects {
            for &spread in &PROPOSAL_SPREAD[..cfg.proposals_per_object] {
                if let Some(p) = perturbed(b, spread, w, h, &mut rng) {
                    boxes.push((p, None));
                }
            }
        }
        let n_bg = (cfg.background_proposal_rate * boxes.len() as f64).round() as usize;
        for _ in 0..n_bg {
            let b = background_box(w, h, &mut rng);
            let confident = rng.random_bool(cfg.confident_background_fraction);
            boxes.push((b, confident.then(|| rng.random_range(0.5..=1.0))));
        }
        boxes.shuffle(&mut rng);
        let props: Vec<Proposal> = boxes
            .into_iter()
            .map(|(b, confident)| {
                let best = objects.iter().map(|o| iou(&o.bbox, &b)).fold(0.0, f64::max);
                let noise: f64 = StandardNormal.sample(&mut rng);
                Proposal {
                    image_id: id.clone(),
                    bbox: b,
                    objectness: (confident.unwrap_or(best) + cfg.objectness_noise * noise).clamp(0.0, 1.0),
                }
            })
            .collect();

        let annotated = cfg.num_base_classes + cfg.num_novel_classes;
        for o in objects.iter().filter(|o| o.class < annotated) {
            let g = GroundTruth {
                image_id: id.clone(),
                bbox: o.bbox,
                class: world.class_names[o.class].clone(),
            };
            match split {
                Split::Train if o.class < cfg.num_base_classes => gt_train.push(g),
                Split::Train => {}
                Split::Test => gt_test.push(g),
            }
        }
        attention.push((id.clone(), attention_map(cfg, &objects, &mut rng)));
        match split {
            Split::Train => proposals_train.extend(props),
            Split::Test => proposals_test.extend(props),
        }
        images.push(ImageInfo {
            image_id: id.clone(),
            width: cfg.image_width,
            height: cfg.image_height,
            split,
        });
        world.images.push(SceneImage {
            image_id: id,
            index,
            width: cfg.image_width,
            height: cfg.image_height,
            split,
            texture,
            objects,
        });
    }

    let proposals_train = ProposalSet::new(ProposalRole::Raw, proposals_train);
    let proposals_test = ProposalSet::new(ProposalRole::Raw, proposals_test);
    let (region_train, raw_train) = world.encode_set(&proposals_train)?;
    let (_, raw_test) = world.encode_set(&proposals_test)?;

    let text = |names: Vec<String>, offset: usize, kind| -> Result<EmbeddingTable> {
        let rows: Vec<Vec<f64>> = (0..names.len()).map(|i| world.text_dir(offset + i, cfg.text_misalignment)).collect();
        EmbeddingTable::new(kind, names, Matrix::from_rows(&rows)?)
    };
    let text_base = text(cfg.base_names(), 0, EmbeddingKind::TextBase)?;
    let text_novel = text(cfg.novel_names(), cfg.num_base_classes, EmbeddingKind::TextNovel)?;

    Ok(SyntheticDataset {
        categories,
        images,
        gt_train,
        gt_test,
        proposals_train,
        proposals_test,
        region_train,
        raw_train,
        raw_test,
        text_base,
        text_novel,
        attention,
        world,
    })
}
