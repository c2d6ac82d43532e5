//! On-disk datasets, sliding windows and flip augmentation.
//!
//! ```text
//! <root>/<context>/meta.json
//! <root>/<context>/<domain>/video_0000/{frames/000.png, mask.png, annot.json}
//! ```
//! Both domains of a context share trajectories: video `i` has the same
//! seed in `sim/` and `blenlike/`.

use crate::render::{bboxes, render_gt_mask, BBox, Domain, Image, RenderConfig, SemanticMask};
use crate::sim::{rollout, BallState, ContextKind, EnvContext, SceneConfig, SimError, Trajectory};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;
pub const T_REF: usize = 4;
pub const TRAIN_HORIZON: usize = 20;
pub const TEST_HORIZON: usize = 40;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Png { path: PathBuf, source: image::ImageError },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {msg}")]
    Corrupt { path: PathBuf, msg: String },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

/// A (domain, context) pair, e.g. `simb-border` or `blenb-split`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DatasetId {
    pub domain: Domain,
    pub context: ContextKind,
}

impl DatasetId {
    pub const ALL: [DatasetId; 4] = [
        DatasetId { domain: Domain::Sim, context: ContextKind::Border },
        DatasetId { domain: Domain::Blenlike, context: ContextKind::Border },
        DatasetId { domain: Domain::Sim, context: ContextKind::Split },
        DatasetId { domain: Domain::Blenlike, context: ContextKind::Split },
    ];

    pub fn new(domain: Domain, context: ContextKind) -> Self {
        Self { domain, context }
    }

    pub fn dir(&self, root: &Path) -> PathBuf {
        root.join(self.context.as_str()).join(self.domain.as_str())
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = match self.domain {
            Domain::Sim => "simb",
            Domain::Blenlike => "blenb",
        };
        write!(f, "{d}-{}", self.context.as_str())
    }
}

impl FromStr for DatasetId {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (d, c) = s.split_once('-').ok_or_else(|| format!("bad dataset id '{s}'"))?;
        let domain = match d {
            "simb" => Domain::Sim,
            "blenb" => Domain::Blenlike,
            _ => return Err(format!("unknown domain in dataset id '{s}' (expected simb or blenb)")),
        };
        let context = match c {
            "border" => ContextKind::Border,
            "split" => ContextKind::Split,
            _ => return Err(format!("unknown context in dataset id '{s}' (expected border or split)")),
        };
        Ok(Self { domain, context })
    }
}

impl TryFrom<String> for DatasetId {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<DatasetId> for String {
    fn from(d: DatasetId) -> String {
        d.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn horizon(self) -> usize {
        match self {
            Split::Train => TRAIN_HORIZON,
            Split::Test => TEST_HORIZON,
        }
    }
}

/// Which environment mask file a video carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Gt,
    Sup,
    #[serde(rename = "self")]
    SelfSup,
}

impl MaskKind {
    pub fn file_name(self) -> &'static str {
        match self {
            MaskKind::Gt => "mask.png",
            MaskKind::Sup => "mask_sup.png",
            MaskKind::SelfSup => "mask_self.png",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub context: ContextKind,
    pub n_train: usize,
    pub n_test: usize,
    pub n_frames: usize,
    pub seed: u64,
    pub render: RenderConfig,
    pub scene: SceneConfig,
}

impl GenConfig {
    pub fn desk(context: ContextKind) -> Self {
        Self {
            context,
            n_train: 64,
            n_test: 16,
            n_frames: 100,
            seed: 0,
            render: RenderConfig::default(),
            scene: SceneConfig::new(context),
        }
    }

    /// Train and test seeds come from disjoint halves of a per-dataset block.
    pub fn video_seed(&self, split: Split, i: usize) -> u64 {
        let offset = match split {
            Split::Train => 0,
            Split::Test => 1 << 31,
        };
        (self.seed << 32) | (offset + i as u64)
    }

    pub fn videos(&self) -> Vec<(usize, Split, u64)> {
        let train = (0..self.n_train).map(|i| (i, Split::Train, self.video_seed(Split::Train, i)));
        let test = (0..self.n_test).map(|i| (self.n_train + i, Split::Test, self.video_seed(Split::Test, i)));
        train.chain(test).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub schema_version: u32,
    pub config: GenConfig,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Annotation {
    schema_version: u32,
    seed: u64,
    domain: Domain,
    context: EnvContext,
    image_width: usize,
    image_height: usize,
    radius: f64,
    boxes: Vec<Vec<[f64; 4]>>,
    states: Vec<Vec<[f64; 4]>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub trajectory: Trajectory,
    pub domain: Domain,
    pub frames: Vec<Image>,
    pub gt_mask: SemanticMask,
    pub bboxes: Vec<Vec<BBox>>,
    pub sup_mask: Option<SemanticMask>,
    pub self_mask: Option<SemanticMask>,
}

impl VideoRecord {
    pub fn generate(config: &GenConfig, domain: Domain, seed: u64) -> Result<Self> {
        let trajectory = rollout(&config.scene, seed, config.n_frames)?;
        Ok(Self::render(trajectory, domain, &config.render))
    }

    pub fn render(trajectory: Trajectory, domain: Domain, render: &RenderConfig) -> Self {
        let ctx = trajectory.context;
        let frames = trajectory.frames.iter().map(|f| domain.render(f, &ctx, render, trajectory.seed)).collect();
        let bboxes = trajectory.frames.iter().map(|f| bboxes(f)).collect();
        let gt_mask = render_gt_mask(&ctx, render);
        Self { trajectory, domain, frames, gt_mask, bboxes, sup_mask: None, self_mask: None }
    }

    pub fn context(&self) -> &EnvContext {
        &self.trajectory.context
    }

    pub fn mask(&self, kind: MaskKind) -> Option<&SemanticMask> {
        match kind {
            MaskKind::Gt => Some(&self.gt_mask),
            MaskKind::Sup => self.sup_mask.as_ref(),
            MaskKind::SelfSup => self.self_mask.as_ref(),
        }
    }
}

pub fn video_dir(dataset_dir: &Path, index: usize) -> PathBuf {
    dataset_dir.join(format!("video_{index:04}"))
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
        .expect("image buffer matches its dimensions")
        .save(path)
        .map_err(|source| DatasetError::Png { path: path.to_path_buf(), source })
}

pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|source| DatasetError::Png { path: path.to_path_buf(), source })?.to_rgb8();
    Ok(Image { width: img.width() as usize, height: img.height() as usize, data: img.into_raw() })
}

pub fn write_mask(path: &Path, mask: &SemanticMask) -> Result<()> {
    let data = mask.border.iter().map(|&b| if b { 255 } else { 0 }).collect();
    image::GrayImage::from_raw(mask.width as u32, mask.height as u32, data)
        .expect("mask buffer matches its dimensions")
        .save(path)
        .map_err(|source| DatasetError::Png { path: path.to_path_buf(), source })
}

pub fn read_mask(path: &Path) -> Result<SemanticMask> {
    let img = image::open(path).map_err(|source| DatasetError::Png { path: path.to_path_buf(), source })?.to_luma8();
    let (width, height) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    if let Some(v) = raw.iter().find(|&&v| v != 0 && v != 255) {
        return Err(DatasetError::Corrupt { path: path.to_path_buf(), msg: format!("mask value {v} is neither 0 nor 255") });
    }
    Ok(SemanticMask { width, height, border: raw.iter().map(|&v| v == 255).collect() })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| DatasetError::Json { path: path.to_path_buf(), source })?;
    std::fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| DatasetError::Json { path: path.to_path_buf(), source })
}

pub fn write_video(record: &VideoRecord, dir: &Path) -> Result<()> {
    let frames_dir = dir.join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(io_err(&frames_dir))?;
    for (t, img) in record.frames.iter().enumerate() {
        write_png(&frames_dir.join(format!("{t:03}.png")), img)?;
    }
    write_mask(&dir.join(MaskKind::Gt.file_name()), &record.gt_mask)?;
    for kind in [MaskKind::Sup, MaskKind::SelfSup] {
        if let Some(m) = record.mask(kind) {
            write_mask(&dir.join(kind.file_name()), m)?;
        }
    }
    let radius = record.trajectory.frames.first().and_then(|f| f.first()).map_or(0.0, |b| b.radius);
    let annot = Annotation {
        schema_version: SCHEMA_VERSION,
        seed: record.trajectory.seed,
        domain: record.domain,
        context: record.trajectory.context,
        image_width: record.gt_mask.width,
        image_height: record.gt_mask.height,
        radius,
        boxes: record.bboxes.iter().map(|f| f.iter().map(|b| b.to_array()).collect()).collect(),
        states: record
            .trajectory
            .frames
            .iter()
            .map(|f| f.iter().map(|b| [b.center.0, b.center.1, b.velocity.0, b.velocity.1]).collect())
            .collect(),
    };
    write_json(&dir.join("annot.json"), &annot)
}

pub fn read_video(dir: &Path) -> Result<VideoRecord> {
    let annot_path = dir.join("annot.json");
    let annot: Annotation = read_json(&annot_path)?;
    if annot.schema_version != SCHEMA_VERSION {
        return Err(DatasetError::Corrupt { path: annot_path, msg: format!("schema version {} (expected {SCHEMA_VERSION})", annot.schema_version) });
    }
    if annot.boxes.len() != annot.states.len() {
        return Err(DatasetError::Corrupt { path: annot_path, msg: "boxes and states differ in length".into() });
    }
    let mut frames = Vec::with_capacity(annot.states.len());
    for t in 0..annot.states.len() {
        let img = read_png(&dir.join("frames").join(format!("{t:03}.png")))?;
        if (img.width, img.height) != (annot.image_width, annot.image_height) {
            return Err(DatasetError::Corrupt { path: dir.join("frames"), msg: format!("frame {t} has size {}x{}", img.width, img.height) });
        }
        frames.push(img);
    }
    let gt_mask = read_mask(&dir.join(MaskKind::Gt.file_name()))?;
    let optional = |kind: MaskKind| {
        let p = dir.join(kind.file_name());
        if p.exists() {
            read_mask(&p).map(Some)
        } else {
            Ok(None)
        }
    };
    let frames_states = annot
        .states
        .iter()
        .map(|f| f.iter().map(|s| BallState { center: (s[0], s[1]), velocity: (s[2], s[3]), radius: annot.radius }).collect())
        .collect();
    Ok(VideoRecord {
        trajectory: Trajectory { context: annot.context, frames: frames_states, seed: annot.seed },
        domain: annot.domain,
        frames,
        gt_mask,
        bboxes: annot.boxes.iter().map(|f| f.iter().map(|&b| BBox::from_array(b)).collect()).collect(),
        sup_mask: optional(MaskKind::Sup)?,
        self_mask: optional(MaskKind::SelfSup)?,
    })
}

pub fn meta_path(root: &Path, context: ContextKind) -> PathBuf {
    root.join(context.as_str()).join("meta.json")
}

/// Generate every video of one dataset, `jobs`-way parallel.
pub fn generate(root: &Path, id: DatasetId, config: &GenConfig, jobs: usize) -> Result<Meta> {
    if config.context != id.context || config.scene.context != id.context {
        return Err(DatasetError::Invalid(format!("config context does not match dataset {id}")));
    }
    if config.n_frames < 1 {
        return Err(DatasetError::Invalid("n_frames must be at least 1".into()));
    }
    let dir = id.dir(root);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let videos = config.videos();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build().expect("thread pool");
    pool.install(|| {
        videos.par_iter().try_for_each(|&(i, _, seed)| {
            let rec = VideoRecord::generate(config, id.domain, seed)?;
            write_video(&rec, &video_dir(&dir, i))
        })
    })?;
    let meta = Meta {
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        train: videos.iter().filter(|v| v.1 == Split::Train).map(|v| v.0).collect(),
        test: videos.iter().filter(|v| v.1 == Split::Test).map(|v| v.0).collect(),
        seeds: videos.iter().map(|v| v.2).collect(),
    };
    let path = meta_path(root, id.context);
    if path.exists() {
        let existing: Meta = read_json(&path)?;
        if existing != meta {
            return Err(DatasetError::Invalid(format!(
                "{} was generated with a different configuration; both domains of a context must share it",
                path.display()
            )));
        }
    } else {
        write_json(&path, &meta)?;
    }
    Ok(meta)
}

pub fn read_meta(root: &Path, context: ContextKind) -> Result<Meta> {
    read_json(&meta_path(root, context))
}

/// A dataset loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub id: DatasetId,
    pub meta: Meta,
    pub train: Vec<VideoRecord>,
    pub test: Vec<VideoRecord>,
}

impl Dataset {
    pub fn load(root: &Path, id: DatasetId) -> Result<Self> {
        let meta = read_meta(root, id.context)?;
        let dir = id.dir(root);
        let load = |ids: &[usize]| ids.iter().map(|&i| read_video(&video_dir(&dir, i))).collect::<Result<Vec<_>>>();
        let (train, test) = (load(&meta.train)?, load(&meta.test)?);
        Ok(Self { id, meta, train, test })
    }

    pub fn split(&self, split: Split) -> &[VideoRecord] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Write a predicted mask beside every video's GT mask.
    pub fn store_masks(&mut self, root: &Path, kind: MaskKind, masks: &[(Split, usize, SemanticMask)]) -> Result<()> {
        let dir = self.id.dir(root);
        for (split, i, m) in masks {
            let index = match split {
                Split::Train => self.meta.train[*i],
                Split::Test => self.meta.test[*i],
            };
            write_mask(&video_dir(&dir, index).join(kind.file_name()), m)?;
            let rec = match split {
                Split::Train => &mut self.train[*i],
                Split::Test => &mut self.test[*i],
            };
            match kind {
                MaskKind::Gt => rec.gt_mask = m.clone(),
                MaskKind::Sup => rec.sup_mask = Some(m.clone()),
                MaskKind::SelfSup => rec.self_mask = Some(m.clone()),
            }
        }
        Ok(())
    }
}

/// Start frames of all stride-1 windows of `T_REF + horizon` frames.
pub fn window_starts(n_frames: usize, split: Split) -> std::ops::Range<usize> {
    let len = T_REF + split.horizon();
    0..(n_frames + 1).saturating_sub(len)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub ref_images: Vec<Image>,
    pub ref_boxes: Vec<Vec<BBox>>,
    pub target_boxes: Vec<Vec<BBox>>,
    pub mask: SemanticMask,
    pub width: f64,
    pub height: f64,
}

impl VideoSample {
    pub fn horizon(&self) -> usize {
        self.target_boxes.len()
    }

    pub fn n_balls(&self) -> usize {
        self.ref_boxes.first().map_or(0, Vec::len)
    }
}

pub fn sample_at(record: &VideoRecord, start: usize, horizon: usize, mask: MaskKind) -> Option<VideoSample> {
    let ctx = record.context();
    Some(VideoSample {
        ref_images: record.frames[start..start + T_REF].to_vec(),
        ref_boxes: record.bboxes[start..start + T_REF].to_vec(),
        target_boxes: record.bboxes[start + T_REF..start + T_REF + horizon].to_vec(),
        mask: record.mask(mask)?.clone(),
        width: ctx.width as f64,
        height: ctx.height as f64,
    })
}

pub fn make_windows(record: &VideoRecord, split: Split) -> Vec<VideoSample> {
    window_starts(record.frames.len(), split)
        .filter_map(|s| sample_at(record, s, split.horizon(), MaskKind::Gt))
        .collect()
}

pub fn flip_augment(sample: &VideoSample, horizontal: bool, vertical: bool) -> VideoSample {
    let flip_boxes = |frames: &[Vec<BBox>]| -> Vec<Vec<BBox>> {
        frames.iter().map(|f| f.iter().map(|b| b.flipped(horizontal, vertical, sample.width, sample.height)).collect()).collect()
    };
    VideoSample {
        ref_images: sample.ref_images.iter().map(|i| i.flipped(horizontal, vertical)).collect(),
        ref_boxes: flip_boxes(&sample.ref_boxes),
        target_boxes: flip_boxes(&sample.target_boxes),
        mask: sample.mask.flipped(horizontal, vertical),
        width: sample.width,
        height: sample.height,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_counts() {
        assert_eq!(window_starts(100, Split::Train).len(), 77);
        assert_eq!(window_starts(100, Split::Test).len(), 57);
        assert_eq!(window_starts(44, Split::Test).len(), 1);
        assert_eq!(window_starts(43, Split::Test).len(), 0);
        assert_eq!(window_starts(0, Split::Train).len(), 0);
    }

    #[test]
    fn dataset_ids_round_trip() {
        for id in DatasetId::ALL {
            assert_eq!(id.to_string().parse::<DatasetId>().unwrap(), id);
        }
        assert_eq!("blenb-split".parse::<DatasetId>().unwrap(), DatasetId::new(Domain::Blenlike, ContextKind::Split));
        assert!("realb-border".parse::<DatasetId>().is_err());
    }

    #[test]
    fn train_and_test_seeds_are_disjoint() {
        let cfg = GenConfig::desk(ContextKind::Border);
        let seeds: Vec<u64> = cfg.videos().iter().map(|v| v.2).collect();
        let mut dedup = seeds.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), seeds.len());
    }
}
