//! Synthetic toy images and non-IID node shards.
//!
//! Six shape classes are rendered on small grayscale grids. Classes 0–3 are
//! used for federated pre-training (0 is the "healthy" proxy, 1–3 the
//! "disease" proxies); classes 4–5 are held back for the downstream task.
//! Each node belongs to one of up to three acquisition domains that differ
//! in background intensity, noise level and background texture.

use std::hash::{Hash, Hasher};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ImageSample;
use crate::rng::{stream_rng, Stream};

pub const NUM_CLASSES: u32 = 6;
pub const HEALTHY_CLASS: u32 = 0;
pub const DISEASE_CLASSES: [u32; 3] = [1, 2, 3];
pub const PRETRAIN_CLASSES: [u32; 4] = [0, 1, 2, 3];
pub const EVAL_CLASSES: [u32; 2] = [4, 5];
/// Number of distinct acquisition domains among the training nodes.
pub const BASE_DOMAINS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Every domain contributes the same number of images over all classes.
    Equal,
    /// All but the last domain keep only `gamma` percent of their images.
    SizeSkew { gamma: f64 },
    /// All but the last domain hold only the healthy class; the last holds
    /// only disease classes.
    LabelSkew,
}

/// Per-domain rendering knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub intensity_offset: f64,
    pub noise_level: f64,
    pub texture_frequency: f64,
    pub contrast: f64,
}

impl DomainShift {
    pub fn preset(domain: usize) -> Self {
        match domain % BASE_DOMAINS {
            0 => Self { intensity_offset: 0.05, noise_level: 0.03, texture_frequency: 0.0, contrast: 1.0 },
            1 => Self { intensity_offset: 0.30, noise_level: 0.06, texture_frequency: 2.0, contrast: 0.7 },
            _ => Self { intensity_offset: 0.15, noise_level: 0.10, texture_frequency: 4.0, contrast: 0.85 },
        }
    }

    /// Domain of the downstream evaluation data, distinct from all training
    /// domains.
    pub fn downstream() -> Self {
        Self { intensity_offset: 0.20, noise_level: 0.07, texture_frequency: 3.0, contrast: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub nodes: usize,
    /// Images per domain before any skew; nodes sharing a domain split it.
    pub base_size: usize,
    pub image_size: usize,
    pub eval_size: usize,
}

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind, nodes: usize, base_size: usize) -> Self {
        Self { kind, nodes, base_size, image_size: 16, eval_size: 1000 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0 {
            return Err(Error::Config("scenario needs at least one node".into()));
        }
        if self.image_size < 4 {
            return Err(Error::Config("image_size must be at least 4".into()));
        }
        if let ScenarioKind::SizeSkew { gamma } = self.kind {
            if !(gamma > 0.0 && gamma <= 100.0) {
                return Err(Error::Config(format!("gamma must lie in (0, 100], got {gamma}")));
            }
        }
        for k in 0..self.nodes {
            if self.node_count(k) == 0 {
                return Err(Error::Config(format!("node {k} would receive no images")));
            }
        }
        if self.eval_size < 2 * EVAL_CLASSES.len() {
            return Err(Error::Config("eval_size too small for a stratified split".into()));
        }
        Ok(())
    }

    pub fn domain_count(&self) -> usize {
        self.nodes.min(BASE_DOMAINS)
    }

    pub fn node_domain(&self, node: usize) -> usize {
        node * self.domain_count() / self.nodes
    }

    fn nodes_in_domain(&self, domain: usize) -> usize {
        (0..self.nodes).filter(|&k| self.node_domain(k) == domain).count()
    }

    fn is_last_domain(&self, domain: usize) -> bool {
        domain + 1 == self.domain_count()
    }

    pub fn node_count(&self, node: usize) -> usize {
        let domain = self.node_domain(node);
        let domain_size = match self.kind {
            ScenarioKind::SizeSkew { gamma } if !self.is_last_domain(domain) => {
                (self.base_size as f64 * gamma / 100.0).round() as usize
            }
            _ => self.base_size,
        };
        domain_size / self.nodes_in_domain(domain)
    }

    pub fn node_counts(&self) -> Vec<usize> {
        (0..self.nodes).map(|k| self.node_count(k)).collect()
    }

    pub fn node_palette(&self, node: usize) -> Vec<u32> {
        match self.kind {
            ScenarioKind::LabelSkew if self.domain_count() > 1 => {
                if self.is_last_domain(self.node_domain(node)) {
                    DISEASE_CLASSES.to_vec()
                } else {
                    vec![HEALTHY_CLASS]
                }
            }
            _ => PRETRAIN_CLASSES.to_vec(),
        }
    }
}

fn soft(edge_distance: f64) -> f64 {
    (edge_distance + 0.5).clamp(0.0, 1.0)
}

/// Shape coverage in `[0, 1]` at offset `(dx, dy)` from the shape centre.
fn shape_mask(class: u32, dx: f64, dy: f64, scale: f64) -> f64 {
    let r = (dx * dx + dy * dy).sqrt();
    let bar = |along: f64, across: f64| soft(1.2 * scale - across.abs()).min(soft(5.0 * scale - along.abs()));
    match class {
        0 => soft(3.5 * scale - r),
        1 => bar(dx, dy),
        2 => bar(dy, dx),
        3 => soft(1.0 - (r - 4.5 * scale).abs()),
        4 => {
            let arm = |along: f64, across: f64| soft(1.0 - across.abs()).min(soft(4.5 * scale - along.abs()));
            arm(dx, dy).max(arm(dy, dx))
        }
        _ => {
            let s = std::f64::consts::FRAC_1_SQRT_2;
            let (u, v) = ((dx - dy) * s, (dx + dy) * s);
            let arm = |along: f64, across: f64| soft(1.0 - across.abs()).min(soft(4.5 * scale - along.abs()));
            arm(u, v).max(arm(v, u))
        }
    }
}

/// Renders one labeled image of `class` under `shift`.
pub fn render<R: Rng + ?Sized>(class: u32, size: usize, shift: &DomainShift, rng: &mut R) -> ImageSample {
    let mid = (size as f64 - 1.0) / 2.0;
    let cx = mid + rng.random_range(-2.0..=2.0);
    let cy = mid + rng.random_range(-2.0..=2.0);
    let scale = rng.random_range(0.8..=1.2) * size as f64 / 16.0;
    let strength = rng.random_range(0.7..=1.0) * shift.contrast;
    let phi = rng.random_range(0.0..std::f64::consts::PI);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let (sin, cos) = phi.sin_cos();

    let mut pixels = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let (x, y) = (c as f64, r as f64);
            let texture = if shift.texture_frequency > 0.0 {
                0.08 * (std::f64::consts::TAU * shift.texture_frequency * (x * cos + y * sin) / size as f64 + phase)
                    .sin()
            } else {
                0.0
            };
            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * shift.noise_level;
            let v = shift.intensity_offset + texture + strength * shape_mask(class, x - cx, y - cy, scale) + noise;
            pixels.push(v.clamp(0.0, 1.0));
        }
    }
    ImageSample { height: size, width: size, pixels, label: Some(class) }
}

/// The labeled shard of `node`. Labels are kept here; strip them with
/// [`ImageSample::without_label`] before federated training.
pub fn generate_node_dataset(spec: &ScenarioSpec, node: usize, seed: u64) -> Result<Vec<ImageSample>> {
    spec.validate()?;
    if node >= spec.nodes {
        return Err(Error::Config(format!("node {node} out of range for {} nodes", spec.nodes)));
    }
    let shift = DomainShift::preset(spec.node_domain(node));
    let palette = spec.node_palette(node);
    Ok((0..spec.node_count(node))
        .map(|i| {
            let mut rng = stream_rng(seed, Stream::NodeData, node as u64, i as u64);
            render(palette[i % palette.len()], spec.image_size, &shift, &mut rng)
        })
        .collect())
}

/// Labeled downstream data from classes unseen in pre-training, split 50/50
/// per class.
pub fn make_eval_split(spec: &ScenarioSpec, seed: u64) -> Result<(Vec<ImageSample>, Vec<ImageSample>)> {
    spec.validate()?;
    let shift = DomainShift::downstream();
    let mut by_class: Vec<Vec<ImageSample>> = vec![Vec::new(); EVAL_CLASSES.len()];
    for i in 0..spec.eval_size {
        let c = i % EVAL_CLASSES.len();
        let mut rng = stream_rng(seed, Stream::EvalData, 0, i as u64);
        by_class[c].push(render(EVAL_CLASSES[c], spec.image_size, &shift, &mut rng));
    }
    let mut rng = stream_rng(seed, Stream::EvalData, 1, 0);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for mut group in by_class {
        group.shuffle(&mut rng);
        let half = group.len() / 2;
        test.extend(group.split_off(half));
        train.extend(group);
    }
    Ok((train, test))
}

/// Content hash of an image's pixels (labels excluded).
pub fn fingerprint(image: &ImageSample) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    image.height.hash(&mut h);
    image.width.hash(&mut h);
    for p in &image.pixels {
        p.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Writes `count, H, W` as little-endian u64 followed by the pixels as
/// little-endian f64, row-major. Labels go to a sidecar text file with one
/// integer per line (`-1` for unlabeled).
pub fn export_dataset(images: &[ImageSample], data_path: &Path, labels_path: &Path) -> Result<()> {
    let (h, w) = images.first().map_or((0, 0), |i| (i.height, i.width));
    if images.iter().any(|i| i.height != h || i.width != w) {
        return Err(Error::Shape("images of mixed size cannot share a header".into()));
    }
    let mut out = BufWriter::new(std::fs::File::create(data_path)?);
    for v in [images.len() as u64, h as u64, w as u64] {
        out.write_all(&v.to_le_bytes())?;
    }
    for img in images {
        for p in &img.pixels {
            out.write_all(&p.to_le_bytes())?;
        }
    }
    out.flush()?;
    let mut labels = BufWriter::new(std::fs::File::create(labels_path)?);
    for img in images {
        writeln!(labels, "{}", img.label.map_or(-1, i64::from))?;
    }
    labels.flush()?;
    Ok(())
}

pub fn import_dataset(data_path: &Path, labels_path: Option<&Path>) -> Result<Vec<ImageSample>> {
    let mut input = BufReader::new(std::fs::File::open(data_path)?);
    let mut word = [0u8; 8];
    let mut header = [0usize; 3];
    for slot in &mut header {
        input.read_exact(&mut word)?;
        *slot = u64::from_le_bytes(word) as usize;
    }
    let [count, h, w] = header;
    let mut images = Vec::with_capacity(count);
    for _ in 0..count {
        let mut pixels = Vec::with_capacity(h * w);
        for _ in 0..h * w {
            input.read_exact(&mut word)?;
            pixels.push(f64::from_le_bytes(word));
        }
        images.push(ImageSample::new(h, w, pixels)?);
    }
    if let Some(path) = labels_path {
        let lines: Vec<String> = BufReader::new(std::fs::File::open(path)?).lines().collect::<Result<_, _>>()?;
        if lines.len() != count {
            return Err(Error::Shape(format!("{} labels for {count} images", lines.len())));
        }
        for (img, line) in images.iter_mut().zip(lines) {
            let v: i64 = line.trim().parse().map_err(|_| Error::Argument(format!("bad label line {line:?}")))?;
            img.label = u32::try_from(v).ok();
        }
    }
    Ok(images)
}
