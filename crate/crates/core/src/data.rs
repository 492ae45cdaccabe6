//! Datasets: the two synthetic 2-D benchmarks, MNIST in IDX format,
//! digit-addition triplets, the stochastic augmentation pipeline, and a
//! small binary cache.

use std::f64::consts::PI;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binio::Cursor;
use crate::error::{ensure, Error, Result};
use crate::rng::{self, SeededRng};
use crate::tensor::Tensor;

/// Side length of an MNIST digit.
pub const MNIST_SIDE: usize = 28;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `n × d`
    pub points: Tensor,
    /// Ground truth, used for evaluation only.
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub meta: DatasetMeta,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub source: String,
    pub seed: Option<u64>,
    pub normalization: String,
}

impl Dataset {
    pub fn new(
        points: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        meta: DatasetMeta,
    ) -> Result<Self> {
        ensure!(points.rank() == 2, "dataset points must be a matrix");
        ensure!(
            points.rows() == labels.len(),
            "{} points but {} labels",
            points.rows(),
            labels.len()
        );
        ensure!(points.is_finite(), "dataset points must be finite");
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Contract(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            points,
            labels,
            num_classes,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            points: self.points.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            meta: self.meta.clone(),
        }
    }
}

// ── synthetic 2-D data ──────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyKind {
    Moons,
    Circles,
}

/// Noise-free point of a moon at angle `theta ∈ [0, π]`.
pub fn moon_point(class: usize, theta: f64) -> [f64; 2] {
    match class {
        0 => [theta.cos(), theta.sin()],
        _ => [1.0 - theta.cos(), 0.5 - theta.sin()],
    }
}

fn toy_meta(source: &str, seed: u64) -> DatasetMeta {
    DatasetMeta {
        source: source.into(),
        seed: Some(seed),
        normalization: "none".into(),
    }
}

/// Two interleaving half circles, `n/2` points each (class 0 gets the odd one).
pub fn gen_moons(n: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    ensure!(n >= 2, "gen_moons needs n ≥ 2, got {n}");
    ensure!(noise_std >= 0.0, "noise_std must be nonnegative");
    let mut r = rng::seeded(seed);
    let n1 = n / 2;
    let mut labels: Vec<usize> = (0..n).map(|i| usize::from(i >= n - n1)).collect();
    rng::shuffle(&mut r, &mut labels);
    let mut data = Vec::with_capacity(2 * n);
    for &class in &labels {
        let theta = rng::uniform(&mut r, 0.0, PI);
        let p = moon_point(class, theta);
        data.push(p[0] + noise_std * rng::normal(&mut r));
        data.push(p[1] + noise_std * rng::normal(&mut r));
    }
    Dataset::new(
        Tensor::matrix(n, 2, data),
        labels,
        2,
        toy_meta("moons", seed),
    )
}

/// Two concentric circles of radius 1 (class 0) and `inner_scale` (class 1).
pub fn gen_circles(n: usize, noise_std: f64, inner_scale: f64, seed: u64) -> Result<Dataset> {
    ensure!(n >= 2, "gen_circles needs n ≥ 2, got {n}");
    ensure!(
        inner_scale > 0.0 && inner_scale < 1.0,
        "inner_scale must lie in (0, 1), got {inner_scale}"
    );
    ensure!(noise_std >= 0.0, "noise_std must be nonnegative");
    let mut r = rng::seeded(seed);
    let n1 = n / 2;
    let mut labels: Vec<usize> = (0..n).map(|i| usize::from(i >= n - n1)).collect();
    rng::shuffle(&mut r, &mut labels);
    let mut data = Vec::with_capacity(2 * n);
    for &class in &labels {
        let angle = rng::uniform(&mut r, 0.0, 2.0 * PI);
        let radius = if class == 0 { 1.0 } else { inner_scale };
        data.push(radius * angle.cos() + noise_std * rng::normal(&mut r));
        data.push(radius * angle.sin() + noise_std * rng::normal(&mut r));
    }
    Dataset::new(
        Tensor::matrix(n, 2, data),
        labels,
        2,
        toy_meta("circles", seed),
    )
}

// ── IDX ─────────────────────────────────────────────────────────────

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4-byte slice")))
        .ok_or_else(|| Error::Format {
            offset: offset as u64,
            detail: "unexpected end of header".into(),
        })
}

fn check_magic(bytes: &[u8], want: u32, what: &str) -> Result<()> {
    let magic = be_u32(bytes, 0)?;
    if magic != want {
        return Err(Error::Format {
            offset: 0,
            detail: format!("{what} file has magic {magic:#010x}, expected {want:#010x}"),
        });
    }
    Ok(())
}

/// Parsed IDX image file: `count × rows × cols` raw bytes.
struct IdxImages {
    count: usize,
    rows: usize,
    cols: usize,
    pixels: Vec<u8>,
}

fn parse_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IDX_IMAGES, "image")?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    let want = count * rows * cols;
    if body.len() != want {
        return Err(Error::Format {
            offset: 16 + body.len().min(want) as u64,
            detail: format!(
                "header declares {want} pixel bytes, file holds {}",
                body.len()
            ),
        });
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body.to_vec(),
    })
}

fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, IDX_LABELS, "label")?;
    let count = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::Format {
            offset: 8 + body.len().min(count) as u64,
            detail: format!("header declares {count} labels, file holds {}", body.len()),
        });
    }
    if let Some(pos) = body.iter().position(|&l| l > 9) {
        return Err(Error::Format {
            offset: 8 + pos as u64,
            detail: format!("label {} outside 0..=9", body[pos]),
        });
    }
    Ok(body.to_vec())
}

/// Loads an IDX image/label pair (optionally gzip-compressed). Pixels are
/// mapped to `[−1, 1]` by `x/127.5 − 1`.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = parse_images(&read_maybe_gz(images_path)?)?;
    let labels = parse_labels(&read_maybe_gz(labels_path)?)?;
    if images.count != labels.len() {
        return Err(Error::Format {
            offset: 4,
            detail: format!("{} images but {} labels", images.count, labels.len()),
        });
    }
    let d = images.rows * images.cols;
    let points = Tensor::matrix(
        images.count,
        d,
        images
            .pixels
            .iter()
            .map(|&p| f64::from(p) / 127.5 - 1.0)
            .collect(),
    );
    Dataset::new(
        points,
        labels.into_iter().map(usize::from).collect(),
        10,
        DatasetMeta {
            source: images_path.display().to_string(),
            seed: None,
            normalization: "x/127.5-1".into(),
        },
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MnistSplit {
    Train,
    Test,
}

/// Loads a split from `root`, accepting plain or `.gz` file names.
pub fn load_mnist(root: &Path, split: MnistSplit) -> Result<Dataset> {
    let prefix = match split {
        MnistSplit::Train => "train",
        MnistSplit::Test => "t10k",
    };
    let find = |stem: String| {
        let gz = root.join(format!("{stem}.gz"));
        if gz.exists() {
            gz
        } else {
            root.join(stem)
        }
    };
    load_mnist_idx(
        &find(format!("{prefix}-images-idx3-ubyte")),
        &find(format!("{prefix}-labels-idx1-ubyte")),
    )
}

fn write_bytes(path: &Path, bytes: &[u8], gzip: bool) -> Result<()> {
    let mut f = fs::File::create(path)?;
    if gzip {
        let mut enc = GzEncoder::new(f, Compression::default());
        enc.write_all(bytes)?;
        enc.finish()?;
    } else {
        f.write_all(bytes)?;
    }
    Ok(())
}

/// Writes raw images (`count × rows × cols` bytes) in IDX format.
pub fn write_idx_images(
    path: &Path,
    rows: usize,
    cols: usize,
    pixels: &[u8],
    gzip: bool,
) -> Result<()> {
    ensure!(
        rows * cols > 0 && pixels.len().is_multiple_of(rows * cols),
        "pixel buffer is not a whole number of images"
    );
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend(IDX_IMAGES.to_be_bytes());
    out.extend(((pixels.len() / (rows * cols)) as u32).to_be_bytes());
    out.extend((rows as u32).to_be_bytes());
    out.extend((cols as u32).to_be_bytes());
    out.extend(pixels);
    write_bytes(path, &out, gzip)
}

pub fn write_idx_labels(path: &Path, labels: &[u8], gzip: bool) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend(IDX_LABELS.to_be_bytes());
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend(labels);
    write_bytes(path, &out, gzip)
}

// ── addition triplets ───────────────────────────────────────────────

/// All `(a, b)` with `a, b ∈ 0..=9` and `a + b ≤ 9`.
pub fn admissible_pairs() -> Vec<(usize, usize)> {
    (0..10)
        .flat_map(|a| (0..10 - a).map(move |b| (a, b)))
        .collect()
}

/// Images grouped in consecutive rows of three with `label₁ + label₂ = label₃`.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletSet {
    /// `3k × d`
    pub images: Tensor,
    /// Hidden digit labels, `3k`.
    pub labels: Vec<usize>,
    /// Row indices of the source dataset, `3k`, never repeated.
    pub source: Vec<usize>,
}

impl TripletSet {
    pub fn len(&self) -> usize {
        self.labels.len() / 3
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn triplet(&self, t: usize) -> (usize, usize, usize) {
        (
            self.labels[3 * t],
            self.labels[3 * t + 1],
            self.labels[3 * t + 2],
        )
    }

    /// Rows of the given triplets, in order, three per triplet.
    pub fn rows_of(&self, triplets: &[usize]) -> Vec<usize> {
        triplets.iter().flat_map(|&t| 3 * t..3 * t + 3).collect()
    }

    /// Permutes whole triplets; rows inside a triplet keep their order.
    pub fn shuffle(&mut self, rng: &mut SeededRng) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        rng::shuffle(rng, &mut order);
        let rows = self.rows_of(&order);
        self.images = self.images.select_rows(&rows);
        self.labels = rows.iter().map(|&r| self.labels[r]).collect();
        self.source = rows.iter().map(|&r| self.source[r]).collect();
    }

    pub fn as_dataset(&self) -> Dataset {
        Dataset {
            points: self.images.clone(),
            labels: self.labels.clone(),
            num_classes: 10,
            meta: DatasetMeta {
                source: "addition-triplets".into(),
                seed: None,
                normalization: "x/127.5-1".into(),
            },
        }
    }
}

/// Draws `count` triplets: `(a, b)` uniform over the admissible pairs and
/// images of classes `a`, `b`, `a + b` taken without replacement.
pub fn make_addition_triplets(ds: &Dataset, count: usize, seed: u64) -> Result<TripletSet> {
    ensure!(
        ds.num_classes >= 10,
        "addition triplets need digit labels 0..=9"
    );
    ensure!(
        ds.len() >= 3 * count,
        "{count} triplets need {} images, dataset has {}",
        3 * count,
        ds.len()
    );
    let mut r = rng::seeded(seed);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); 10];
    for (i, &l) in ds.labels.iter().enumerate() {
        if l < 10 {
            pools[l].push(i);
        }
    }
    for pool in &mut pools {
        rng::shuffle(&mut r, pool);
    }
    let pairs = admissible_pairs();
    let mut plan = Vec::with_capacity(count);
    let mut needed = [0usize; 10];
    for _ in 0..count {
        let (a, b) = pairs[r.random_range(0..pairs.len())];
        for digit in [a, b, a + b] {
            needed[digit] += 1;
        }
        plan.push((a, b));
    }
    if let Some(class) = (0..10).find(|&k| needed[k] > pools[k].len()) {
        return Err(Error::Exhausted {
            class,
            needed: needed[class],
            available: pools[class].len(),
        });
    }
    let mut source = Vec::with_capacity(3 * count);
    let mut labels = Vec::with_capacity(3 * count);
    for (a, b) in plan {
        for digit in [a, b, a + b] {
            source.push(pools[digit].pop().expect("counts checked above"));
            labels.push(digit);
        }
    }
    Ok(TripletSet {
        images: ds.points.select_rows(&source),
        labels,
        source,
    })
}

// ── augmentation ────────────────────────────────────────────────────

/// How rows of a batch are laid out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    Flat,
    Image {
        height: usize,
        width: usize,
        channels: usize,
    },
}

impl Layout {
    pub fn mnist() -> Self {
        Layout::Image {
            height: MNIST_SIDE,
            width: MNIST_SIDE,
            channels: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub noise_std: f64,
    /// Maximum pixel shift of the pad-and-shift crop; 0 disables it.
    #[serde(default)]
    pub crop_max_shift: usize,
    #[serde(default)]
    pub jitter_prob: f64,
    #[serde(default = "default_jitter_strength")]
    pub jitter_strength: f64,
    #[serde(default)]
    pub grayscale_prob: f64,
}

fn default_jitter_strength() -> f64 {
    0.4
}

impl AugmentConfig {
    pub fn toy() -> Self {
        Self {
            noise_std: 0.03,
            crop_max_shift: 0,
            jitter_prob: 0.0,
            jitter_strength: default_jitter_strength(),
            grayscale_prob: 0.0,
        }
    }

    pub fn addition() -> Self {
        Self {
            noise_std: 0.3,
            crop_max_shift: 4,
            jitter_prob: 0.1,
            jitter_strength: default_jitter_strength(),
            grayscale_prob: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.noise_std >= 0.0,
            "augment noise_std must be nonnegative"
        );
        ensure!(
            self.jitter_strength >= 0.0,
            "augment jitter_strength must be nonnegative"
        );
        for (name, p) in [
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
        ] {
            ensure!(
                (0.0..=1.0).contains(&p),
                "augment {name} must lie in [0, 1], got {p}"
            );
        }
        Ok(())
    }

    fn needs_image(&self) -> bool {
        self.crop_max_shift > 0 || self.jitter_prob > 0.0 || self.grayscale_prob > 0.0
    }
}

/// Applies the stochastic view transform row by row.
pub fn augment(
    batch: &Tensor,
    cfg: &AugmentConfig,
    layout: Layout,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    cfg.validate()?;
    let mut out = batch.clone();
    if let Layout::Image {
        height,
        width,
        channels,
    } = layout
    {
        ensure!(
            batch.cols() == height * width * channels,
            "image layout {height}×{width}×{channels} does not match row length {}",
            batch.cols()
        );
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            if rng.random::<f64>() < cfg.jitter_prob {
                jitter(row, cfg.jitter_strength, rng);
            }
            if channels == 3 && rng.random::<f64>() < cfg.grayscale_prob {
                grayscale(row, height * width);
            }
            if cfg.crop_max_shift > 0 {
                shift_crop(row, height, width, channels, cfg.crop_max_shift, rng);
            }
        }
    } else {
        ensure!(
            !cfg.needs_image(),
            "crop, jitter and grayscale need image data"
        );
    }
    if cfg.noise_std > 0.0 {
        for v in out.data_mut() {
            *v += cfg.noise_std * rng::normal(rng);
        }
    }
    Ok(out)
}

/// Brightness (additive) then contrast (multiplicative about the mean),
/// both drawn from `±strength`, clamped back to `[−1, 1]`.
fn jitter(row: &mut [f64], strength: f64, rng: &mut SeededRng) {
    let brightness = rng::uniform(rng, -strength, strength);
    let contrast = rng::uniform(rng, 1.0 - strength, 1.0 + strength);
    let mean = row.iter().sum::<f64>() / row.len() as f64;
    for v in row.iter_mut() {
        *v = ((*v - mean) * contrast + mean + brightness).clamp(-1.0, 1.0);
    }
}

/// Channel-planar RGB to luminance, replicated over the three planes.
fn grayscale(row: &mut [f64], plane: usize) {
    for p in 0..plane {
        let y = 0.299 * row[p] + 0.587 * row[plane + p] + 0.114 * row[2 * plane + p];
        row[p] = y;
        row[plane + p] = y;
        row[2 * plane + p] = y;
    }
}

/// Pads by `max_shift` with the background value −1 and crops back to the
/// original size at a random offset.
fn shift_crop(
    row: &mut [f64],
    height: usize,
    width: usize,
    channels: usize,
    max_shift: usize,
    rng: &mut SeededRng,
) {
    let s = max_shift as i64;
    let dy = rng.random_range(-s..=s);
    let dx = rng.random_range(-s..=s);
    if dx == 0 && dy == 0 {
        return;
    }
    let src = row.to_vec();
    let plane = height * width;
    for c in 0..channels {
        for y in 0..height as i64 {
            for x in 0..width as i64 {
                let (sy, sx) = (y + dy, x + dx);
                let inside = sy >= 0 && sy < height as i64 && sx >= 0 && sx < width as i64;
                row[c * plane + (y as usize) * width + x as usize] = if inside {
                    src[c * plane + (sy as usize) * width + sx as usize]
                } else {
                    -1.0
                };
            }
        }
    }
}

// ── binary cache ────────────────────────────────────────────────────

const CACHE_MAGIC: &[u8; 8] = b"GEDIDSET";
const CACHE_VERSION: u32 = 1;

/// Layout (little endian): magic, version u32, n u64, d u64, classes u64,
/// seed flag u8 + seed u64, meta JSON (u64 length + bytes), n labels as
/// u32, n·d values as f64, crc32 of everything before it.
pub fn save_cache(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(64 + ds.points.len() * 8);
    out.extend(CACHE_MAGIC);
    out.extend(CACHE_VERSION.to_le_bytes());
    out.extend((ds.len() as u64).to_le_bytes());
    out.extend((ds.dim() as u64).to_le_bytes());
    out.extend((ds.num_classes as u64).to_le_bytes());
    out.push(u8::from(ds.meta.seed.is_some()));
    out.extend(ds.meta.seed.unwrap_or(0).to_le_bytes());
    let meta = serde_json::to_vec(&ds.meta).expect("metadata serializes");
    out.extend((meta.len() as u64).to_le_bytes());
    out.extend(&meta);
    for &l in &ds.labels {
        out.extend((l as u32).to_le_bytes());
    }
    for &v in ds.points.data() {
        out.extend(v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend(crc.to_le_bytes());
    fs::write(path, out)?;
    Ok(())
}

pub fn load_cache(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    if bytes.len() < CACHE_MAGIC.len() + 4 {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            detail: "file too short for a dataset cache".into(),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let mut c = Cursor::new(body);
    if c.take(8)? != CACHE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "not a dataset cache".into(),
        });
    }
    let version = c.u32()?;
    if version != CACHE_VERSION {
        return Err(Error::Format {
            offset: 8,
            detail: format!("unsupported cache version {version}"),
        });
    }
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Format {
            offset: body.len() as u64,
            detail: "checksum mismatch".into(),
        });
    }
    let n = c.u64()? as usize;
    let d = c.u64()? as usize;
    let classes = c.u64()? as usize;
    let _has_seed = c.take(1)?;
    let _seed = c.u64()?;
    let meta_len = c.u64()? as usize;
    let meta: DatasetMeta =
        serde_json::from_slice(c.take(meta_len)?).map_err(|e| Error::Format {
            offset: c.pos as u64,
            detail: format!("metadata: {e}"),
        })?;
    let labels = (0..n)
        .map(|_| c.u32().map(|l| l as usize))
        .collect::<Result<Vec<_>>>()?;
    let values = (0..n * d).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
    if c.pos != body.len() {
        return Err(Error::Format {
            offset: c.pos as u64,
            detail: "trailing bytes after payload".into(),
        });
    }
    Dataset::new(Tensor::matrix(n, d, values), labels, classes, meta)
}
