//! Dataset construction and batch serving.
//!
//! `build_dataset` ingests a directory of RGB images and materializes the
//! paired grayscale/edge training set; `synth_faces` generates a procedural
//! face-like corpus so tests and smoke runs need no external download. Both
//! paths share the same conversion code: synthetic faces are written as RGB
//! files and ingested like any other corpus.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imageops::{
    load_image, resize_bilinear, save_png, sobel_edges, to_grayscale, to_model_range, ImageBuffer,
};
use crate::ndtensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Eval => write!(f, "eval"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            other => Err(Error::invalid("split", format!("unknown split {other:?}"))),
        }
    }
}

/// One paired sample. Paths are stored relative to the manifest's directory
/// unless absolute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub rgb_path: String,
    pub gray_path: String,
    pub edge_path: String,
    pub split: Split,
}

/// First line of the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestHeader {
    image_side: u32,
    source_fingerprint: String,
    skipped: u32,
}

/// Index of paired {rgb, grayscale, edge} samples with split assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub image_side: u32,
    /// Content hash of the sorted source file listing.
    pub source_fingerprint: String,
    /// Source files that failed to decode and were skipped.
    pub skipped: u32,
    pub records: Vec<ManifestRecord>,
    root: PathBuf,
}

impl DatasetManifest {
    /// Directory that relative record paths resolve against.
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolve(&self, recorded: &str) -> PathBuf {
        let p = Path::new(recorded);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn records_for(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Serializes as JSON Lines: a header object, then one record per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&ManifestHeader {
            image_side: self.image_side,
            source_fingerprint: self.source_fingerprint.clone(),
            skipped: self.skipped,
        })?;
        out.push('\n');
        for rec in &self.records {
            out.push_str(&serde_json::to_string(rec)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = self.to_jsonl()?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(format!("creating {parent:?}"), e))?;
        }
        std::fs::write(path, body).map_err(|e| Error::io(format!("writing {path:?}"), e))
    }

    /// Loads and validates a manifest: ids must be unique and every
    /// referenced file must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let body =
            std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {path:?}"), e))?;
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let mut lines = body.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Manifest(format!("{path:?} is empty")))?;
        let header: ManifestHeader = serde_json::from_str(header_line)?;
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| Error::Manifest(format!("{path:?} line {}: {e}", i + 2)))?;
            records.push(rec);
        }
        let manifest = DatasetManifest {
            image_side: header.image_side,
            source_fingerprint: header.source_fingerprint,
            skipped: header.skipped,
            records,
            root,
        };
        let mut seen = std::collections::HashSet::new();
        for rec in &manifest.records {
            if !seen.insert(rec.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate id {:?}", rec.id)));
            }
            for p in [&rec.rgb_path, &rec.gray_path, &rec.edge_path] {
                let full = manifest.resolve(p);
                if !full.exists() {
                    return Err(Error::Manifest(format!(
                        "record {:?} references missing file {full:?}",
                        rec.id
                    )));
                }
            }
        }
        Ok(manifest)
    }
}

/// Options for [`build_dataset`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BuildOptions {
    pub image_side: u32,
    /// Fraction of records assigned to the train split.
    pub split_ratio: f64,
    /// Seeded random fraction of the source corpus to ingest, in (0, 1].
    pub subset_fraction: f64,
    pub seed: u64,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            image_side: 64,
            split_ratio: 0.95,
            subset_fraction: 1.0,
            seed: 0,
        }
    }
}

/// The grayscale/edge derivation for one source image; shared by dataset
/// building and its recomputation checks.
pub fn derive_pair(rgb: &ImageBuffer, image_side: u32) -> Result<(ImageBuffer, ImageBuffer)> {
    let gray = to_grayscale(rgb);
    let gray = resize_bilinear(&gray, image_side, image_side)?;
    let edge = sobel_edges(&gray)?;
    Ok((gray, edge))
}

/// Ingests `src_dir`, writing resized grayscale and edge PNGs plus a
/// `manifest.jsonl` under `out_dir`. Undecodable files are skipped and
/// counted; an empty result is an error.
pub fn build_dataset(src_dir: &Path, out_dir: &Path, opts: &BuildOptions) -> Result<DatasetManifest> {
    const OP: &str = "build_dataset";
    if !(0.0 < opts.subset_fraction && opts.subset_fraction <= 1.0) {
        return Err(Error::invalid(
            OP,
            format!("subset_fraction {} outside (0, 1]", opts.subset_fraction),
        ));
    }
    if !(0.0..=1.0).contains(&opts.split_ratio) {
        return Err(Error::invalid(
            OP,
            format!("split_ratio {} outside [0, 1]", opts.split_ratio),
        ));
    }
    if opts.image_side < 3 {
        return Err(Error::invalid(OP, "image_side must be at least 3"));
    }

    let mut sources: Vec<PathBuf> = std::fs::read_dir(src_dir)
        .map_err(|e| Error::io(format!("listing {src_dir:?}"), e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    sources.sort();
    if sources.is_empty() {
        return Err(Error::Manifest(format!("no files found in {src_dir:?}")));
    }

    let mut hasher = Sha256::new();
    for p in &sources {
        hasher.update(p.file_name().unwrap_or_default().as_encoded_bytes());
        hasher.update(b"\n");
    }
    let source_fingerprint = hex_string(&hasher.finalize());

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let selected: Vec<PathBuf> = if opts.subset_fraction < 1.0 {
        let take = ((sources.len() as f64 * opts.subset_fraction).round() as usize).max(1);
        let mut shuffled = sources.clone();
        shuffled.shuffle(&mut rng);
        shuffled.truncate(take);
        shuffled.sort();
        shuffled
    } else {
        sources
    };

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {out_dir:?}"), e))?;

    let side = opts.image_side;
    let out = out_dir.to_path_buf();
    let converted: Vec<Option<ManifestRecord>> = crate::thread_pool().install(|| {
        selected
            .par_iter()
            .enumerate()
            .map(|(i, src)| {
                let rgb = load_image(src).ok()?;
                let (gray, edge) = derive_pair(&rgb, side).ok()?;
                let id = format!("img_{i:06}");
                let gray_path = format!("gray/{id}.png");
                let edge_path = format!("edge/{id}.png");
                save_png(&gray, &out.join(&gray_path)).ok()?;
                save_png(&edge, &out.join(&edge_path)).ok()?;
                let rgb_path = match src.strip_prefix(&out) {
                    Ok(rel) => rel.to_string_lossy().into_owned(),
                    Err(_) => src.to_string_lossy().into_owned(),
                };
                Some(ManifestRecord {
                    id,
                    rgb_path,
                    gray_path,
                    edge_path,
                    split: Split::Train, // assigned below
                })
            })
            .collect()
    });

    let mut records = Vec::new();
    let mut skipped = 0u32;
    for item in converted {
        match item {
            Some(rec) => records.push(rec),
            None => skipped += 1,
        }
    }
    if records.is_empty() {
        return Err(Error::Manifest(format!(
            "no decodable images in {src_dir:?} ({skipped} skipped)"
        )));
    }

    // Seeded split assignment on the (deterministic) record order.
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut rng);
    let train_count = (records.len() as f64 * opts.split_ratio).round() as usize;
    for (rank, &idx) in order.iter().enumerate() {
        records[idx].split = if rank < train_count {
            Split::Train
        } else {
            Split::Eval
        };
    }

    let manifest = DatasetManifest {
        image_side: side,
        source_fingerprint,
        skipped,
        records,
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Synthetic face corpus
// ---------------------------------------------------------------------------

/// Procedurally drawn face-like RGB image: filled background, elliptical
/// head, two eyes, a mouth, and sometimes a hair arc, all with seeded
/// position/scale/intensity jitter. Rendered at twice the target side so the
/// ingest resize smooths shape boundaries.
fn draw_face(rng: &mut ChaCha8Rng, render_side: u32) -> ImageBuffer {
    let s = render_side as i64;
    let sf = render_side as f64;
    let jitter = |rng: &mut ChaCha8Rng, base: f64, spread: f64| base + (rng.random::<f64>() - 0.5) * 2.0 * spread;

    let bg = rng.random_range(30u8..=120);
    let bg_rgb = [
        bg.saturating_add(rng.random_range(0..12)),
        bg,
        bg.saturating_add(rng.random_range(0..12)),
    ];
    let mut px = Vec::with_capacity((s * s * 3) as usize);
    for _ in 0..s * s {
        px.extend_from_slice(&bg_rgb);
    }
    let mut img = ImageBuffer::new(render_side, render_side, 3, px).expect("valid buffer");

    let fill_ellipse = |img: &mut ImageBuffer, cx: f64, cy: f64, rx: f64, ry: f64, color: [u8; 3]| {
        let mut px = img.pixels().to_vec();
        let x_lo = ((cx - rx).floor().max(0.0)) as i64;
        let x_hi = ((cx + rx).ceil().min(sf - 1.0)) as i64;
        let y_lo = ((cy - ry).floor().max(0.0)) as i64;
        let y_hi = ((cy + ry).ceil().min(sf - 1.0)) as i64;
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    let at = ((y * s + x) * 3) as usize;
                    px[at..at + 3].copy_from_slice(&color);
                }
            }
        }
        *img = ImageBuffer::new(render_side, render_side, 3, px).expect("valid buffer");
    };

    let cx = jitter(rng, sf * 0.5, sf * 0.06);
    let cy = jitter(rng, sf * 0.52, sf * 0.05);
    let rx = jitter(rng, sf * 0.27, sf * 0.05);
    let ry = jitter(rng, sf * 0.36, sf * 0.05);
    let skin = rng.random_range(150u8..=230);
    let skin_rgb = [skin, skin.saturating_sub(rng.random_range(0..25)), skin.saturating_sub(rng.random_range(0..40))];

    // Hair: a darker ellipse behind the upper head, present most of the time.
    if rng.random::<f64>() < 0.8 {
        let hair = rng.random_range(10u8..=70);
        fill_ellipse(
            &mut img,
            cx,
            cy - ry * 0.35,
            rx * 1.15,
            ry * 0.75,
            [hair, hair, hair],
        );
    }
    fill_ellipse(&mut img, cx, cy, rx, ry, skin_rgb);

    let eye_dy = cy - ry * jitter(rng, 0.25, 0.06);
    let eye_dx = rx * jitter(rng, 0.45, 0.08);
    let eye_r = jitter(rng, sf * 0.035, sf * 0.012).max(1.5);
    let eye_shade = rng.random_range(5u8..=60);
    let eye_rgb = [eye_shade, eye_shade, eye_shade];
    fill_ellipse(&mut img, cx - eye_dx, eye_dy, eye_r, eye_r, eye_rgb);
    fill_ellipse(&mut img, cx + eye_dx, eye_dy, eye_r, eye_r, eye_rgb);

    let mouth_w = rx * jitter(rng, 0.5, 0.12);
    let mouth_h = jitter(rng, sf * 0.02, sf * 0.008).max(1.2);
    let mouth_y = cy + ry * jitter(rng, 0.45, 0.08);
    let mouth_shade = rng.random_range(20u8..=90);
    fill_ellipse(
        &mut img,
        cx,
        mouth_y,
        mouth_w,
        mouth_h,
        [mouth_shade.saturating_add(40), mouth_shade, mouth_shade],
    );

    // Nose: occasional short vertical stroke.
    if rng.random::<f64>() < 0.6 {
        let nose_shade = skin.saturating_sub(rng.random_range(30..70));
        fill_ellipse(
            &mut img,
            cx,
            cy + ry * 0.1,
            sf * 0.015,
            ry * 0.12,
            [nose_shade, nose_shade, nose_shade],
        );
    }
    img
}

/// Writes `n` deterministic synthetic RGB faces plus derived grayscale/edge
/// pairs and a manifest under `out_dir`. The default 0.95 train split is
/// applied.
pub fn synth_faces(n: usize, image_side: u32, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    synth_faces_with(n, image_side, seed, out_dir, 0.95)
}

/// [`synth_faces`] with an explicit split ratio.
pub fn synth_faces_with(
    n: usize,
    image_side: u32,
    seed: u64,
    out_dir: &Path,
    split_ratio: f64,
) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::invalid("synth_faces", "n must be >= 1"));
    }
    let rgb_dir = out_dir.join("rgb");
    std::fs::create_dir_all(&rgb_dir).map_err(|e| Error::io(format!("creating {rgb_dir:?}"), e))?;
    let render_side = image_side * 2;
    crate::thread_pool().install(|| -> Result<()> {
        (0..n).into_par_iter().try_for_each(|i| {
            // One rng per image keyed by (seed, index): image i is identical
            // no matter how many siblings are drawn.
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E3779B97F4A7C15));
            let face = draw_face(&mut rng, render_side);
            save_png(&face, &rgb_dir.join(format!("face_{i:06}.png")))
        })
    })?;
    build_dataset(
        &rgb_dir,
        out_dir,
        &BuildOptions {
            image_side,
            split_ratio,
            subset_fraction: 1.0,
            seed,
        },
    )
}

// ---------------------------------------------------------------------------
// Batch iteration
// ---------------------------------------------------------------------------

/// Aligned pair of edge/grayscale tensors in `[−1, 1]`.
#[derive(Debug)]
pub struct Batch {
    pub edges: Tensor<f32>,
    pub grays: Tensor<f32>,
    pub ids: Vec<String>,
}

/// Deterministic shuffled batches over one split. The permutation is a pure
/// function of `(shuffle_seed, epoch)`; the final short batch is included.
pub fn iterate_batches<'a>(
    manifest: &'a DatasetManifest,
    split: Split,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: u64,
) -> Result<BatchIter<'a>> {
    if batch_size == 0 {
        return Err(Error::invalid("iterate_batches", "batch_size must be >= 1"));
    }
    let records = manifest.records_for(split);
    if records.is_empty() {
        return Err(Error::Manifest(format!("split {split} has no records")));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(shuffle_seed ^ epoch.wrapping_mul(0x9E3779B97F4A7C15));
    order.shuffle(&mut rng);
    Ok(BatchIter {
        manifest,
        records,
        order,
        batch_size,
        cursor: 0,
    })
}

pub struct BatchIter<'a> {
    manifest: &'a DatasetManifest,
    records: Vec<&'a ManifestRecord>,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl BatchIter<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    /// Skips `n` batches without loading their images (resume support).
    pub fn advance(&mut self, n: usize) {
        self.cursor = (self.cursor + n * self.batch_size).min(self.order.len());
    }

    fn load_batch(&self, indices: &[usize]) -> Result<Batch> {
        let side = self.manifest.image_side as usize;
        let n = indices.len();
        let mut edges = Vec::with_capacity(n * side * side);
        let mut grays = Vec::with_capacity(n * side * side);
        let mut ids = Vec::with_capacity(n);
        for &i in indices {
            let rec = self.records[i];
            let edge = load_image(&self.manifest.resolve(&rec.edge_path))?;
            let gray = load_image(&self.manifest.resolve(&rec.gray_path))?;
            for (img, dst, what) in [(&edge, &mut edges, "edge"), (&gray, &mut grays, "gray")] {
                if img.channels() != 1
                    || img.width() as usize != side
                    || img.height() as usize != side
                {
                    return Err(Error::Manifest(format!(
                        "{what} image for {:?} is not {side}x{side} single-channel",
                        rec.id
                    )));
                }
                let t = to_model_range(img);
                dst.extend_from_slice(&t.data());
            }
            ids.push(rec.id.clone());
        }
        Ok(Batch {
            edges: Tensor::from_vec(vec![n, 1, side, side], edges),
            grays: Tensor::from_vec(vec![n, 1, side, side], grays),
            ids,
        })
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let slice = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        Some(self.load_batch(&slice))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageops::encode_png;
    use std::collections::HashSet;

    /// Tiny RGB corpus with per-image variation.
    fn write_corpus(dir: &Path, n: usize) {
        std::fs::create_dir_all(dir).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for i in 0..n {
            let px: Vec<u8> = (0..12 * 12 * 3).map(|_| rng.random::<u8>()).collect();
            let img = ImageBuffer::new(12, 12, 3, px).unwrap();
            save_png(&img, &dir.join(format!("src_{i:04}.png"))).unwrap();
        }
    }

    fn opts(side: u32, split: f64, subset: f64, seed: u64) -> BuildOptions {
        BuildOptions {
            image_side: side,
            split_ratio: split,
            subset_fraction: subset,
            seed,
        }
    }

    #[test]
    fn build_assigns_split_counts() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("src");
        write_corpus(&src, 100);
        let m = build_dataset(&src, &tmp.path().join("out"), &opts(8, 0.9, 1.0, 7)).unwrap();
        assert_eq!(m.records.len(), 100);
        assert_eq!(m.records_for(Split::Train).len(), 90);
        assert_eq!(m.records_for(Split::Eval).len(), 10);
        assert_eq!(m.skipped, 0);
    }

    #[test]
    fn subset_selection_is_deterministic() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("src");
        write_corpus(&src, 100);
        let a = build_dataset(&src, &tmp.path().join("a"), &opts(8, 0.9, 0.25, 3)).unwrap();
        let b = build_dataset(&src, &tmp.path().join("b"), &opts(8, 0.9, 0.25, 3)).unwrap();
        assert_eq!(a.records.len(), 25);
        let ids_a: Vec<&str> = a.records.iter().map(|r| r.rgb_path.as_str()).collect();
        let ids_b: Vec<&str> = b.records.iter().map(|r| r.rgb_path.as_str()).collect();
        assert_eq!(ids_a, ids_b, "same seed selects the same subset");
    }

    #[test]
    fn records_recompute_byte_identically() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("src");
        write_corpus(&src, 12);
        let out = tmp.path().join("out");
        let m = build_dataset(&src, &out, &opts(8, 0.9, 1.0, 1)).unwrap();
        for rec in &m.records {
            let rgb = load_image(&m.resolve(&rec.rgb_path)).unwrap();
            let (gray, edge) = derive_pair(&rgb, m.image_side).unwrap();
            let stored_gray = std::fs::read(m.resolve(&rec.gray_path)).unwrap();
            let stored_edge = std::fs::read(m.resolve(&rec.edge_path)).unwrap();
            assert_eq!(stored_gray, encode_png(&gray).unwrap(), "{}", rec.id);
            assert_eq!(stored_edge, encode_png(&edge).unwrap(), "{}", rec.id);
        }
    }

    #[test]
    fn build_is_idempotent() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("src");
        write_corpus(&src, 10);
        let out = tmp.path().join("out");
        build_dataset(&src, &out, &opts(8, 0.8, 1.0, 5)).unwrap();
        let first = std::fs::read(out.join(MANIFEST_FILE)).unwrap();
        build_dataset(&src, &out, &opts(8, 0.8, 1.0, 5)).unwrap();
        let second = std::fs::read(out.join(MANIFEST_FILE)).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn undecodable_files_are_skipped_and_counted() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("src");
        write_corpus(&src, 6);
        std::fs::write(src.join("junk.png"), b"not an image").unwrap();
        let m = build_dataset(&src, &tmp.path().join("out"), &opts(8, 1.0, 1.0, 2)).unwrap();
        assert_eq!(m.records.len(), 6);
        assert_eq!(m.skipped, 1);
    }

    #[test]
    fn empty_result_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("src");
        std::fs::create_dir_all(&src).unwrap();
        std::fs::write(src.join("junk.bin"), b"garbage").unwrap();
        assert!(build_dataset(&src, &tmp.path().join("out"), &opts(8, 1.0, 1.0, 2)).is_err());
    }

    #[test]
    fn manifest_roundtrip_is_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("src");
        write_corpus(&src, 10);
        let out = tmp.path().join("out");
        build_dataset(&src, &out, &opts(8, 0.9, 1.0, 11)).unwrap();
        let path = out.join(MANIFEST_FILE);
        let original = std::fs::read(&path).unwrap();
        let loaded = DatasetManifest::load(&path).unwrap();
        assert_eq!(loaded.to_jsonl().unwrap().as_bytes(), &original[..]);
    }

    #[test]
    fn loading_rejects_missing_files() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("src");
        write_corpus(&src, 10);
        let out = tmp.path().join("out");
        let m = build_dataset(&src, &out, &opts(8, 0.9, 1.0, 11)).unwrap();
        std::fs::remove_file(m.resolve(&m.records[3].edge_path)).unwrap();
        let err = DatasetManifest::load(&out.join(MANIFEST_FILE)).unwrap_err();
        assert!(err.to_string().contains("missing file"));
    }

    #[test]
    fn batches_cover_split_without_duplicates() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("src");
        write_corpus(&src, 10);
        let out = tmp.path().join("out");
        let m = build_dataset(&src, &out, &opts(8, 1.0, 1.0, 13)).unwrap();

        let sizes: Vec<usize> = iterate_batches(&m, Split::Train, 3, 1, 0)
            .unwrap()
            .map(|b| b.unwrap().ids.len())
            .collect();
        assert_eq!(sizes, vec![3, 3, 3, 1], "final short batch included");

        let ids: Vec<String> = iterate_batches(&m, Split::Train, 3, 1, 0)
            .unwrap()
            .flat_map(|b| b.unwrap().ids)
            .collect();
        let unique: HashSet<&String> = ids.iter().collect();
        assert_eq!(unique.len(), 10, "no duplicates");
        let expected: HashSet<String> =
            m.records_for(Split::Train).iter().map(|r| r.id.clone()).collect();
        assert_eq!(ids.iter().cloned().collect::<HashSet<_>>(), expected);
    }

    #[test]
    fn batch_order_is_seed_and_epoch_deterministic() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("src");
        write_corpus(&src, 10);
        let m = build_dataset(&src, &tmp.path().join("out"), &opts(8, 1.0, 1.0, 13)).unwrap();
        let collect = |seed, epoch| -> Vec<String> {
            iterate_batches(&m, Split::Train, 4, seed, epoch)
                .unwrap()
                .flat_map(|b| b.unwrap().ids)
                .collect()
        };
        assert_eq!(collect(5, 2), collect(5, 2), "same seed+epoch, same order");
        assert_ne!(collect(5, 2), collect(5, 3), "different epoch reshuffles");
    }

    #[test]
    fn batch_tensors_live_in_unit_range() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("src");
        write_corpus(&src, 6);
        let m = build_dataset(&src, &tmp.path().join("out"), &opts(8, 1.0, 1.0, 17)).unwrap();
        for batch in iterate_batches(&m, Split::Train, 2, 0, 0).unwrap() {
            let batch = batch.unwrap();
            for t in [&batch.edges, &batch.grays] {
                assert!(t
                    .data()
                    .iter()
                    .all(|&v| v.is_finite() && (-1.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn synth_faces_rejects_zero() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(synth_faces(0, 16, 1, tmp.path()).is_err());
    }

    #[test]
    fn synth_faces_is_seed_deterministic() {
        let tmp = tempfile::tempdir().unwrap();
        let a = tmp.path().join("a");
        let b = tmp.path().join("b");
        synth_faces(6, 16, 42, &a).unwrap();
        synth_faces(6, 16, 42, &b).unwrap();
        for sub in ["rgb", "gray", "edge"] {
            let mut names: Vec<_> = std::fs::read_dir(a.join(sub))
                .unwrap()
                .map(|e| e.unwrap().file_name())
                .collect();
            names.sort();
            assert!(!names.is_empty());
            for name in names {
                let fa = std::fs::read(a.join(sub).join(&name)).unwrap();
                let fb = std::fs::read(b.join(sub).join(&name)).unwrap();
                assert_eq!(fa, fb, "{sub}/{name:?} differs between same-seed runs");
            }
        }
    }

    #[test]
    fn synth_face_edges_have_sane_density() {
        let tmp = tempfile::tempdir().unwrap();
        let m = synth_faces(16, 32, 7, tmp.path()).unwrap();
        let mut total_nonzero = 0usize;
        let mut total = 0usize;
        for rec in &m.records {
            let edge = load_image(&m.resolve(&rec.edge_path)).unwrap();
            total_nonzero += edge.pixels().iter().filter(|&&p| p > 0).count();
            total += edge.pixels().len();
        }
        let frac = total_nonzero as f64 / total as f64;
        assert!(
            frac > 0.01 && frac < 0.5,
            "edge density {frac} outside the (1%, 50%) sanity band"
        );
    }
}
