//! Synthetic multi-modal phantom dataset: generation, the on-disk case
//! format, dataset manifests/splits, and value-range normalization.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{CdmError, Result};
use crate::image::{ImageBatch, ValueRange};

pub const MODALITIES: [&str; 4] = ["T1", "T2", "T1c", "T2f"];
pub const SOURCE_MODALITIES: [&str; 2] = ["T1", "T2"];
pub const TARGET_MODALITIES: [&str; 2] = ["T1c", "T2f"];

const CASE_MAGIC: &[u8; 4] = b"CDMC";
const CASE_VERSION: u16 = 1;
pub const TRAIN_FRACTION: f64 = 0.7;

/// One paired multi-modal case: four registered single-channel images in
/// [0,1] (T1, T2, T1c, T2f) plus the tumor mask.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub case_id: String,
    pub images: [Array2<f64>; 4],
    pub tumor_mask: Array2<bool>,
}

impl CaseRecord {
    pub fn image_size(&self) -> usize {
        self.images[0].dim().0
    }

    pub fn modality(&self, name: &str) -> &Array2<f64> {
        let idx = MODALITIES.iter().position(|m| *m == name).unwrap();
        &self.images[idx]
    }

    /// Source modalities (T1, T2) as a `[1, 2, h, w]` batch in [0,1].
    pub fn source_batch(&self) -> ImageBatch {
        self.stack(&[0, 1])
    }

    /// Target modalities (T1c, T2f) as a `[1, 2, h, w]` batch in [0,1].
    pub fn target_batch(&self) -> ImageBatch {
        self.stack(&[2, 3])
    }

    fn stack(&self, idx: &[usize]) -> ImageBatch {
        let (h, w) = self.images[0].dim();
        let mut batch = ImageBatch::zeros(1, idx.len(), h, w, ValueRange::Unit);
        for (c, &i) in idx.iter().enumerate() {
            batch
                .data
                .slice_mut(ndarray::s![0, c, .., ..])
                .assign(&self.images[i]);
        }
        batch
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Dataset inventory with the 70/30 case-level split.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub image_size: usize,
    pub seed: u64,
    pub cases: Vec<(String, Split)>,
}

impl DatasetManifest {
    pub fn ids_in(&self, split: Split) -> Vec<String> {
        self.cases
            .iter()
            .filter(|(_, s)| *s == split)
            .map(|(id, _)| id.clone())
            .collect()
    }
}

/// Monotone piecewise-linear intensity transfer, control points sorted by
/// tissue value, outputs in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct TransferFn {
    pub points: Vec<(f64, f64)>,
}

impl TransferFn {
    pub fn new(points: Vec<(f64, f64)>) -> Self {
        debug_assert!(points.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].1));
        TransferFn { points }
    }

    pub fn apply(&self, u: f64) -> f64 {
        let pts = &self.points;
        if u <= pts[0].0 {
            return pts[0].1;
        }
        for w in pts.windows(2) {
            if u <= w[1].0 {
                let t = (u - w[0].0) / (w[1].0 - w[0].0);
                return w[0].1 + t * (w[1].1 - w[0].1);
            }
        }
        pts[pts.len() - 1].1
    }
}

/// Controls phantom anatomy and per-modality contrast.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub min_ellipses: usize,
    pub max_ellipses: usize,
    pub tumor_probability: f64,
    /// T1, T2, T1c, T2f transfer functions from tissue value to intensity.
    pub transfers: [TransferFn; 4],
}

impl PhantomSpec {
    pub fn new(image_size: usize) -> Self {
        PhantomSpec {
            image_size,
            min_ellipses: 3,
            max_ellipses: 6,
            tumor_probability: 0.7,
            // Deliberately different contrasts so no source modality is a
            // good pixel-copy predictor of a target modality.
            transfers: [
                TransferFn::new(vec![(0.0, 0.0), (0.35, 0.55), (1.0, 0.95)]),
                TransferFn::new(vec![(0.0, 0.0), (0.35, 0.30), (1.0, 0.85)]),
                TransferFn::new(vec![(0.0, 0.0), (0.35, 0.20), (1.0, 0.50)]),
                TransferFn::new(vec![(0.0, 0.0), (0.35, 0.40), (1.0, 0.65)]),
            ],
        }
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
}

impl Ellipse {
    /// Normalized radial coordinate: < 1 inside, 1 on the boundary.
    fn radial(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let u = (dx * c + dy * s) / self.rx;
        let v = (-dx * s + dy * c) / self.ry;
        (u * u + v * v).sqrt()
    }

    /// Soft membership weight with an edge band of `soft` in radial units.
    fn weight(&self, x: f64, y: f64, soft: f64) -> f64 {
        let r = self.radial(x, y);
        if r <= 1.0 - soft {
            1.0
        } else if r >= 1.0 {
            0.0
        } else {
            let t = (1.0 - r) / soft;
            t * t * (3.0 - 2.0 * t)
        }
    }
}

fn random_ellipse(rng: &mut ChaCha20Rng, r_lo: f64, r_hi: f64) -> Ellipse {
    Ellipse {
        cx: 0.5 + (rng.gen::<f64>() - 0.5) * 0.4,
        cy: 0.5 + (rng.gen::<f64>() - 0.5) * 0.4,
        rx: r_lo + rng.gen::<f64>() * (r_hi - r_lo),
        ry: r_lo + rng.gen::<f64>() * (r_hi - r_lo),
        angle: rng.gen::<f64>() * std::f64::consts::PI,
    }
}

/// Deterministic phantom case: shared smooth-ellipse anatomy rendered through
/// the four modality transfers, with an optional tumor that is bright-rimmed
/// in T1c, bright in T2f, and mildly visible in the source modalities.
pub fn generate_phantom_case(spec: &PhantomSpec, case_id: &str, seed: u64) -> CaseRecord {
    let s = spec.image_size;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let head = Ellipse {
        cx: 0.5,
        cy: 0.5,
        rx: 0.38 + rng.gen::<f64>() * 0.06,
        ry: 0.40 + rng.gen::<f64>() * 0.06,
        angle: (rng.gen::<f64>() - 0.5) * 0.3,
    };
    let n_ellipses =
        spec.min_ellipses + (rng.gen::<f64>() * (spec.max_ellipses - spec.min_ellipses + 1) as f64) as usize;
    let blobs: Vec<(Ellipse, f64)> = (0..n_ellipses)
        .map(|_| {
            let e = random_ellipse(&mut rng, 0.05, 0.20);
            let v = 0.45 + rng.gen::<f64>() * 0.50;
            (e, v)
        })
        .collect();
    let has_tumor = rng.gen::<f64>() < spec.tumor_probability;
    let tumor = random_ellipse(&mut rng, 0.06, 0.14);

    let mut tissue = Array2::<f64>::zeros((s, s));
    let mut tumor_w = Array2::<f64>::zeros((s, s));
    let soft = 2.0 / s as f64; // ~2 px edge band
    for i in 0..s {
        for j in 0..s {
            let y = (i as f64 + 0.5) / s as f64;
            let x = (j as f64 + 0.5) / s as f64;
            let hw = head.weight(x, y, soft * 2.0);
            let mut u = 0.35 * hw;
            for (e, v) in &blobs {
                let w = e.weight(x, y, soft * 3.0) * hw;
                u = u * (1.0 - w) + v * w;
            }
            tissue[(i, j)] = u;
            if has_tumor {
                tumor_w[(i, j)] = tumor.weight(x, y, soft * 2.0) * hw;
            }
        }
    }

    let mut images: [Array2<f64>; 4] = std::array::from_fn(|_| Array2::zeros((s, s)));
    for i in 0..s {
        for j in 0..s {
            let y = (i as f64 + 0.5) / s as f64;
            let x = (j as f64 + 0.5) / s as f64;
            let u = tissue[(i, j)];
            let tw = tumor_w[(i, j)];
            let r = if has_tumor { tumor.radial(x, y) } else { 2.0 };
            // rim band near the tumor boundary
            let rim = if (0.65..1.0).contains(&r) {
                let t = 1.0 - ((r - 0.825) / 0.175).abs();
                t.clamp(0.0, 1.0) * tw.max(if r >= 1.0 { 0.0 } else { 0.6 })
            } else {
                0.0
            };
            let base: [f64; 4] = std::array::from_fn(|m| spec.transfers[m].apply(u));
            let t1 = base[0] * (1.0 - 0.15 * tw);
            let t2 = base[1] * (1.0 - tw) + 0.80 * tw;
            let t1c = (base[2] * (1.0 - 0.3 * tw)).max(0.95 * rim);
            let t2f = base[3] * (1.0 - tw) + 0.90 * tw;
            images[0][(i, j)] = t1.clamp(0.0, 1.0);
            images[1][(i, j)] = t2.clamp(0.0, 1.0);
            images[2][(i, j)] = t1c.clamp(0.0, 1.0);
            images[3][(i, j)] = t2f.clamp(0.0, 1.0);
        }
    }

    let tumor_mask = tumor_w.mapv(|w| w > 0.5);
    CaseRecord {
        case_id: case_id.to_string(),
        images,
        tumor_mask,
    }
}

pub fn case_file_path(dir: &Path, case_id: &str) -> PathBuf {
    dir.join(format!("{case_id}.cdmc"))
}

/// Exact byte count of a serialized case file for `image_size`.
pub fn case_file_len(image_size: usize) -> usize {
    let px = image_size * image_size;
    4 + 2 + 2 + 1 + 4 * px * 4 + px.div_ceil(8) + 4
}

pub fn write_case(record: &CaseRecord, dir: &Path) -> Result<PathBuf> {
    let s = record.image_size();
    if s > u16::MAX as usize {
        return Err(CdmError::invalid(format!("image size {s} overflows the header")));
    }
    let mut buf: Vec<u8> = Vec::with_capacity(case_file_len(s));
    buf.extend_from_slice(CASE_MAGIC);
    buf.write_u16::<LittleEndian>(CASE_VERSION)?;
    buf.write_u16::<LittleEndian>(s as u16)?;
    buf.push(4u8);
    for img in &record.images {
        for &v in img.iter() {
            buf.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    // packed bits, row-major, LSB first
    let mut byte = 0u8;
    let mut nbits = 0;
    for &m in record.tumor_mask.iter() {
        if m {
            byte |= 1 << nbits;
        }
        nbits += 1;
        if nbits == 8 {
            buf.push(byte);
            byte = 0;
            nbits = 0;
        }
    }
    if nbits > 0 {
        buf.push(byte);
    }
    let crc = crc32fast::hash(&buf);
    buf.write_u32::<LittleEndian>(crc)?;

    let path = case_file_path(dir, &record.case_id);
    std::fs::write(&path, &buf)?;
    Ok(path)
}

pub fn read_case(dir: &Path, case_id: &str) -> Result<CaseRecord> {
    let path = case_file_path(dir, case_id);
    let corrupt = |detail: &str| CdmError::CorruptFile {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };
    let buf = std::fs::read(&path)?;
    if buf.len() < 13 {
        return Err(corrupt("truncated header"));
    }
    let (body, crc_bytes) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(corrupt("checksum mismatch"));
    }
    let mut r = std::io::Cursor::new(body);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CASE_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != CASE_VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let s = r.read_u16::<LittleEndian>()? as usize;
    let n_mod = r.read_u8()?;
    if n_mod != 4 {
        return Err(corrupt(&format!("expected 4 modalities, found {n_mod}")));
    }
    if body.len() != case_file_len(s) - 4 {
        return Err(corrupt("unexpected file length"));
    }
    let mut images: [Array2<f64>; 4] = std::array::from_fn(|_| Array2::zeros((s, s)));
    for img in &mut images {
        for v in img.iter_mut() {
            *v = r.read_f32::<LittleEndian>()? as f64;
        }
    }
    let mut tumor_mask = Array2::from_elem((s, s), false);
    let mut byte = 0u8;
    let mut nbits = 8;
    for m in tumor_mask.iter_mut() {
        if nbits == 8 {
            byte = r.read_u8()?;
            nbits = 0;
        }
        *m = (byte >> nbits) & 1 == 1;
        nbits += 1;
    }
    Ok(CaseRecord {
        case_id: case_id.to_string(),
        images,
        tumor_mask,
    })
}

/// Map a [0,1] batch into the network's [-1,1] convention. Out-of-range
/// inputs are clamped; the clamp count is returned.
pub fn normalize_for_network(images: &ImageBatch) -> (ImageBatch, usize) {
    let mut clamped = 0usize;
    let data = images.data.mapv(|v| {
        let c = v.clamp(0.0, 1.0);
        if c != v {
            clamped += 1;
        }
        2.0 * c - 1.0
    });
    if clamped > 0 {
        log::warn!("normalize_for_network clamped {clamped} out-of-range pixels");
    }
    (ImageBatch::new(data, ValueRange::Signed), clamped)
}

/// Inverse of [`normalize_for_network`], clamped back into [0,1].
pub fn denormalize_from_network(images: &ImageBatch) -> ImageBatch {
    let data = images.data.mapv(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0));
    ImageBatch::new(data, ValueRange::Unit)
}

/// Deterministic 70/30 case-level split.
pub fn split_dataset(case_ids: &[String], seed: u64) -> Result<Vec<(String, Split)>> {
    if case_ids.len() < 2 {
        return Err(CdmError::invalid("need at least 2 cases to split"));
    }
    let mut order: Vec<usize> = (0..case_ids.len()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed_0517);
    // Fisher-Yates
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_train = (TRAIN_FRACTION * case_ids.len() as f64).round() as usize;
    let n_train = n_train.clamp(1, case_ids.len() - 1);
    let mut out: Vec<(String, Split)> = vec![];
    for (rank, &idx) in order.iter().enumerate() {
        let split = if rank < n_train { Split::Train } else { Split::Test };
        out.push((case_ids[idx].clone(), split));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

/// Generate `n_cases` phantom cases into `dir`, write the manifest, and
/// return it. Fully deterministic given `seed`.
pub fn generate_dataset(
    dir: &Path,
    n_cases: usize,
    spec: &PhantomSpec,
    seed: u64,
) -> Result<DatasetManifest> {
    if n_cases < 2 {
        return Err(CdmError::invalid("need at least 2 cases"));
    }
    std::fs::create_dir_all(dir)?;
    let ids: Vec<String> = (0..n_cases).map(|i| format!("case_{i:04}")).collect();
    for (i, id) in ids.iter().enumerate() {
        let record = generate_phantom_case(spec, id, seed.wrapping_add(i as u64));
        write_case(&record, dir)?;
    }
    let manifest = DatasetManifest {
        version: 1,
        image_size: spec.image_size,
        seed,
        cases: split_dataset(&ids, seed)?,
    };
    write_manifest(&manifest, dir)?;
    Ok(manifest)
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.txt")
}

pub fn write_manifest(manifest: &DatasetManifest, dir: &Path) -> Result<()> {
    let mut f = std::fs::File::create(manifest_path(dir))?;
    writeln!(f, "version={}", manifest.version)?;
    writeln!(f, "image_size={}", manifest.image_size)?;
    writeln!(f, "seed={}", manifest.seed)?;
    for (id, split) in &manifest.cases {
        writeln!(f, "case={},{}", id, split.as_str())?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = manifest_path(dir);
    let text = std::fs::read_to_string(&path)?;
    let mut version = None;
    let mut image_size = None;
    let mut seed = None;
    let mut cases = vec![];
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |detail: String| CdmError::Config {
            line: lineno + 1,
            detail,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("expected key=value, got `{line}`")))?;
        match key {
            "version" => version = Some(value.parse().map_err(|_| bad("bad version".into()))?),
            "image_size" => {
                image_size = Some(value.parse().map_err(|_| bad("bad image_size".into()))?)
            }
            "seed" => seed = Some(value.parse().map_err(|_| bad("bad seed".into()))?),
            "case" => {
                let (id, split) = value
                    .split_once(',')
                    .ok_or_else(|| bad(format!("expected case=id,split, got `{value}`")))?;
                let split = match split {
                    "train" => Split::Train,
                    "test" => Split::Test,
                    other => return Err(bad(format!("unknown split `{other}`"))),
                };
                cases.push((id.to_string(), split));
            }
            other => return Err(bad(format!("unknown key `{other}`"))),
        }
    }
    Ok(DatasetManifest {
        version: version.ok_or_else(|| CdmError::invalid("manifest missing version"))?,
        image_size: image_size.ok_or_else(|| CdmError::invalid("manifest missing image_size"))?,
        seed: seed.ok_or_else(|| CdmError::invalid("manifest missing seed"))?,
        cases,
    })
}
