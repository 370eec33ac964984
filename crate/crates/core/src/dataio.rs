//! On-disk formats and the synthetic dataset generator.
//!
//! Tensors use a small binary format (magic `LEANTNSR`, little-endian
//! header, row-major f32 payload). Datasets are JSONL manifests pointing
//! at tensor files with paths relative to the manifest. The generator
//! fabricates clustered (text, video) pairs so the whole pipeline runs
//! without any real feature extractor.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TensorError};
use crate::numerics::{matmul, DenseMatrix, SeededRng};

pub const TENSOR_MAGIC: [u8; 8] = *b"LEANTNSR";
pub const TENSOR_VERSION: u32 = 1;
pub const TENSOR_DTYPE_F32: u32 = 0;

fn read_exact_or<R: Read>(
    r: &mut R,
    buf: &mut [u8],
    what: &'static str,
    ctx: &Path,
) -> Result<()> {
    match r.read_exact(buf) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => {
            Err(TensorError::Truncated(what).into())
        }
        Err(e) => Err(Error::io(ctx, e)),
    }
}

fn read_u32<R: Read>(r: &mut R, what: &'static str, ctx: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what, ctx)?;
    Ok(u32::from_le_bytes(b))
}

/// Writes one tensor blob. The payload narrows to f32; values that do not
/// fit are rejected rather than silently becoming infinite.
pub fn write_tensor_to<W: Write>(w: &mut W, m: &DenseMatrix, ctx: &Path) -> Result<()> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Err(TensorError::ZeroDim.into());
    }
    let io = |e| Error::io(ctx, e);
    w.write_all(&TENSOR_MAGIC).map_err(io)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&TENSOR_DTYPE_F32.to_le_bytes()).map_err(io)?;
    w.write_all(&2u32.to_le_bytes()).map_err(io)?;
    w.write_all(&(rows as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(cols as u32).to_le_bytes()).map_err(io)?;
    let mut payload = Vec::with_capacity(m.data().len() * 4);
    for (i, &v) in m.data().iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::NonFinite(format!(
                "tensor element {i} does not fit in f32"
            )));
        }
        payload.extend_from_slice(&f.to_le_bytes());
    }
    w.write_all(&payload).map_err(io)
}

/// Reads exactly one tensor blob from the stream, leaving the cursor just
/// past its payload (blobs can be concatenated).
pub fn read_tensor_from<R: Read>(r: &mut R, ctx: &Path) -> Result<DenseMatrix> {
    let mut magic = [0u8; 8];
    read_exact_or(r, &mut magic, "magic", ctx)?;
    if magic != TENSOR_MAGIC {
        return Err(TensorError::BadMagic.into());
    }
    let version = read_u32(r, "version", ctx)?;
    if version != TENSOR_VERSION {
        return Err(TensorError::BadVersion(version).into());
    }
    let dtype = read_u32(r, "dtype", ctx)?;
    if dtype != TENSOR_DTYPE_F32 {
        return Err(TensorError::BadDtype(dtype).into());
    }
    let rank = read_u32(r, "rank", ctx)?;
    if rank != 2 {
        return Err(TensorError::BadRank(rank).into());
    }
    let rows = read_u32(r, "dims", ctx)? as usize;
    let cols = read_u32(r, "dims", ctx)? as usize;
    if rows == 0 || cols == 0 {
        return Err(TensorError::ZeroDim.into());
    }
    let total = rows
        .checked_mul(cols)
        .ok_or(TensorError::SizeMismatch {
            expected: usize::MAX,
            got: 0,
        })?;
    // Chunked payload read: a corrupt header asking for absurd sizes hits
    // Truncated instead of a giant allocation.
    let mut bytes = Vec::new();
    let mut remaining = total * 4;
    let mut chunk = [0u8; 1 << 16];
    while remaining > 0 {
        let take = remaining.min(chunk.len());
        match r.read(&mut chunk[..take]) {
            Ok(0) => return Err(TensorError::Truncated("payload").into()),
            Ok(nread) => {
                bytes.extend_from_slice(&chunk[..nread]);
                remaining -= nread;
            }
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(e) => return Err(Error::io(ctx, e)),
        }
    }
    let mut data = Vec::with_capacity(total);
    for (i, quad) in bytes.chunks_exact(4).enumerate() {
        let f = f32::from_le_bytes([quad[0], quad[1], quad[2], quad[3]]);
        if !f.is_finite() {
            return Err(TensorError::NonFinite(i).into());
        }
        data.push(f as f64);
    }
    DenseMatrix::from_vec(rows, cols, data)
}

pub fn write_tensor(path: &Path, m: &DenseMatrix) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tensor_to(&mut w, m, path)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<DenseMatrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let m = read_tensor_from(&mut r, path)?;
    let mut extra = [0u8; 1];
    match r.read(&mut extra) {
        Ok(0) => Ok(m),
        Ok(_) => {
            let expected = 28 + m.data().len() * 4;
            let got = fs::metadata(path).map(|md| md.len() as usize).unwrap_or(0);
            Err(TensorError::SizeMismatch { expected, got }.into())
        }
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Header-only read: (rows, cols) without touching the payload.
pub fn read_tensor_dims(path: &Path) -> Result<(usize, usize)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    read_exact_or(&mut r, &mut magic, "magic", path)?;
    if magic != TENSOR_MAGIC {
        return Err(TensorError::BadMagic.into());
    }
    let version = read_u32(&mut r, "version", path)?;
    if version != TENSOR_VERSION {
        return Err(TensorError::BadVersion(version).into());
    }
    let dtype = read_u32(&mut r, "dtype", path)?;
    if dtype != TENSOR_DTYPE_F32 {
        return Err(TensorError::BadDtype(dtype).into());
    }
    let rank = read_u32(&mut r, "rank", path)?;
    if rank != 2 {
        return Err(TensorError::BadRank(rank).into());
    }
    let rows = read_u32(&mut r, "dims", path)? as usize;
    let cols = read_u32(&mut r, "dims", path)? as usize;
    if rows == 0 || cols == 0 {
        return Err(TensorError::ZeroDim.into());
    }
    Ok((rows, cols))
}

// ---------------------------------------------------------------------------
// Dataset manifests.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextSide {
    /// Display-only token strings; the model consumes feature rows.
    pub tokens: Vec<String>,
    /// Tensor file path, relative to the manifest.
    pub features: String,
    pub rows: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoSide {
    pub features: String,
    pub rows: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub split: String,
    pub text: TextSide,
    pub video: VideoSide,
}

impl ManifestRecord {
    pub fn split_kind(&self) -> Result<Split> {
        Split::parse(&self.split).ok_or_else(|| Error::Manifest {
            id: self.id.clone(),
            msg: format!("unknown split `{}`", self.split),
        })
    }
}

fn manifest_err(id: &str, msg: impl Into<String>) -> Error {
    Error::Manifest {
        id: id.to_string(),
        msg: msg.into(),
    }
}

/// Loads and fully validates a JSONL manifest: unique ids, known splits,
/// positive row counts, and feature files whose headers match the declared
/// rows. Order-preserving.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut seen = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| {
            Error::ManifestFile(format!("line {}: {e}", lineno + 1))
        })?;
        if rec.id.is_empty() {
            return Err(Error::ManifestFile(format!("line {}: empty id", lineno + 1)));
        }
        if seen.contains(&rec.id) {
            return Err(manifest_err(&rec.id, "duplicate id"));
        }
        rec.split_kind()?;
        if rec.text.rows == 0 {
            return Err(manifest_err(&rec.id, "text rows must be >= 1"));
        }
        if rec.video.rows == 0 {
            return Err(manifest_err(&rec.id, "video rows must be >= 1"));
        }
        for (side, feats, want_rows) in [
            ("text", &rec.text.features, rec.text.rows),
            ("video", &rec.video.features, rec.video.rows),
        ] {
            let full = base.join(feats);
            let (rows, _cols) = read_tensor_dims(&full).map_err(|e| {
                manifest_err(&rec.id, format!("{side} features `{feats}`: {e}"))
            })?;
            if rows != want_rows {
                return Err(manifest_err(
                    &rec.id,
                    format!("{side} rows {want_rows} but tensor has {rows}"),
                ));
            }
        }
        seen.push(rec.id.clone());
        records.push(rec);
    }
    Ok(records)
}

/// One fully loaded retrieval pair.
#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub id: String,
    pub split: Split,
    pub tokens: Vec<String>,
    /// n x text_dim raw token features.
    pub text: DenseMatrix,
    /// n_frames x video_dim raw frame features.
    pub video: DenseMatrix,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub items: Vec<DatasetItem>,
}

impl Dataset {
    pub fn split_items(&self, split: Split) -> Vec<&DatasetItem> {
        self.items.iter().filter(|it| it.split == split).collect()
    }

    pub fn find(&self, id: &str) -> Option<&DatasetItem> {
        self.items.iter().find(|it| it.id == id)
    }

    pub fn text_dim(&self) -> Option<usize> {
        self.items.first().map(|it| it.text.cols())
    }

    pub fn video_dim(&self) -> Option<usize> {
        self.items.first().map(|it| it.video.cols())
    }
}

/// Loads manifest plus every referenced tensor into memory. Feature widths
/// must agree across records.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let records = load_manifest(manifest_path)?;
    let mut items = Vec::with_capacity(records.len());
    for rec in records {
        let text = read_tensor(&base.join(&rec.text.features))
            .map_err(|e| manifest_err(&rec.id, format!("text features: {e}")))?;
        let video = read_tensor(&base.join(&rec.video.features))
            .map_err(|e| manifest_err(&rec.id, format!("video features: {e}")))?;
        let split = rec.split_kind()?;
        items.push(DatasetItem {
            id: rec.id,
            split,
            tokens: rec.text.tokens,
            text,
            video,
        });
    }
    for it in &items {
        if it.text.cols() != items[0].text.cols() {
            return Err(manifest_err(&it.id, "text feature width differs from first record"));
        }
        if it.video.cols() != items[0].video.cols() {
            return Err(manifest_err(&it.id, "video feature width differs from first record"));
        }
    }
    Ok(Dataset { items })
}

// ---------------------------------------------------------------------------
// Synthetic clustered pairs.

/// Latent width of the synthetic generator.
pub const SYNTH_LATENT_DIM: usize = 16;

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub pairs: usize,
    pub clusters: usize,
    pub text_dim: usize,
    pub video_dim: usize,
    pub frames: usize,
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Desk-scale defaults: feature widths of common text/frame extractors.
    pub fn new(pairs: usize, clusters: usize, seed: u64) -> SynthSpec {
        SynthSpec {
            pairs,
            clusters,
            text_dim: 768,
            video_dim: 4096,
            frames: 12,
            noise: 0.05,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs < 1 {
            return Err(Error::InvalidArg("pairs must be >= 1".into()));
        }
        if self.clusters < 1 || self.clusters > self.pairs {
            return Err(Error::InvalidArg(format!(
                "clusters must be in 1..=pairs, got {} with {} pairs",
                self.clusters, self.pairs
            )));
        }
        for (name, v) in [
            ("text_dim", self.text_dim),
            ("video_dim", self.video_dim),
            ("frames", self.frames),
        ] {
            if v == 0 {
                return Err(Error::InvalidArg(format!("{name} must be >= 1")));
            }
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::InvalidArg(format!("noise must be >= 0, got {}", self.noise)));
        }
        Ok(())
    }
}

/// Generator internals exposed for oracle tests: ground-truth latents and
/// mixing maps.
#[derive(Debug, Clone)]
pub struct SynthDetails {
    /// clusters x latent.
    pub cluster_latents: DenseMatrix,
    /// pair -> cluster.
    pub assignments: Vec<usize>,
    /// pairs x latent, the per-pair offsets both modalities share.
    pub pair_offsets: DenseMatrix,
    pub mixing_text: DenseMatrix,
    pub mixing_video: DenseMatrix,
}

fn synth_splits(k: usize, pairs: usize) -> Split {
    let n_test = (pairs / 4).max(1).min(pairs);
    let n_val = (pairs / 8).max(1).min(pairs - n_test);
    if k < n_test {
        Split::Test
    } else if k < n_test + n_val {
        Split::Val
    } else {
        Split::Train
    }
}

/// Writes the synthetic dataset and returns the manifest path plus the
/// ground truth behind it. Output depends only on the spec.
pub fn synth_generate_with_details(
    spec: &SynthSpec,
    out_dir: &Path,
) -> Result<(PathBuf, SynthDetails)> {
    spec.validate()?;
    let rng = SeededRng::new(spec.seed);
    let mut latent_rng = rng.child("latents");
    let mut latents = DenseMatrix::zeros(spec.clusters, SYNTH_LATENT_DIM);
    for v in latents.data_mut() {
        *v = latent_rng.standard_normal();
    }
    // Feature coordinates land near std 0.1, the per-coordinate scale of
    // l2-normalized embeddings at these widths; wide-input projections then
    // keep downstream activations tame.
    let mix_scale = 0.1 / (SYNTH_LATENT_DIM as f64).sqrt();
    let draw_map = |label: &str, cols: usize| -> DenseMatrix {
        let mut s = rng.child(label);
        let mut m = DenseMatrix::zeros(SYNTH_LATENT_DIM, cols);
        for v in m.data_mut() {
            *v = mix_scale * s.standard_normal();
        }
        m
    };
    let a_t = draw_map("mix.text", spec.text_dim);
    let a_v = draw_map("mix.video", spec.video_dim);

    // The noise budget splits evenly between a per-pair latent offset (shared
    // by both modalities, the way a caption and its video share content
    // beyond their topic) and iid per-row jitter. Each mixing-map column has
    // std mix_scale*sqrt(latent), so an offset of std
    // noise/sqrt(2)/col_std lands at noise/sqrt(2) per feature coordinate.
    let col_std = mix_scale * (SYNTH_LATENT_DIM as f64).sqrt();
    let offset_std = spec.noise / (2.0_f64).sqrt() / col_std;
    let jitter_std = spec.noise / (2.0_f64).sqrt();
    let mut offset_rng = rng.child("pair.offsets");
    let mut pair_offsets = DenseMatrix::zeros(spec.pairs, SYNTH_LATENT_DIM);
    for v in pair_offsets.data_mut() {
        *v = offset_std * offset_rng.standard_normal();
    }

    let tensor_dir = out_dir.join("tensors");
    fs::create_dir_all(&tensor_dir).map_err(|e| Error::io(&tensor_dir, e))?;

    let mut assignments = Vec::with_capacity(spec.pairs);
    let mut records = Vec::with_capacity(spec.pairs);
    for k in 0..spec.pairs {
        let c = k % spec.clusters;
        assignments.push(c);
        let latent_row: Vec<f64> = (0..SYNTH_LATENT_DIM)
            .map(|j| latents.get(c, j) + pair_offsets.get(k, j))
            .collect();
        let latent = DenseMatrix::from_rows(&[latent_row])?;
        let base_t = matmul(&latent, &a_t)?;
        let base_v = matmul(&latent, &a_v)?;

        let n_tokens = 3 + (k % 3);
        let mut text = DenseMatrix::zeros(n_tokens, spec.text_dim);
        let mut tnoise = rng.child(&format!("noise.text.{k}"));
        for i in 0..n_tokens {
            for j in 0..spec.text_dim {
                text.set(i, j, base_t.get(0, j) + jitter_std * tnoise.standard_normal());
            }
        }
        let mut video = DenseMatrix::zeros(spec.frames, spec.video_dim);
        let mut vnoise = rng.child(&format!("noise.video.{k}"));
        for i in 0..spec.frames {
            for j in 0..spec.video_dim {
                video.set(i, j, base_v.get(0, j) + jitter_std * vnoise.standard_normal());
            }
        }

        let id = format!("pair{k:04}");
        let text_rel = format!("tensors/{id}.text.bin");
        let video_rel = format!("tensors/{id}.video.bin");
        write_tensor(&out_dir.join(&text_rel), &text)?;
        write_tensor(&out_dir.join(&video_rel), &video)?;
        records.push(ManifestRecord {
            id: id.clone(),
            split: synth_splits(k, spec.pairs).as_str().to_string(),
            text: TextSide {
                tokens: (0..n_tokens).map(|i| format!("t{k}_{i}")).collect(),
                features: text_rel,
                rows: n_tokens,
            },
            video: VideoSide {
                features: video_rel,
                rows: spec.frames,
            },
        });
    }

    let manifest_path = out_dir.join("manifest.jsonl");
    let file = File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut w = BufWriter::new(file);
    for rec in &records {
        let line = serde_json::to_string(rec)
            .map_err(|e| Error::ManifestFile(format!("serialize: {e}")))?;
        writeln!(w, "{line}").map_err(|e| Error::io(&manifest_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&manifest_path, e))?;

    Ok((
        manifest_path,
        SynthDetails {
            cluster_latents: latents,
            assignments,
            pair_offsets,
            mixing_text: a_t,
            mixing_video: a_v,
        },
    ))
}

pub fn synth_generate(spec: &SynthSpec, out_dir: &Path) -> Result<PathBuf> {
    synth_generate_with_details(spec, out_dir).map(|(p, _)| p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> DenseMatrix {
        DenseMatrix::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    fn tensor_err(e: Error) -> TensorError {
        match e {
            Error::Tensor(t) => t,
            other => panic!("expected tensor error, got {other}"),
        }
    }

    #[test]
    fn tensor_round_trip_two_by_three() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let m = mat(2, 3, &[1.5, -2.25, 0.0, 3.5, 1e-3, -7.0]);
        write_tensor(&path, &m).unwrap();
        let back = read_tensor(&path).unwrap();
        let narrowed = m.map(|v| (v as f32) as f64);
        assert_eq!(back.shape(), (2, 3));
        assert_eq!(back.data(), narrowed.data());

        // Writing what was read reproduces the file byte for byte.
        let path2 = dir.path().join("t2.bin");
        write_tensor(&path2, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn tensor_rejects_corrupt_headers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        write_tensor(&path, &mat(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let good = fs::read(&path).unwrap();

        let cases: Vec<(usize, u8, TensorError)> = vec![
            (0, b'X', TensorError::BadMagic),
            (8, 9, TensorError::BadVersion(9)),
            (12, 7, TensorError::BadDtype(7)),
            (16, 3, TensorError::BadRank(3)),
            (20, 0, TensorError::ZeroDim),
        ];
        for (offset, byte, want) in cases {
            let mut bad = good.clone();
            bad[offset] = byte;
            fs::write(&path, &bad).unwrap();
            let got = tensor_err(read_tensor(&path).unwrap_err());
            assert_eq!(got, want, "offset {offset}");
        }

        // Declared 2x2 but only 3 floats of payload.
        let mut short = good.clone();
        short.truncate(good.len() - 4);
        fs::write(&path, &short).unwrap();
        assert_eq!(
            tensor_err(read_tensor(&path).unwrap_err()),
            TensorError::Truncated("payload")
        );

        // Trailing garbage.
        let mut long = good.clone();
        long.extend_from_slice(&[0u8; 4]);
        fs::write(&path, &long).unwrap();
        assert!(matches!(
            tensor_err(read_tensor(&path).unwrap_err()),
            TensorError::SizeMismatch { .. }
        ));

        // NaN payload.
        let mut nan = good;
        let payload_at = 28;
        nan[payload_at..payload_at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, &nan).unwrap();
        assert_eq!(
            tensor_err(read_tensor(&path).unwrap_err()),
            TensorError::NonFinite(0)
        );
    }

    #[test]
    fn tensor_rejects_values_too_large_for_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let m = mat(1, 1, &[1e300]);
        assert!(matches!(
            write_tensor(&path, &m).unwrap_err(),
            Error::NonFinite(_)
        ));
    }

    proptest! {
        #[test]
        fn tensor_round_trip_random_shapes(
            rows in 1usize..40,
            cols in 1usize..60,
            seed in 0u64..1000,
        ) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("t.bin");
            let mut rng = SeededRng::new(seed);
            let mut m = DenseMatrix::zeros(rows, cols);
            for v in m.data_mut() {
                *v = rng.uniform(-1e3, 1e3);
            }
            write_tensor(&path, &m).unwrap();
            let back = read_tensor(&path).unwrap();
            let narrowed = m.map(|v| (v as f32) as f64);
            prop_assert_eq!(back.data(), narrowed.data());
        }
    }

    fn write_sample_manifest(dir: &Path) -> PathBuf {
        fs::create_dir_all(dir.join("tensors")).unwrap();
        let mut lines = Vec::new();
        for (i, split) in ["train", "val", "test"].iter().enumerate() {
            let id = format!("item{i}");
            let text = mat(2, 3, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
            let video = mat(3, 4, &vec![0.5; 12]);
            write_tensor(&dir.join(format!("tensors/{id}.t.bin")), &text).unwrap();
            write_tensor(&dir.join(format!("tensors/{id}.v.bin")), &video).unwrap();
            lines.push(format!(
                r#"{{"id":"{id}","split":"{split}","text":{{"tokens":["a","b"],"features":"tensors/{id}.t.bin","rows":2}},"video":{{"features":"tensors/{id}.v.bin","rows":3}}}}"#
            ));
        }
        let path = dir.join("manifest.jsonl");
        fs::write(&path, lines.join("\n") + "\n").unwrap();
        path
    }

    #[test]
    fn manifest_loads_and_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_sample_manifest(dir.path());
        let recs = load_manifest(&path).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].id, "item0");
        assert_eq!(recs[2].split, "test");

        let ds = load_dataset(&path).unwrap();
        assert_eq!(ds.items.len(), 3);
        assert_eq!(ds.items[0].text.shape(), (2, 3));
        assert_eq!(ds.items[0].video.shape(), (3, 4));
        assert_eq!(ds.split_items(Split::Val).len(), 1);
        assert!(ds.find("item2").is_some());
        assert!(ds.find("nope").is_none());
    }

    #[test]
    fn manifest_errors_name_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_sample_manifest(dir.path());
        let content = fs::read_to_string(&path).unwrap();

        // Duplicate id.
        let dup = content.clone() + &content.lines().next().unwrap().to_string();
        fs::write(&path, dup).unwrap();
        match load_manifest(&path).unwrap_err() {
            Error::Manifest { id, msg } => {
                assert_eq!(id, "item0");
                assert!(msg.contains("duplicate"));
            }
            other => panic!("unexpected {other}"),
        }

        // Unknown split.
        fs::write(&path, content.replace("\"val\"", "\"dev\"")).unwrap();
        match load_manifest(&path).unwrap_err() {
            Error::Manifest { id, msg } => {
                assert_eq!(id, "item1");
                assert!(msg.contains("dev"));
            }
            other => panic!("unexpected {other}"),
        }

        // Declared rows disagree with the tensor header.
        fs::write(&path, content.replace(r#""rows":2"#, r#""rows":5"#)).unwrap();
        match load_manifest(&path).unwrap_err() {
            Error::Manifest { id, msg } => {
                assert_eq!(id, "item0");
                assert!(msg.contains("5") && msg.contains("2"), "{msg}");
            }
            other => panic!("unexpected {other}"),
        }

        // Missing feature file.
        fs::write(&path, content.replace("item0.t.bin", "gone.bin")).unwrap();
        match load_manifest(&path).unwrap_err() {
            Error::Manifest { id, .. } => assert_eq!(id, "item0"),
            other => panic!("unexpected {other}"),
        }

        // Malformed JSON names the line.
        fs::write(&path, "{not json}\n").unwrap();
        match load_manifest(&path).unwrap_err() {
            Error::ManifestFile(msg) => assert!(msg.contains("line 1")),
            other => panic!("unexpected {other}"),
        }
    }

    fn small_spec(seed: u64) -> SynthSpec {
        SynthSpec {
            pairs: 8,
            clusters: 4,
            text_dim: 24,
            video_dim: 32,
            frames: 5,
            noise: 0.05,
            seed,
        }
    }

    #[test]
    fn synth_output_is_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let spec = small_spec(11);
        let m1 = synth_generate(&spec, d1.path()).unwrap();
        let m2 = synth_generate(&spec, d2.path()).unwrap();
        assert_eq!(
            fs::read(&m1).unwrap(),
            fs::read(&m2).unwrap(),
            "manifests differ"
        );
        let mut names: Vec<String> = fs::read_dir(d1.path().join("tensors"))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(names.len(), 16);
        for name in names {
            let b1 = fs::read(d1.path().join("tensors").join(&name)).unwrap();
            let b2 = fs::read(d2.path().join("tensors").join(&name)).unwrap();
            assert_eq!(b1, b2, "{name} differs");
        }
    }

    #[test]
    fn synth_noiseless_pairs_recover_their_latents() {
        // One cluster per pair, zero noise: every token row must equal
        // latent x mixing map exactly (up to f32 narrowing), and latent
        // nearest-neighbor matching is the identity.
        let dir = tempfile::tempdir().unwrap();
        let mut spec = small_spec(13);
        spec.pairs = 6;
        spec.clusters = 6;
        spec.noise = 0.0;
        let (manifest, details) = synth_generate_with_details(&spec, dir.path()).unwrap();
        let ds = load_dataset(&manifest).unwrap();
        assert_eq!(ds.items.len(), 6);

        for (k, item) in ds.items.iter().enumerate() {
            let c = details.assignments[k];
            let latent =
                DenseMatrix::from_rows(&[details.cluster_latents.row(c).to_vec()]).unwrap();
            let base_t = matmul(&latent, &details.mixing_text).unwrap();
            for i in 0..item.text.rows() {
                for j in 0..item.text.cols() {
                    assert!(
                        (item.text.get(i, j) - base_t.get(0, j)).abs() < 1e-5,
                        "pair {k} token {i} dim {j}"
                    );
                }
            }
        }

        // Latent NN: each pair's latent is closest to itself among all
        // video latents (distinct clusters, distance 0 to itself).
        for i in 0..spec.pairs {
            let li = details.cluster_latents.row(details.assignments[i]);
            let mut best = (f64::INFINITY, usize::MAX);
            for j in 0..spec.pairs {
                let lj = details.cluster_latents.row(details.assignments[j]);
                let d2: f64 = li.iter().zip(lj).map(|(a, b)| (a - b) * (a - b)).sum();
                if d2 < best.0 {
                    best = (d2, j);
                }
            }
            assert_eq!(best.1, i);
        }
    }

    #[test]
    fn synth_pair_offsets_bind_modalities() {
        // With noise on, the two sides of a pair share a latent offset, so
        // brute-force nearest neighbor against the ground-truth per-pair
        // bases identifies every pair exactly, even among same-cluster
        // distractors. This is the signal a trained retriever picks up.
        let dir = tempfile::tempdir().unwrap();
        let mut spec = small_spec(11);
        spec.pairs = 8;
        spec.clusters = 2;
        spec.text_dim = 96;
        spec.video_dim = 128;
        spec.frames = 4;
        spec.noise = 0.05;
        let (manifest, details) = synth_generate_with_details(&spec, dir.path()).unwrap();
        let ds = load_dataset(&manifest).unwrap();

        let base = |k: usize, map: &DenseMatrix| -> Vec<f64> {
            let c = details.assignments[k];
            let latent: Vec<f64> = (0..SYNTH_LATENT_DIM)
                .map(|j| details.cluster_latents.get(c, j) + details.pair_offsets.get(k, j))
                .collect();
            let l = DenseMatrix::from_rows(&[latent]).unwrap();
            matmul(&l, map).unwrap().row(0).to_vec()
        };
        let mean_rows = |m: &DenseMatrix| -> Vec<f64> {
            (0..m.cols())
                .map(|j| (0..m.rows()).map(|i| m.get(i, j)).sum::<f64>() / m.rows() as f64)
                .collect()
        };
        let nearest = |probe: &[f64], bases: &[Vec<f64>]| -> usize {
            let mut best = (f64::INFINITY, usize::MAX);
            for (j, b) in bases.iter().enumerate() {
                let d2: f64 = probe.iter().zip(b).map(|(a, b)| (a - b) * (a - b)).sum();
                if d2 < best.0 {
                    best = (d2, j);
                }
            }
            best.1
        };

        let text_bases: Vec<Vec<f64>> =
            (0..spec.pairs).map(|k| base(k, &details.mixing_text)).collect();
        let video_bases: Vec<Vec<f64>> =
            (0..spec.pairs).map(|k| base(k, &details.mixing_video)).collect();
        for (k, item) in ds.items.iter().enumerate() {
            assert_eq!(nearest(&mean_rows(&item.text), &text_bases), k, "text {k}");
            assert_eq!(nearest(&mean_rows(&item.video), &video_bases), k, "video {k}");
        }
    }

    #[test]
    fn synth_split_layout_at_desk_scale() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = small_spec(7);
        spec.pairs = 32;
        spec.clusters = 8;
        spec.text_dim = 12;
        spec.video_dim = 16;
        spec.frames = 3;
        let (manifest, details) = synth_generate_with_details(&spec, dir.path()).unwrap();
        let ds = load_dataset(&manifest).unwrap();
        let test = ds.split_items(Split::Test);
        let val = ds.split_items(Split::Val);
        let train = ds.split_items(Split::Train);
        assert_eq!(test.len(), 8);
        assert_eq!(val.len(), 4);
        assert_eq!(train.len(), 20);

        // The 8 test pairs cover all 8 clusters exactly once.
        let mut seen = vec![0usize; 8];
        for (k, item) in ds.items.iter().enumerate() {
            if item.split == Split::Test {
                seen[details.assignments[k]] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1), "{seen:?}");

        // Token counts follow the 3 + (k mod 3) pattern.
        for (k, item) in ds.items.iter().enumerate() {
            assert_eq!(item.text.rows(), 3 + (k % 3));
            assert_eq!(item.tokens.len(), 3 + (k % 3));
        }
    }

    #[test]
    fn synth_validates_spec() {
        let dir = tempfile::tempdir().unwrap();
        let mut bad = small_spec(1);
        bad.clusters = 20;
        assert!(synth_generate(&bad, dir.path()).is_err());
        let mut zero = small_spec(1);
        zero.pairs = 0;
        assert!(synth_generate(&zero, dir.path()).is_err());
        let mut neg = small_spec(1);
        neg.noise = -0.5;
        assert!(synth_generate(&neg, dir.path()).is_err());
    }
}
