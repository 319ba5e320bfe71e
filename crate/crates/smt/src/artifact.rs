//! Versioned binary artifacts for the pipeline stages, plus the raw f32
//! embedding-matrix format with its JSON sidecar.
//!
//! Every artifact embeds the hash of the configuration that produced it;
//! loading under a different hash is refused so stale caches cannot leak
//! between experiments.

use std::fmt;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::dictionary::Dictionary;
use crate::error::{Result, SmtError};
use crate::linalg::eigh;
use crate::preprocess::WhiteningOperator;
use crate::smt_core::{AccumulationMode, CooccurrenceStats, SpectralEmbedding};

pub const ARTIFACT_MAGIC: &[u8; 4] = b"SMTB";
pub const ARTIFACT_VERSION: u16 = 1;

const KIND_WHITENING: u16 = 1;
const KIND_DICTIONARY: u16 = 2;
const KIND_STATS: u16 = 3;
const KIND_EMBEDDING: u16 = 4;

/// Sanity ceiling on matrix dimensions in decoded artifacts.
const MAX_DIM: usize = 1 << 24;

/// A 32-byte configuration digest carried by every artifact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfigHash(pub [u8; 32]);

impl ConfigHash {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(bytes);
        ConfigHash(h.finalize().into())
    }

    /// Chain a stage name and payload onto a parent hash.
    pub fn derive(parent: Option<&ConfigHash>, stage: &str, payload: &str) -> Self {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        if let Some(p) = parent {
            h.update(p.0);
        }
        h.update(stage.as_bytes());
        h.update([0u8]);
        h.update(payload.as_bytes());
        ConfigHash(h.finalize().into())
    }

    pub fn hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Short prefix used in artifact file names.
    pub fn short(&self) -> String {
        self.hex()[..12].to_string()
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        if s.len() != 64 || !s.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(SmtError::Format(format!("bad hash literal {s:?}")));
        }
        let mut out = [0u8; 32];
        for (i, chunk) in s.as_bytes().chunks_exact(2).enumerate() {
            let hi = (chunk[0] as char).to_digit(16).unwrap() as u8;
            let lo = (chunk[1] as char).to_digit(16).unwrap() as u8;
            out[i] = hi << 4 | lo;
        }
        Ok(ConfigHash(out))
    }
}

impl fmt::Display for ConfigHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.hex())
    }
}

#[derive(Debug)]
pub enum Artifact {
    Whitening(WhiteningOperator),
    Dictionary(Dictionary),
    Stats(CooccurrenceStats),
    Embedding(SpectralEmbedding),
}

impl Artifact {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Artifact::Whitening(_) => "whitening",
            Artifact::Dictionary(_) => "dictionary",
            Artifact::Stats(_) => "stats",
            Artifact::Embedding(_) => "embedding",
        }
    }

    fn kind_code(&self) -> u16 {
        match self {
            Artifact::Whitening(_) => KIND_WHITENING,
            Artifact::Dictionary(_) => KIND_DICTIONARY,
            Artifact::Stats(_) => KIND_STATS,
            Artifact::Embedding(_) => KIND_EMBEDDING,
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(SmtError::Format(format!(
                "artifact truncated: need {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn dim(&mut self, what: &str) -> Result<usize> {
        let v = self.u32()? as usize;
        if v == 0 || v > MAX_DIM {
            return Err(SmtError::Format(format!("implausible {what} {v}")));
        }
        Ok(v)
    }

    fn f64_array(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| SmtError::Format("matrix size overflow".into()))?;
        let raw = self.take(n)?;
        let mut out = Array2::zeros((rows, cols));
        let dst = out.as_slice_mut().expect("contiguous");
        for (d, chunk) in dst.iter_mut().zip(raw.chunks_exact(8)) {
            *d = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(out)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(SmtError::Format(format!(
                "{} trailing bytes after artifact payload",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn write_f64_slice<W: Write>(w: &mut W, data: &[f64]) -> std::io::Result<()> {
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Encode an artifact with its producing config hash.
pub fn encode_artifact<W: Write>(artifact: &Artifact, hash: &ConfigHash, mut w: W) -> Result<()> {
    let io_err = |e: std::io::Error| SmtError::io("<artifact>", e);
    w.write_all(ARTIFACT_MAGIC).map_err(io_err)?;
    w.write_all(&ARTIFACT_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&artifact.kind_code().to_le_bytes()).map_err(io_err)?;
    w.write_all(&hash.0).map_err(io_err)?;
    match artifact {
        Artifact::Whitening(op) => {
            w.write_all(&(op.dim as u32).to_le_bytes()).map_err(io_err)?;
            w.write_all(&op.lambda.to_le_bytes()).map_err(io_err)?;
            write_f64_slice(&mut w, op.forward.as_slice().expect("contiguous")).map_err(io_err)?;
        }
        Artifact::Dictionary(d) => {
            w.write_all(&(d.dim() as u32).to_le_bytes()).map_err(io_err)?;
            w.write_all(&(d.k() as u32).to_le_bytes()).map_err(io_err)?;
            w.write_all(&[u8::from(d.spherical)]).map_err(io_err)?;
            write_f64_slice(&mut w, d.elements.as_slice().expect("contiguous")).map_err(io_err)?;
        }
        Artifact::Stats(s) => {
            let mode = match s.mode() {
                AccumulationMode::Pairwise => 0u8,
                AccumulationMode::Aggregated => 1,
                AccumulationMode::SecondOrder => 2,
            };
            w.write_all(&[mode, u8::from(s.v_from_pairs())]).map_err(io_err)?;
            w.write_all(&(s.k() as u32).to_le_bytes()).map_err(io_err)?;
            w.write_all(&s.n_samples().to_le_bytes()).map_err(io_err)?;
            w.write_all(&s.n_pairs().to_le_bytes()).map_err(io_err)?;
            // raw sums, written as full symmetric row-major matrices
            let (v_upper, c_upper, code_sum) = s.raw_parts();
            let k = s.k();
            write_f64_slice(&mut w, code_sum.as_slice().expect("contiguous")).map_err(io_err)?;
            let mut row = vec![0.0f64; k];
            for m in [v_upper, c_upper] {
                for i in 0..k {
                    for (j, slot) in row.iter_mut().enumerate() {
                        *slot = if j < i { m[[j, i]] } else { m[[i, j]] };
                    }
                    write_f64_slice(&mut w, &row).map_err(io_err)?;
                }
            }
        }
        Artifact::Embedding(e) => {
            w.write_all(&(e.d_emb() as u32).to_le_bytes()).map_err(io_err)?;
            w.write_all(&(e.k() as u32).to_le_bytes()).map_err(io_err)?;
            w.write_all(&(e.drop_first as u32).to_le_bytes()).map_err(io_err)?;
            w.write_all(&e.v_floor.to_le_bytes()).map_err(io_err)?;
            w.write_all(&(e.eigenvalues.len() as u32).to_le_bytes()).map_err(io_err)?;
            write_f64_slice(&mut w, &e.eigenvalues).map_err(io_err)?;
            let proj = e.projection.as_standard_layout();
            write_f64_slice(&mut w, proj.as_slice().expect("standard layout")).map_err(io_err)?;
        }
    }
    Ok(())
}

/// Decode any artifact, returning it with its embedded config hash.
pub fn decode_artifact(bytes: &[u8]) -> Result<(Artifact, ConfigHash)> {
    let mut c = Cursor::new(bytes);
    let magic = c.take(4)?;
    if magic != ARTIFACT_MAGIC {
        return Err(SmtError::Format("bad artifact magic".into()));
    }
    let version = c.u16()?;
    if version != ARTIFACT_VERSION {
        return Err(SmtError::Format(format!("unsupported artifact version {version}")));
    }
    let kind = c.u16()?;
    let mut hash = [0u8; 32];
    hash.copy_from_slice(c.take(32)?);
    let hash = ConfigHash(hash);

    let artifact = match kind {
        KIND_WHITENING => {
            let dim = c.dim("whitening dim")?;
            let lambda = c.f64()?;
            if !lambda.is_finite() || lambda < 0.0 {
                return Err(SmtError::Format(format!("bad lambda {lambda}")));
            }
            let forward = c.f64_array(dim, dim)?;
            c.finish()?;
            if forward.iter().any(|v| !v.is_finite()) {
                return Err(SmtError::Format("non-finite whitening matrix".into()));
            }
            // the stored forward operator is SPD; rebuild its inverse
            let (vals, vecs) = eigh(forward.view())?;
            if vals[0] <= 0.0 {
                return Err(SmtError::Format(format!(
                    "whitening operator not positive definite (min eigenvalue {})",
                    vals[0]
                )));
            }
            let mut inverse = Array2::zeros((dim, dim));
            for (idx, &val) in vals.iter().enumerate() {
                let col = vecs.column(idx);
                for i in 0..dim {
                    for j in 0..dim {
                        inverse[[i, j]] += col[i] * col[j] / val;
                    }
                }
            }
            Artifact::Whitening(WhiteningOperator {
                forward,
                inverse,
                lambda,
                dim,
            })
        }
        KIND_DICTIONARY => {
            let dim = c.dim("dictionary dim")?;
            let k = c.dim("dictionary size")?;
            let spherical = match c.u8()? {
                0 => false,
                1 => true,
                other => return Err(SmtError::Format(format!("bad spherical flag {other}"))),
            };
            let elements = c.f64_array(k, dim)?;
            c.finish()?;
            if elements.iter().any(|v| !v.is_finite()) {
                return Err(SmtError::Format("non-finite dictionary".into()));
            }
            Artifact::Dictionary(Dictionary {
                elements,
                spherical,
            })
        }
        KIND_STATS => {
            let mode = match c.u8()? {
                0 => AccumulationMode::Pairwise,
                1 => AccumulationMode::Aggregated,
                2 => AccumulationMode::SecondOrder,
                other => return Err(SmtError::Format(format!("bad mode {other}"))),
            };
            let v_from_pairs = match c.u8()? {
                0 => false,
                1 => true,
                other => return Err(SmtError::Format(format!("bad v_from_pairs flag {other}"))),
            };
            let k = c.dim("stats dim")?;
            let n_samples = c.u64()?;
            let n_pairs = c.u64()?;
            let code_sum_m = c.f64_array(1, k)?;
            let code_sum = code_sum_m.row(0).to_owned();
            let v_full = c.f64_array(k, k)?;
            let c_full = c.f64_array(k, k)?;
            c.finish()?;
            // keep only the upper triangles (the accumulator's storage)
            let mut v_upper = Array2::zeros((k, k));
            let mut c_upper = Array2::zeros((k, k));
            for i in 0..k {
                for j in i..k {
                    v_upper[[i, j]] = v_full[[i, j]];
                    c_upper[[i, j]] = c_full[[i, j]];
                }
            }
            Artifact::Stats(CooccurrenceStats::from_raw_parts(
                mode,
                v_from_pairs,
                v_upper,
                c_upper,
                code_sum,
                n_samples,
                n_pairs,
            ))
        }
        KIND_EMBEDDING => {
            let d_emb = c.dim("embedding dim")?;
            let k = c.dim("embedding width")?;
            let drop_first = c.u32()? as usize;
            let v_floor = c.f64()?;
            let n_eigs = c.u32()? as usize;
            if n_eigs > MAX_DIM {
                return Err(SmtError::Format(format!("implausible eigenvalue count {n_eigs}")));
            }
            let mut eigenvalues = Vec::with_capacity(n_eigs);
            for _ in 0..n_eigs {
                eigenvalues.push(c.f64()?);
            }
            let projection = c.f64_array(d_emb, k)?;
            c.finish()?;
            if drop_first + d_emb != n_eigs {
                return Err(SmtError::Format(format!(
                    "eigenvalue count {n_eigs} does not cover drop_first {drop_first} + d_emb {d_emb}"
                )));
            }
            if projection.iter().any(|v| !v.is_finite()) || !v_floor.is_finite() {
                return Err(SmtError::Format("non-finite embedding".into()));
            }
            Artifact::Embedding(SpectralEmbedding {
                projection,
                eigenvalues,
                drop_first,
                v_floor,
            })
        }
        other => return Err(SmtError::Format(format!("unknown artifact kind {other}"))),
    };
    Ok((artifact, hash))
}

pub fn write_artifact_file(path: &Path, artifact: &Artifact, hash: &ConfigHash) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| SmtError::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode_artifact(artifact, hash, &mut w)?;
    w.flush().map_err(|e| SmtError::io(path, e))
}

/// Load an artifact and refuse it unless it was produced under
/// `expected_hash`.
pub fn read_artifact_file(path: &Path, expected_hash: &ConfigHash) -> Result<Artifact> {
    let bytes = std::fs::read(path).map_err(|e| SmtError::io(path, e))?;
    let (artifact, found) = decode_artifact(&bytes)?;
    if &found != expected_hash {
        return Err(SmtError::HashMismatch {
            artifact: path.display().to_string(),
            expected: expected_hash.short(),
            found: found.short(),
        });
    }
    Ok(artifact)
}

/// JSON sidecar describing an embedding matrix file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSidecar {
    pub rows: usize,
    pub cols: usize,
    pub pool_rows: usize,
    pub pool_cols: usize,
    pub d_emb: usize,
    pub dataset: String,
    pub split: String,
    pub config_hash: String,
}

/// Raw row-major little-endian f32 matrix next to a `.json` sidecar.
pub fn write_embedding_matrix(
    path: &Path,
    matrix: &Array2<f32>,
    sidecar: &EmbeddingSidecar,
) -> Result<()> {
    if matrix.dim() != (sidecar.rows, sidecar.cols) {
        return Err(SmtError::InvalidArgument(format!(
            "matrix {:?} vs sidecar {}x{}",
            matrix.dim(),
            sidecar.rows,
            sidecar.cols
        )));
    }
    let file = std::fs::File::create(path).map_err(|e| SmtError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for &v in matrix.as_slice().expect("contiguous") {
        w.write_all(&v.to_le_bytes()).map_err(|e| SmtError::io(path, e))?;
    }
    w.flush().map_err(|e| SmtError::io(path, e))?;
    let json = serde_json::to_string_pretty(sidecar)
        .map_err(|e| SmtError::Format(format!("sidecar serialization: {e}")))?;
    std::fs::write(sidecar_path(path), json).map_err(|e| SmtError::io(path, e))
}

pub fn sidecar_path(matrix_path: &Path) -> std::path::PathBuf {
    let mut os = matrix_path.as_os_str().to_owned();
    os.push(".json");
    os.into()
}

pub fn read_embedding_matrix(path: &Path) -> Result<(Array2<f32>, EmbeddingSidecar)> {
    let side_path = sidecar_path(path);
    let json = std::fs::read_to_string(&side_path).map_err(|e| SmtError::io(&side_path, e))?;
    let sidecar: EmbeddingSidecar = serde_json::from_str(&json)
        .map_err(|e| SmtError::Format(format!("bad sidecar {}: {e}", side_path.display())))?;
    let mut file = std::fs::File::open(path).map_err(|e| SmtError::io(path, e))?;
    let expected = sidecar
        .rows
        .checked_mul(sidecar.cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| SmtError::Format("sidecar dimensions overflow".into()))?;
    let meta = file.metadata().map_err(|e| SmtError::io(path, e))?;
    if meta.len() != expected as u64 {
        return Err(SmtError::Format(format!(
            "embedding matrix {} is {} bytes, sidecar implies {}",
            path.display(),
            meta.len(),
            expected
        )));
    }
    let mut raw = Vec::with_capacity(expected);
    file.read_to_end(&mut raw).map_err(|e| SmtError::io(path, e))?;
    let mut out = Array2::zeros((sidecar.rows, sidecar.cols));
    for (d, chunk) in out
        .as_slice_mut()
        .expect("contiguous")
        .iter_mut()
        .zip(raw.chunks_exact(4))
    {
        *d = f32::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok((out, sidecar))
}

/// Convenience: eigenvalue-ordered projection rows as an `Array1` per row,
/// used by the CSV exports.
pub fn projection_row(e: &SpectralEmbedding, row: usize) -> Array1<f64> {
    e.projection.row(row).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::fit_whitening;
    use crate::smt_core::solve_embedding;
    use crate::sparse::SparseCode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_hash() -> ConfigHash {
        ConfigHash::of_bytes(b"test config")
    }

    fn roundtrip(artifact: &Artifact) -> Artifact {
        let mut buf = Vec::new();
        encode_artifact(artifact, &sample_hash(), &mut buf).unwrap();
        let (back, hash) = decode_artifact(&buf).unwrap();
        assert_eq!(hash, sample_hash());
        back
    }

    #[test]
    fn whitening_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = Array2::from_shape_fn((100, 6), |_| rng.gen_range(-1.0f64..1.0));
        let op = fit_whitening(data.view(), 1e-2).unwrap();
        let back = roundtrip(&Artifact::Whitening(op.clone()));
        let Artifact::Whitening(b) = back else { panic!() };
        assert_eq!(b.forward, op.forward);
        assert_eq!(b.lambda, op.lambda);
        // inverse is reconstructed, not stored: check the inverse pair property
        let prod = b.forward.dot(&b.inverse);
        for i in 0..6 {
            for j in 0..6 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((prod[[i, j]] - expect).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn dictionary_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let elements = Array2::from_shape_fn((12, 5), |_| rng.gen_range(-1.0f64..1.0));
        let dict = Dictionary {
            elements,
            spherical: false,
        };
        let Artifact::Dictionary(b) = roundtrip(&Artifact::Dictionary(dict.clone())) else {
            panic!()
        };
        assert_eq!(b, dict);
    }

    #[test]
    fn stats_roundtrip_preserves_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = 10;
        let mut stats = CooccurrenceStats::new(k, AccumulationMode::Pairwise);
        for _ in 0..200 {
            let a = SparseCode::one_hot(k, rng.gen_range(0..k));
            let b = SparseCode::one_hot(k, rng.gen_range(0..k));
            stats.accumulate_pair(&a, &b).unwrap();
        }
        let Artifact::Stats(back) = roundtrip(&Artifact::Stats(stats.clone())) else {
            panic!()
        };
        assert_eq!(back.n_samples(), stats.n_samples());
        assert_eq!(back.n_pairs(), stats.n_pairs());
        assert_eq!(back.code_mean().unwrap(), stats.code_mean().unwrap());
        assert_eq!(back.v_matrix().unwrap(), stats.v_matrix().unwrap());
        assert_eq!(back.c_matrix().unwrap(), stats.c_matrix().unwrap());
        let e1 = solve_embedding(&stats, 3, 0, 1e-9).unwrap();
        let e2 = solve_embedding(&back, 3, 0, 1e-9).unwrap();
        assert_eq!(e1.projection, e2.projection);
    }

    #[test]
    fn embedding_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = 8;
        let mut stats = CooccurrenceStats::new(k, AccumulationMode::Pairwise);
        for _ in 0..100 {
            let a = SparseCode::one_hot(k, rng.gen_range(0..k));
            let b = SparseCode::one_hot(k, rng.gen_range(0..k));
            stats.accumulate_pair(&a, &b).unwrap();
        }
        let emb = solve_embedding(&stats, 3, 1, 1e-9).unwrap();
        let Artifact::Embedding(b) = roundtrip(&Artifact::Embedding(emb.clone())) else {
            panic!()
        };
        assert_eq!(b, emb);
    }

    #[test]
    fn decode_rejects_malformed() {
        assert!(decode_artifact(b"").is_err());
        assert!(decode_artifact(b"NOPE").is_err());
        let mut buf = Vec::new();
        let dict = Dictionary {
            elements: Array2::zeros((2, 2)),
            spherical: true,
        };
        encode_artifact(&Artifact::Dictionary(dict), &sample_hash(), &mut buf).unwrap();
        // corrupt the version
        let mut bad = buf.clone();
        bad[4] = 0xff;
        assert!(decode_artifact(&bad).is_err());
        // truncate
        assert!(decode_artifact(&buf[..buf.len() - 3]).is_err());
        // trailing garbage
        let mut long = buf.clone();
        long.push(0);
        assert!(decode_artifact(&long).is_err());
        // implausible dimension must not trigger a huge allocation
        let mut huge = buf.clone();
        huge[8 + 32..8 + 32 + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_artifact(&huge).is_err());
    }

    #[test]
    fn file_roundtrip_checks_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dict.smtb");
        let dict = Dictionary {
            elements: Array2::from_shape_fn((3, 2), |(i, j)| (i * 2 + j) as f64),
            spherical: false,
        };
        write_artifact_file(&path, &Artifact::Dictionary(dict), &sample_hash()).unwrap();
        assert!(read_artifact_file(&path, &sample_hash()).is_ok());
        let other = ConfigHash::of_bytes(b"different");
        let err = read_artifact_file(&path, &other).unwrap_err();
        assert!(matches!(err, SmtError::HashMismatch { .. }));
    }

    #[test]
    fn embedding_matrix_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embed.f32");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Array2::from_shape_fn((7, 12), |_| rng.gen_range(-1.0f32..1.0));
        let sidecar = EmbeddingSidecar {
            rows: 7,
            cols: 12,
            pool_rows: 2,
            pool_cols: 2,
            d_emb: 3,
            dataset: "mnist".into(),
            split: "test".into(),
            config_hash: sample_hash().hex(),
        };
        write_embedding_matrix(&path, &m, &sidecar).unwrap();
        let (back, side) = read_embedding_matrix(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(side, sidecar);
        // wrong length is refused
        std::fs::write(&path, b"123").unwrap();
        assert!(read_embedding_matrix(&path).is_err());
    }

    #[test]
    fn hash_hex_roundtrip() {
        let h = sample_hash();
        let back = ConfigHash::from_hex(&h.hex()).unwrap();
        assert_eq!(h, back);
        assert!(ConfigHash::from_hex("zz").is_err());
        let chained = ConfigHash::derive(Some(&h), "stage", "payload");
        assert_ne!(chained, h);
        assert_eq!(chained, ConfigHash::derive(Some(&h), "stage", "payload"));
        assert_ne!(chained, ConfigHash::derive(Some(&h), "stage2", "payload"));
    }
}
