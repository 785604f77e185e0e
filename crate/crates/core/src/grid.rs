//! Truncated signed distance volumes: storage, sign partitioning, patch
//! chunking/recomposition, and bit-exact file I/O.
//!
//! Values are stored in voxel units within `[-truncation, +truncation]`,
//! row-major with z fastest (index = `(x*D + y)*D + z`). Negative means
//! inside/occupied, positive means outside/empty; an exact 0 counts as
//! positive so every voxel has a deterministic sign.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

/// File magic for the binary grid format.
pub const GRID_MAGIC: [u8; 4] = *b"PCTS";
/// Current grid file format version.
pub const GRID_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("resolution {d} is not divisible by patch side {r}")]
    NotDivisible { d: usize, r: usize },
    #[error("resolution must be >= 4, got {0}")]
    ResolutionTooSmall(usize),
    #[error("expected {expected} values for a {d}^3 grid, got {got}")]
    WrongValueCount { d: usize, expected: usize, got: usize },
    #[error("value {value} at index {index} exceeds truncation {truncation}")]
    OutOfRange { index: usize, value: f32, truncation: f32 },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("grids have mismatched resolutions {0} and {1}")]
    ResolutionMismatch(usize, usize),
    #[error("chunks do not tile the {0}^3 grid exactly (voxel {1} covered {2} times)")]
    BadTiling(usize, usize, usize),
    #[error("chunk list is empty")]
    NoChunks,
    #[error("bad magic: expected \"PCTS\"")]
    BadMagic,
    #[error("unsupported grid file version {0}")]
    VersionMismatch(u32),
    #[error("truncated grid file: expected {expected} payload floats, got {got}")]
    TruncatedFile { expected: usize, got: usize },
    #[error("grid file payload contains a non-finite value at index {0}")]
    NonFinitePayload(usize),
    #[error("invalid header field {0}")]
    BadHeader(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// What to do with values outside `[-t, +t]` at construction time.
///
/// Fused TSDFs land exactly on the truncation bound, where float error can
/// overshoot by an ulp, so the default clamps and counts instead of failing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClampPolicy {
    #[default]
    Clamp,
    Reject,
}

/// A `D^3` truncated signed distance volume. Immutable after construction;
/// all operations on it are pure and safe to run from any thread.
#[derive(Debug, Clone, PartialEq)]
pub struct TsdfGrid {
    resolution: usize,
    truncation: f32,
    voxel_size: f32,
    values: Vec<f32>,
    clamped: usize,
}

impl TsdfGrid {
    /// Builds a grid from raw values in canonical order, applying `policy`
    /// to out-of-range entries. Non-finite values are always rejected.
    pub fn from_values(
        resolution: usize,
        truncation: f32,
        voxel_size: f32,
        values: Vec<f32>,
        policy: ClampPolicy,
    ) -> Result<Self, GridError> {
        if resolution < 4 {
            return Err(GridError::ResolutionTooSmall(resolution));
        }
        if !(truncation > 0.0) || !truncation.is_finite() {
            return Err(GridError::BadHeader("truncation"));
        }
        if !(voxel_size > 0.0) || !voxel_size.is_finite() {
            return Err(GridError::BadHeader("voxel_size"));
        }
        let expected = resolution * resolution * resolution;
        if values.len() != expected {
            return Err(GridError::WrongValueCount { d: resolution, expected, got: values.len() });
        }
        let mut values = values;
        let mut clamped = 0usize;
        for (i, v) in values.iter_mut().enumerate() {
            if !v.is_finite() {
                return Err(GridError::NonFinite(i));
            }
            if v.abs() > truncation {
                match policy {
                    ClampPolicy::Clamp => {
                        *v = v.clamp(-truncation, truncation);
                        clamped += 1;
                    }
                    ClampPolicy::Reject => {
                        return Err(GridError::OutOfRange { index: i, value: *v, truncation });
                    }
                }
            }
        }
        Ok(Self { resolution, truncation, voxel_size, values, clamped })
    }

    /// Grid filled with `+truncation` (all empty / unobserved).
    pub fn empty(resolution: usize, truncation: f32, voxel_size: f32) -> Result<Self, GridError> {
        let n = resolution * resolution * resolution;
        Self::from_values(resolution, truncation, voxel_size, vec![truncation; n], ClampPolicy::Reject)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn truncation(&self) -> f32 {
        self.truncation
    }

    pub fn voxel_size(&self) -> f32 {
        self.voxel_size
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Number of values clamped at construction (the out-of-range warning counter).
    pub fn clamped_count(&self) -> usize {
        self.clamped
    }

    /// Canonical linear index of voxel `(x, y, z)`.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.resolution + y) * self.resolution + z
    }

    #[inline]
    pub fn value(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[self.index(x, y, z)]
    }

    /// Center of voxel `(x, y, z)` in canonical coordinates. The grid spans
    /// `[-D*vs/2, +D*vs/2]` per axis, so a normalized shape (vs = 1/D) lives
    /// in the unit cube centered at the origin.
    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        let vs = self.voxel_size as f64;
        let half = 0.5 * self.resolution as f64 * vs;
        [
            (x as f64 + 0.5) * vs - half,
            (y as f64 + 0.5) * vs - half,
            (z as f64 + 0.5) * vs - half,
        ]
    }

    /// Sign test used everywhere: negative = occupied, zero or positive = empty.
    #[inline]
    pub fn is_negative(v: f32) -> bool {
        v < 0.0
    }

    /// Splits the grid into `(D/R)^3` cubic patches of side `r`, tiled exactly
    /// once, in canonical origin order (x slowest, z fastest).
    pub fn chunk(&self, r: usize) -> Result<Vec<PatchChunk>, GridError> {
        if r == 0 || self.resolution % r != 0 {
            return Err(GridError::NotDivisible { d: self.resolution, r });
        }
        let n = self.resolution / r;
        let mut chunks = Vec::with_capacity(n * n * n);
        for cx in 0..n {
            for cy in 0..n {
                for cz in 0..n {
                    let origin = [cx * r, cy * r, cz * r];
                    let mut values = Vec::with_capacity(r * r * r);
                    for dx in 0..r {
                        for dy in 0..r {
                            for dz in 0..r {
                                values.push(self.value(origin[0] + dx, origin[1] + dy, origin[2] + dz));
                            }
                        }
                    }
                    chunks.push(PatchChunk { origin, side: r, values });
                }
            }
        }
        Ok(chunks)
    }

    /// Reassembles a grid from patches. Inverse of [`TsdfGrid::chunk`]:
    /// `recompose(chunk(g, r), d) == g` bit-exactly. The chunks must tile
    /// the `d^3` volume exactly once.
    pub fn recompose(
        chunks: &[PatchChunk],
        d: usize,
        truncation: f32,
        voxel_size: f32,
    ) -> Result<Self, GridError> {
        if chunks.is_empty() {
            return Err(GridError::NoChunks);
        }
        let total = d * d * d;
        let mut values = vec![0.0f32; total];
        let mut covered = vec![0u8; total];
        for chunk in chunks {
            let r = chunk.side;
            if r == 0 || d % r != 0 {
                return Err(GridError::NotDivisible { d, r });
            }
            let [ox, oy, oz] = chunk.origin;
            if ox % r != 0 || oy % r != 0 || oz % r != 0 || ox + r > d || oy + r > d || oz + r > d {
                return Err(GridError::BadTiling(d, (ox * d + oy) * d + oz, 0));
            }
            if chunk.values.len() != r * r * r {
                return Err(GridError::WrongValueCount { d: r, expected: r * r * r, got: chunk.values.len() });
            }
            let mut it = chunk.values.iter();
            for dx in 0..r {
                for dy in 0..r {
                    for dz in 0..r {
                        let idx = ((ox + dx) * d + (oy + dy)) * d + (oz + dz);
                        values[idx] = *it.next().unwrap();
                        covered[idx] += 1;
                    }
                }
            }
        }
        if let Some(idx) = covered.iter().position(|&c| c != 1) {
            return Err(GridError::BadTiling(d, idx, covered[idx] as usize));
        }
        Self::from_values(d, truncation, voxel_size, values, ClampPolicy::Clamp)
    }

    /// Partitions voxels by sign agreement between a prediction and the
    /// ground truth. `occ_wrong` marks gt-positive / pred-negative voxels,
    /// `empty_wrong` gt-negative / pred-positive, `correct` the rest.
    pub fn sign_partition(pred: &TsdfGrid, gt: &TsdfGrid) -> Result<SignPartition, GridError> {
        if pred.resolution != gt.resolution {
            return Err(GridError::ResolutionMismatch(pred.resolution, gt.resolution));
        }
        let n = pred.values.len();
        let mut part = SignPartition {
            occ_wrong: vec![false; n],
            empty_wrong: vec![false; n],
            correct: vec![false; n],
        };
        for i in 0..n {
            let p_neg = Self::is_negative(pred.values[i]);
            let g_neg = Self::is_negative(gt.values[i]);
            match (g_neg, p_neg) {
                (false, true) => part.occ_wrong[i] = true,
                (true, false) => part.empty_wrong[i] = true,
                _ => part.correct[i] = true,
            }
        }
        Ok(part)
    }

    /// Writes the grid in the binary `PCTS` format (little-endian, no compression).
    pub fn write(&self, path: &Path) -> Result<(), GridError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&GRID_MAGIC)?;
        w.write_all(&GRID_VERSION.to_le_bytes())?;
        w.write_all(&(self.resolution as u32).to_le_bytes())?;
        w.write_all(&self.truncation.to_le_bytes())?;
        w.write_all(&self.voxel_size.to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a grid written by [`TsdfGrid::write`]. Round-trips bit-exactly.
    pub fn read(path: &Path) -> Result<Self, GridError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| GridError::BadMagic)?;
        if magic != GRID_MAGIC {
            return Err(GridError::BadMagic);
        }
        let version = read_u32(&mut r).map_err(|_| GridError::BadHeader("version"))?;
        if version != GRID_VERSION {
            return Err(GridError::VersionMismatch(version));
        }
        let d = read_u32(&mut r).map_err(|_| GridError::BadHeader("resolution"))? as usize;
        if d < 4 || d > 4096 {
            return Err(GridError::BadHeader("resolution"));
        }
        let truncation = read_f32(&mut r).map_err(|_| GridError::BadHeader("truncation"))?;
        let voxel_size = read_f32(&mut r).map_err(|_| GridError::BadHeader("voxel_size"))?;
        let expected = d * d * d;
        let mut payload = vec![0u8; expected * 4];
        let mut got = 0usize;
        while got < payload.len() {
            match r.read(&mut payload[got..])? {
                0 => break,
                k => got += k,
            }
        }
        if got < payload.len() {
            return Err(GridError::TruncatedFile { expected, got: got / 4 });
        }
        let mut values = Vec::with_capacity(expected);
        for (i, bytes) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
            if !v.is_finite() {
                return Err(GridError::NonFinitePayload(i));
            }
            values.push(v);
        }
        Self::from_values(d, truncation, voxel_size, values, ClampPolicy::Clamp)
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read) -> std::io::Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

/// One cubic patch of a grid: `side^3` values rooted at `origin`, which is
/// always a multiple of `side` per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchChunk {
    pub origin: [usize; 3],
    pub side: usize,
    pub values: Vec<f32>,
}

/// Three disjoint voxel masks that together cover the whole grid.
#[derive(Debug, Clone)]
pub struct SignPartition {
    pub occ_wrong: Vec<bool>,
    pub empty_wrong: Vec<bool>,
    pub correct: Vec<bool>,
}

impl SignPartition {
    pub fn len(&self) -> usize {
        self.correct.len()
    }

    pub fn is_empty(&self) -> bool {
        self.correct.is_empty()
    }
}
