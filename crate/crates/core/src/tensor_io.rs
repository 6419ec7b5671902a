//! Bit-exact file formats: feature grids, PGM label rasters, dataset
//! manifests, and persisted model artifacts.
//!
//! Feature grid container (`.pfv`, little-endian):
//! - magic: ASCII `PASTAFV1` (8 bytes)
//! - gridH, gridW, dim: u32
//! - data: gridH*gridW*dim f32, row-major (row, col, channel)
//!
//! Label rasters are binary PGM (`P5`): maxval 255 with one byte per pixel,
//! or maxval 65535 with two big-endian bytes per pixel for instance ids
//! above 255.
//!
//! Manifests are plain text: a `role=<mixed|reference|test>` line followed by
//! one tab-separated record per line (featurePath, imageH, imageW,
//! instanceMaskPath|`-`, gtMaskPath|`-`). Relative paths are resolved against
//! the manifest's directory.
//!
//! All writers are byte-deterministic and go through a temp-file + rename so
//! readers never observe partial files.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::clustering::ClusterCodebook;
use crate::distribution::{AnomalyClusterSet, ClusterDistribution, PastaModel};

pub const FEATURE_MAGIC: &[u8; 8] = b"PASTAFV1";
pub const CODEBOOK_MAGIC: &[u8; 8] = b"PASTACV1";
pub const MODEL_MAGIC: &[u8; 8] = b"PASTAMV1";
pub const BAG_MAGIC: &[u8; 8] = b"PASTABV1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("bad magic: expected {expected}, found {found:?}")]
    BadMagic {
        expected: &'static str,
        found: Vec<u8>,
    },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("value {value} out of range (max {max})")]
    ValueOutOfRange { value: u32, max: u32 },
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("manifest contains no records")]
    EmptyManifest,
    #[error("manifest parse error at line {line}: {msg}")]
    ManifestParse { line: usize, msg: String },
    #[error("unsupported artifact version: {found}")]
    VersionMismatch { found: String },
    #[error("corrupt artifact: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl IoError {
    /// True when the filesystem or file contents made the data unusable, as
    /// opposed to well-formed data failing a semantic check. The CLI maps
    /// these to exit code 2.
    pub fn is_io(&self) -> bool {
        !matches!(
            self,
            IoError::DimMismatch(_)
                | IoError::EmptyManifest
                | IoError::ManifestParse { .. }
                | IoError::ValueOutOfRange { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, IoError>;

// ---------------------------------------------------------------------------
// Feature grids
// ---------------------------------------------------------------------------

/// One image's patch-level embedding tensor: a gridH x gridW grid of
/// dim-dimensional f32 vectors, stored row-major (row, col, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureGrid {
    /// Builds a grid, rejecting zero dimensions, length mismatches and
    /// non-finite values.
    pub fn new(grid_h: usize, grid_w: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 || dim == 0 {
            return Err(IoError::UnsupportedFormat(format!(
                "feature grid dims must be >= 1, got {grid_h}x{grid_w}x{dim}"
            )));
        }
        let expect = grid_h * grid_w * dim;
        if data.len() != expect {
            return Err(IoError::DimMismatch(format!(
                "feature grid data length {} != {}x{}x{}",
                data.len(),
                grid_h,
                grid_w,
                dim
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(IoError::NonFinite { index });
        }
        Ok(Self {
            grid_h,
            grid_w,
            dim,
            data,
        })
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Patch vector at flat cell index (row-major).
    pub fn patch(&self, cell: usize) -> &[f32] {
        &self.data[cell * self.dim..(cell + 1) * self.dim]
    }

    pub fn patch_at(&self, row: usize, col: usize) -> &[f32] {
        self.patch(row * self.grid_w + col)
    }
}

/// A flat collection of same-dimension embedding vectors, the input stream
/// for codebook fitting and bag construction.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    dim: usize,
    data: Vec<f32>,
}

impl FeatureSet {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(IoError::UnsupportedFormat(
                "feature dim must be >= 1".into(),
            ));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(IoError::DimMismatch(format!(
                "feature data length {} not a multiple of dim {dim}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(IoError::NonFinite { index });
        }
        Ok(Self { dim, data })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Appends all patches of a grid in row-major order.
    pub fn push_grid(&mut self, grid: &FeatureGrid) -> Result<()> {
        if grid.dim() != self.dim {
            return Err(IoError::DimMismatch(format!(
                "grid dim {} != feature set dim {}",
                grid.dim(),
                self.dim
            )));
        }
        self.data.extend_from_slice(grid.data());
        Ok(())
    }
}

/// Writes `bytes` to `path` atomically (temp file in the same directory,
/// then rename).
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = match dir {
        Some(d) => tempfile::NamedTempFile::new_in(d)?,
        None => tempfile::NamedTempFile::new_in(".")?,
    };
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| IoError::Io(e.error))?;
    Ok(())
}

fn open_all(path: &Path) -> Result<Vec<u8>> {
    match fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            Err(IoError::MissingFile(path.to_path_buf()))
        }
        Err(e) => Err(IoError::Io(e)),
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(IoError::Truncated {
                expected: (self.pos + n) as u64,
                found: self.buf.len() as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32_le(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64_le(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32_le(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64_le(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decodes a `.pfv` feature grid file.
pub fn read_feature_grid(path: impl AsRef<Path>) -> Result<FeatureGrid> {
    let bytes = open_all(path.as_ref())?;
    if bytes.len() < 8 || &bytes[..8] != FEATURE_MAGIC {
        return Err(IoError::BadMagic {
            expected: "PASTAFV1",
            found: bytes.get(..8).unwrap_or(&bytes).to_vec(),
        });
    }
    let mut r = ByteReader::new(&bytes[8..]);
    let grid_h = r.u32_le()? as usize;
    let grid_w = r.u32_le()? as usize;
    let dim = r.u32_le()? as usize;
    if grid_h == 0 || grid_w == 0 || dim == 0 {
        return Err(IoError::UnsupportedFormat(format!(
            "feature grid dims must be >= 1, got {grid_h}x{grid_w}x{dim}"
        )));
    }
    let count = grid_h
        .checked_mul(grid_w)
        .and_then(|c| c.checked_mul(dim))
        .ok_or_else(|| IoError::UnsupportedFormat("feature grid dims overflow".into()))?;
    if r.remaining() < count * 4 {
        return Err(IoError::Truncated {
            expected: (8 + 12 + count * 4) as u64,
            found: bytes.len() as u64,
        });
    }
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(r.f32_le()?);
    }
    if r.remaining() != 0 {
        return Err(IoError::UnsupportedFormat(format!(
            "{} trailing bytes after feature grid payload",
            r.remaining()
        )));
    }
    FeatureGrid::new(grid_h, grid_w, dim, data)
}

/// Reads only the header of a `.pfv` file: (gridH, gridW, dim).
pub fn read_feature_grid_header(path: impl AsRef<Path>) -> Result<(usize, usize, usize)> {
    let path = path.as_ref();
    let mut file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(IoError::MissingFile(path.to_path_buf()))
        }
        Err(e) => return Err(IoError::Io(e)),
    };
    let mut head = [0u8; 20];
    let mut got = 0;
    while got < head.len() {
        let n = file.read(&mut head[got..])?;
        if n == 0 {
            return Err(IoError::Truncated {
                expected: 20,
                found: got as u64,
            });
        }
        got += n;
    }
    if &head[..8] != FEATURE_MAGIC {
        return Err(IoError::BadMagic {
            expected: "PASTAFV1",
            found: head[..8].to_vec(),
        });
    }
    let grid_h = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let grid_w = u32::from_le_bytes(head[12..16].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(head[16..20].try_into().unwrap()) as usize;
    Ok((grid_h, grid_w, dim))
}

fn encode_feature_grid(grid: &FeatureGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + grid.data.len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(grid.grid_h as u32).to_le_bytes());
    out.extend_from_slice(&(grid.grid_w as u32).to_le_bytes());
    out.extend_from_slice(&(grid.dim as u32).to_le_bytes());
    for v in &grid.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Encodes a feature grid to a `.pfv` file. Byte-deterministic.
pub fn write_feature_grid(grid: &FeatureGrid, path: impl AsRef<Path>) -> Result<()> {
    // Invariants are enforced at construction, but the data could have been
    // produced by arithmetic since; re-check finiteness before committing.
    if let Some(index) = grid.data.iter().position(|v| !v.is_finite()) {
        return Err(IoError::NonFinite { index });
    }
    atomic_write(path.as_ref(), &encode_feature_grid(grid))
}

/// Loads all feature grids of a manifest into one flat feature set, in
/// record order with row-major patches.
pub fn load_feature_set(manifest: &DatasetManifest) -> Result<FeatureSet> {
    let mut set: Option<FeatureSet> = None;
    for record in &manifest.records {
        let grid = read_feature_grid(&record.feature_path)?;
        match set.as_mut() {
            None => {
                let mut s = FeatureSet::empty(grid.dim());
                s.push_grid(&grid)?;
                set = Some(s);
            }
            Some(s) => s.push_grid(&grid)?,
        }
    }
    set.ok_or(IoError::EmptyManifest)
}

// ---------------------------------------------------------------------------
// Label rasters (binary PGM)
// ---------------------------------------------------------------------------

/// A height x width raster of unsigned integer labels. Used both for
/// tri-class masks (values in {0,1,2}) and instance-id rasters
/// (0 = background, 1..k = instances).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRaster {
    height: usize,
    width: usize,
    values: Vec<u16>,
}

impl LabelRaster {
    pub fn new(height: usize, width: usize, values: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(IoError::UnsupportedFormat(format!(
                "raster dims must be >= 1, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(IoError::DimMismatch(format!(
                "raster data length {} != {height}x{width}",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u16] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.values[y * self.width + x]
    }

    /// Validates tri-class semantics: every value in {0,1,2}.
    pub fn validate_tri_class(&self) -> Result<()> {
        for &v in &self.values {
            if v > 2 {
                return Err(IoError::ValueOutOfRange {
                    value: v as u32,
                    max: 2,
                });
            }
        }
        Ok(())
    }
}

struct PgmHeader {
    width: usize,
    height: usize,
    maxval: u32,
    data_offset: usize,
}

/// Parses a P5 header: magic, then width/height/maxval tokens separated by
/// whitespace (with `#` comments), then exactly one whitespace byte before
/// the sample data.
fn parse_pgm_header(bytes: &[u8], path: &Path) -> Result<PgmHeader> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(IoError::UnsupportedFormat(format!(
            "{} is not a binary PGM (P5) file",
            path.display()
        )));
    }
    let mut pos = 2;
    let mut tokens = [0usize; 3];
    for token in tokens.iter_mut() {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => {
                    return Err(IoError::Truncated {
                        expected: pos as u64 + 1,
                        found: bytes.len() as u64,
                    })
                }
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(IoError::UnsupportedFormat(format!(
                "malformed PGM header in {}",
                path.display()
            )));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        *token = text.parse().map_err(|_| {
            IoError::UnsupportedFormat(format!("bad PGM header number in {}", path.display()))
        })?;
    }
    // exactly one whitespace byte separates maxval from the samples
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(IoError::UnsupportedFormat(format!(
                "missing whitespace after PGM maxval in {}",
                path.display()
            )))
        }
    }
    let (width, height, maxval) = (tokens[0], tokens[1], tokens[2] as u32);
    if width == 0 || height == 0 {
        return Err(IoError::UnsupportedFormat(format!(
            "PGM dims must be >= 1 in {}",
            path.display()
        )));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(IoError::UnsupportedFormat(format!(
            "PGM maxval {maxval} unsupported in {}",
            path.display()
        )));
    }
    Ok(PgmHeader {
        width,
        height,
        maxval,
        data_offset: pos,
    })
}

/// Decodes a binary PGM raster. Maxval <= 255 reads one byte per pixel;
/// larger maxvals read two big-endian bytes per pixel.
pub fn read_label_raster(path: impl AsRef<Path>) -> Result<LabelRaster> {
    let path = path.as_ref();
    let bytes = open_all(path)?;
    let hdr = parse_pgm_header(&bytes, path)?;
    let pixels = hdr.width * hdr.height;
    let sample_bytes = if hdr.maxval <= 255 { 1 } else { 2 };
    let expected = hdr.data_offset + pixels * sample_bytes;
    if bytes.len() < expected {
        return Err(IoError::Truncated {
            expected: expected as u64,
            found: bytes.len() as u64,
        });
    }
    if bytes.len() > expected {
        return Err(IoError::UnsupportedFormat(format!(
            "{} trailing bytes after PGM payload in {}",
            bytes.len() - expected,
            path.display()
        )));
    }
    let data = &bytes[hdr.data_offset..];
    let values: Vec<u16> = if sample_bytes == 1 {
        data.iter().map(|&b| b as u16).collect()
    } else {
        data.chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    LabelRaster::new(hdr.height, hdr.width, values)
}

/// Reads only the dimensions (height, width) of a PGM file.
pub fn read_label_raster_dims(path: impl AsRef<Path>) -> Result<(usize, usize)> {
    let path = path.as_ref();
    let bytes = open_all(path)?;
    let hdr = parse_pgm_header(&bytes, path)?;
    Ok((hdr.height, hdr.width))
}

fn encode_label_raster(raster: &LabelRaster) -> Vec<u8> {
    let max = raster.values.iter().copied().max().unwrap_or(0);
    let maxval: u32 = if max <= 255 { 255 } else { 65535 };
    let mut out = Vec::new();
    out.extend_from_slice(
        format!("P5\n{} {}\n{}\n", raster.width, raster.height, maxval).as_bytes(),
    );
    if maxval == 255 {
        out.extend(raster.values.iter().map(|&v| v as u8));
    } else {
        for &v in &raster.values {
            out.extend_from_slice(&v.to_be_bytes());
        }
    }
    out
}

/// Encodes a raster as canonical binary PGM: maxval 255 when every value
/// fits a byte, else maxval 65535 with big-endian samples.
pub fn write_label_raster(raster: &LabelRaster, path: impl AsRef<Path>) -> Result<()> {
    atomic_write(path.as_ref(), &encode_label_raster(raster))
}

// ---------------------------------------------------------------------------
// Dataset manifests
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ManifestRole {
    Mixed,
    Reference,
    Test,
}

impl ManifestRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            ManifestRole::Mixed => "mixed",
            ManifestRole::Reference => "reference",
            ManifestRole::Test => "test",
        }
    }
}

/// One dataset entry: a feature grid plus optional instance-mask and
/// ground-truth rasters at image resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub feature_path: PathBuf,
    pub instance_mask_path: Option<PathBuf>,
    pub gt_mask_path: Option<PathBuf>,
    pub image_h: usize,
    pub image_w: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub role: ManifestRole,
    pub records: Vec<ImageRecord>,
}

fn parse_opt_path(field: &str, base: &Path) -> Option<PathBuf> {
    if field == "-" {
        None
    } else {
        Some(base.join(field))
    }
}

/// Reads and validates a manifest: every referenced file must exist, grid
/// dims must fit inside the declared image dims, raster dims must equal the
/// declared image dims, and all records must share one embedding dimension.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(IoError::MissingFile(path.to_path_buf()))
        }
        Err(e) => return Err(IoError::Io(e)),
    };
    let base = path.parent().unwrap_or_else(|| Path::new("")).to_path_buf();

    let mut role: Option<ManifestRole> = None;
    let mut records = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        if role.is_none() {
            let value = line
                .strip_prefix("role=")
                .ok_or_else(|| IoError::ManifestParse {
                    line: lineno + 1,
                    msg: "first line must be role=<mixed|reference|test>".into(),
                })?;
            role = Some(match value {
                "mixed" => ManifestRole::Mixed,
                "reference" => ManifestRole::Reference,
                "test" => ManifestRole::Test,
                other => {
                    return Err(IoError::ManifestParse {
                        line: lineno + 1,
                        msg: format!("unknown role {other:?}"),
                    })
                }
            });
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(IoError::ManifestParse {
                line: lineno + 1,
                msg: format!("expected 5 tab-separated fields, got {}", fields.len()),
            });
        }
        let image_h: usize = fields[1].parse().map_err(|_| IoError::ManifestParse {
            line: lineno + 1,
            msg: format!("bad imageH {:?}", fields[1]),
        })?;
        let image_w: usize = fields[2].parse().map_err(|_| IoError::ManifestParse {
            line: lineno + 1,
            msg: format!("bad imageW {:?}", fields[2]),
        })?;
        records.push(ImageRecord {
            feature_path: base.join(fields[0]),
            image_h,
            image_w,
            instance_mask_path: parse_opt_path(fields[3], &base),
            gt_mask_path: parse_opt_path(fields[4], &base),
        });
    }
    let role = role.ok_or(IoError::EmptyManifest)?;
    if records.is_empty() {
        return Err(IoError::EmptyManifest);
    }

    let mut dim: Option<usize> = None;
    for record in &records {
        let (grid_h, grid_w, grid_dim) = read_feature_grid_header(&record.feature_path)?;
        if record.image_h < grid_h || record.image_w < grid_w {
            return Err(IoError::DimMismatch(format!(
                "{}: image {}x{} smaller than grid {}x{}",
                record.feature_path.display(),
                record.image_h,
                record.image_w,
                grid_h,
                grid_w
            )));
        }
        match dim {
            None => dim = Some(grid_dim),
            Some(d) if d != grid_dim => {
                return Err(IoError::DimMismatch(format!(
                    "{}: embedding dim {} != manifest dim {}",
                    record.feature_path.display(),
                    grid_dim,
                    d
                )))
            }
            _ => {}
        }
        for raster in [&record.instance_mask_path, &record.gt_mask_path]
            .into_iter()
            .flatten()
        {
            let (h, w) = read_label_raster_dims(raster)?;
            if h != record.image_h || w != record.image_w {
                return Err(IoError::DimMismatch(format!(
                    "{}: raster {}x{} != declared image {}x{}",
                    raster.display(),
                    h,
                    w,
                    record.image_h,
                    record.image_w
                )));
            }
        }
    }
    Ok(DatasetManifest { role, records })
}

// ---------------------------------------------------------------------------
// Persisted artifacts: codebook, model, feature bag
// ---------------------------------------------------------------------------

struct ArtifactWriter {
    out: Vec<u8>,
}

impl ArtifactWriter {
    fn new(magic: &[u8; 8]) -> Self {
        Self {
            out: magic.to_vec(),
        }
    }

    fn u32_le(&mut self, v: u32) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }

    fn u64_le(&mut self, v: u64) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }

    fn f32_le(&mut self, v: f32) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }

    fn f64_le(&mut self, v: f64) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Checks an artifact magic: same family but different trailing version
/// yields `VersionMismatch`, anything else `Corrupt`.
fn check_magic(bytes: &[u8], magic: &[u8; 8]) -> Result<()> {
    if bytes.len() < 8 {
        return Err(IoError::Corrupt("file shorter than magic".into()));
    }
    if &bytes[..8] == magic {
        return Ok(());
    }
    if bytes[..6] == magic[..6] {
        return Err(IoError::VersionMismatch {
            found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
        });
    }
    Err(IoError::Corrupt(format!(
        "bad magic {:?}, expected {:?}",
        String::from_utf8_lossy(&bytes[..8]),
        String::from_utf8_lossy(magic)
    )))
}

fn write_codebook_block(w: &mut ArtifactWriter, cb: &ClusterCodebook) {
    w.u32_le(cb.k() as u32);
    w.u32_le(cb.dim() as u32);
    w.u64_le(cb.seed());
    for &c in cb.centroids() {
        w.f32_le(c);
    }
    for &n in cb.counts() {
        w.u64_le(n);
    }
    w.u32_le(cb.inertia_history().len() as u32);
    for &v in cb.inertia_history() {
        w.f64_le(v);
    }
}

fn read_codebook_block(r: &mut ByteReader) -> Result<ClusterCodebook> {
    let k = r.u32_le().map_err(corrupt)? as usize;
    let dim = r.u32_le().map_err(corrupt)? as usize;
    let seed = r.u64_le().map_err(corrupt)?;
    if k < 2 || dim == 0 {
        return Err(IoError::Corrupt(format!(
            "invalid codebook dims k={k} dim={dim}"
        )));
    }
    let mut centroids = Vec::with_capacity(k * dim);
    for _ in 0..k * dim {
        centroids.push(r.f32_le().map_err(corrupt)?);
    }
    let mut counts = Vec::with_capacity(k);
    for _ in 0..k {
        counts.push(r.u64_le().map_err(corrupt)?);
    }
    let hist_len = r.u32_le().map_err(corrupt)? as usize;
    let mut inertia_history = Vec::with_capacity(hist_len);
    for _ in 0..hist_len {
        inertia_history.push(r.f64_le().map_err(corrupt)?);
    }
    ClusterCodebook::new(k, dim, centroids, counts, seed, inertia_history)
        .map_err(|e| IoError::Corrupt(e.to_string()))
}

fn corrupt(e: IoError) -> IoError {
    IoError::Corrupt(e.to_string())
}

/// Persists a fitted codebook. Byte-deterministic.
pub fn save_codebook(cb: &ClusterCodebook, path: impl AsRef<Path>) -> Result<()> {
    let mut w = ArtifactWriter::new(CODEBOOK_MAGIC);
    write_codebook_block(&mut w, cb);
    atomic_write(path.as_ref(), &w.out)
}

pub fn load_codebook(path: impl AsRef<Path>) -> Result<ClusterCodebook> {
    let bytes = open_all(path.as_ref())?;
    check_magic(&bytes, CODEBOOK_MAGIC)?;
    let mut r = ByteReader::new(&bytes[8..]);
    let cb = read_codebook_block(&mut r)?;
    if r.remaining() != 0 {
        return Err(IoError::Corrupt("trailing bytes after codebook".into()));
    }
    Ok(cb)
}

fn write_distribution_block(w: &mut ArtifactWriter, dist: &ClusterDistribution) {
    w.u64_le(dist.total());
    for &c in dist.counts() {
        w.u64_le(c);
    }
}

fn read_distribution_block(r: &mut ByteReader, k: usize) -> Result<ClusterDistribution> {
    let total = r.u64_le().map_err(corrupt)?;
    let mut counts = Vec::with_capacity(k);
    for _ in 0..k {
        counts.push(r.u64_le().map_err(corrupt)?);
    }
    let dist = ClusterDistribution::from_counts(counts);
    if dist.total() != total {
        return Err(IoError::Corrupt(format!(
            "distribution total {total} != sum of counts {}",
            dist.total()
        )));
    }
    Ok(dist)
}

/// Persists a trained model: codebook, both distributions, the anomaly
/// cluster set and the fusion threshold. Byte-deterministic; centroids
/// roundtrip bit-exactly.
pub fn save_model(model: &PastaModel, path: impl AsRef<Path>) -> Result<()> {
    let mut w = ArtifactWriter::new(MODEL_MAGIC);
    write_codebook_block(&mut w, &model.codebook);
    write_distribution_block(&mut w, &model.mixed_dist);
    write_distribution_block(&mut w, &model.ref_dist);
    let set = &model.anomaly_set;
    w.f64_le(set.threshold());
    for ratio in set.ratios() {
        match ratio {
            Some(v) => {
                w.out.push(1);
                w.f64_le(*v);
            }
            None => {
                w.out.push(0);
                w.f64_le(0.0);
            }
        }
    }
    w.u32_le(set.anomaly_ids().len() as u32);
    for &id in set.anomaly_ids() {
        w.u32_le(id as u32);
    }
    w.f64_le(model.gamma);
    atomic_write(path.as_ref(), &w.out)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<PastaModel> {
    let bytes = open_all(path.as_ref())?;
    check_magic(&bytes, MODEL_MAGIC)?;
    let mut r = ByteReader::new(&bytes[8..]);
    let codebook = read_codebook_block(&mut r)?;
    let k = codebook.k();
    let mixed_dist = read_distribution_block(&mut r, k)?;
    let ref_dist = read_distribution_block(&mut r, k)?;
    let threshold = r.f64_le().map_err(corrupt)?;
    let mut ratios = Vec::with_capacity(k);
    for _ in 0..k {
        let flag = r.take(1).map_err(corrupt)?[0];
        let value = r.f64_le().map_err(corrupt)?;
        ratios.push(match flag {
            0 => None,
            1 => Some(value),
            other => return Err(IoError::Corrupt(format!("bad ratio flag {other}"))),
        });
    }
    let id_count = r.u32_le().map_err(corrupt)? as usize;
    let mut ids = Vec::with_capacity(id_count);
    for _ in 0..id_count {
        let id = r.u32_le().map_err(corrupt)? as usize;
        if id >= k {
            return Err(IoError::Corrupt(format!(
                "anomaly id {id} out of range for K={k}"
            )));
        }
        ids.push(id);
    }
    let gamma = r.f64_le().map_err(corrupt)?;
    if r.remaining() != 0 {
        return Err(IoError::Corrupt("trailing bytes after model".into()));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(IoError::Corrupt(format!("gamma {gamma} outside [0,1]")));
    }
    let anomaly_set = AnomalyClusterSet::from_parts(ratios, threshold, ids)
        .map_err(|e| IoError::Corrupt(e.to_string()))?;
    PastaModel::from_parts(codebook, mixed_dist, ref_dist, anomaly_set, gamma)
        .map_err(|e| IoError::Corrupt(e.to_string()))
}

/// Persists a baseline feature bag.
pub fn save_bag(bag: &crate::baseline::FeatureBag, path: impl AsRef<Path>) -> Result<()> {
    let mut w = ArtifactWriter::new(BAG_MAGIC);
    w.u32_le(bag.k_sphere() as u32);
    w.u32_le(bag.dim() as u32);
    w.u32_le(bag.len() as u32);
    for entry in bag.entries() {
        for &v in &entry.embedding {
            w.f32_le(v);
        }
        w.f64_le(entry.radius);
    }
    atomic_write(path.as_ref(), &w.out)
}

pub fn load_bag(path: impl AsRef<Path>) -> Result<crate::baseline::FeatureBag> {
    let bytes = open_all(path.as_ref())?;
    check_magic(&bytes, BAG_MAGIC)?;
    let mut r = ByteReader::new(&bytes[8..]);
    let k_sphere = r.u32_le().map_err(corrupt)? as usize;
    let dim = r.u32_le().map_err(corrupt)? as usize;
    let n = r.u32_le().map_err(corrupt)? as usize;
    if dim == 0 {
        return Err(IoError::Corrupt("bag dim must be >= 1".into()));
    }
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let mut embedding = Vec::with_capacity(dim);
        for _ in 0..dim {
            embedding.push(r.f32_le().map_err(corrupt)?);
        }
        let radius = r.f64_le().map_err(corrupt)?;
        if !radius.is_finite() || radius < 0.0 {
            return Err(IoError::Corrupt(format!("bad bag radius {radius}")));
        }
        entries.push(crate::baseline::BagEntry { embedding, radius });
    }
    if r.remaining() != 0 {
        return Err(IoError::Corrupt("trailing bytes after bag".into()));
    }
    crate::baseline::FeatureBag::from_parts(entries, k_sphere, dim)
        .map_err(|e| IoError::Corrupt(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    #[test]
    fn feature_grid_hand_encoded_bytes() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("g.pfv");
        // magic + (1,1,2) header + floats (0.5, -1.0): 28 bytes total
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"PASTAFV1");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&0.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-1.0f32).to_le_bytes());
        assert_eq!(bytes.len(), 28);
        std::fs::write(&path, &bytes).unwrap();

        let grid = read_feature_grid(&path).unwrap();
        assert_eq!((grid.grid_h(), grid.grid_w(), grid.dim()), (1, 1, 2));
        assert_eq!(grid.data(), &[0.5, -1.0]);

        // the writer must reproduce those exact bytes
        let out = dir.path().join("w.pfv");
        write_feature_grid(&grid, &out).unwrap();
        assert_eq!(std::fs::read(&out).unwrap(), bytes);
    }

    #[test]
    fn feature_grid_roundtrip_and_determinism() {
        let dir = TempDir::new().unwrap();
        let grid =
            FeatureGrid::new(2, 3, 2, (0..12).map(|i| i as f32 * 0.25 - 1.0).collect()).unwrap();
        let a = dir.path().join("a.pfv");
        let b = dir.path().join("b.pfv");
        write_feature_grid(&grid, &a).unwrap();
        write_feature_grid(&grid, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(read_feature_grid(&a).unwrap(), grid);
    }

    #[test]
    fn feature_grid_bad_magic() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("bogus.pfv");
        std::fs::write(&path, b"BOGUS...rest").unwrap();
        assert!(matches!(
            read_feature_grid(&path),
            Err(IoError::BadMagic { .. })
        ));
    }

    #[test]
    fn feature_grid_truncated() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("short.pfv");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"PASTAFV1");
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes()); // 1 of 12 floats
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_feature_grid(&path),
            Err(IoError::Truncated { .. })
        ));
    }

    #[test]
    fn feature_grid_non_finite_rejected() {
        assert!(matches!(
            FeatureGrid::new(1, 1, 2, vec![f32::NAN, 0.0]),
            Err(IoError::NonFinite { index: 0 })
        ));
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("nan.pfv");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"PASTAFV1");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&f32::INFINITY.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_feature_grid(&path),
            Err(IoError::NonFinite { .. })
        ));
    }

    #[test]
    fn pgm_hand_encoded() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("r.pgm");
        std::fs::write(&path, b"P5\n2 2\n255\n\x00\x01\x02\x00").unwrap();
        let raster = read_label_raster(&path).unwrap();
        assert_eq!((raster.height(), raster.width()), (2, 2));
        assert_eq!(raster.values(), &[0, 1, 2, 0]);
        raster.validate_tri_class().unwrap();
    }

    #[test]
    fn pgm_roundtrip_8_and_16_bit() {
        let dir = TempDir::new().unwrap();
        let small = LabelRaster::new(2, 3, vec![0, 1, 2, 255, 7, 0]).unwrap();
        let path = dir.path().join("small.pgm");
        write_label_raster(&small, &path).unwrap();
        assert_eq!(read_label_raster(&path).unwrap(), small);

        let wide = LabelRaster::new(2, 2, vec![0, 300, 65535, 1]).unwrap();
        let path16 = dir.path().join("wide.pgm");
        write_label_raster(&wide, &path16).unwrap();
        assert_eq!(read_label_raster(&path16).unwrap(), wide);
        // 16-bit header advertises maxval 65535
        let bytes = std::fs::read(&path16).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n65535\n"));
    }

    #[test]
    fn pgm_tri_class_validation_rejects_7() {
        let raster = LabelRaster::new(1, 3, vec![0, 7, 1]).unwrap();
        assert!(matches!(
            raster.validate_tri_class(),
            Err(IoError::ValueOutOfRange { value: 7, max: 2 })
        ));
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("c.pgm");
        std::fs::write(&path, b"P5\n# made elsewhere\n2 1 # dims\n255\n\x05\x06").unwrap();
        let raster = read_label_raster(&path).unwrap();
        assert_eq!((raster.height(), raster.width()), (1, 2));
        assert_eq!(raster.values(), &[5, 6]);
    }

    #[test]
    fn pgm_rejects_other_formats() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("p6.ppm");
        std::fs::write(&path, b"P6\n1 1\n255\n\x00\x00\x00").unwrap();
        assert!(matches!(
            read_label_raster(&path),
            Err(IoError::UnsupportedFormat(_))
        ));
    }

    fn write_test_grid(dir: &Path, name: &str, h: usize, w: usize, dim: usize) -> PathBuf {
        let grid = FeatureGrid::new(h, w, dim, vec![0.5; h * w * dim]).unwrap();
        let path = dir.join(name);
        write_feature_grid(&grid, &path).unwrap();
        path
    }

    #[test]
    fn manifest_roundtrip_single_record() {
        let dir = TempDir::new().unwrap();
        write_test_grid(dir.path(), "a.pfv", 2, 2, 3);
        let manifest_path = dir.path().join("m.tsv");
        std::fs::write(&manifest_path, "role=mixed\na.pfv\t4\t4\t-\t-\n").unwrap();
        let manifest = read_manifest(&manifest_path).unwrap();
        assert_eq!(manifest.role, ManifestRole::Mixed);
        assert_eq!(manifest.records.len(), 1);
        assert_eq!(manifest.records[0].feature_path, dir.path().join("a.pfv"));
        assert!(manifest.records[0].instance_mask_path.is_none());
    }

    #[test]
    fn manifest_dim_mismatch_on_raster() {
        let dir = TempDir::new().unwrap();
        write_test_grid(dir.path(), "a.pfv", 2, 2, 3);
        let raster = LabelRaster::new(5, 5, vec![0; 25]).unwrap();
        write_label_raster(&raster, dir.path().join("gt.pgm")).unwrap();
        let manifest_path = dir.path().join("m.tsv");
        std::fs::write(&manifest_path, "role=test\na.pfv\t4\t4\t-\tgt.pgm\n").unwrap();
        assert!(matches!(
            read_manifest(&manifest_path),
            Err(IoError::DimMismatch(_))
        ));
    }

    #[test]
    fn manifest_missing_file_and_empty() {
        let dir = TempDir::new().unwrap();
        let manifest_path = dir.path().join("m.tsv");
        std::fs::write(&manifest_path, "role=mixed\nnope.pfv\t4\t4\t-\t-\n").unwrap();
        assert!(matches!(
            read_manifest(&manifest_path),
            Err(IoError::MissingFile(_))
        ));

        std::fs::write(&manifest_path, "role=mixed\n").unwrap();
        assert!(matches!(
            read_manifest(&manifest_path),
            Err(IoError::EmptyManifest)
        ));
    }

    #[test]
    fn manifest_image_smaller_than_grid() {
        let dir = TempDir::new().unwrap();
        write_test_grid(dir.path(), "a.pfv", 5, 5, 2);
        let manifest_path = dir.path().join("m.tsv");
        std::fs::write(&manifest_path, "role=mixed\na.pfv\t4\t8\t-\t-\n").unwrap();
        assert!(matches!(
            read_manifest(&manifest_path),
            Err(IoError::DimMismatch(_))
        ));
    }

    fn test_codebook() -> ClusterCodebook {
        ClusterCodebook::new(
            3,
            2,
            vec![0.25, -1.5, 3.75, 0.0, -0.125, 8.5],
            vec![4, 0, 9],
            0xDEADBEEF,
            vec![1.25, 0.75, 0.5],
        )
        .unwrap()
    }

    fn test_model() -> PastaModel {
        let mixed = ClusterDistribution::from_counts(vec![50, 30, 20]);
        let reference = ClusterDistribution::from_counts(vec![55, 45, 0]);
        let ratios = crate::distribution::compute_ratios(&reference, &mixed).unwrap();
        let set = crate::distribution::define_anomaly_set(&ratios, 0.05);
        PastaModel::from_parts(test_codebook(), mixed, reference, set, 0.1).unwrap()
    }

    #[test]
    fn codebook_roundtrip_and_determinism() {
        let dir = TempDir::new().unwrap();
        let cb = test_codebook();
        let a = dir.path().join("a.bin");
        let b = dir.path().join("b.bin");
        save_codebook(&cb, &a).unwrap();
        save_codebook(&cb, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(load_codebook(&a).unwrap(), cb);
    }

    #[test]
    fn model_roundtrip_preserves_everything() {
        let dir = TempDir::new().unwrap();
        let model = test_model();
        let path = dir.path().join("m.bin");
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        // centroids bit-exact, distributions, ratios, ids, thresholds, seed
        assert_eq!(back, model);
        assert_eq!(back.codebook.centroids(), model.codebook.centroids());
        assert_eq!(back.codebook.seed(), model.codebook.seed());

        let again = dir.path().join("m2.bin");
        save_model(&model, &again).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&again).unwrap()
        );
    }

    #[test]
    fn model_load_rejects_corrupt_and_foreign_versions() {
        let dir = TempDir::new().unwrap();
        let junk = dir.path().join("junk.bin");
        std::fs::write(&junk, b"JUNKJUNKwhatever").unwrap();
        assert!(matches!(load_model(&junk), Err(IoError::Corrupt(_))));

        // same artifact family, different version tag
        let v2 = dir.path().join("v2.bin");
        std::fs::write(&v2, b"PASTAMV9rest").unwrap();
        assert!(matches!(
            load_model(&v2),
            Err(IoError::VersionMismatch { .. })
        ));

        // truncated payload after a valid magic
        let cut = dir.path().join("cut.bin");
        let model = test_model();
        let full = dir.path().join("full.bin");
        save_model(&model, &full).unwrap();
        let bytes = std::fs::read(&full).unwrap();
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_model(&cut), Err(IoError::Corrupt(_))));
    }

    #[test]
    fn bag_roundtrip() {
        let dir = TempDir::new().unwrap();
        let bag = crate::baseline::FeatureBag::from_parts(
            vec![
                crate::baseline::BagEntry {
                    embedding: vec![0.5, 1.5],
                    radius: 2.25,
                },
                crate::baseline::BagEntry {
                    embedding: vec![-3.0, 0.0],
                    radius: 0.0,
                },
            ],
            4,
            2,
        )
        .unwrap();
        let path = dir.path().join("bag.bin");
        save_bag(&bag, &path).unwrap();
        assert_eq!(load_bag(&path).unwrap(), bag);
    }
}
