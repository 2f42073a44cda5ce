//! On-disk formats.
//!
//! Matrices (embeddings, checkpoints, attention maps) share one container:
//!
//! ```text
//! magic      16 bytes  b"VKDET-MATRIX-F32"
//! hdr_len    u32 LE    length of the JSON header in bytes
//! header     utf-8     {"dim":..,"rows":..,"kind":"..","version":1, ...}
//! payload    rows*dim  f32 LE, row-major
//! keys       utf-8     zero or `rows` newline-terminated keys
//! ```
//!
//! Attention maps add `H_a`, `W_a`, `image_w` and `image_h` to the header,
//! with `rows = H_a` and `dim = W_a`.
//!
//! Record files (proposals, ground truth, detections, pseudo-labels, image
//! lists) are utf-8, one record per line, tab-separated. Blank lines and lines
//! starting with `#` are ignored on read.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMap, Grid};
use crate::embedding::{EmbeddingKind, EmbeddingTable, Matrix};
use crate::error::{Error, Result};
use crate::eval::{Detection, GroundTruth};
use crate::geometry::{BBox, Proposal, ProposalRole, ProposalSet};
use crate::pseudolabel::{PseudoLabel, PseudoLabelSet};

pub const MAGIC: &[u8; 16] = b"VKDET-MATRIX-F32";
pub const FORMAT_VERSION: u32 = 1;
pub const ATTENTION_KIND: &str = "attention";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixHeader {
    pub dim: usize,
    pub rows: usize,
    pub kind: String,
    pub version: u32,
    #[serde(rename = "H_a", default, skip_serializing_if = "Option::is_none")]
    pub h_a: Option<usize>,
    #[serde(rename = "W_a", default, skip_serializing_if = "Option::is_none")]
    pub w_a: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_w: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_h: Option<u32>,
}

impl MatrixHeader {
    pub fn new(kind: &str, rows: usize, dim: usize) -> Self {
        Self {
            dim,
            rows,
            kind: kind.to_string(),
            version: FORMAT_VERSION,
            h_a: None,
            w_a: None,
            image_w: None,
            image_h: None,
        }
    }
}

/// Decoded matrix container.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixFile {
    pub header: MatrixHeader,
    pub matrix: Matrix,
    pub keys: Vec<String>,
}

pub fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingFile(path.to_path_buf()))
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    require(path)?;
    Ok(fs::read(path)?)
}

fn read_text(path: &Path) -> Result<String> {
    require(path)?;
    Ok(fs::read_to_string(path)?)
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

pub fn encode_matrix(header: &MatrixHeader, matrix: &Matrix, keys: &[String]) -> Result<Vec<u8>> {
    if header.rows != matrix.rows() || header.dim != matrix.cols() {
        return Err(Error::invalid("matrix header does not match payload shape"));
    }
    if !keys.is_empty() && keys.len() != matrix.rows() {
        return Err(Error::DimensionMismatch {
            expected: matrix.rows(),
            found: keys.len(),
        });
    }
    if let Some(k) = keys.iter().find(|k| k.contains('\n')) {
        return Err(Error::invalid(format!("key `{k}` contains a newline")));
    }
    let json = serde_json::to_vec(header).map_err(|e| Error::format("matrix header", e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + 4 * matrix.as_slice().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in matrix.as_slice() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for k in keys {
        out.extend_from_slice(k.as_bytes());
        out.push(b'\n');
    }
    Ok(out)
}

pub fn decode_matrix(bytes: &[u8], origin: &Path) -> Result<MatrixFile> {
    let what = format!("matrix file {}", origin.display());
    if bytes.len() < 20 || &bytes[..16] != MAGIC {
        return Err(Error::format(what, "bad magic"));
    }
    let hlen = u32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(Error::format(what, "truncated header"));
    }
    let header: MatrixHeader =
        serde_json::from_slice(&body[..hlen]).map_err(|e| Error::format(what.clone(), e.to_string()))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: origin.to_path_buf(),
            expected: FORMAT_VERSION,
            found: header.version,
        });
    }
    let n = header.rows * header.dim;
    let payload = &body[hlen..];
    if payload.len() < 4 * n {
        return Err(Error::format(what, "truncated payload"));
    }
    let data: Vec<f64> = payload[..4 * n]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let tail = std::str::from_utf8(&payload[4 * n..]).map_err(|e| Error::format(what.clone(), e.to_string()))?;
    let keys: Vec<String> = tail.lines().map(str::to_string).collect();
    if !keys.is_empty() && keys.len() != header.rows {
        return Err(Error::format(
            what,
            format!("{} keys for {} rows", keys.len(), header.rows),
        ));
    }
    let matrix = Matrix::from_vec(header.rows, header.dim, data)?;
    Ok(MatrixFile { header, matrix, keys })
}

pub fn write_matrix(path: &Path, kind: &str, matrix: &Matrix, keys: &[String]) -> Result<()> {
    let header = MatrixHeader::new(kind, matrix.rows(), matrix.cols());
    write_file(path, &encode_matrix(&header, matrix, keys)?)
}

pub fn read_matrix(path: &Path) -> Result<MatrixFile> {
    decode_matrix(&read_bytes(path)?, path)
}

pub fn write_embeddings(path: &Path, table: &EmbeddingTable) -> Result<()> {
    write_matrix(path, table.kind.as_str(), &table.vectors, &table.keys)
}

/// Reads an embedding table; unit-norm kinds are re-normalized.
pub fn read_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let file = read_matrix(path)?;
    let kind: EmbeddingKind = file.header.kind.parse()?;
    let keys = if file.keys.is_empty() {
        (0..file.matrix.rows()).map(|i| i.to_string()).collect()
    } else {
        file.keys
    };
    let mut table = EmbeddingTable::new(kind, keys, file.matrix)?;
    if kind.is_unit_norm() {
        table.renormalize()?;
    }
    Ok(table)
}

pub fn read_embeddings_of(path: &Path, kind: EmbeddingKind) -> Result<EmbeddingTable> {
    let t = read_embeddings(path)?;
    if t.kind != kind {
        return Err(Error::format(
            format!("embedding file {}", path.display()),
            format!("expected kind `{}`, found `{}`", kind.as_str(), t.kind.as_str()),
        ));
    }
    Ok(t)
}

pub fn write_attention(path: &Path, map: &AttentionMap) -> Result<()> {
    let matrix = Matrix::from_vec(map.grid.rows, map.grid.cols, map.grid.data.clone())?;
    let mut header = MatrixHeader::new(ATTENTION_KIND, map.grid.rows, map.grid.cols);
    header.h_a = Some(map.grid.rows);
    header.w_a = Some(map.grid.cols);
    header.image_w = Some(map.image_width);
    header.image_h = Some(map.image_height);
    write_file(path, &encode_matrix(&header, &matrix, &[])?)
}

pub fn read_attention(path: &Path) -> Result<AttentionMap> {
    let file = read_matrix(path)?;
    let what = format!("attention map {}", path.display());
    let h = &file.header;
    if h.kind != ATTENTION_KIND {
        return Err(Error::format(what, format!("kind `{}` is not `attention`", h.kind)));
    }
    let (Some(ha), Some(wa), Some(iw), Some(ih)) = (h.h_a, h.w_a, h.image_w, h.image_h) else {
        return Err(Error::format(what, "missing H_a/W_a/image_w/image_h"));
    };
    if ha != h.rows || wa != h.dim {
        return Err(Error::format(what, "H_a/W_a disagree with rows/dim"));
    }
    Ok(AttentionMap {
        grid: Grid::new(ha, wa, file.matrix.as_slice().to_vec())?,
        image_width: iw,
        image_height: ih,
    })
}

fn records(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(i, l)| (i + 1, l.split('\t').collect()))
}

fn field<T: std::str::FromStr>(fields: &[&str], i: usize, what: &str, line: usize) -> Result<T> {
    fields
        .get(i)
        .ok_or_else(|| Error::format(what, format!("line {line}: missing field {}", i + 1)))?
        .trim()
        .parse()
        .map_err(|_| Error::format(what, format!("line {line}: bad field {}", i + 1)))
}

fn expect_fields(fields: &[&str], n: usize, what: &str, line: usize) -> Result<()> {
    if fields.len() == n {
        Ok(())
    } else {
        Err(Error::format(
            what,
            format!("line {line}: expected {n} fields, found {}", fields.len()),
        ))
    }
}

fn parse_box(fields: &[&str], start: usize, what: &str, line: usize) -> Result<BBox> {
    BBox::new(
        field(fields, start, what, line)?,
        field(fields, start + 1, what, line)?,
        field(fields, start + 2, what, line)?,
        field(fields, start + 3, what, line)?,
    )
    .map_err(|e| Error::format(what, format!("line {line}: {e}")))
}

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(&l);
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

/// `image_id x1 y1 x2 y2 objectness`
pub fn write_proposals(path: &Path, set: &ProposalSet) -> Result<()> {
    write_lines(
        path,
        set.proposals.iter().map(|p| {
            let b = &p.bbox;
            format!("{}\t{}\t{}\t{}\t{}\t{}", p.image_id, b.x1, b.y1, b.x2, b.y2, p.objectness)
        }),
    )
}

pub fn read_proposals(path: &Path, role: ProposalRole) -> Result<ProposalSet> {
    let what = format!("proposal file {}", path.display());
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (line, f) in records(&text) {
        expect_fields(&f, 6, &what, line)?;
        out.push(Proposal {
            image_id: f[0].to_string(),
            bbox: parse_box(&f, 1, &what, line)?,
            objectness: field(&f, 5, &what, line)?,
        });
    }
    Ok(ProposalSet::new(role, out))
}

/// `image_id x1 y1 x2 y2 class`
pub fn write_ground_truth(path: &Path, gts: &[GroundTruth]) -> Result<()> {
    write_lines(
        path,
        gts.iter().map(|g| {
            let b = &g.bbox;
            format!("{}\t{}\t{}\t{}\t{}\t{}", g.image_id, b.x1, b.y1, b.x2, b.y2, g.class)
        }),
    )
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruth>> {
    let what = format!("ground-truth file {}", path.display());
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (line, f) in records(&text) {
        expect_fields(&f, 6, &what, line)?;
        out.push(GroundTruth {
            image_id: f[0].to_string(),
            bbox: parse_box(&f, 1, &what, line)?,
            class: f[5].to_string(),
        });
    }
    Ok(out)
}

/// `image_id class x1 y1 x2 y2 score_s score_d score_p score_l`
pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    write_lines(
        path,
        dets.iter().map(|d| {
            let b = &d.bbox;
            format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                d.image_id, d.class, b.x1, b.y1, b.x2, b.y2, d.score_s, d.score_d, d.score_p, d.score_l
            )
        }),
    )
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let what = format!("detection file {}", path.display());
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (line, f) in records(&text) {
        expect_fields(&f, 10, &what, line)?;
        out.push(Detection {
            image_id: f[0].to_string(),
            class: f[1].to_string(),
            bbox: parse_box(&f, 2, &what, line)?,
            score_s: field(&f, 6, &what, line)?,
            score_d: field(&f, 7, &what, line)?,
            score_p: field(&f, 8, &what, line)?,
            score_l: field(&f, 9, &what, line)?,
        });
    }
    Ok(out)
}

/// `proposal_id unknown_index distance`
pub fn write_pseudo_labels(path: &Path, set: &PseudoLabelSet) -> Result<()> {
    write_lines(
        path,
        set.records
            .iter()
            .map(|r| format!("{}\t{}\t{}", r.proposal_id, r.unknown_index, r.distance)),
    )
}

pub fn read_pseudo_labels(path: &Path) -> Result<PseudoLabelSet> {
    let what = format!("pseudo-label file {}", path.display());
    let text = read_text(path)?;
    let mut records_out = Vec::new();
    for (line, f) in records(&text) {
        expect_fields(&f, 3, &what, line)?;
        records_out.push(PseudoLabel {
            proposal_id: f[0].to_string(),
            unknown_index: field(&f, 1, &what, line)?,
            distance: field(&f, 2, &what, line)?,
        });
    }
    Ok(PseudoLabelSet { records: records_out })
}

pub fn write_ids(path: &Path, ids: &[String]) -> Result<()> {
    write_lines(path, ids.iter().cloned())
}

pub fn read_ids(path: &Path) -> Result<Vec<String>> {
    let text = read_text(path)?;
    Ok(records(&text).map(|(_, f)| f[0].to_string()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageInfo {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub split: Split,
}

/// `image_id width height split`
pub fn write_images(path: &Path, images: &[ImageInfo]) -> Result<()> {
    write_lines(
        path,
        images
            .iter()
            .map(|i| format!("{}\t{}\t{}\t{}", i.image_id, i.width, i.height, i.split.as_str())),
    )
}

pub fn read_images(path: &Path) -> Result<Vec<ImageInfo>> {
    let what = format!("image list {}", path.display());
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (line, f) in records(&text) {
        expect_fields(&f, 4, &what, line)?;
        let split = match f[3].trim() {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(Error::format(what, format!("line {line}: unknown split `{other}`"))),
        };
        out.push(ImageInfo {
            image_id: f[0].to_string(),
            width: field(&f, 1, &what, line)?,
            height: field(&f, 2, &what, line)?,
            split,
        });
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format("json", e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(format!("json file {}", path.display()), e.to_string()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text.as_bytes())
}

/// `path` joined onto `dir` unless already absolute.
pub fn resolve(dir: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        dir.join(path)
    }
}
