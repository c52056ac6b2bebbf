//! Little-endian container:
//!
//! ```text
//! "RILT" | version u16 | mode u8 | C u32 | K u16 | M u32 | record_count u64
//! offset index: record_count × u64
//! records:      image_id u64 | crop 4×f32 | tag u8 | weight f32 | pseudo u32
//!               | K × (class u32, prob f32) | tail f32 (MS only)
//! ```

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use tempfile::NamedTempFile;

use super::{AugmentTag, CropBox, LabelMode, RilRecord, SparsifiedLabel};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"RILT";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: u64 = 4 + 2 + 1 + 4 + 2 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RilHeader {
    pub mode: LabelMode,
    pub class_count: u32,
    /// Entries stored per record; equals `class_count` in full mode.
    pub top_k: u16,
    pub crops_per_image: u32,
    pub record_count: u64,
}

impl RilHeader {
    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 {
            return Err(Error::config("class count must be positive"));
        }
        let k = self.top_k as u32;
        match self.mode {
            LabelMode::Full if k != self.class_count => Err(Error::config(format!(
                "full mode stores every class: K must equal C ({} != {})",
                k, self.class_count
            ))),
            LabelMode::Ms | LabelMode::Mr if k == 0 || k >= self.class_count => {
                Err(Error::config(format!(
                    "top-k must satisfy 1 <= K < C (K = {k}, C = {})",
                    self.class_count
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn record_size(&self) -> u64 {
        record_size(self.mode, self.top_k as usize)
    }
}

/// Encoded byte length of one record.
pub fn record_size(mode: LabelMode, k: usize) -> u64 {
    let tail = if mode == LabelMode::Ms { 4 } else { 0 };
    (8 + 16 + 1 + 4 + 4 + 8 * k + tail) as u64
}

fn encode_header(h: &RilHeader, out: &mut Vec<u8>) {
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(h.mode.code());
    out.extend_from_slice(&h.class_count.to_le_bytes());
    out.extend_from_slice(&h.top_k.to_le_bytes());
    out.extend_from_slice(&h.crops_per_image.to_le_bytes());
    out.extend_from_slice(&h.record_count.to_le_bytes());
}

/// Canonical on-disk bytes of a record.
pub(crate) fn encode_record(r: &RilRecord, out: &mut Vec<u8>) {
    out.extend_from_slice(&r.image_id.to_le_bytes());
    for v in [r.crop_box.x, r.crop_box.y, r.crop_box.w, r.crop_box.h] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(r.augment_tag.code());
    out.extend_from_slice(&r.info_weight.to_le_bytes());
    out.extend_from_slice(&r.pseudo_label.to_le_bytes());
    for (&c, &p) in r.label.top_indices.iter().zip(&r.label.top_probs) {
        out.extend_from_slice(&c.to_le_bytes());
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    if r.label.mode == LabelMode::Ms {
        out.extend_from_slice(&(r.label.tail_value as f32).to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out: [u8; N] = self.buf[self.pos..self.pos + N].try_into().unwrap();
        self.pos += N;
        out
    }
    fn u8(&mut self) -> u8 {
        self.take::<1>()[0]
    }
    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take())
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }
    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take())
    }
}

fn decode_record(h: &RilHeader, buf: &[u8]) -> Result<RilRecord> {
    let mut c = Cursor { buf, pos: 0 };
    let image_id = c.u64();
    let crop_box = CropBox {
        x: c.f32(),
        y: c.f32(),
        w: c.f32(),
        h: c.f32(),
    };
    if !crop_box.is_valid() {
        return Err(Error::Format(format!("invalid crop box {crop_box:?}")));
    }
    let tag = c.u8();
    let augment_tag = AugmentTag::from_code(tag)
        .ok_or_else(|| Error::Format(format!("reserved augmentation tag {tag}")))?;
    let info_weight = c.f32();
    if !(0.0..=1.0).contains(&info_weight) {
        return Err(Error::Format(format!("information weight {info_weight} outside [0, 1]")));
    }
    let pseudo_label = c.u32();
    if pseudo_label >= h.class_count {
        return Err(Error::Format(format!("pseudo-label {pseudo_label} out of range")));
    }
    let k = h.top_k as usize;
    let mut top_indices = Vec::with_capacity(k);
    let mut top_probs = Vec::with_capacity(k);
    for _ in 0..k {
        let class = c.u32();
        let p = c.f32();
        if class >= h.class_count || !(0.0..=1.0).contains(&p) {
            return Err(Error::Format(format!("bad label entry ({class}, {p})")));
        }
        top_indices.push(class);
        top_probs.push(p as f64);
    }
    let tail_value = if h.mode == LabelMode::Ms {
        let t = c.f32();
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Format(format!("tail value {t} outside [0, 1]")));
        }
        t as f64
    } else {
        0.0
    };
    Ok(RilRecord {
        image_id,
        crop_box,
        augment_tag,
        label: SparsifiedLabel {
            mode: h.mode,
            class_count: h.class_count as usize,
            top_indices,
            top_probs,
            tail_value,
        },
        info_weight,
        pseudo_label,
    })
}

/// Exclusive writer: the destination only appears once the whole table has
/// been flushed to a sibling temp file and renamed into place.
pub struct TableWriter {
    dest: PathBuf,
    tmp: NamedTempFile,
}

impl TableWriter {
    /// Opens the temp file next to `dest`, so an unwritable destination
    /// fails here rather than after the records are produced.
    pub fn create(dest: impl AsRef<Path>) -> Result<Self> {
        let dest = dest.as_ref().to_path_buf();
        let dir = match dest.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let tmp = tempfile::Builder::new()
            .prefix(".ril-")
            .suffix(".tmp")
            .tempfile_in(&dir)
            .map_err(|e| Error::io(&dest, e))?;
        Ok(Self { dest, tmp })
    }

    pub fn write(self, header: &RilHeader, records: &[RilRecord]) -> Result<u64> {
        header.validate()?;
        if header.record_count != records.len() as u64 {
            return Err(Error::config(format!(
                "header declares {} records but {} were supplied",
                header.record_count,
                records.len()
            )));
        }
        for (i, r) in records.iter().enumerate() {
            let l = &r.label;
            if l.mode != header.mode
                || l.class_count != header.class_count as usize
                || l.k() != header.top_k as usize
                || l.top_probs.len() != l.k()
            {
                return Err(Error::config(format!(
                    "record {i} does not match the header (mode {}, C {}, K {})",
                    l.mode,
                    l.class_count,
                    l.k()
                )));
            }
            if !r.crop_box.is_valid() {
                return Err(Error::InvalidInput(format!(
                    "record {i} has an invalid crop box {:?}",
                    r.crop_box
                )));
            }
            if r.pseudo_label >= header.class_count {
                return Err(Error::InvalidInput(format!(
                    "record {i} pseudo-label out of range"
                )));
            }
        }

        let rs = header.record_size();
        let data_start = HEADER_LEN + 8 * header.record_count;
        let mut head = Vec::with_capacity(data_start as usize);
        encode_header(header, &mut head);
        for i in 0..header.record_count {
            head.extend_from_slice(&(data_start + i * rs).to_le_bytes());
        }

        let dest = self.dest;
        let mut tmp = self.tmp;
        let io = |e| Error::io(&dest, e);
        {
            let mut w = BufWriter::new(tmp.as_file_mut());
            w.write_all(&head).map_err(io)?;
            let mut buf = Vec::with_capacity(rs as usize);
            for r in records {
                buf.clear();
                encode_record(r, &mut buf);
                debug_assert_eq!(buf.len() as u64, rs);
                w.write_all(&buf).map_err(io)?;
            }
            w.flush().map_err(io)?;
        }
        tmp.as_file().sync_all().map_err(io)?;
        tmp.persist(&dest).map_err(|e| Error::io(&dest, e.error))?;
        Ok(data_start + rs * header.record_count)
    }
}

/// Writes a complete table atomically; returns the file size in bytes.
pub fn write_table(dest: impl AsRef<Path>, header: &RilHeader, records: &[RilRecord]) -> Result<u64> {
    TableWriter::create(dest)?.write(header, records)
}

/// Read-only view of a table. Reads are positional, so one instance can be
/// shared by any number of threads.
#[derive(Debug)]
pub struct RilTable {
    path: PathBuf,
    file: File,
    header: RilHeader,
    offsets: Vec<u64>,
    file_len: u64,
}

impl RilTable {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let file_len = file.metadata().map_err(|e| Error::io(&path, e))?.len();
        if file_len < HEADER_LEN {
            return Err(Error::Format(format!(
                "{} is {file_len} bytes, shorter than the header",
                path.display()
            )));
        }
        let mut raw = [0u8; HEADER_LEN as usize];
        file.read_exact(&mut raw).map_err(|e| Error::io(&path, e))?;
        let mut c = Cursor { buf: &raw, pos: 0 };
        if c.take::<4>() != MAGIC {
            return Err(Error::Format("bad magic; not a RIL table".into()));
        }
        let version = c.u16();
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mode_code = c.u8();
        let mode = LabelMode::from_code(mode_code)
            .ok_or_else(|| Error::Format(format!("unknown label mode code {mode_code}")))?;
        let header = RilHeader {
            mode,
            class_count: c.u32(),
            top_k: c.u16(),
            crops_per_image: c.u32(),
            record_count: c.u64(),
        };
        header
            .validate()
            .map_err(|e| Error::Format(format!("inconsistent header: {e}")))?;

        let index_len = header
            .record_count
            .checked_mul(8)
            .filter(|n| HEADER_LEN + n <= file_len)
            .ok_or_else(|| Error::Format("truncated offset index".into()))?;
        let mut index = vec![0u8; index_len as usize];
        file.read_exact(&mut index).map_err(|e| Error::io(&path, e))?;
        let offsets: Vec<u64> = index
            .chunks_exact(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let data_start = HEADER_LEN + index_len;
        let rs = header.record_size();
        if let Some(i) = offsets
            .iter()
            .position(|&o| o < data_start || o.checked_add(rs).map_or(true, |end| end > file_len))
        {
            return Err(Error::Format(format!(
                "record {i} lies outside the file (truncated?)"
            )));
        }
        Ok(Self {
            path,
            file,
            header,
            offsets,
            file_len,
        })
    }

    pub fn header(&self) -> &RilHeader {
        &self.header
    }

    pub fn len(&self) -> u64 {
        self.header.record_count
    }

    pub fn is_empty(&self) -> bool {
        self.header.record_count == 0
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file_len(&self) -> u64 {
        self.file_len
    }

    pub fn read_record(&self, index: u64) -> Result<RilRecord> {
        let offset = *self
            .offsets
            .get(usize::try_from(index).unwrap_or(usize::MAX))
            .ok_or(Error::Bounds {
                index,
                len: self.header.record_count,
            })?;
        let mut buf = vec![0u8; self.header.record_size() as usize];
        read_at(&self.file, &mut buf, offset).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Format(format!("record {index} truncated"))
            } else {
                Error::io(&self.path, e)
            }
        })?;
        decode_record(&self.header, &buf)
    }

    /// SHA-256 over the header and every record re-encoded in canonical
    /// form, in table order. Independent of index layout.
    pub fn digest(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        encode_header(&self.header, &mut buf);
        h.update(&buf);
        for i in 0..self.len() {
            buf.clear();
            encode_record(&self.read_record(i)?, &mut buf);
            h.update(&buf);
        }
        Ok(hex::encode(h.finalize()))
    }
}

#[cfg(unix)]
fn read_at(file: &File, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
    use std::os::unix::fs::FileExt;
    file.read_exact_at(buf, offset)
}

#[cfg(windows)]
fn read_at(file: &File, mut buf: &mut [u8], mut offset: u64) -> std::io::Result<()> {
    use std::os::windows::fs::FileExt;
    while !buf.is_empty() {
        match file.seek_read(buf, offset)? {
            0 => return Err(std::io::ErrorKind::UnexpectedEof.into()),
            n => {
                buf = &mut buf[n..];
                offset += n as u64;
            }
        }
    }
    Ok(())
}
