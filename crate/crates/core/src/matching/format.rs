//! On-disk layouts, all little-endian.
//!
//! Index file: `HYIX`, version u16, metric u8, dim u32, count u64, then
//! `count` records of `id u64` + `dim` f32 values.
//!
//! Feature file: `HYFV`, version u16, dim u32, then records with the same
//! layout until end of file. It is append-only, so it carries no count.

use std::fs::{File, OpenOptions};
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use super::{FeatureVector, FlatIndex, MatchError, Metric};

pub const INDEX_MAGIC: [u8; 4] = *b"HYIX";
pub const FEATURE_MAGIC: [u8; 4] = *b"HYFV";
pub const FORMAT_VERSION: u16 = 1;

const FEATURE_HEADER_LEN: u64 = 4 + 2 + 4;

fn read_exact_or(
    r: &mut impl Read,
    buf: &mut [u8],
    what: impl FnOnce() -> String,
) -> Result<(), MatchError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            MatchError::TruncatedIndex(what())
        } else {
            MatchError::Io(e)
        }
    })
}

fn check_magic(found: [u8; 4], expected: [u8; 4]) -> Result<(), MatchError> {
    if found != expected {
        return Err(MatchError::BadMagic { expected, found });
    }
    Ok(())
}

fn write_record(w: &mut impl Write, id: u64, values: &[f32]) -> io::Result<()> {
    w.write_all(&id.to_le_bytes())?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn decode_values(buf: &[u8]) -> Vec<f32> {
    buf.chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

impl FlatIndex {
    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&INDEX_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&[self.metric().code()])?;
        w.write_all(&self.dim().to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for (i, &id) in self.ids().iter().enumerate() {
            write_record(w, id, self.vector(i))?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, MatchError> {
        let mut magic = [0u8; 4];
        read_exact_or(r, &mut magic, || "missing magic".into())?;
        check_magic(magic, INDEX_MAGIC)?;
        let mut header = [0u8; 2 + 1 + 4 + 8];
        read_exact_or(r, &mut header, || "short header".into())?;
        let version = u16::from_le_bytes([header[0], header[1]]);
        if version != FORMAT_VERSION {
            return Err(MatchError::VersionMismatch(version));
        }
        let metric = Metric::from_code(header[2])?;
        let dim = u32::from_le_bytes(header[3..7].try_into().unwrap());
        let count = u64::from_le_bytes(header[7..15].try_into().unwrap());
        if dim == 0 {
            return Err(MatchError::BadDimension);
        }
        let d = dim as usize;
        let mut ids = Vec::new();
        let mut values = Vec::new();
        let mut rec = vec![0u8; 8 + 4 * d];
        for i in 0..count {
            read_exact_or(r, &mut rec, || format!("record {i} of {count}"))?;
            ids.push(u64::from_le_bytes(rec[..8].try_into().unwrap()));
            values.extend(decode_values(&rec[8..]));
        }
        FlatIndex::from_raw(dim, metric, ids, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MatchError> {
        let path = path.as_ref();
        let tmp = path.with_extension("hyix.tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MatchError> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

/// Appends feature records to a `HYFV` file.
#[derive(Debug)]
pub struct FeatureFileWriter {
    dim: u32,
    out: BufWriter<File>,
}

impl FeatureFileWriter {
    /// Opens `path` for appending, writing a header if the file is new or
    /// empty. An existing file must have the same dimension.
    pub fn open(path: impl AsRef<Path>, dim: u32) -> Result<Self, MatchError> {
        if dim == 0 {
            return Err(MatchError::BadDimension);
        }
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(path)?;
        let len = file.metadata()?.len();
        if len == 0 {
            file.write_all(&FEATURE_MAGIC)?;
            file.write_all(&FORMAT_VERSION.to_le_bytes())?;
            file.write_all(&dim.to_le_bytes())?;
        } else {
            file.seek(SeekFrom::Start(0))?;
            let (existing, _) = read_feature_header(&mut file)?;
            if existing != dim {
                return Err(MatchError::DimMismatch {
                    expected: existing,
                    got: dim,
                    id: 0,
                });
            }
            let rec = 8 + 4 * dim as u64;
            if !(len - FEATURE_HEADER_LEN).is_multiple_of(rec) {
                // Torn trailing record from an interrupted append.
                file.set_len(len - (len - FEATURE_HEADER_LEN) % rec)?;
            }
            file.seek(SeekFrom::End(0))?;
        }
        Ok(Self {
            dim,
            out: BufWriter::new(file),
        })
    }

    pub fn dim(&self) -> u32 {
        self.dim
    }

    pub fn append(&mut self, v: &FeatureVector) -> Result<(), MatchError> {
        if v.dim() != self.dim {
            return Err(MatchError::DimMismatch {
                expected: self.dim,
                got: v.dim(),
                id: v.id,
            });
        }
        write_record(&mut self.out, v.id, &v.values)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), MatchError> {
        self.out.flush()?;
        Ok(())
    }
}

impl Drop for FeatureFileWriter {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

fn read_feature_header(r: &mut impl Read) -> Result<(u32, u16), MatchError> {
    let mut magic = [0u8; 4];
    read_exact_or(r, &mut magic, || "missing magic".into())?;
    check_magic(magic, FEATURE_MAGIC)?;
    let mut header = [0u8; 6];
    read_exact_or(r, &mut header, || "short header".into())?;
    let version = u16::from_le_bytes([header[0], header[1]]);
    if version != FORMAT_VERSION {
        return Err(MatchError::VersionMismatch(version));
    }
    let dim = u32::from_le_bytes(header[2..6].try_into().unwrap());
    if dim == 0 {
        return Err(MatchError::BadDimension);
    }
    Ok((dim, version))
}

/// Reads every record of a `HYFV` file. A partial trailing record is an error.
pub fn read_feature_file(path: impl AsRef<Path>) -> Result<(u32, Vec<FeatureVector>), MatchError> {
    let mut r = BufReader::new(File::open(path)?);
    let (dim, _) = read_feature_header(&mut r)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    let rec = 8 + 4 * dim as usize;
    if rest.len() % rec != 0 {
        return Err(MatchError::TruncatedIndex(format!(
            "{} trailing bytes after {} records",
            rest.len() % rec,
            rest.len() / rec
        )));
    }
    let vectors = rest
        .chunks_exact(rec)
        .map(|c| {
            FeatureVector::new(
                u64::from_le_bytes(c[..8].try_into().unwrap()),
                decode_values(&c[8..]),
            )
        })
        .collect();
    Ok((dim, vectors))
}
