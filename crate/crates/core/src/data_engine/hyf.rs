//! `HYF` raw frame streams.
//!
//! Little-endian header: magic `HYFR`, version u16 (= 1), width u32,
//! height u32, channels u8, pix_fmt u8 (0 = gray8, 1 = rgb8), fps_num u32,
//! fps_den u32, frame_count u32; then `frame_count` frames of
//! `width·height·channels` bytes, row-major and channel-interleaved.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::DataError;

pub const MAGIC: [u8; 4] = *b"HYFR";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: u64 = 4 + 2 + 4 + 4 + 1 + 1 + 4 + 4 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixFmt {
    Gray8,
    Rgb8,
}

impl PixFmt {
    pub fn channels(self) -> u8 {
        match self {
            PixFmt::Gray8 => 1,
            PixFmt::Rgb8 => 3,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            PixFmt::Gray8 => 0,
            PixFmt::Rgb8 => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamHeader {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub pix_fmt: PixFmt,
    pub fps_num: u32,
    pub fps_den: u32,
    pub frame_count: u32,
}

impl StreamHeader {
    pub fn new(width: u32, height: u32, pix_fmt: PixFmt, frame_count: u32) -> Self {
        Self {
            width,
            height,
            channels: pix_fmt.channels(),
            pix_fmt,
            fps_num: 25,
            fps_den: 1,
            frame_count,
        }
    }

    pub fn frame_len(&self) -> usize {
        self.width as usize * self.height as usize * self.channels as usize
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.width == 0 || self.height == 0 {
            return Err(DataError::BadHeader(format!(
                "frame size {}x{} must be non-zero",
                self.width, self.height
            )));
        }
        if self.channels != self.pix_fmt.channels() {
            return Err(DataError::BadHeader(format!(
                "{} channels do not match {:?}",
                self.channels, self.pix_fmt
            )));
        }
        if self.fps_den == 0 {
            return Err(DataError::BadHeader("fps_den must be >= 1".into()));
        }
        Ok(())
    }

    pub fn encode(&self) -> [u8; HEADER_LEN as usize] {
        let mut out = [0u8; HEADER_LEN as usize];
        out[0..4].copy_from_slice(&MAGIC);
        out[4..6].copy_from_slice(&VERSION.to_le_bytes());
        out[6..10].copy_from_slice(&self.width.to_le_bytes());
        out[10..14].copy_from_slice(&self.height.to_le_bytes());
        out[14] = self.channels;
        out[15] = self.pix_fmt.code();
        out[16..20].copy_from_slice(&self.fps_num.to_le_bytes());
        out[20..24].copy_from_slice(&self.fps_den.to_le_bytes());
        out[24..28].copy_from_slice(&self.frame_count.to_le_bytes());
        out
    }

    pub fn decode(buf: &[u8; HEADER_LEN as usize]) -> Result<Self, DataError> {
        let magic: [u8; 4] = buf[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(DataError::BadMagic(magic));
        }
        let version = u16::from_le_bytes([buf[4], buf[5]]);
        if version != VERSION {
            return Err(DataError::UnsupportedVersion(version));
        }
        let u32_at = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().unwrap());
        let pix_fmt = match buf[15] {
            0 => PixFmt::Gray8,
            1 => PixFmt::Rgb8,
            other => return Err(DataError::BadHeader(format!("unknown pix_fmt {other}"))),
        };
        let header = Self {
            width: u32_at(6),
            height: u32_at(10),
            channels: buf[14],
            pix_fmt,
            fps_num: u32_at(16),
            fps_den: u32_at(20),
            frame_count: u32_at(24),
        };
        header.validate()?;
        Ok(header)
    }
}

#[derive(Debug)]
enum Source {
    File { path: PathBuf, file: Mutex<File> },
    Memory(Vec<u8>),
}

/// A validated frame stream, backed by a file or by memory.
#[derive(Debug)]
pub struct FrameStream {
    header: StreamHeader,
    source: Source,
}

/// Opens a `HYF` file and checks that its payload covers every frame the
/// header promises. Frames are read lazily.
pub fn read_stream(path: impl AsRef<Path>) -> Result<FrameStream, DataError> {
    let path = path.as_ref();
    let mut file = File::open(path)?;
    let mut buf = [0u8; HEADER_LEN as usize];
    let len = file.metadata()?.len();
    if len < 4 {
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic[..len as usize])?;
        return Err(DataError::BadMagic(magic));
    }
    if len < HEADER_LEN {
        file.read_exact(&mut buf[..len as usize])?;
        let magic: [u8; 4] = buf[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(DataError::BadMagic(magic));
        }
        return Err(DataError::BadHeader(format!(
            "header is {len} bytes, need {HEADER_LEN}"
        )));
    }
    file.read_exact(&mut buf)?;
    let header = StreamHeader::decode(&buf)?;
    check_payload(&header, len - HEADER_LEN)?;
    Ok(FrameStream {
        header,
        source: Source::File {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        },
    })
}

fn check_payload(header: &StreamHeader, payload: u64) -> Result<(), DataError> {
    let frame = header.frame_len() as u64;
    let need = frame * header.frame_count as u64;
    if payload < need {
        return Err(DataError::TruncatedStream {
            frame_index: (payload / frame) as u32,
            frame_count: header.frame_count,
        });
    }
    Ok(())
}

/// Writes a stream file from a header and its frames.
pub fn write_stream<'a, I>(
    path: impl AsRef<Path>,
    header: &StreamHeader,
    frames: I,
) -> Result<(), DataError>
where
    I: IntoIterator<Item = &'a [u8]>,
{
    header.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&header.encode())?;
    let mut written = 0u32;
    for f in frames {
        if f.len() != header.frame_len() {
            return Err(DataError::BadDimensions(format!(
                "frame {written} is {} bytes, expected {}",
                f.len(),
                header.frame_len()
            )));
        }
        w.write_all(f)?;
        written += 1;
    }
    if written != header.frame_count {
        return Err(DataError::BadHeader(format!(
            "header promises {} frames, wrote {written}",
            header.frame_count
        )));
    }
    w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    Ok(())
}

impl FrameStream {
    /// An in-memory stream; `payload` holds the concatenated frames.
    pub fn from_memory(header: StreamHeader, payload: Vec<u8>) -> Result<Self, DataError> {
        header.validate()?;
        check_payload(&header, payload.len() as u64)?;
        if payload.len() != header.frame_len() * header.frame_count as usize {
            return Err(DataError::BadHeader(format!(
                "payload of {} bytes does not match {} frames",
                payload.len(),
                header.frame_count
            )));
        }
        Ok(Self {
            header,
            source: Source::Memory(payload),
        })
    }

    pub fn header(&self) -> &StreamHeader {
        &self.header
    }

    pub fn frame_count(&self) -> u32 {
        self.header.frame_count
    }

    /// Random access to one frame.
    pub fn frame(&self, index: u32) -> Result<Vec<u8>, DataError> {
        if index >= self.header.frame_count {
            return Err(DataError::InvalidParameter(format!(
                "frame {index} out of range (stream has {})",
                self.header.frame_count
            )));
        }
        let len = self.header.frame_len();
        match &self.source {
            Source::Memory(data) => {
                let start = index as usize * len;
                Ok(data[start..start + len].to_vec())
            }
            Source::File { file, .. } => {
                let mut file = file.lock();
                file.seek(SeekFrom::Start(HEADER_LEN + index as u64 * len as u64))?;
                let mut out = vec![0u8; len];
                file.read_exact(&mut out)
                    .map_err(|_| DataError::TruncatedStream {
                        frame_index: index,
                        frame_count: self.header.frame_count,
                    })?;
                Ok(out)
            }
        }
    }

    /// Calls `f(index, frame)` for every frame in order, reusing one buffer.
    pub fn for_each_frame<F>(&self, mut f: F) -> Result<(), DataError>
    where
        F: FnMut(u32, &[u8]) -> Result<(), DataError>,
    {
        let len = self.header.frame_len();
        match &self.source {
            Source::Memory(data) => {
                for (i, frame) in data.chunks_exact(len).enumerate() {
                    f(i as u32, frame)?;
                }
            }
            Source::File { path, .. } => {
                let mut file = File::open(path)?;
                file.seek(SeekFrom::Start(HEADER_LEN))?;
                let mut reader = BufReader::with_capacity(1 << 20, file);
                let mut buf = vec![0u8; len];
                for i in 0..self.header.frame_count {
                    reader
                        .read_exact(&mut buf)
                        .map_err(|_| DataError::TruncatedStream {
                            frame_index: i,
                            frame_count: self.header.frame_count,
                        })?;
                    f(i, &buf)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_gray_stream() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.hyf");
        let header = StreamHeader::new(2, 2, PixFmt::Gray8, 3);
        let frames: Vec<Vec<u8>> = (0..3u8).map(|i| vec![i; 4]).collect();
        write_stream(&path, &header, frames.iter().map(|f| f.as_slice())).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), HEADER_LEN + 12);
        let s = read_stream(&path).unwrap();
        assert_eq!(s.frame_count(), 3);
        assert_eq!(s.header().frame_len(), 4);
        assert_eq!(s.frame(2).unwrap(), vec![2; 4]);
        let mut seen = Vec::new();
        s.for_each_frame(|i, f| {
            seen.push((i, f.to_vec()));
            Ok(())
        })
        .unwrap();
        assert_eq!(seen.len(), 3);
        assert_eq!(seen[1].1, vec![1; 4]);
    }

    #[test]
    fn header_bytes_are_exact() {
        let mut h = StreamHeader::new(320, 180, PixFmt::Rgb8, 7);
        h.fps_num = 30000;
        h.fps_den = 1001;
        let b = h.encode();
        assert_eq!(&b[0..4], b"HYFR");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(&b[6..10], &320u32.to_le_bytes());
        assert_eq!(&b[10..14], &180u32.to_le_bytes());
        assert_eq!(b[14], 3);
        assert_eq!(b[15], 1);
        assert_eq!(&b[16..20], &30000u32.to_le_bytes());
        assert_eq!(&b[20..24], &1001u32.to_le_bytes());
        assert_eq!(&b[24..28], &7u32.to_le_bytes());
        assert_eq!(StreamHeader::decode(&b).unwrap(), h);
    }

    #[test]
    fn truncated_stream_names_frame() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.hyf");
        let header = StreamHeader::new(2, 2, PixFmt::Gray8, 3);
        let mut bytes = header.encode().to_vec();
        bytes.extend_from_slice(&[0u8; 4 + 4 + 2]);
        std::fs::write(&path, &bytes).unwrap();
        match read_stream(&path) {
            Err(DataError::TruncatedStream {
                frame_index,
                frame_count,
            }) => {
                assert_eq!(frame_index, 2);
                assert_eq!(frame_count, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.hyf");
        let mut bytes = StreamHeader::new(1, 1, PixFmt::Gray8, 0).encode();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_stream(&path), Err(DataError::BadMagic(_))));
        let mut bytes = StreamHeader::new(1, 1, PixFmt::Gray8, 0).encode();
        bytes[4] = 9;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_stream(&path),
            Err(DataError::UnsupportedVersion(9))
        ));
        std::fs::write(&path, b"HY").unwrap();
        assert!(matches!(read_stream(&path), Err(DataError::BadMagic(_))));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut h = StreamHeader::new(1, 1, PixFmt::Rgb8, 0);
        h.channels = 1;
        assert!(h.validate().is_err());
    }
}
