//! Classic libpcap file reading (and writing, for fixtures and synthetic corpora).
//!
//! Layout: a 24-byte global header (magic, version, thiszone, sigfigs,
//! snaplen, network) followed by records made of a 16-byte header
//! (ts_sec, ts_usec, incl_len, orig_len) and `incl_len` captured bytes.
//! Both byte orders are accepted, as is the nanosecond-resolution magic.
//! pcapng is not supported.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

const MAGIC_MICROS: u32 = 0xA1B2_C3D4;
const MAGIC_NANOS: u32 = 0xA1B2_3C4D;
const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;
/// Largest captured length a record may carry.
pub const MAX_FRAME_LEN: u32 = 65535;

#[derive(Debug, Error)]
pub enum PcapError {
    #[error("cannot read {path}: {source}")]
    UnreadableFile {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: not a pcap file (magic {magic:#010x})")]
    BadMagic { path: PathBuf, magic: u32 },
    #[error("{path}: file shorter than the 24-byte global header")]
    TruncatedHeader { path: PathBuf },
    #[error("{path}: record {index} claims {claimed} bytes but only {remaining} remain")]
    TruncatedRecord {
        path: PathBuf,
        index: u64,
        claimed: usize,
        remaining: usize,
    },
    #[error("{path}: record {index} is invalid: {reason}")]
    InvalidRecord {
        path: PathBuf,
        index: u64,
        reason: String,
    },
}

/// Data-link type from the global header's network field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LinkType {
    Ethernet,
    RawIp,
    Other(u32),
}

impl LinkType {
    pub fn from_code(code: u32) -> Self {
        match code {
            1 => LinkType::Ethernet,
            101 => LinkType::RawIp,
            other => LinkType::Other(other),
        }
    }

    pub fn code(self) -> u32 {
        match self {
            LinkType::Ethernet => 1,
            LinkType::RawIp => 101,
            LinkType::Other(code) => code,
        }
    }
}

/// One captured link-layer frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptureFrame {
    /// Zero-based record position in the file.
    pub index: u64,
    pub ts_sec: u32,
    /// Always microseconds; nanosecond captures are down-converted.
    pub ts_usec: u32,
    pub link_type: LinkType,
    pub data: Vec<u8>,
    pub original_length: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ByteOrder {
    Little,
    Big,
}

impl ByteOrder {
    fn u32(self, b: &[u8]) -> u32 {
        let arr = [b[0], b[1], b[2], b[3]];
        match self {
            ByteOrder::Little => u32::from_le_bytes(arr),
            ByteOrder::Big => u32::from_be_bytes(arr),
        }
    }
}

/// A single-consumer reader over the records of one capture file.
pub struct CaptureSource<R = BufReader<File>> {
    path: PathBuf,
    reader: R,
    order: ByteOrder,
    nanos: bool,
    link_type: LinkType,
    snaplen: u32,
    next_index: u64,
    finished: bool,
    frame_count: Option<u64>,
}

impl CaptureSource<BufReader<File>> {
    /// Opens a capture file and validates its global header.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, PcapError> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|source| PcapError::UnreadableFile {
            path: path.clone(),
            source,
        })?;
        Self::from_reader(BufReader::with_capacity(1 << 16, file), path)
    }
}

impl<R: Read> CaptureSource<R> {
    /// Wraps any byte stream; `path` is used for provenance and error messages.
    pub fn from_reader(mut reader: R, path: impl Into<PathBuf>) -> Result<Self, PcapError> {
        let path = path.into();
        let mut header = [0u8; GLOBAL_HEADER_LEN];
        let got =
            read_up_to(&mut reader, &mut header).map_err(|source| PcapError::UnreadableFile {
                path: path.clone(),
                source,
            })?;
        if got < 4 {
            return Err(PcapError::TruncatedHeader { path });
        }
        let raw = u32::from_le_bytes([header[0], header[1], header[2], header[3]]);
        let (order, nanos) = match raw {
            MAGIC_MICROS => (ByteOrder::Little, false),
            MAGIC_NANOS => (ByteOrder::Little, true),
            m if m.swap_bytes() == MAGIC_MICROS => (ByteOrder::Big, false),
            m if m.swap_bytes() == MAGIC_NANOS => (ByteOrder::Big, true),
            magic => return Err(PcapError::BadMagic { path, magic }),
        };
        if got < GLOBAL_HEADER_LEN {
            return Err(PcapError::TruncatedHeader { path });
        }
        let snaplen = order.u32(&header[16..20]);
        let link_type = LinkType::from_code(order.u32(&header[20..24]));
        Ok(Self {
            path,
            reader,
            order,
            nanos,
            link_type,
            snaplen,
            next_index: 0,
            finished: false,
            frame_count: None,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// File stem, used as a hint when labeling captures by name.
    pub fn label_hint(&self) -> Option<String> {
        self.path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
    }

    pub fn link_type(&self) -> LinkType {
        self.link_type
    }

    pub fn snaplen(&self) -> u32 {
        self.snaplen
    }

    /// Number of frames, known only once iteration reached end-of-file.
    pub fn frame_count(&self) -> Option<u64> {
        self.frame_count
    }

    /// Returns the next record, `None` at a clean end-of-file.
    pub fn next_frame(&mut self) -> Result<Option<CaptureFrame>, PcapError> {
        if self.finished {
            return Ok(None);
        }
        let index = self.next_index;
        let mut header = [0u8; RECORD_HEADER_LEN];
        let got = read_up_to(&mut self.reader, &mut header).map_err(|e| self.io_error(e))?;
        if got == 0 {
            self.finished = true;
            self.frame_count = Some(index);
            return Ok(None);
        }
        if got < RECORD_HEADER_LEN {
            self.finished = true;
            return Err(PcapError::TruncatedRecord {
                path: self.path.clone(),
                index,
                claimed: RECORD_HEADER_LEN,
                remaining: got,
            });
        }
        let ts_sec = self.order.u32(&header[0..4]);
        let ts_frac = self.order.u32(&header[4..8]);
        let incl_len = self.order.u32(&header[8..12]);
        let orig_len = self.order.u32(&header[12..16]);
        if incl_len > MAX_FRAME_LEN {
            self.finished = true;
            return Err(PcapError::InvalidRecord {
                path: self.path.clone(),
                index,
                reason: format!("captured length {incl_len} exceeds {MAX_FRAME_LEN}"),
            });
        }
        if incl_len > orig_len {
            self.finished = true;
            return Err(PcapError::InvalidRecord {
                path: self.path.clone(),
                index,
                reason: format!("captured length {incl_len} exceeds original length {orig_len}"),
            });
        }
        let mut data = vec![0u8; incl_len as usize];
        let got = read_up_to(&mut self.reader, &mut data).map_err(|e| self.io_error(e))?;
        if got < data.len() {
            self.finished = true;
            return Err(PcapError::TruncatedRecord {
                path: self.path.clone(),
                index,
                claimed: data.len(),
                remaining: got,
            });
        }
        self.next_index += 1;
        let ts_usec = if self.nanos { ts_frac / 1000 } else { ts_frac };
        Ok(Some(CaptureFrame {
            index,
            ts_sec,
            ts_usec,
            link_type: self.link_type,
            data,
            original_length: orig_len,
        }))
    }

    fn io_error(&mut self, source: io::Error) -> PcapError {
        self.finished = true;
        PcapError::UnreadableFile {
            path: self.path.clone(),
            source,
        }
    }
}

impl<R: Read> Iterator for CaptureSource<R> {
    type Item = Result<CaptureFrame, PcapError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_frame().transpose()
    }
}

/// Reads until `buf` is full or the stream ends; returns the byte count.
fn read_up_to<R: Read>(reader: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Frame payload plus timestamp, as handed to [`PcapWriter`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRecord {
    pub ts_sec: u32,
    pub ts_usec: u32,
    pub data: Vec<u8>,
}

impl RawRecord {
    pub fn new(data: Vec<u8>) -> Self {
        Self {
            ts_sec: 0,
            ts_usec: 0,
            data,
        }
    }
}

/// Writes classic microsecond pcap files in either byte order.
pub struct PcapWriter<W: Write> {
    out: W,
    big_endian: bool,
}

impl PcapWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>, link_type: LinkType) -> io::Result<Self> {
        let file = File::create(path)?;
        Self::new(BufWriter::new(file), link_type, false)
    }
}

impl<W: Write> PcapWriter<W> {
    pub fn new(mut out: W, link_type: LinkType, big_endian: bool) -> io::Result<Self> {
        let mut header = Vec::with_capacity(GLOBAL_HEADER_LEN);
        let put32 = |v: u32, h: &mut Vec<u8>| {
            if big_endian {
                h.extend_from_slice(&v.to_be_bytes())
            } else {
                h.extend_from_slice(&v.to_le_bytes())
            }
        };
        let put16 = |v: u16, h: &mut Vec<u8>| {
            if big_endian {
                h.extend_from_slice(&v.to_be_bytes())
            } else {
                h.extend_from_slice(&v.to_le_bytes())
            }
        };
        put32(MAGIC_MICROS, &mut header);
        put16(2, &mut header);
        put16(4, &mut header);
        put32(0, &mut header);
        put32(0, &mut header);
        put32(MAX_FRAME_LEN, &mut header);
        put32(link_type.code(), &mut header);
        out.write_all(&header)?;
        Ok(Self { out, big_endian })
    }

    pub fn write_record(&mut self, record: &RawRecord) -> io::Result<()> {
        let len = u32::try_from(record.data.len())
            .ok()
            .filter(|&l| l <= MAX_FRAME_LEN)
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
        for v in [record.ts_sec, record.ts_usec, len, len] {
            let bytes = if self.big_endian {
                v.to_be_bytes()
            } else {
                v.to_le_bytes()
            };
            self.out.write_all(&bytes)?;
        }
        self.out.write_all(&record.data)
    }

    pub fn finish(mut self) -> io::Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Convenience: writes `frames` to a new little-endian pcap at `path`.
pub fn write_pcap(
    path: impl AsRef<Path>,
    link_type: LinkType,
    frames: impl IntoIterator<Item = Vec<u8>>,
) -> io::Result<()> {
    let mut writer = PcapWriter::create(path, link_type)?;
    for (i, data) in frames.into_iter().enumerate() {
        writer.write_record(&RawRecord {
            ts_sec: i as u32,
            ts_usec: 0,
            data,
        })?;
    }
    writer.finish()?;
    Ok(())
}
