//! Time-tag records and the `.bpts` binary container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "BPTS"
//!      4     2  version (1)
//!      6     2  reserved (0)
//!      8     8  tick_ps
//!     16     8  duration_ps
//!     24     2  channel_count
//!     26     6  padding (0)
//!     32  12·n  records: u64 time_ps, u16 channel, u16 flags
//! ```

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Result};

pub const MAGIC: [u8; 4] = *b"BPTS";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 32;
pub const RECORD_LEN: usize = 12;

/// Record flag: the tag came from a simulated dark count.
pub const FLAG_DARK: u16 = 1;

/// One detected photon. Ordering is (time, channel, flags).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TimeTag {
    pub time_ps: u64,
    pub channel: u16,
    pub flags: u16,
}

impl TimeTag {
    pub fn new(time_ps: u64, channel: u16) -> Self {
        TimeTag { time_ps, channel, flags: 0 }
    }

    pub fn is_dark(&self) -> bool {
        self.flags & FLAG_DARK != 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagHeader {
    pub tick_ps: u64,
    pub duration_ps: u64,
    pub channel_count: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagStream {
    pub header: TagHeader,
    pub records: Vec<TimeTag>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("bad magic at offset {offset}")]
    BadMagic { offset: usize },
    #[error("unsupported version {version} at offset {offset}")]
    UnsupportedVersion { offset: usize, version: u16 },
    #[error("truncated data at offset {offset}: need {needed} bytes, have {available}")]
    Truncated { offset: usize, needed: usize, available: usize },
    #[error("zero tick at offset {offset}")]
    ZeroTick { offset: usize },
    #[error("non-monotone record at offset {offset}")]
    NonMonotone { offset: usize },
    #[error("time {time_ps} ps not a multiple of tick {tick_ps} ps at offset {offset}")]
    Misaligned { offset: usize, time_ps: u64, tick_ps: u64 },
    #[error("time {time_ps} ps beyond duration {duration_ps} ps at offset {offset}")]
    OutOfRange { offset: usize, time_ps: u64, duration_ps: u64 },
}

fn record_offset(index: usize) -> usize {
    HEADER_LEN + index * RECORD_LEN
}

impl TagStream {
    pub fn new(header: TagHeader, records: Vec<TimeTag>) -> Self {
        TagStream { header, records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.header.duration_ps as f64 * 1e-12
    }

    /// Checks the stream invariants. Errors carry the byte offset the
    /// offending field would have in the encoded form.
    pub fn validate(&self) -> std::result::Result<(), DecodeError> {
        let h = &self.header;
        if h.tick_ps == 0 {
            return Err(DecodeError::ZeroTick { offset: 8 });
        }
        let mut prev: Option<(u64, u16)> = None;
        for (i, r) in self.records.iter().enumerate() {
            let offset = record_offset(i);
            if r.time_ps % h.tick_ps != 0 {
                return Err(DecodeError::Misaligned { offset, time_ps: r.time_ps, tick_ps: h.tick_ps });
            }
            if r.time_ps > h.duration_ps {
                return Err(DecodeError::OutOfRange { offset, time_ps: r.time_ps, duration_ps: h.duration_ps });
            }
            let key = (r.time_ps, r.channel);
            if prev.is_some_and(|p| key < p) {
                return Err(DecodeError::NonMonotone { offset });
            }
            prev = Some(key);
        }
        Ok(())
    }

    /// Timestamps of one channel, in stream order.
    pub fn channel_times(&self, channel: u16) -> Vec<u64> {
        self.records.iter().filter(|r| r.channel == channel).map(|r| r.time_ps).collect()
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = encode(self)?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<TagStream> {
        let bytes = std::fs::read(path)?;
        Ok(decode(&bytes)?)
    }

    /// `time_ps,channel,flags`, one record per line.
    pub fn records_to_csv(&self) -> String {
        let mut out = String::with_capacity(20 * self.records.len() + 32);
        out.push_str("time_ps,channel,flags\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{}\n", r.time_ps, r.channel, r.flags));
        }
        out
    }

    /// Reads records written by [`TagStream::records_to_csv`]; the CSV
    /// carries no header metadata, so it has to be supplied.
    pub fn from_csv<R: std::io::Read>(header: TagHeader, reader: R) -> Result<TagStream> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut records = Vec::new();
        for row in rdr.deserialize() {
            let (time_ps, channel, flags): (u64, u16, u16) = row?;
            records.push(TimeTag { time_ps, channel, flags });
        }
        let stream = TagStream { header, records };
        stream.validate()?;
        Ok(stream)
    }
}

pub fn encode(stream: &TagStream) -> std::result::Result<Vec<u8>, DecodeError> {
    stream.validate()?;
    let h = &stream.header;
    let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * stream.records.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&h.tick_ps.to_le_bytes());
    out.extend_from_slice(&h.duration_ps.to_le_bytes());
    out.extend_from_slice(&h.channel_count.to_le_bytes());
    out.extend_from_slice(&[0u8; 6]);
    for r in &stream.records {
        out.extend_from_slice(&r.time_ps.to_le_bytes());
        out.extend_from_slice(&r.channel.to_le_bytes());
        out.extend_from_slice(&r.flags.to_le_bytes());
    }
    Ok(out)
}

fn u16_at(bytes: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([bytes[at], bytes[at + 1]])
}

fn u64_at(bytes: &[u8], at: usize) -> u64 {
    let mut buf = [0u8; 8];
    buf.copy_from_slice(&bytes[at..at + 8]);
    u64::from_le_bytes(buf)
}

pub fn decode(bytes: &[u8]) -> std::result::Result<TagStream, DecodeError> {
    if bytes.len() < MAGIC.len() || bytes[..4] != MAGIC {
        return Err(DecodeError::BadMagic { offset: 0 });
    }
    if bytes.len() < HEADER_LEN {
        return Err(DecodeError::Truncated { offset: 0, needed: HEADER_LEN, available: bytes.len() });
    }
    let version = u16_at(bytes, 4);
    if version != VERSION {
        return Err(DecodeError::UnsupportedVersion { offset: 4, version });
    }
    let header = TagHeader {
        tick_ps: u64_at(bytes, 8),
        duration_ps: u64_at(bytes, 16),
        channel_count: u16_at(bytes, 24),
    };
    let body = &bytes[HEADER_LEN..];
    let full = body.len() / RECORD_LEN;
    let rest = body.len() % RECORD_LEN;
    if rest != 0 {
        return Err(DecodeError::Truncated {
            offset: record_offset(full),
            needed: RECORD_LEN,
            available: rest,
        });
    }
    let records = body
        .chunks_exact(RECORD_LEN)
        .map(|rec| TimeTag {
            time_ps: u64_at(rec, 0),
            channel: u16_at(rec, 8),
            flags: u16_at(rec, 10),
        })
        .collect();
    let stream = TagStream { header, records };
    stream.validate()?;
    Ok(stream)
}

/// k-way merge of streams sharing a tick. Ties are broken by
/// (time, channel, input index), so the result is fully determined.
pub fn merge(streams: &[TagStream]) -> Result<TagStream> {
    let first = streams.first().ok_or_else(|| invalid_input("merge needs at least one stream"))?;
    let tick_ps = first.header.tick_ps;
    if let Some(bad) = streams.iter().find(|s| s.header.tick_ps != tick_ps) {
        return Err(invalid_input(format!(
            "tick mismatch: {} ps vs {} ps",
            tick_ps, bad.header.tick_ps
        )));
    }
    let header = TagHeader {
        tick_ps,
        duration_ps: streams.iter().map(|s| s.header.duration_ps).max().unwrap_or(0),
        channel_count: streams.iter().map(|s| s.header.channel_count).max().unwrap_or(0),
    };
    let total = streams.iter().map(|s| s.records.len()).sum();
    let mut records = Vec::with_capacity(total);
    let mut heap = BinaryHeap::with_capacity(streams.len());
    for (input, s) in streams.iter().enumerate() {
        if let Some(r) = s.records.first() {
            heap.push(Reverse((r.time_ps, r.channel, input, 0usize)));
        }
    }
    while let Some(Reverse((_, _, input, pos))) = heap.pop() {
        let recs = &streams[input].records;
        records.push(recs[pos]);
        if let Some(r) = recs.get(pos + 1) {
            heap.push(Reverse((r.time_ps, r.channel, input, pos + 1)));
        }
    }
    Ok(TagStream { header, records })
}
