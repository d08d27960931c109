//! Minimal libpcap writer, nanosecond-resolution variant, link type Ethernet.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use crate::types::Nanos;

/// Magic number of the nanosecond-timestamp pcap format.
pub const PCAP_MAGIC_NANOS: u32 = 0xa1b2_3c4d;
pub const PCAP_GLOBAL_HEADER_LEN: usize = 24;
pub const LINKTYPE_ETHERNET: u32 = 1;
const SNAPLEN: u32 = 65_535;

pub struct PcapWriter<W: Write> {
    inner: W,
    records: u64,
}

impl PcapWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>) -> io::Result<Self> {
        Self::new(BufWriter::new(File::create(path)?))
    }
}

impl<W: Write> PcapWriter<W> {
    /// Writes the 24-byte global header.
    pub fn new(mut inner: W) -> io::Result<Self> {
        let mut header = [0u8; PCAP_GLOBAL_HEADER_LEN];
        header[0..4].copy_from_slice(&PCAP_MAGIC_NANOS.to_le_bytes());
        header[4..6].copy_from_slice(&2u16.to_le_bytes());
        header[6..8].copy_from_slice(&4u16.to_le_bytes());
        // thiszone and sigfigs stay zero
        header[16..20].copy_from_slice(&SNAPLEN.to_le_bytes());
        header[20..24].copy_from_slice(&LINKTYPE_ETHERNET.to_le_bytes());
        inner.write_all(&header)?;
        Ok(Self { inner, records: 0 })
    }

    pub fn append(&mut self, bytes: &[u8], ts_ns: Nanos) -> io::Result<()> {
        let secs = u32::try_from(ts_ns / 1_000_000_000)
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "timestamp beyond 32-bit seconds"))?;
        let nanos = (ts_ns % 1_000_000_000) as u32;
        let len =
            u32::try_from(bytes.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "record too large"))?;
        let captured = len.min(SNAPLEN);
        let mut record = [0u8; 16];
        record[0..4].copy_from_slice(&secs.to_le_bytes());
        record[4..8].copy_from_slice(&nanos.to_le_bytes());
        record[8..12].copy_from_slice(&captured.to_le_bytes());
        record[12..16].copy_from_slice(&len.to_le_bytes());
        self.inner.write_all(&record)?;
        self.inner.write_all(&bytes[..captured as usize])?;
        self.records += 1;
        Ok(())
    }

    pub fn records(&self) -> u64 {
        self.records
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }

    pub fn into_inner(mut self) -> io::Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// Appends one record to `writer`.
pub fn pcap_append<W: Write>(writer: &mut PcapWriter<W>, bytes: &[u8], ts_ns: Nanos) -> io::Result<()> {
    writer.append(bytes, ts_ns)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_capture_is_global_header_only() {
        let buf = PcapWriter::new(Vec::new()).unwrap().into_inner().unwrap();
        assert_eq!(buf.len(), PCAP_GLOBAL_HEADER_LEN);
        assert_eq!(&buf[0..4], &[0x4d, 0x3c, 0xb2, 0xa1]);
        assert_eq!(&buf[20..24], &[1, 0, 0, 0]);
    }

    #[test]
    fn record_header_layout() {
        let mut w = PcapWriter::new(Vec::new()).unwrap();
        pcap_append(&mut w, &[1, 2, 3], 2_000_000_007).unwrap();
        let buf = w.into_inner().unwrap();
        let rec = &buf[PCAP_GLOBAL_HEADER_LEN..];
        assert_eq!(u32::from_le_bytes(rec[0..4].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(rec[4..8].try_into().unwrap()), 7);
        assert_eq!(u32::from_le_bytes(rec[8..12].try_into().unwrap()), 3);
        assert_eq!(&rec[16..], &[1, 2, 3]);
    }
}
