//! Classic pcap capture files (the fixed 24 byte header format, Ethernet
//! link type), enough to replay traffic into a graph and write captures out.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: u32 = 0xa1b2_c3d4;
const VERSION_MAJOR: u16 = 2;
const VERSION_MINOR: u16 = 4;
const LINKTYPE_ETHERNET: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PcapError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a pcap file (bad magic {0:#010x})")]
    BadMagic(u32),
    #[error("unsupported link type {0}; only Ethernet captures are supported")]
    BadLinkType(u32),
    #[error("record length {0} exceeds the snap length {1}")]
    OversizedRecord(u32, u32),
}

/// One captured frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PcapRecord {
    pub ts_sec: u32,
    pub ts_usec: u32,
    pub data: Vec<u8>,
}

pub struct PcapReader<R: Read> {
    input: R,
    snaplen: u32,
}

impl PcapReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self, PcapError> {
        PcapReader::new(BufReader::new(File::open(path)?))
    }
}

impl<R: Read> PcapReader<R> {
    pub fn new(mut input: R) -> Result<Self, PcapError> {
        let mut header = [0u8; 24];
        input.read_exact(&mut header)?;
        let magic = u32::from_le_bytes(header[0..4].try_into().unwrap());
        if magic != MAGIC {
            return Err(PcapError::BadMagic(magic));
        }
        let network = u32::from_le_bytes(header[20..24].try_into().unwrap());
        if network != LINKTYPE_ETHERNET {
            return Err(PcapError::BadLinkType(network));
        }
        let snaplen = u32::from_le_bytes(header[16..20].try_into().unwrap());
        Ok(PcapReader { input, snaplen })
    }

    /// Read the next record, `None` at a clean end of file.
    pub fn next_record(&mut self) -> Result<Option<PcapRecord>, PcapError> {
        let mut rec = [0u8; 16];
        match self.input.read_exact(&mut rec) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e.into()),
        }
        let incl_len = u32::from_le_bytes(rec[8..12].try_into().unwrap());
        if incl_len > self.snaplen.max(65_535) {
            return Err(PcapError::OversizedRecord(incl_len, self.snaplen));
        }
        let mut data = vec![0u8; incl_len as usize];
        self.input.read_exact(&mut data)?;
        Ok(Some(PcapRecord {
            ts_sec: u32::from_le_bytes(rec[0..4].try_into().unwrap()),
            ts_usec: u32::from_le_bytes(rec[4..8].try_into().unwrap()),
            data,
        }))
    }

    pub fn read_all(&mut self) -> Result<Vec<PcapRecord>, PcapError> {
        let mut out = Vec::new();
        while let Some(r) = self.next_record()? {
            out.push(r);
        }
        Ok(out)
    }
}

pub struct PcapWriter<W: Write> {
    output: W,
}

impl PcapWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self, PcapError> {
        PcapWriter::new(BufWriter::new(File::create(path)?))
    }
}

impl<W: Write> PcapWriter<W> {
    pub fn new(mut output: W) -> Result<Self, PcapError> {
        let mut header = [0u8; 24];
        header[0..4].copy_from_slice(&MAGIC.to_le_bytes());
        header[4..6].copy_from_slice(&VERSION_MAJOR.to_le_bytes());
        header[6..8].copy_from_slice(&VERSION_MINOR.to_le_bytes());
        header[16..20].copy_from_slice(&65_535u32.to_le_bytes());
        header[20..24].copy_from_slice(&LINKTYPE_ETHERNET.to_le_bytes());
        output.write_all(&header)?;
        Ok(PcapWriter { output })
    }

    pub fn write_record(&mut self, ts_sec: u32, ts_usec: u32, frame: &[u8]) -> Result<(), PcapError> {
        let mut rec = [0u8; 16];
        rec[0..4].copy_from_slice(&ts_sec.to_le_bytes());
        rec[4..8].copy_from_slice(&ts_usec.to_le_bytes());
        rec[8..12].copy_from_slice(&(frame.len() as u32).to_le_bytes());
        rec[12..16].copy_from_slice(&(frame.len() as u32).to_le_bytes());
        self.output.write_all(&rec)?;
        self.output.write_all(frame)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), PcapError> {
        self.output.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_read_round_trip() {
        let mut buf = Vec::new();
        {
            let mut w = PcapWriter::new(&mut buf).unwrap();
            w.write_record(10, 20, b"first frame").unwrap();
            w.write_record(11, 0, &[0u8; 60]).unwrap();
            w.finish().unwrap();
        }
        let mut r = PcapReader::new(buf.as_slice()).unwrap();
        let records = r.read_all().unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].ts_sec, 10);
        assert_eq!(records[0].ts_usec, 20);
        assert_eq!(records[0].data, b"first frame");
        assert_eq!(records[1].data.len(), 60);
    }

    #[test]
    fn rejects_foreign_files() {
        assert!(matches!(
            PcapReader::new(&b"GIF89a and then some padding....."[..]),
            Err(PcapError::BadMagic(_))
        ));
        // Right magic, wrong link type.
        let mut buf = Vec::new();
        PcapWriter::new(&mut buf).unwrap();
        buf[20] = 101; // raw IP
        assert!(matches!(
            PcapReader::new(buf.as_slice()),
            Err(PcapError::BadLinkType(101))
        ));
    }

    #[test]
    fn truncated_record_is_an_error_but_clean_eof_is_not() {
        let mut buf = Vec::new();
        {
            let mut w = PcapWriter::new(&mut buf).unwrap();
            w.write_record(1, 2, b"whole").unwrap();
            w.finish().unwrap();
        }
        let whole = PcapReader::new(buf.as_slice()).unwrap().read_all().unwrap();
        assert_eq!(whole.len(), 1);
        let cut = &buf[..buf.len() - 2];
        let mut r = PcapReader::new(cut).unwrap();
        assert!(r.next_record().is_err());
    }
}
