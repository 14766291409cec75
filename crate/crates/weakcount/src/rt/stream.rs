//! Stream replay files: a small header (magic, version, sample rate, count)
//! followed by raw little-endian 32-bit float samples.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

const MAGIC: &[u8; 8] = b"WKCSTRM\0";
const VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum StreamError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a stream file (bad magic)")]
    BadMagic,
    #[error("unsupported stream version {found} (this build reads version {supported})")]
    VersionMismatch { found: u16, supported: u16 },
    #[error("malformed stream file: {0}")]
    Malformed(String),
}

pub fn write_stream(path: &Path, sample_rate_hz: f64, samples: &[f32]) -> Result<(), StreamError> {
    let tmp = path.with_extension("tmp-write");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_u16::<LittleEndian>(VERSION)?;
        w.write_f64::<LittleEndian>(sample_rate_hz)?;
        w.write_u64::<LittleEndian>(samples.len() as u64)?;
        for &s in samples {
            w.write_f32::<LittleEndian>(s)?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_stream(path: &Path) -> Result<(f64, Vec<f32>), StreamError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(StreamError::BadMagic);
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != VERSION {
        return Err(StreamError::VersionMismatch {
            found: version,
            supported: VERSION,
        });
    }
    let rate = r.read_f64::<LittleEndian>()?;
    if !(rate > 0.0) {
        return Err(StreamError::Malformed(format!("bad sample rate {rate}")));
    }
    let n = r.read_u64::<LittleEndian>()? as usize;
    let mut samples = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut samples)?;
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(StreamError::Malformed("trailing bytes".into()));
    }
    Ok((rate, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_samples_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wks");
        let samples: Vec<f32> = (0..500).map(|i| (i as f32 * 0.31).sin()).collect();
        write_stream(&path, 6400.0, &samples).unwrap();
        let (rate, loaded) = read_stream(&path).unwrap();
        assert_eq!(rate, 6400.0);
        assert_eq!(loaded, samples);
    }

    #[test]
    fn truncation_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wks");
        write_stream(&path, 6400.0, &[1.0, 2.0, 3.0]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.wks");
        std::fs::write(&cut, &bytes[..bytes.len() - 2]).unwrap();
        assert!(read_stream(&cut).is_err());
    }
}
