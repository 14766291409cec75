//! Single-file dataset container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "WKCDSET\0"
//! version   u16      currently 1
//! n_cat     u16      number of categories N (incl. background)
//! names     N × (u16 len + UTF-8)
//! n_rec     u32
//! record:
//!   series_id        u16 len + UTF-8
//!   bin_key          u16 pair count × (u16 len + UTF-8 key, u16 len + UTF-8 value)
//!   sample_rate_hz   f64
//!   samples          u32 count + f32 × count
//!   counts           (N-1) × u32
//!   truth            u8 flag; if 1: u32 count × (u64 onset, u16 category)
//! ```
//!
//! A load either yields the exact dataset that was saved (samples bit-exact)
//! or fails; there are no partial loads. Trailing bytes are an error.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{BinKey, Dataset, GroundTruth, Record, TimeSeries, WeakLabel};

const MAGIC: &[u8; 8] = b"WKCDSET\0";
const VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {found} (this build reads version {supported})")]
    VersionMismatch { found: u16, supported: u16 },
    #[error("malformed dataset file: {0}")]
    Malformed(String),
    #[error("file has {0} trailing bytes after the last record")]
    TrailingBytes(u64),
}

fn write_str<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
    let bytes = s.as_bytes();
    assert!(bytes.len() <= u16::MAX as usize, "string too long for container");
    w.write_u16::<LittleEndian>(bytes.len() as u16)?;
    w.write_all(bytes)
}

fn read_str<R: Read>(r: &mut R) -> Result<String, DatasetError> {
    let len = r.read_u16::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| DatasetError::Malformed("invalid UTF-8 string".into()))
}

/// Writes the dataset to `path`. The file appears atomically: content goes to
/// a sibling temporary file first and is renamed into place.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let tmp = path.with_extension("tmp-write");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_u16::<LittleEndian>(VERSION)?;
        w.write_u16::<LittleEndian>(dataset.n_categories as u16)?;
        for name in &dataset.category_names {
            write_str(&mut w, name)?;
        }
        w.write_u32::<LittleEndian>(dataset.records.len() as u32)?;
        for rec in &dataset.records {
            write_str(&mut w, &rec.series.series_id)?;
            w.write_u16::<LittleEndian>(rec.series.bin_key.0.len() as u16)?;
            for (k, v) in &rec.series.bin_key.0 {
                write_str(&mut w, k)?;
                write_str(&mut w, v)?;
            }
            w.write_f64::<LittleEndian>(rec.series.sample_rate_hz)?;
            w.write_u32::<LittleEndian>(rec.series.samples.len() as u32)?;
            for &s in &rec.series.samples {
                w.write_f32::<LittleEndian>(s)?;
            }
            debug_assert_eq!(rec.label.counts.len(), dataset.n_categories - 1);
            for &c in &rec.label.counts {
                w.write_u32::<LittleEndian>(c)?;
            }
            match &rec.truth {
                None => w.write_u8(0)?,
                Some(truth) => {
                    w.write_u8(1)?;
                    w.write_u32::<LittleEndian>(truth.events.len() as u32)?;
                    for &(onset, cat) in &truth.events {
                        w.write_u64::<LittleEndian>(onset as u64)?;
                        w.write_u16::<LittleEndian>(cat as u16)?;
                    }
                }
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a dataset written by [`save_dataset`].
pub fn load_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DatasetError::BadMagic);
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != VERSION {
        return Err(DatasetError::VersionMismatch {
            found: version,
            supported: VERSION,
        });
    }
    let n_categories = r.read_u16::<LittleEndian>()? as usize;
    if n_categories < 2 {
        return Err(DatasetError::Malformed(format!(
            "need at least 2 categories, found {n_categories}"
        )));
    }
    let mut category_names = Vec::with_capacity(n_categories);
    for _ in 0..n_categories {
        category_names.push(read_str(&mut r)?);
    }
    let n_records = r.read_u32::<LittleEndian>()? as usize;
    let mut records = Vec::with_capacity(n_records);
    for _ in 0..n_records {
        let series_id = read_str(&mut r)?;
        let n_pairs = r.read_u16::<LittleEndian>()? as usize;
        let mut bin = BTreeMap::new();
        for _ in 0..n_pairs {
            let k = read_str(&mut r)?;
            let v = read_str(&mut r)?;
            bin.insert(k, v);
        }
        let sample_rate_hz = r.read_f64::<LittleEndian>()?;
        if !(sample_rate_hz > 0.0) {
            return Err(DatasetError::Malformed(format!(
                "series {series_id}: sample rate {sample_rate_hz} is not positive"
            )));
        }
        let n_samples = r.read_u32::<LittleEndian>()? as usize;
        let mut samples = vec![0f32; n_samples];
        r.read_f32_into::<LittleEndian>(&mut samples)?;
        let mut counts = vec![0u32; n_categories - 1];
        r.read_u32_into::<LittleEndian>(&mut counts)?;
        let truth = match r.read_u8()? {
            0 => None,
            1 => {
                let n_events = r.read_u32::<LittleEndian>()? as usize;
                let mut events = Vec::with_capacity(n_events);
                for _ in 0..n_events {
                    let onset = r.read_u64::<LittleEndian>()? as usize;
                    let cat = r.read_u16::<LittleEndian>()? as usize;
                    if cat == 0 || cat >= n_categories {
                        return Err(DatasetError::Malformed(format!(
                            "series {series_id}: ground-truth category {cat} out of range"
                        )));
                    }
                    events.push((onset, cat));
                }
                Some(GroundTruth { events })
            }
            other => {
                return Err(DatasetError::Malformed(format!(
                    "series {series_id}: invalid ground-truth flag {other}"
                )))
            }
        };
        records.push(Record {
            series: TimeSeries {
                samples,
                sample_rate_hz,
                series_id,
                bin_key: BinKey(bin),
            },
            label: WeakLabel::new(counts),
            truth,
        });
    }

    // Anything after the last record means the file was not written by us.
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => {}
        _ => {
            let mut extra = 1u64;
            let mut sink = [0u8; 4096];
            loop {
                let n = r.read(&mut sink)?;
                if n == 0 {
                    break;
                }
                extra += n as u64;
            }
            return Err(DatasetError::TrailingBytes(extra));
        }
    }

    Ok(Dataset {
        n_categories,
        category_names,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{synthesize_series, SeriesPlan};

    fn sample_dataset() -> Dataset {
        let profile = crate::presets::baseline_profile(1);
        let mut ds = Dataset::new(vec!["non-shot".into(), "shot".into()]);
        for i in 0..3 {
            let plan = SeriesPlan::new(0.8)
                .burst(0.1, 2 + i, 0.09, 1)
                .confuser(0.65);
            let bin = BinKey::new().with("mount", if i % 2 == 0 { "a" } else { "b" });
            let (series, label, truth) =
                synthesize_series(&profile, &plan, &format!("s{i}"), bin, i as u64).unwrap();
            ds.records.push(Record {
                series,
                label,
                truth: Some(truth),
            });
        }
        ds
    }

    #[test]
    fn roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.wkc");
        let ds = sample_dataset();
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn truncated_file_is_an_error_not_a_shorter_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.wkc");
        save_dataset(&sample_dataset(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [bytes.len() / 3, bytes.len() / 2, bytes.len() - 5] {
            let short_path = dir.path().join("cut.wkc");
            std::fs::write(&short_path, &bytes[..cut]).unwrap();
            assert!(
                load_dataset(&short_path).is_err(),
                "truncation at {cut} must fail"
            );
        }
    }

    #[test]
    fn future_version_is_an_explicit_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.wkc");
        save_dataset(&sample_dataset(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99; // version lives right after the magic
        std::fs::write(&path, &bytes).unwrap();
        match load_dataset(&path) {
            Err(DatasetError::VersionMismatch { found: 99, supported: 1 }) => {}
            other => panic!("expected version mismatch, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_trailing_bytes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.wkc");
        save_dataset(&sample_dataset(), &path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad = dir.path().join("bad.wkc");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(load_dataset(&bad), Err(DatasetError::BadMagic)));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0u8; 7]);
        let trailing = dir.path().join("trail.wkc");
        std::fs::write(&trailing, &bytes).unwrap();
        assert!(matches!(
            load_dataset(&trailing),
            Err(DatasetError::TrailingBytes(7))
        ));
    }
}
