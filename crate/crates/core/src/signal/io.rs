//! Directory format for recordings.
//!
//! ```text
//! <dir>/header.txt     key: value lines (format, version, fs, n_channels, n_samples, channel)
//! <dir>/data.f32       little-endian f32, row-major channels × samples
//! <dir>/condition.txt  one integer per line
//! <dir>/subject.txt    one integer per line
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::Recording;
use crate::error::{Error, Result};

const FORMAT_NAME: &str = "megcast-recording";
const FORMAT_VERSION: u32 = 1;

pub fn write_recording(rec: &Recording, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut header = String::new();
    header.push_str(&format!("format: {FORMAT_NAME}\n"));
    header.push_str(&format!("version: {FORMAT_VERSION}\n"));
    header.push_str(&format!("fs: {}\n", rec.fs));
    header.push_str(&format!("n_channels: {}\n", rec.n_channels()));
    header.push_str(&format!("n_samples: {}\n", rec.n_samples()));
    for name in &rec.channel_names {
        if name.contains('\n') || name.trim() != name || name.is_empty() {
            return Err(Error::invalid(format!("unrepresentable channel name {name:?}")));
        }
        header.push_str(&format!("channel: {name}\n"));
    }
    write_file(&dir.join("header.txt"), header.as_bytes())?;

    let mut bytes = Vec::with_capacity(rec.data.len() * 4);
    for v in rec.data.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_file(&dir.join("data.f32"), &bytes)?;
    write_file(&dir.join("condition.txt"), &label_lines(&rec.condition))?;
    write_file(&dir.join("subject.txt"), &label_lines(&rec.subject))?;
    Ok(())
}

pub fn read_recording(dir: &Path) -> Result<Recording> {
    let header_path = dir.join("header.txt");
    let header = read_text(&header_path)?;
    let mut fs_hz = None;
    let mut n_channels = None;
    let mut n_samples = None;
    let mut names = Vec::new();
    let mut format_ok = false;
    for line in header.lines().filter(|l| !l.trim().is_empty()) {
        let (key, value) = line
            .split_once(": ")
            .ok_or_else(|| Error::format(&header_path, format!("malformed line {line:?}")))?;
        match key {
            "format" => format_ok = value == FORMAT_NAME,
            "version" => {
                if value != FORMAT_VERSION.to_string() {
                    return Err(Error::Version {
                        found: value.to_string(),
                        expected: FORMAT_VERSION.to_string(),
                    });
                }
            }
            "fs" => fs_hz = Some(parse_num::<f64>(&header_path, value)?),
            "n_channels" => n_channels = Some(parse_num::<usize>(&header_path, value)?),
            "n_samples" => n_samples = Some(parse_num::<usize>(&header_path, value)?),
            "channel" => names.push(value.to_string()),
            other => return Err(Error::format(&header_path, format!("unknown key {other:?}"))),
        }
    }
    if !format_ok {
        return Err(Error::format(&header_path, "not a recording header"));
    }
    let (fs_hz, c, t) = match (fs_hz, n_channels, n_samples) {
        (Some(f), Some(c), Some(t)) => (f, c, t),
        _ => return Err(Error::format(&header_path, "missing fs, n_channels or n_samples")),
    };

    let data_path = dir.join("data.f32");
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    if bytes.len() != c * t * 4 {
        return Err(Error::format(
            &data_path,
            format!("expected {} bytes, found {}", c * t * 4, bytes.len()),
        ));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let data = Array2::from_shape_vec((c, t), values).map_err(|e| Error::shape(e.to_string()))?;
    let condition = read_labels(&dir.join("condition.txt"))?;
    let subject = read_labels(&dir.join("subject.txt"))?;
    Recording::new(data, fs_hz, names, condition, subject)
}

pub(crate) fn label_lines(labels: &[u32]) -> Vec<u8> {
    let mut out = String::with_capacity(labels.len() * 2);
    for l in labels {
        out.push_str(&l.to_string());
        out.push('\n');
    }
    out.into_bytes()
}

pub(crate) fn read_labels(path: &Path) -> Result<Vec<u32>> {
    read_text(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| parse_num::<u32>(path, l.trim()))
        .collect()
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn parse_num<T: std::str::FromStr>(path: &Path, s: &str) -> Result<T> {
    s.parse::<T>()
        .map_err(|_| Error::format(path, format!("cannot parse {s:?}")))
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Sequential little-endian reader over an in-memory file.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], origin: &'a Path) -> Self {
        Self { bytes, pos: 0, origin }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(self.origin, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// A u32 length followed by that many bytes.
    pub(crate) fn block(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let data = Array2::from_shape_fn((3, 17), |(c, t)| ((c * 31 + t) as f32).sin() * 1e-3 + f32::MIN_POSITIVE);
        let rec = Recording::new(
            data,
            250.5,
            vec!["MEG0111".into(), "a b".into(), "x".into()],
            (0..17).map(|t| (t % 4) as u32).collect(),
            vec![2; 17],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_recording(&rec, dir.path()).unwrap();
        let back = read_recording(dir.path()).unwrap();
        assert_eq!(back, rec);
        let bytes_a = fs::read(dir.path().join("data.f32")).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        write_recording(&back, dir2.path()).unwrap();
        for f in ["data.f32", "header.txt", "condition.txt", "subject.txt"] {
            assert_eq!(
                fs::read(dir.path().join(f)).unwrap(),
                fs::read(dir2.path().join(f)).unwrap(),
                "{f}"
            );
        }
        assert_eq!(bytes_a.len(), 3 * 17 * 4);
    }

    #[test]
    fn truncated_data_is_rejected() {
        let rec = Recording::unlabeled(Array2::zeros((2, 5)), 100.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_recording(&rec, dir.path()).unwrap();
        let p = dir.path().join("data.f32");
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_recording(dir.path()), Err(Error::Format { .. })));
    }
}
