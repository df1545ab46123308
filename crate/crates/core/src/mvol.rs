//! MVOL container: a `MVOL1` magic line, one JSON header line, then the raw
//! payload little-endian, channel-interleaved, x-fastest. `f32` payloads hold
//! intensities or bias fields, `u8` payloads hold label codes.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::tissue::Tissue;
use crate::volume::{BiasField, Dims, LabelMap, Volume};

const MAGIC: &str = "MVOL1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    dims: [usize; 3],
    channels: usize,
    dtype: String,
    voxel_mm: [f64; 3],
}

impl Header {
    fn to_dims(&self) -> Result<Dims, CoreError> {
        Dims::new(self.dims[0], self.dims[1], self.dims[2], self.channels)
    }
}

fn write_header<W: Write>(w: &mut W, dims: Dims, dtype: &str, voxel_mm: [f64; 3]) -> Result<(), CoreError> {
    let header = Header {
        dims: [dims.nx, dims.ny, dims.nz],
        channels: dims.channels,
        dtype: dtype.to_string(),
        voxel_mm,
    };
    writeln!(w, "{MAGIC}")?;
    serde_json::to_writer(&mut *w, &header)?;
    writeln!(w)?;
    Ok(())
}

fn read_line<R: Read>(r: &mut R, what: &str) -> Result<String, CoreError> {
    // read byte-by-byte so we never consume payload bytes past the newline
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte)?;
        if n == 0 {
            return Err(CoreError::Format(format!("unexpected end of file in {what}")));
        }
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
        if line.len() > 4096 {
            return Err(CoreError::Format(format!("{what} line is implausibly long")));
        }
    }
    String::from_utf8(line).map_err(|_| CoreError::Format(format!("{what} is not valid UTF-8")))
}

fn read_header<R: Read>(r: &mut R, expect_dtype: &str) -> Result<Header, CoreError> {
    let magic = read_line(r, "magic")?;
    if magic != MAGIC {
        return Err(CoreError::Format(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let header: Header = serde_json::from_str(&read_line(r, "header")?)?;
    if header.dtype != expect_dtype {
        return Err(CoreError::Format(format!(
            "payload is {:?}, expected {:?}",
            header.dtype, expect_dtype
        )));
    }
    Ok(header)
}

fn read_payload<R: Read>(r: &mut R, len: usize) -> Result<Vec<u8>, CoreError> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            CoreError::Format(format!("payload truncated, expected {len} bytes"))
        } else {
            CoreError::Io(e)
        }
    })?;
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing)? {
        0 => Ok(buf),
        _ => Err(CoreError::Format("trailing bytes after payload".into())),
    }
}

fn write_f32<W: Write>(mut w: W, dims: Dims, voxel_mm: [f64; 3], values: &[f64]) -> Result<(), CoreError> {
    write_header(&mut w, dims, "f32", voxel_mm)?;
    let mut buf = Vec::with_capacity(values.len() * 4);
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

fn read_f32<R: Read>(mut r: R, expect_len: impl Fn(Dims) -> usize) -> Result<(Dims, [f64; 3], Vec<f64>), CoreError> {
    let header = read_header(&mut r, "f32")?;
    let dims = header.to_dims()?;
    let n = expect_len(dims);
    let bytes = read_payload(&mut r, n * 4)?;
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((dims, header.voxel_mm, values))
}

pub fn write_volume<W: Write>(w: W, vol: &Volume) -> Result<(), CoreError> {
    write_f32(w, vol.dims, vol.voxel_mm, vol.data())
}

pub fn read_volume<R: Read>(r: R) -> Result<Volume, CoreError> {
    let (dims, voxel_mm, values) = read_f32(r, |d| d.values())?;
    let mut vol = Volume::from_data(dims, values)?;
    vol.voxel_mm = voxel_mm;
    Ok(vol)
}

pub fn write_bias<W: Write>(w: W, bias: &BiasField) -> Result<(), CoreError> {
    write_f32(w, bias.dims, [1.0; 3], bias.values())
}

pub fn read_bias<R: Read>(r: R) -> Result<BiasField, CoreError> {
    let (dims, _, values) = read_f32(r, |d| d.values())?;
    BiasField::from_values(dims, values)
}

pub fn write_labels<W: Write>(mut w: W, labels: &LabelMap) -> Result<(), CoreError> {
    // labels always carry one value per voxel regardless of echo count
    let dims = Dims { channels: 1, ..labels.dims };
    write_header(&mut w, dims, "u8", labels.voxel_mm)?;
    let buf: Vec<u8> = labels.labels().iter().map(|t| t.code()).collect();
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_labels<R: Read>(mut r: R) -> Result<LabelMap, CoreError> {
    let header = read_header(&mut r, "u8")?;
    let dims = header.to_dims()?;
    let bytes = read_payload(&mut r, dims.voxels())?;
    let labels = bytes.into_iter().map(Tissue::from_code).collect::<Result<Vec<_>, _>>()?;
    let mut map = LabelMap::from_labels(dims, labels)?;
    map.voxel_mm = header.voxel_mm;
    Ok(map)
}

pub fn write_volume_file(path: &Path, vol: &Volume) -> Result<(), CoreError> {
    write_volume(BufWriter::new(File::create(path)?), vol)
}

pub fn read_volume_file(path: &Path) -> Result<Volume, CoreError> {
    read_volume(BufReader::new(File::open(path)?))
}

pub fn write_labels_file(path: &Path, labels: &LabelMap) -> Result<(), CoreError> {
    write_labels(BufWriter::new(File::create(path)?), labels)
}

pub fn read_labels_file(path: &Path) -> Result<LabelMap, CoreError> {
    read_labels(BufReader::new(File::open(path)?))
}

pub fn write_bias_file(path: &Path, bias: &BiasField) -> Result<(), CoreError> {
    write_bias(BufWriter::new(File::create(path)?), bias)
}

pub fn read_bias_file(path: &Path) -> Result<BiasField, CoreError> {
    read_bias(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_volume() -> Volume {
        let d = Dims::new(3, 2, 2, 2).unwrap();
        let mut v = Volume::zeros(d);
        v.voxel_mm = [1.0, 1.0, 5.0];
        for i in 0..d.voxels() {
            v.set(i, 0, i as f64 * 1.5);
            v.set(i, 1, -(i as f64) * 0.25);
        }
        v
    }

    #[test]
    fn volume_roundtrip_is_bit_exact() {
        let v = sample_volume();
        let mut first = Vec::new();
        write_volume(&mut first, &v).unwrap();
        let back = read_volume(first.as_slice()).unwrap();
        assert_eq!(back.dims, v.dims);
        assert_eq!(back.voxel_mm, v.voxel_mm);
        let mut second = Vec::new();
        write_volume(&mut second, &back).unwrap();
        assert_eq!(first, second, "write -> read -> write must reproduce the bytes");
    }

    #[test]
    fn labels_roundtrip() {
        let d = Dims::new(2, 2, 1, 1).unwrap();
        let labels = LabelMap::from_labels(
            d,
            vec![Tissue::Background, Tissue::WhiteMatter, Tissue::Csf, Tissue::Unclassified],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_labels(&mut buf, &labels).unwrap();
        let back = read_labels(buf.as_slice()).unwrap();
        assert_eq!(back.labels(), labels.labels());
    }

    #[test]
    fn bad_magic_rejected() {
        let mut buf = Vec::new();
        write_volume(&mut buf, &sample_volume()).unwrap();
        buf[3] ^= 0x20;
        assert!(read_volume(buf.as_slice()).is_err());
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut buf = Vec::new();
        write_volume(&mut buf, &sample_volume()).unwrap();
        buf.truncate(buf.len() - 3);
        let err = read_volume(buf.as_slice()).unwrap_err();
        assert!(format!("{err}").contains("truncated"), "got: {err}");
    }

    #[test]
    fn trailing_garbage_rejected() {
        let mut buf = Vec::new();
        write_volume(&mut buf, &sample_volume()).unwrap();
        buf.push(0);
        assert!(read_volume(buf.as_slice()).is_err());
    }

    #[test]
    fn undefined_label_code_rejected() {
        let d = Dims::new(1, 1, 1, 1).unwrap();
        let labels = LabelMap::filled(d, Tissue::WhiteMatter);
        let mut buf = Vec::new();
        write_labels(&mut buf, &labels).unwrap();
        let n = buf.len();
        buf[n - 1] = 9; // not a defined code
        assert!(read_labels(buf.as_slice()).is_err());
    }

    #[test]
    fn volume_and_labels_are_not_interchangeable() {
        let mut buf = Vec::new();
        write_volume(&mut buf, &sample_volume()).unwrap();
        assert!(read_labels(buf.as_slice()).is_err(), "f32 payload must not parse as labels");
    }
}
