//! MetaImage (`.mhd` header + `.raw` payload) reading and writing.
//!
//! Recognized header keys: `NDims` (must be 3), `DimSize` (x y z, i.e. W H D),
//! `ElementSpacing` (x y z), `ElementType` (`MET_UCHAR`, `MET_SHORT`,
//! `MET_DOUBLE`) and `ElementDataFile` (path relative to the header). `Offset`,
//! `ObjectType`, `BinaryData` and the byte-order flags are honored when
//! present. Payloads are little-endian and uncompressed; other keys are
//! ignored with a warning.

use std::path::{Path, PathBuf};

use log::warn;

use crate::error::{Error, Result};
use crate::labels::LabelVolume;
use crate::volume::{ElementType, Volume};

const KNOWN_KEYS: &[&str] = &[
    "ObjectType",
    "NDims",
    "DimSize",
    "ElementSpacing",
    "ElementType",
    "ElementDataFile",
    "Offset",
    "BinaryData",
    "BinaryDataByteOrderMSB",
    "ElementByteOrderMSB",
    "CompressedData",
];

struct Header {
    path: PathBuf,
    entries: Vec<(String, String)>,
}

impl Header {
    fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::MissingKey {
            path: self.path.clone(),
            key: key.to_string(),
        })
    }

    fn numbers<T: std::str::FromStr>(&self, key: &str, n: usize) -> Result<Vec<T>> {
        let raw = self.require(key)?;
        let vals: Vec<T> = raw
            .split_whitespace()
            .map(|s| s.parse().ok())
            .collect::<Option<_>>()
            .ok_or_else(|| Error::Format(format!("{}: cannot parse {key} `{raw}`", self.path.display())))?;
        if vals.len() != n {
            return Err(Error::Format(format!(
                "{}: {key} needs {n} values, got {}",
                self.path.display(),
                vals.len()
            )));
        }
        Ok(vals)
    }
}

fn parse_header(path: &Path) -> Result<Header> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("{}: bad header line `{line}`", path.display())))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if !KNOWN_KEYS.contains(&k.as_str()) {
            warn!("{}: ignoring unknown header key `{k}`", path.display());
        }
        entries.push((k, v));
    }
    Ok(Header {
        path: path.to_path_buf(),
        entries,
    })
}

fn is_true(v: Option<&str>) -> bool {
    v.is_some_and(|s| s.eq_ignore_ascii_case("true"))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let h = parse_header(path)?;
    let ndims: usize = h
        .require("NDims")?
        .parse()
        .map_err(|_| Error::Format(format!("{}: bad NDims", path.display())))?;
    if ndims != 3 {
        return Err(Error::Format(format!("{}: NDims must be 3, got {ndims}", path.display())));
    }
    let dims: Vec<usize> = h.numbers("DimSize", 3)?;
    let spacing: Vec<f64> = h.numbers("ElementSpacing", 3)?;
    let kind = h.require("ElementType")?;
    let element_type = ElementType::from_met_name(kind).ok_or_else(|| Error::UnsupportedType {
        path: path.to_path_buf(),
        kind: kind.to_string(),
    })?;
    let data_file = h.require("ElementDataFile")?;
    let origin: Vec<f64> = if h.get("Offset").is_some() {
        h.numbers("Offset", 3)?
    } else {
        vec![0.0; 3]
    };
    if is_true(h.get("BinaryDataByteOrderMSB")) || is_true(h.get("ElementByteOrderMSB")) {
        return Err(Error::Format(format!("{}: big-endian payloads are not supported", path.display())));
    }
    if is_true(h.get("CompressedData")) {
        return Err(Error::Format(format!("{}: compressed payloads are not supported", path.display())));
    }

    let raw_path = path.parent().unwrap_or(Path::new(".")).join(data_file);
    let bytes = std::fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let count: usize = dims.iter().product();
    let expected = (count * element_type.size()) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            path: raw_path,
            expected,
            actual: bytes.len() as u64,
        });
    }
    let data: Vec<f64> = match element_type {
        ElementType::U8 => bytes.iter().map(|&b| f64::from(b)).collect(),
        ElementType::I16 => bytes
            .chunks_exact(2)
            .map(|c| f64::from(i16::from_le_bytes([c[0], c[1]])))
            .collect(),
        ElementType::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    let v = Volume {
        shape: [dims[2], dims[1], dims[0]],
        data,
        spacing: [spacing[2], spacing[1], spacing[0]],
        origin: [origin[2], origin[1], origin[0]],
        element_type,
    };
    v.validate()?;
    Ok(v)
}

/// Writes `path` (the header) and a sibling `.raw` payload.
pub fn write_volume(volume: &Volume, path: &Path) -> Result<()> {
    volume.validate()?;
    let et = volume.element_type;
    let mut payload = Vec::with_capacity(volume.data.len() * et.size());
    for &v in &volume.data {
        match et {
            ElementType::U8 => payload.push(checked_int(v, 0.0, 255.0, path)? as u8),
            ElementType::I16 => payload
                .extend_from_slice(&(checked_int(v, -32768.0, 32767.0, path)? as i16).to_le_bytes()),
            ElementType::F64 => payload.extend_from_slice(&v.to_le_bytes()),
        }
    }
    let raw_path = path.with_extension("raw");
    let raw_name = raw_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Format(format!("{}: bad file name", path.display())))?
        .to_string();
    let [d, h, w] = volume.shape;
    let [sd, sh, sw] = volume.spacing;
    let [od, oh, ow] = volume.origin;
    let header = format!(
        "ObjectType = Image\n\
         NDims = 3\n\
         BinaryData = True\n\
         BinaryDataByteOrderMSB = False\n\
         Offset = {ow} {oh} {od}\n\
         ElementSpacing = {sw} {sh} {sd}\n\
         DimSize = {w} {h} {d}\n\
         ElementType = {}\n\
         ElementDataFile = {raw_name}\n",
        et.met_name()
    );
    std::fs::write(&raw_path, payload).map_err(|e| Error::io(&raw_path, e))?;
    std::fs::write(path, header).map_err(|e| Error::io(path, e))
}

fn checked_int(v: f64, lo: f64, hi: f64, path: &Path) -> Result<f64> {
    if v.fract() != 0.0 || v < lo || v > hi {
        return Err(Error::Param(format!(
            "{}: value {v} is not representable in the element type",
            path.display()
        )));
    }
    Ok(v)
}

pub fn read_labels(path: &Path) -> Result<(LabelVolume, [f64; 3])> {
    let v = read_volume(path)?;
    Ok((v.to_labels()?, v.spacing))
}

pub fn write_labels(labels: &LabelVolume, spacing: [f64; 3], path: &Path) -> Result<()> {
    write_volume(&Volume::from_labels(labels, spacing)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn bits(v: &Volume) -> Vec<u64> {
        v.data.iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn roundtrip_all_types() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(4);
        for (et, gen) in [
            (ElementType::F64, Box::new(|r: &mut Rng| r.normal(0.0, 100.0)) as Box<dyn Fn(&mut Rng) -> f64>),
            (ElementType::I16, Box::new(|r: &mut Rng| (r.below(65536) as i64 - 32768) as f64)),
            (ElementType::U8, Box::new(|r: &mut Rng| r.below(256) as f64)),
        ] {
            let data = (0..8 * 8 * 8).map(|_| gen(&mut rng)).collect();
            let mut v = Volume::new([8, 8, 8], data, [2.5, 0.7, 0.7]).unwrap();
            v.element_type = et;
            v.origin = [1.0, -2.0, 3.5];
            let p = dir.path().join(format!("{}.mhd", et.met_name()));
            write_volume(&v, &p).unwrap();
            let back = read_volume(&p).unwrap();
            assert_eq!(bits(&back), bits(&v));
            assert_eq!(back, v);
        }
    }

    #[test]
    fn anisotropic_axes_keep_their_order() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::new([2, 3, 4], (0..24).map(f64::from).collect(), [3.0, 2.0, 1.0]).unwrap();
        let p = dir.path().join("a.mhd");
        write_volume(&v, &p).unwrap();
        let header = std::fs::read_to_string(&p).unwrap();
        assert!(header.contains("DimSize = 4 3 2"));
        assert!(header.contains("ElementSpacing = 1 2 3"));
        assert_eq!(read_volume(&p).unwrap(), v);
    }

    #[test]
    fn short_values_widen() {
        let dir = tempfile::tempdir().unwrap();
        let raw: Vec<u8> = [-1000i16, 0, 400].iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(dir.path().join("s.raw"), raw).unwrap();
        let p = dir.path().join("s.mhd");
        std::fs::write(
            &p,
            "NDims = 3\nDimSize = 3 1 1\nElementSpacing = 1 1 1\nElementType = MET_SHORT\nElementDataFile = s.raw\n",
        )
        .unwrap();
        assert_eq!(read_volume(&p).unwrap().data, vec![-1000.0, 0.0, 400.0]);
    }

    #[test]
    fn distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("x.raw"), [0u8; 7]).unwrap();
        let p = dir.path().join("x.mhd");
        let base = "NDims = 3\nDimSize = 2 2 2\nElementSpacing = 1 1 1\nElementDataFile = x.raw\n";
        std::fs::write(&p, format!("{base}ElementType = MET_UCHAR\n")).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::SizeMismatch { expected: 8, actual: 7, .. })));
        std::fs::write(&p, format!("{base}ElementType = MET_FLOAT\n")).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::UnsupportedType { .. })));
        std::fs::write(&p, base).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::MissingKey { ref key, .. }) if key == "ElementType"));
    }

    #[test]
    fn unrepresentable_values_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut v = Volume::new([1, 1, 2], vec![0.5, 1.0], [1.0; 3]).unwrap();
        v.element_type = ElementType::I16;
        assert!(write_volume(&v, &dir.path().join("bad.mhd")).is_err());
    }
}
