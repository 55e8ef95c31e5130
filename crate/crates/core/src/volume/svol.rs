//! `svol v1` volume files.
//!
//! ```text
//! SVOL1 {"patient_id":"...","height":H,"width":W,"slices":S,"in_plane_mm":x,"slice_mm":y}\n
//! S*H*W little-endian f32, slice-major then row-major
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Volume;
use crate::error::{Error, Result};

const MAGIC: &[u8] = b"SVOL1 ";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    patient_id: String,
    height: usize,
    width: usize,
    slices: usize,
    in_plane_mm: f64,
    slice_mm: f64,
}

pub fn write_volume(volume: &Volume) -> Result<Vec<u8>> {
    let header = Header {
        patient_id: volume.patient_id.clone(),
        height: volume.height,
        width: volume.width,
        slices: volume.n_slices,
        in_plane_mm: volume.in_plane_mm,
        slice_mm: volume.slice_mm,
    };
    let json = serde_json::to_string(&header).expect("header serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + json.len() + 1 + volume.voxels.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(json.as_bytes());
    out.push(b'\n');
    for v in &volume.voxels {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn read_volume(bytes: &[u8]) -> Result<Volume> {
    if let Some(offset) = MAGIC
        .iter()
        .zip(bytes)
        .position(|(want, got)| want != got)
        .or((bytes.len() < MAGIC.len()).then_some(bytes.len()))
    {
        return Err(Error::Parse {
            offset,
            message: "bad magic, expected \"SVOL1 \"".into(),
        });
    }
    let newline = bytes[MAGIC.len()..]
        .iter()
        .position(|&b| b == b'\n')
        .map(|p| p + MAGIC.len())
        .ok_or_else(|| Error::Parse {
            offset: bytes.len(),
            message: "header line is not terminated".into(),
        })?;
    let header_text = std::str::from_utf8(&bytes[MAGIC.len()..newline]).map_err(|e| Error::Parse {
        offset: MAGIC.len() + e.valid_up_to(),
        message: "header is not UTF-8".into(),
    })?;
    let header: Header = serde_json::from_str(header_text).map_err(|e| Error::Parse {
        offset: MAGIC.len() + e.column().saturating_sub(1),
        message: format!("bad header: {e}"),
    })?;
    let count = header
        .slices
        .checked_mul(header.height)
        .and_then(|n| n.checked_mul(header.width))
        .ok_or_else(|| {
            Error::ExtentOverflow(format!(
                "{}x{}x{} voxels",
                header.slices, header.height, header.width
            ))
        })?;
    let expected = count
        .checked_mul(4)
        .ok_or_else(|| Error::ExtentOverflow(format!("{count} voxels")))?;
    let payload = &bytes[newline + 1..];
    if payload.len() != expected {
        return Err(Error::Truncated {
            expected,
            found: payload.len(),
        });
    }
    let voxels = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(
        header.patient_id,
        header.height,
        header.width,
        header.slices,
        header.in_plane_mm,
        header.slice_mm,
        voxels,
    )
}

/// Write to a sibling temp file, then rename over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::arg(format!("{} has no file name", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &write_volume(volume)?)
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_volume(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{generate_phantom, PhantomParams};

    fn sample() -> Volume {
        generate_phantom(&PhantomParams {
            height: 8,
            width: 6,
            n_slices: 5,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn file_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.svol");
        let v = sample();
        save_volume(&v, &path).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back, v);
        assert_eq!(write_volume(&back).unwrap(), fs::read(&path).unwrap());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn header_layout() {
        let bytes = write_volume(&sample()).unwrap();
        let line = bytes.split(|&b| b == b'\n').next().unwrap();
        assert_eq!(
            std::str::from_utf8(line).unwrap(),
            "SVOL1 {\"patient_id\":\"phantom-0000\",\"height\":8,\"width\":6,\"slices\":5,\"in_plane_mm\":1.0,\"slice_mm\":1.5}"
        );
        assert_eq!(bytes.len(), line.len() + 1 + 8 * 6 * 5 * 4);
    }

    #[test]
    fn corrupt_magic_names_offset() {
        let mut bytes = write_volume(&sample()).unwrap();
        bytes[2] = b'X';
        match read_volume(&bytes) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(read_volume(b"SV"), Err(Error::Parse { offset: 2, .. })));
    }

    #[test]
    fn length_mismatch_is_truncation() {
        let bytes = write_volume(&sample()).unwrap();
        match read_volume(&bytes[..bytes.len() - 3]) {
            Err(Error::Truncated { expected, found }) => {
                assert_eq!(expected, 960);
                assert_eq!(found, 957);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn extent_overflow() {
        let header = format!(
            "SVOL1 {{\"patient_id\":\"x\",\"height\":{},\"width\":{},\"slices\":4,\"in_plane_mm\":1.0,\"slice_mm\":1.5}}\n",
            usize::MAX / 2,
            3
        );
        assert!(matches!(
            read_volume(header.as_bytes()),
            Err(Error::ExtentOverflow(_))
        ));
    }
}
