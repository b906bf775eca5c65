//! Volume file formats.
//!
//! VOL1 is the native format:
//!
//! ```text
//! "VOL1" | u32 H | u32 W | u32 D | f32 voxel_size_mm | H*W*D f32 voxels (x fastest)
//! ```
//!
//! all little-endian. Voxels are held as `f64` in memory and narrowed to `f32`
//! on write, so anything read from a VOL1 file round-trips bit for bit.
//!
//! Single-file NIfTI-1 (`.nii`) is supported read-only for int16 and float32
//! payloads. 4D files are exposed as a sequence of 3D volumes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Dims, Volume};

const VOL1_MAGIC: &[u8; 4] = b"VOL1";
const VOL1_HEADER_LEN: usize = 20;
const NIFTI_HEADER_LEN: usize = 348;

const NIFTI_INT16: i16 = 4;
const NIFTI_FLOAT32: i16 = 16;

pub fn encode_vol1(volume: &Volume) -> Vec<u8> {
    let dims = volume.dims();
    let mut out = Vec::with_capacity(VOL1_HEADER_LEN + 4 * volume.len());
    out.extend_from_slice(VOL1_MAGIC);
    for n in [dims.h, dims.w, dims.d] {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    out.extend_from_slice(&(volume.voxel_size_mm() as f32).to_le_bytes());
    for &v in volume.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_vol1(bytes: &[u8], path: &Path) -> Result<Volume> {
    if bytes.len() < VOL1_HEADER_LEN || &bytes[..4] != VOL1_MAGIC {
        return Err(Error::format(path, "missing VOL1 header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let dims = Dims::new(u32_at(4), u32_at(8), u32_at(12));
    let voxel = f32::from_le_bytes(bytes[16..20].try_into().unwrap()) as f64;
    if dims.is_empty() {
        return Err(Error::format(path, format!("empty dims {dims}")));
    }
    let payload = &bytes[VOL1_HEADER_LEN..];
    let expected = dims
        .len()
        .checked_mul(4)
        .ok_or_else(|| Error::format(path, "dims overflow"))?;
    if payload.len() < expected {
        return Err(Error::format(
            path,
            format!(
                "truncated payload: {dims} needs {} floats, found {}",
                dims.len(),
                payload.len() / 4
            ),
        ));
    }
    if payload.len() > expected {
        return Err(Error::format(path, "trailing bytes after voxel payload"));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Volume::new(dims, voxel, data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_vol1(volume)).map_err(|e| Error::io(path, e))
}

/// Reads a single 3D volume from a VOL1 or NIfTI-1 file, sniffing the format
/// from its leading bytes.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(VOL1_MAGIC) {
        return decode_vol1(&bytes, path);
    }
    let mut vols = decode_nifti(&bytes, path)?;
    if vols.len() != 1 {
        return Err(Error::format(
            path,
            format!(
                "4D NIfTI with {} frames; read it with read_volume_series",
                vols.len()
            ),
        ));
    }
    Ok(vols.pop().unwrap())
}

/// Reads every 3D frame of a VOL1 or NIfTI-1 file.
pub fn read_volume_series(path: impl AsRef<Path>) -> Result<Vec<Volume>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(VOL1_MAGIC) {
        return decode_vol1(&bytes, path).map(|v| vec![v]);
    }
    decode_nifti(&bytes, path)
}

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl HeaderReader<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b: [u8; 2] = self.bytes[off..off + 2].try_into().unwrap();
        match self.endian {
            Endian::Little => i16::from_le_bytes(b),
            Endian::Big => i16::from_be_bytes(b),
        }
    }

    fn f32(&self, off: usize) -> f32 {
        let b: [u8; 4] = self.bytes[off..off + 4].try_into().unwrap();
        match self.endian {
            Endian::Little => f32::from_le_bytes(b),
            Endian::Big => f32::from_be_bytes(b),
        }
    }
}

pub fn decode_nifti(bytes: &[u8], path: &Path) -> Result<Vec<Volume>> {
    if bytes.len() < NIFTI_HEADER_LEN {
        return Err(Error::format(path, "file shorter than a NIfTI-1 header"));
    }
    let size_le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let size_be = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let endian = if size_le == NIFTI_HEADER_LEN as i32 {
        Endian::Little
    } else if size_be == NIFTI_HEADER_LEN as i32 {
        Endian::Big
    } else {
        return Err(Error::format(path, "unrecognized format (neither VOL1 nor NIfTI-1)"));
    };
    if &bytes[344..348] != b"n+1\0" {
        return Err(Error::format(
            path,
            "only single-file NIfTI-1 (magic n+1) is supported",
        ));
    }
    let hdr = HeaderReader { bytes, endian };

    let ndim = hdr.i16(40);
    if !(3..=4).contains(&ndim) {
        return Err(Error::format(path, format!("unsupported dimensionality {ndim}")));
    }
    let dim = |i: usize| hdr.i16(40 + 2 * i);
    let (nx, ny, nz) = (dim(1), dim(2), dim(3));
    let nt = if ndim == 4 { dim(4) } else { 1 };
    if nx < 1 || ny < 1 || nz < 1 || nt < 1 {
        return Err(Error::format(path, "non-positive dimension in header"));
    }
    let dims = Dims::new(ny as usize, nx as usize, nz as usize);

    let datatype = hdr.i16(70);
    let width = match datatype {
        NIFTI_INT16 => 2,
        NIFTI_FLOAT32 => 4,
        other => {
            return Err(Error::format(
                path,
                format!("unsupported NIfTI datatype {other} (only int16 and float32)"),
            ))
        }
    };
    let pixdim = hdr.f32(80) as f64;
    let voxel_size = if pixdim > 0.0 && pixdim.is_finite() {
        pixdim
    } else {
        crate::volume::DEFAULT_VOXEL_SIZE_MM
    };
    let vox_offset = (hdr.f32(108) as usize).max(NIFTI_HEADER_LEN);
    let slope = hdr.f32(112) as f64;
    let inter = hdr.f32(116) as f64;
    let scale = |raw: f64| {
        if slope != 0.0 && slope.is_finite() {
            slope * raw + inter
        } else {
            raw
        }
    };

    let frame_len = dims.len();
    let needed = frame_len * nt as usize * width;
    let payload = bytes.get(vox_offset..).unwrap_or(&[]);
    if payload.len() < needed {
        return Err(Error::format(
            path,
            format!("truncated payload: need {needed} bytes, found {}", payload.len()),
        ));
    }
    let raw: Vec<f64> = match datatype {
        NIFTI_INT16 => payload[..needed]
            .chunks_exact(2)
            .map(|c| {
                let b = [c[0], c[1]];
                let v = match endian {
                    Endian::Little => i16::from_le_bytes(b),
                    Endian::Big => i16::from_be_bytes(b),
                };
                v as f64
            })
            .collect(),
        _ => payload[..needed]
            .chunks_exact(4)
            .map(|c| {
                let b = [c[0], c[1], c[2], c[3]];
                let v = match endian {
                    Endian::Little => f32::from_le_bytes(b),
                    Endian::Big => f32::from_be_bytes(b),
                };
                v as f64
            })
            .collect(),
    };
    raw.chunks_exact(frame_len)
        .map(|frame| {
            Volume::new(dims, voxel_size, frame.iter().map(|&r| scale(r)).collect())
                .map_err(|e| Error::format(path, e.to_string()))
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod testing {
    /// Minimal little-endian single-file NIfTI-1 writer for fixtures.
    pub fn nifti_bytes(
        dims: &[i16],
        datatype: i16,
        slope: f32,
        inter: f32,
        payload: &[u8],
    ) -> Vec<u8> {
        let mut h = vec![0u8; 352];
        h[0..4].copy_from_slice(&348i32.to_le_bytes());
        h[40..42].copy_from_slice(&(dims.len() as i16).to_le_bytes());
        for (i, d) in dims.iter().enumerate() {
            h[42 + 2 * i..44 + 2 * i].copy_from_slice(&d.to_le_bytes());
        }
        h[70..72].copy_from_slice(&datatype.to_le_bytes());
        let bitpix: i16 = if datatype == 4 { 16 } else { 32 };
        h[72..74].copy_from_slice(&bitpix.to_le_bytes());
        h[80..84].copy_from_slice(&2.0f32.to_le_bytes());
        h[108..112].copy_from_slice(&352.0f32.to_le_bytes());
        h[112..116].copy_from_slice(&slope.to_le_bytes());
        h[116..120].copy_from_slice(&inter.to_le_bytes());
        h[344..348].copy_from_slice(b"n+1\0");
        h.extend_from_slice(payload);
        h
    }
}
