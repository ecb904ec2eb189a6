//! Single-file NIfTI-1 reader and writer (`.nii` / `.nii.gz`).
//!
//! Only the little-endian, 3D, `n+1` subset is handled: datatypes uint8,
//! int16, uint16 and float32, with the voxel data starting right after the
//! 348-byte header and a 4-byte empty extension block. `scl_slope` /
//! `scl_inter` are honored on load and written as identity on save.
//! Orientation fields are carried through as opaque metadata.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::scalar::{ElemType, Element};
use crate::volume::{AnyVolume, Dims, Orientation, Rescale, Spacing, Volume};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";
/// NIFTI_UNITS_MM | NIFTI_UNITS_SEC
const XYZT_UNITS: u8 = 2 | 8;

/// Geometry and encoding read from a header without the payload.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dims: Dims,
    pub spacing: Spacing,
    pub elem: ElemType,
    pub rescale: Option<Rescale>,
    pub orientation: Orientation,
}

fn le_i16(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn le_i32(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn le_f32(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// Parses and validates the fixed 348-byte header.
pub fn parse_header(bytes: &[u8]) -> Result<NiftiHeader> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::ShortHeader(bytes.len()));
    }
    let sizeof_hdr = le_i32(bytes, 0);
    if sizeof_hdr != HEADER_SIZE as i32 {
        if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
            return Err(Error::BigEndian);
        }
        return Err(Error::BadHeaderSize(sizeof_hdr));
    }
    let magic: [u8; 4] = bytes[344..348].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }

    let dim: Vec<i16> = (0..8).map(|i| le_i16(bytes, 40 + 2 * i)).collect();
    if dim[0] != 3 {
        return Err(Error::UnsupportedDimCount(dim[0]));
    }
    if dim[1..4].iter().any(|&d| d < 1) {
        return Err(Error::BadDims([dim[1] as i64, dim[2] as i64, dim[3] as i64]));
    }
    let dims = Dims::new(dim[1] as usize, dim[2] as usize, dim[3] as usize)?;

    let datatype = le_i16(bytes, 70);
    let elem = ElemType::from_code(datatype).ok_or(Error::UnsupportedDatatype(datatype))?;
    let bitpix = le_i16(bytes, 72);
    if bitpix != elem.bitpix() {
        return Err(Error::BitpixMismatch { datatype, bitpix });
    }

    let pixdim: Vec<f32> = (0..8).map(|i| le_f32(bytes, 76 + 4 * i)).collect();
    for axis in 1..4 {
        let value = pixdim[axis];
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::NonPositivePixdim { axis, value });
        }
    }
    let spacing = Spacing::new(pixdim[1] as f64, pixdim[2] as f64, pixdim[3] as f64)?;

    let vox_offset = le_f32(bytes, 108);
    if vox_offset != VOX_OFFSET as f32 {
        return Err(Error::BadVoxOffset(vox_offset));
    }

    let slope = le_f32(bytes, 112);
    let intercept = le_f32(bytes, 116);
    let rescale = if slope != 0.0 && slope.is_finite() && intercept.is_finite() && (slope != 1.0 || intercept != 0.0) {
        Some(Rescale { slope, intercept })
    } else {
        None
    };

    let mut quatern = [0f32; 6];
    for (i, q) in quatern.iter_mut().enumerate() {
        *q = le_f32(bytes, 256 + 4 * i);
    }
    let mut srow = [[0f32; 4]; 3];
    for (r, row) in srow.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = le_f32(bytes, 280 + 16 * r + 4 * c);
        }
    }
    let orientation = Orientation {
        qform_code: le_i16(bytes, 252),
        sform_code: le_i16(bytes, 254),
        qfac: pixdim[0],
        quatern,
        srow,
    };

    Ok(NiftiHeader {
        dims,
        spacing,
        elem,
        rescale,
        orientation,
    })
}

fn decode_payload<T: Element>(header: &NiftiHeader, payload: &[u8]) -> Result<Volume<T>> {
    let size = T::ELEM.size();
    let data: Vec<T> = payload[..header.dims.len() * size]
        .chunks_exact(size)
        .map(T::read_le)
        .collect();
    let vol = Volume::from_vec(header.dims, header.spacing, data)?
        .with_orientation(header.orientation)
        .with_rescale(header.rescale);
    Ok(vol)
}

fn check_finite(vol: &Volume<f32>) -> Result<()> {
    match vol.data().iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(i)),
        None => Ok(()),
    }
}

/// Decodes an uncompressed NIfTI-1 byte stream.
///
/// Volumes with a non-identity `scl_slope`/`scl_inter` are returned as
/// float32 with the mapping applied; the mapping is kept in
/// [`Volume::intensity_rescale`] for reference.
pub fn decode_nifti(bytes: &[u8]) -> Result<AnyVolume> {
    let header = parse_header(bytes)?;
    let expected = header.dims.len() * header.elem.size();
    let actual = bytes.len().saturating_sub(VOX_OFFSET);
    if actual < expected {
        return Err(Error::Truncated { expected, actual });
    }
    let payload = &bytes[VOX_OFFSET..];
    let vol = match header.elem {
        ElemType::U8 => AnyVolume::U8(decode_payload(&header, payload)?),
        ElemType::I16 => AnyVolume::I16(decode_payload(&header, payload)?),
        ElemType::U16 => AnyVolume::U16(decode_payload(&header, payload)?),
        ElemType::F32 => AnyVolume::F32(decode_payload(&header, payload)?),
    };
    let vol = match (header.rescale, vol) {
        (None, v) => v,
        (Some(r), v) => {
            AnyVolume::F32(v.to_real::<f32>().with_rescale(Some(r)))
        }
    };
    if let AnyVolume::F32(v) = &vol {
        check_finite(v)?;
    }
    Ok(vol)
}

/// Encodes a volume as an uncompressed NIfTI-1 byte stream.
pub fn encode_nifti<T: Element>(vol: &Volume<T>) -> Vec<u8> {
    let elem = T::ELEM;
    let mut h = vec![0u8; VOX_OFFSET];
    let put_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());

    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    let d = vol.dims();
    let dim: [i16; 8] = [3, d.nx() as i16, d.ny() as i16, d.nz() as i16, 1, 1, 1, 1];
    for (i, v) in dim.iter().enumerate() {
        put_i16(&mut h, 40 + 2 * i, *v);
    }
    put_i16(&mut h, 70, elem.code());
    put_i16(&mut h, 72, elem.bitpix());

    let o = vol.orientation();
    let s = vol.spacing();
    let pixdim: [f32; 8] = [o.qfac, s.dx() as f32, s.dy() as f32, s.dz() as f32, 1.0, 1.0, 1.0, 1.0];
    for (i, v) in pixdim.iter().enumerate() {
        put_f32(&mut h, 76 + 4 * i, *v);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    put_f32(&mut h, 116, 0.0);
    h[123] = XYZT_UNITS;
    put_i16(&mut h, 252, o.qform_code);
    put_i16(&mut h, 254, o.sform_code);
    for (i, v) in o.quatern.iter().enumerate() {
        put_f32(&mut h, 256 + 4 * i, *v);
    }
    for (r, row) in o.srow.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            put_f32(&mut h, 280 + 16 * r + 4 * c, *v);
        }
    }
    h[344..348].copy_from_slice(MAGIC);
    // bytes 348..352: empty extension flag

    h.reserve(vol.len() * elem.size());
    for &v in vol.data() {
        v.write_le(&mut h);
    }
    h
}

pub fn encode_any(vol: &AnyVolume) -> Vec<u8> {
    match vol {
        AnyVolume::U8(v) => encode_nifti(v),
        AnyVolume::I16(v) => encode_nifti(v),
        AnyVolume::U16(v) => encode_nifti(v),
        AnyVolume::F32(v) => encode_nifti(v),
    }
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

pub fn gzip(bytes: &[u8]) -> Vec<u8> {
    let mut enc = GzEncoder::new(Vec::with_capacity(bytes.len() / 2), Compression::default());
    enc.write_all(bytes).expect("writing to a Vec cannot fail");
    enc.finish().expect("writing to a Vec cannot fail")
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if !is_gzip(&raw) {
        return Ok(raw);
    }
    let mut out = Vec::with_capacity(raw.len() * 4);
    GzDecoder::new(raw.as_slice())
        .read_to_end(&mut out)
        .map_err(|e| Error::io(path, e))?;
    Ok(out)
}

/// Loads a `.nii` or `.nii.gz` file; gzip is detected from the content.
pub fn load_nifti(path: impl AsRef<Path>) -> Result<AnyVolume> {
    let path = path.as_ref();
    let bytes = read_maybe_gz(path)?;
    decode_nifti(&bytes)
}

/// Reads only the header.
pub fn read_header(path: impl AsRef<Path>) -> Result<NiftiHeader> {
    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 2];
    let n = file.read(&mut magic).map_err(|e| Error::io(path, e))?;
    drop(file);
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader: Box<dyn Read> = if n == 2 && is_gzip(&magic) {
        Box::new(GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    let mut buf = Vec::with_capacity(HEADER_SIZE);
    reader
        .by_ref()
        .take(HEADER_SIZE as u64)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    parse_header(&buf)
}

/// Writes `bytes` through a temporary sibling and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Saves a volume, gzip-compressed when `compress` is set. The file appears
/// atomically.
pub fn save_nifti<T: Element>(vol: &Volume<T>, path: impl AsRef<Path>, compress: bool) -> Result<()> {
    let bytes = encode_nifti(vol);
    let bytes = if compress { gzip(&bytes) } else { bytes };
    write_atomic(path.as_ref(), &bytes)
}

pub fn save_any(vol: &AnyVolume, path: impl AsRef<Path>, compress: bool) -> Result<()> {
    let bytes = encode_any(vol);
    let bytes = if compress { gzip(&bytes) } else { bytes };
    write_atomic(path.as_ref(), &bytes)
}

/// Case name of a NIfTI path: the file name without `.nii` / `.nii.gz`.
pub fn stem(path: &Path) -> Option<&str> {
    let name = path.file_name()?.to_str()?;
    name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii"))
}

/// NIfTI files directly inside `dir`, sorted by name.
pub fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && stem(&path).is_some() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
