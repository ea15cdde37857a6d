//! Minimal NIfTI-1 single-file reader/writer.
//!
//! Supported subset: 348-byte header, magic "n+1\0", dim[0] in {3,4},
//! datatypes uint8 / int16 / int32 / float32 / float64, optional gzip.
//! Values are converted to 32-bit float on read with scl_slope/scl_inter
//! applied when scl_slope != 0. The affine is taken from the sform when
//! sform_code > 0, else the qform, else a spacing diagonal. Written files
//! are always little-endian float32 with the sform set from the affine, so
//! write-then-read round-trips bit-exactly.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use ndarray::Array3;

use crate::error::{FovxError, Result};
use crate::dwi::{Affine4, GradientTable, Volume3D, Volume4D};

/// Either a single 3D volume or a 4D stack (gradient table not attached).
#[derive(Debug, Clone)]
pub enum NiftiImage {
    Vol3(Volume3D),
    Vol4(Volume4D),
}

impl NiftiImage {
    pub fn into_3d(self) -> Result<Volume3D> {
        match self {
            NiftiImage::Vol3(v) => Ok(v),
            NiftiImage::Vol4(_) => Err(FovxError::Validation("expected a 3D image, got 4D".into())),
        }
    }

    pub fn into_4d(self) -> Result<Volume4D> {
        match self {
            NiftiImage::Vol4(v) => Ok(v),
            NiftiImage::Vol3(v) => {
                Volume4D::new(vec![v], GradientTable::empty())
            }
        }
    }
}

const HDR_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut f = File::open(path)?;
    let mut head = [0u8; 2];
    let n = f.read(&mut head)?;
    let mut rest = Vec::new();
    f.read_to_end(&mut rest)?;
    let mut raw = head[..n].to_vec();
    raw.extend_from_slice(&rest);
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Header {
    dim: [i16; 8],
    datatype: i16,
    pixdim: [f32; 8],
    vox_offset: f32,
    scl_slope: f32,
    scl_inter: f32,
    qform_code: i16,
    sform_code: i16,
    quatern: [f32; 3],
    qoffset: [f32; 3],
    srow: [[f32; 4]; 3],
}

fn parse_header(buf: &[u8]) -> Result<(Header, bool)> {
    if buf.len() < HDR_SIZE {
        return Err(FovxError::Format(format!(
            "file too short for a NIfTI-1 header ({} bytes)",
            buf.len()
        )));
    }
    let magic = &buf[344..348];
    if magic == b"ni1\0" {
        return Err(FovxError::Format(
            "detached header/image NIfTI (magic \"ni1\") is not supported".into(),
        ));
    }
    if magic != b"n+1\0" {
        return Err(FovxError::Format("bad NIfTI magic, expected \"n+1\"".into()));
    }
    let sz_le = LittleEndian::read_i32(&buf[0..4]);
    let swapped = match sz_le {
        348 => false,
        _ if BigEndian::read_i32(&buf[0..4]) == 348 => true,
        _ => return Err(FovxError::Format("sizeof_hdr != 348".into())),
    };
    macro_rules! rd {
        (i16, $off:expr) => {
            if swapped { BigEndian::read_i16(&buf[$off..$off + 2]) } else { LittleEndian::read_i16(&buf[$off..$off + 2]) }
        };
        (f32, $off:expr) => {
            if swapped { BigEndian::read_f32(&buf[$off..$off + 4]) } else { LittleEndian::read_f32(&buf[$off..$off + 4]) }
        };
    }
    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = rd!(i16, 40 + 2 * i);
    }
    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = rd!(f32, 76 + 4 * i);
    }
    let mut srow = [[0f32; 4]; 3];
    for r in 0..3 {
        for c in 0..4 {
            srow[r][c] = rd!(f32, 280 + 16 * r + 4 * c);
        }
    }
    let hdr = Header {
        dim,
        datatype: rd!(i16, 70),
        pixdim,
        vox_offset: rd!(f32, 108),
        scl_slope: rd!(f32, 112),
        scl_inter: rd!(f32, 116),
        qform_code: rd!(i16, 252),
        sform_code: rd!(i16, 254),
        quatern: [rd!(f32, 256), rd!(f32, 260), rd!(f32, 264)],
        qoffset: [rd!(f32, 268), rd!(f32, 272), rd!(f32, 276)],
        srow,
    };
    Ok((hdr, swapped))
}

fn affine_from_header(h: &Header) -> Affine4 {
    if h.sform_code > 0 {
        let mut a = [[0.0f64; 4]; 4];
        for r in 0..3 {
            for c in 0..4 {
                a[r][c] = h.srow[r][c] as f64;
            }
        }
        a[3] = [0.0, 0.0, 0.0, 1.0];
        a
    } else if h.qform_code > 0 {
        let (b, c, d) = (h.quatern[0] as f64, h.quatern[1] as f64, h.quatern[2] as f64);
        let a = (1.0 - b * b - c * c - d * d).max(0.0).sqrt();
        let qfac = if h.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let (sx, sy, sz) = (
            h.pixdim[1].abs() as f64,
            h.pixdim[2].abs() as f64,
            h.pixdim[3].abs() as f64 * qfac,
        );
        [
            [
                (a * a + b * b - c * c - d * d) * sx,
                (2.0 * b * c - 2.0 * a * d) * sy,
                (2.0 * b * d + 2.0 * a * c) * sz,
                h.qoffset[0] as f64,
            ],
            [
                (2.0 * b * c + 2.0 * a * d) * sx,
                (a * a + c * c - b * b - d * d) * sy,
                (2.0 * c * d - 2.0 * a * b) * sz,
                h.qoffset[1] as f64,
            ],
            [
                (2.0 * b * d - 2.0 * a * c) * sx,
                (2.0 * c * d + 2.0 * a * b) * sy,
                (a * a + d * d - c * c - b * b) * sz,
                h.qoffset[2] as f64,
            ],
            [0.0, 0.0, 0.0, 1.0],
        ]
    } else {
        let mut a = [[0.0f64; 4]; 4];
        a[0][0] = h.pixdim[1].abs().max(f32::MIN_POSITIVE) as f64;
        a[1][1] = h.pixdim[2].abs().max(f32::MIN_POSITIVE) as f64;
        a[2][2] = h.pixdim[3].abs().max(f32::MIN_POSITIVE) as f64;
        a[3][3] = 1.0;
        a
    }
}

fn decode_voxels(raw: &[u8], datatype: i16, count: usize, swapped: bool) -> Result<Vec<f32>> {
    let elem = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => {
            return Err(FovxError::Unsupported(format!(
                "NIfTI datatype code {other} is not supported"
            )))
        }
    };
    if raw.len() < count * elem {
        return Err(FovxError::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!("truncated payload: need {} bytes, have {}", count * elem, raw.len()),
        )));
    }
    let mut out = Vec::with_capacity(count);
    match datatype {
        DT_UINT8 => out.extend(raw[..count].iter().map(|&b| b as f32)),
        DT_INT16 => {
            for i in 0..count {
                let v = if swapped {
                    BigEndian::read_i16(&raw[2 * i..])
                } else {
                    LittleEndian::read_i16(&raw[2 * i..])
                };
                out.push(v as f32);
            }
        }
        DT_INT32 => {
            for i in 0..count {
                let v = if swapped {
                    BigEndian::read_i32(&raw[4 * i..])
                } else {
                    LittleEndian::read_i32(&raw[4 * i..])
                };
                out.push(v as f32);
            }
        }
        DT_FLOAT32 => {
            for i in 0..count {
                let v = if swapped {
                    BigEndian::read_f32(&raw[4 * i..])
                } else {
                    LittleEndian::read_f32(&raw[4 * i..])
                };
                out.push(v);
            }
        }
        DT_FLOAT64 => {
            for i in 0..count {
                let v = if swapped {
                    BigEndian::read_f64(&raw[8 * i..])
                } else {
                    LittleEndian::read_f64(&raw[8 * i..])
                };
                out.push(v as f32);
            }
        }
        _ => unreachable!(),
    }
    Ok(out)
}

/// Read a .nii / .nii.gz file as a 3D or 4D float32 image.
pub fn read_nifti<P: AsRef<Path>>(path: P) -> Result<NiftiImage> {
    let buf = read_all(path.as_ref())?;
    let (hdr, swapped) = parse_header(&buf)?;
    let ndim = hdr.dim[0];
    if ndim != 3 && ndim != 4 {
        return Err(FovxError::Unsupported(format!("dim[0] = {ndim}, expected 3 or 4")));
    }
    let (nx, ny, nz) = (hdr.dim[1] as usize, hdr.dim[2] as usize, hdr.dim[3] as usize);
    let nv = if ndim == 4 { hdr.dim[4].max(1) as usize } else { 1 };
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(FovxError::Format("zero spatial dimension".into()));
    }
    let offset = hdr.vox_offset.max(HDR_SIZE as f32) as usize;
    if buf.len() < offset {
        return Err(FovxError::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            "payload offset beyond end of file",
        )));
    }
    let count = nx * ny * nz * nv;
    let mut vals = decode_voxels(&buf[offset..], hdr.datatype, count, swapped)?;
    if hdr.scl_slope != 0.0 && (hdr.scl_slope != 1.0 || hdr.scl_inter != 0.0) {
        for v in &mut vals {
            *v = *v * hdr.scl_slope + hdr.scl_inter;
        }
    }
    let spacing = (
        hdr.pixdim[1].abs().max(f32::MIN_POSITIVE),
        hdr.pixdim[2].abs().max(f32::MIN_POSITIVE),
        hdr.pixdim[3].abs().max(f32::MIN_POSITIVE),
    );
    let affine = affine_from_header(&hdr);

    // NIfTI stores x fastest; unpack volume by volume.
    let vol_len = nx * ny * nz;
    let mut volumes = Vec::with_capacity(nv);
    for v in 0..nv {
        let base = v * vol_len;
        let mut data = Array3::zeros((nx, ny, nz));
        for k in 0..nz {
            for j in 0..ny {
                let row = base + nx * (j + ny * k);
                for i in 0..nx {
                    data[[i, j, k]] = vals[row + i];
                }
            }
        }
        volumes.push(Volume3D::new((nx, ny, nz), spacing, affine, data)?);
    }
    if ndim == 3 {
        Ok(NiftiImage::Vol3(volumes.pop().unwrap()))
    } else {
        Ok(NiftiImage::Vol4(Volume4D::new(volumes, GradientTable::empty())?))
    }
}

fn build_header(v: &Volume3D, nv: Option<usize>) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    LittleEndian::write_i32(&mut h[0..4], 348);
    let (nx, ny, nz) = v.dims;
    let dim: [i16; 8] = match nv {
        Some(n) => [4, nx as i16, ny as i16, nz as i16, n as i16, 1, 1, 1],
        None => [3, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1],
    };
    for (i, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut h[40 + 2 * i..], *d);
    }
    LittleEndian::write_i16(&mut h[70..], DT_FLOAT32);
    LittleEndian::write_i16(&mut h[72..], 32); // bitpix
    let pixdim = [1.0f32, v.spacing.0, v.spacing.1, v.spacing.2, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * i..], *p);
    }
    LittleEndian::write_f32(&mut h[108..], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..], 1.0); // scl_slope
    LittleEndian::write_f32(&mut h[116..], 0.0); // scl_inter
    h[123] = 2 | 8; // xyzt_units: mm + sec
    LittleEndian::write_i16(&mut h[252..], 0); // qform_code
    LittleEndian::write_i16(&mut h[254..], 1); // sform_code: scanner anat
    for r in 0..3 {
        for c in 0..4 {
            LittleEndian::write_f32(&mut h[280 + 16 * r + 4 * c..], v.affine[r][c] as f32);
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");
    // bytes 348..352 stay zero: no extensions
    h
}

fn pack_volume(data: &Array3<f32>, out: &mut Vec<u8>) {
    let (nx, ny, nz) = data.dim();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                out.write_f32::<LittleEndian>(data[[i, j, k]]).unwrap();
            }
        }
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let gz = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("gz"))
        .unwrap_or(false);
    let f = File::create(path)?;
    if gz {
        let mut enc = GzEncoder::new(f, flate2::Compression::fast());
        enc.write_all(bytes)?;
        enc.finish()?;
    } else {
        let mut f = f;
        f.write_all(bytes)?;
    }
    Ok(())
}

/// Write a 3D volume as little-endian float32 NIfTI-1.
pub fn write_nifti_3d<P: AsRef<Path>>(vol: &Volume3D, path: P) -> Result<()> {
    let mut bytes = build_header(vol, None);
    pack_volume(&vol.data, &mut bytes);
    write_bytes(path.as_ref(), &bytes)
}

/// Write a 4D stack as little-endian float32 NIfTI-1.
pub fn write_nifti_4d<P: AsRef<Path>>(vol: &Volume4D, path: P) -> Result<()> {
    let mut bytes = build_header(vol.grid(), Some(vol.len()));
    for v in &vol.volumes {
        pack_volume(&v.data, &mut bytes);
    }
    write_bytes(path.as_ref(), &bytes)
}

/// Write either image kind.
pub fn write_nifti<P: AsRef<Path>>(img: &NiftiImage, path: P) -> Result<()> {
    match img {
        NiftiImage::Vol3(v) => write_nifti_3d(v, path),
        NiftiImage::Vol4(v) => write_nifti_4d(v, path),
    }
}
