//! Single-file NIfTI-1 reader and writer.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{Affine, Geometry, Labelmap, Mask, Volume3D};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const NIFTI2_HEADER_SIZE: i32 = 540;
const VOX_OFFSET: usize = 352;

/// On-disk voxel datatypes understood by the reader.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    Uint8,
    Int16,
    Int32,
    Float32,
    Float64,
    Int8,
    Uint16,
    Uint32,
}

impl Datatype {
    fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => Datatype::Uint8,
            4 => Datatype::Int16,
            8 => Datatype::Int32,
            16 => Datatype::Float32,
            64 => Datatype::Float64,
            256 => Datatype::Int8,
            512 => Datatype::Uint16,
            768 => Datatype::Uint32,
            other => return Err(Error::UnsupportedDatatype(format!("NIfTI datatype code {other}"))),
        })
    }

    fn code(self) -> i16 {
        match self {
            Datatype::Uint8 => 2,
            Datatype::Int16 => 4,
            Datatype::Int32 => 8,
            Datatype::Float32 => 16,
            Datatype::Float64 => 64,
            Datatype::Int8 => 256,
            Datatype::Uint16 => 512,
            Datatype::Uint32 => 768,
        }
    }

    fn size(self) -> usize {
        match self {
            Datatype::Uint8 | Datatype::Int8 => 1,
            Datatype::Int16 | Datatype::Uint16 => 2,
            Datatype::Int32 | Datatype::Uint32 | Datatype::Float32 => 4,
            Datatype::Float64 => 8,
        }
    }
}

/// Decoded image before interpretation as a volume, mask or labelmap.
struct RawImage {
    geometry: Geometry,
    values: Vec<f64>,
}

/// Borrowed view over anything that can be written as NIfTI.
#[derive(Debug, Clone, Copy)]
pub enum VolumeRef<'a> {
    Scalar(&'a Volume3D),
    Mask(&'a Mask),
    Labels(&'a Labelmap),
}

impl<'a> From<&'a Volume3D> for VolumeRef<'a> {
    fn from(v: &'a Volume3D) -> Self {
        VolumeRef::Scalar(v)
    }
}

impl<'a> From<&'a Mask> for VolumeRef<'a> {
    fn from(v: &'a Mask) -> Self {
        VolumeRef::Mask(v)
    }
}

impl<'a> From<&'a Labelmap> for VolumeRef<'a> {
    fn from(v: &'a Labelmap) -> Self {
        VolumeRef::Labels(v)
    }
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let raw = read_raw(path.as_ref())?;
    let data = raw.values.iter().map(|&v| v as f32).collect();
    Volume3D::new(raw.geometry, data)
}

/// Loads an image whose values are all exactly 0 or 1.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let raw = read_raw(path)?;
    let mut data = Vec::with_capacity(raw.values.len());
    for v in raw.values {
        if v == 0.0 {
            data.push(0);
        } else if v == 1.0 {
            data.push(1);
        } else {
            return Err(Error::Format(format!(
                "{} is not a binary mask (found value {v})",
                path.display()
            )));
        }
    }
    Mask::new(raw.geometry, data)
}

/// Loads an image whose values are all non-negative integers.
pub fn load_labelmap(path: impl AsRef<Path>) -> Result<Labelmap> {
    let path = path.as_ref();
    let raw = read_raw(path)?;
    let mut data = Vec::with_capacity(raw.values.len());
    for v in raw.values {
        if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
            return Err(Error::Format(format!(
                "{} is not a labelmap (found value {v})",
                path.display()
            )));
        }
        data.push(v as u32);
    }
    Labelmap::new(raw.geometry, data)
}

/// Writes a little-endian single-file NIfTI-1 image, gzip-compressed when the
/// path ends in `.gz`.
///
/// Scalar volumes are stored as float32, masks as uint8 and labelmaps as the
/// narrowest signed/unsigned integer type that holds every label.
pub fn save_volume<'a>(volume: impl Into<VolumeRef<'a>>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let volume = volume.into();
    let (geometry, datatype, payload) = match volume {
        VolumeRef::Scalar(v) => {
            let mut buf = vec![0u8; v.data.len() * 4];
            LittleEndian::write_f32_into(&v.data, &mut buf);
            (&v.geometry, Datatype::Float32, buf)
        }
        VolumeRef::Mask(m) => (&m.geometry, Datatype::Uint8, m.data().to_vec()),
        VolumeRef::Labels(l) => {
            let max = l.max_label();
            if max <= u8::MAX as u32 {
                (&l.geometry, Datatype::Uint8, l.data.iter().map(|&v| v as u8).collect())
            } else if max <= i16::MAX as u32 {
                let mut buf = vec![0u8; l.data.len() * 2];
                let vals: Vec<i16> = l.data.iter().map(|&v| v as i16).collect();
                LittleEndian::write_i16_into(&vals, &mut buf);
                (&l.geometry, Datatype::Int16, buf)
            } else {
                let mut buf = vec![0u8; l.data.len() * 4];
                LittleEndian::write_u32_into(&l.data, &mut buf);
                (&l.geometry, Datatype::Uint32, buf)
            }
        }
    };

    let mut bytes = encode_header(geometry, datatype);
    bytes.extend_from_slice(&payload);

    let gz = path.extension().is_some_and(|e| e == "gz");
    let io_err = |e| Error::io(path, e);
    if gz {
        let file = fs::File::create(path).map_err(io_err)?;
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(&bytes).map_err(io_err)?;
        enc.finish().map_err(io_err)?;
    } else {
        fs::write(path, &bytes).map_err(io_err)?;
    }
    Ok(())
}

fn encode_header(geometry: &Geometry, datatype: Datatype) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    let le = LittleEndian::write_i32;
    le(&mut h[0..4], HEADER_SIZE as i32);
    h[38] = b'r';

    let dims = geometry.dims();
    let mut dim = [1i16; 8];
    dim[0] = 3;
    for a in 0..3 {
        dim[a + 1] = dims[a] as i16;
    }
    LittleEndian::write_i16_into(&dim, &mut h[40..56]);
    LittleEndian::write_i16(&mut h[70..72], datatype.code());
    LittleEndian::write_i16(&mut h[72..74], (datatype.size() * 8) as i16);

    let sp = geometry.spacing();
    let pixdim = [1.0f32, sp[0] as f32, sp[1] as f32, sp[2] as f32, 1.0, 1.0, 1.0, 1.0];
    LittleEndian::write_f32_into(&pixdim, &mut h[76..108]);
    LittleEndian::write_f32(&mut h[108..112], VOX_OFFSET as f32);
    // scl_slope = 0 means "no scaling"
    h[123] = 2; // xyzt_units: mm

    let descrip = b"nucparc";
    h[148..148 + descrip.len()].copy_from_slice(descrip);

    // sform only; qform_code stays 0
    LittleEndian::write_i16(&mut h[254..256], 2);
    let a = geometry.affine();
    for (row, off) in [(0usize, 280usize), (1, 296), (2, 312)] {
        let vals = [a[row][0] as f32, a[row][1] as f32, a[row][2] as f32, a[row][3] as f32];
        LittleEndian::write_f32_into(&vals, &mut h[off..off + 16]);
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn read_raw(path: &Path) -> Result<RawImage> {
    let bytes = read_bytes(path)?;
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Format(format!(
            "{}: file is shorter than a NIfTI-1 header",
            path.display()
        )));
    }
    let le = LittleEndian::read_i32(&bytes[0..4]);
    let be = BigEndian::read_i32(&bytes[0..4]);
    if le == HEADER_SIZE as i32 {
        decode::<LittleEndian>(&bytes, path)
    } else if be == HEADER_SIZE as i32 {
        decode::<BigEndian>(&bytes, path)
    } else if le == NIFTI2_HEADER_SIZE || be == NIFTI2_HEADER_SIZE {
        Err(Error::Format(format!("{}: NIfTI-2 images are not supported", path.display())))
    } else {
        Err(Error::Format(format!("{}: sizeof_hdr is not 348", path.display())))
    }
}

fn decode<B: ByteOrder>(bytes: &[u8], path: &Path) -> Result<RawImage> {
    match &bytes[344..348] {
        b"n+1\0" => {}
        b"ni1\0" => {
            return Err(Error::Format(format!(
                "{}: two-file (.hdr/.img) NIfTI is not supported",
                path.display()
            )))
        }
        _ => return Err(Error::Format(format!("{}: missing NIfTI-1 magic", path.display()))),
    }

    let mut dim = [0i16; 8];
    B::read_i16_into(&bytes[40..56], &mut dim);
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(Error::Format(format!("{}: invalid dim[0] = {ndim}", path.display())));
    }
    if ndim < 3 || (4..=ndim as usize).any(|d| dim[d] > 1) {
        return Err(Error::Dimensionality(format!("{}D image with dims {:?}", ndim, &dim[1..=ndim as usize])));
    }
    if dim[1..4].iter().any(|&d| d <= 0) {
        return Err(Error::Format(format!("{}: non-positive dims {:?}", path.display(), &dim[1..4])));
    }
    let dims = [dim[1] as usize, dim[2] as usize, dim[3] as usize];

    let datatype = Datatype::from_code(B::read_i16(&bytes[70..72]))?;
    let mut pixdim = [0f32; 8];
    B::read_f32_into(&bytes[76..108], &mut pixdim);
    let vox_offset = B::read_f32(&bytes[108..112]);
    let slope = B::read_f32(&bytes[112..116]);
    let inter = B::read_f32(&bytes[116..120]);
    let qform_code = B::read_i16(&bytes[252..254]);
    let sform_code = B::read_i16(&bytes[254..256]);

    let spacing = [pixdim[1].abs() as f64, pixdim[2].abs() as f64, pixdim[3].abs() as f64];

    let affine: Affine = if sform_code > 0 {
        let mut a = [[0.0; 4]; 4];
        for (row, off) in [(0usize, 280usize), (1, 296), (2, 312)] {
            let mut r = [0f32; 4];
            B::read_f32_into(&bytes[off..off + 16], &mut r);
            for c in 0..4 {
                a[row][c] = r[c] as f64;
            }
        }
        a[3][3] = 1.0;
        a
    } else if qform_code > 0 {
        let mut q = [0f32; 6];
        B::read_f32_into(&bytes[256..280], &mut q);
        qform_affine(q, pixdim)
    } else {
        let mut a = [[0.0; 4]; 4];
        for ax in 0..3 {
            a[ax][ax] = spacing[ax];
        }
        a[3][3] = 1.0;
        a
    };

    let geometry = Geometry::new(dims, spacing, affine)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;

    let offset = if vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32 {
        vox_offset as usize
    } else {
        VOX_OFFSET
    };
    let count = geometry.len();
    let need = offset + count * datatype.size();
    if bytes.len() < need {
        return Err(Error::Format(format!(
            "{}: truncated payload ({} of {} bytes)",
            path.display(),
            bytes.len().saturating_sub(offset),
            count * datatype.size()
        )));
    }
    let payload = &bytes[offset..need];
    let mut values = decode_payload::<B>(payload, datatype, count);

    let scaled = slope.is_finite() && slope != 0.0 && !(slope == 1.0 && inter == 0.0);
    if scaled {
        for v in &mut values {
            *v = *v * slope as f64 + inter as f64;
        }
    }
    Ok(RawImage { geometry, values })
}

fn decode_payload<B: ByteOrder>(p: &[u8], dt: Datatype, n: usize) -> Vec<f64> {
    match dt {
        Datatype::Uint8 => p.iter().map(|&v| v as f64).collect(),
        Datatype::Int8 => p.iter().map(|&v| v as i8 as f64).collect(),
        Datatype::Int16 => {
            let mut v = vec![0i16; n];
            B::read_i16_into(p, &mut v);
            v.into_iter().map(f64::from).collect()
        }
        Datatype::Uint16 => {
            let mut v = vec![0u16; n];
            B::read_u16_into(p, &mut v);
            v.into_iter().map(f64::from).collect()
        }
        Datatype::Int32 => {
            let mut v = vec![0i32; n];
            B::read_i32_into(p, &mut v);
            v.into_iter().map(f64::from).collect()
        }
        Datatype::Uint32 => {
            let mut v = vec![0u32; n];
            B::read_u32_into(p, &mut v);
            v.into_iter().map(f64::from).collect()
        }
        Datatype::Float32 => {
            let mut v = vec![0f32; n];
            B::read_f32_into(p, &mut v);
            v.into_iter().map(f64::from).collect()
        }
        Datatype::Float64 => {
            let mut v = vec![0f64; n];
            B::read_f64_into(p, &mut v);
            v
        }
    }
}

/// Quaternion-based voxel-to-world transform (NIfTI "method 2").
fn qform_affine(q: [f32; 6], pixdim: [f32; 8]) -> Affine {
    let (b, c, d) = (q[0] as f64, q[1] as f64, q[2] as f64);
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
    let (dx, dy, dz) = (pixdim[1] as f64, pixdim[2] as f64, pixdim[3] as f64 * qfac);
    [
        [
            (a * a + b * b - c * c - d * d) * dx,
            2.0 * (b * c - a * d) * dy,
            2.0 * (b * d + a * c) * dz,
            q[3] as f64,
        ],
        [
            2.0 * (b * c + a * d) * dx,
            (a * a + c * c - b * b - d * d) * dy,
            2.0 * (c * d - a * b) * dz,
            q[4] as f64,
        ],
        [
            2.0 * (b * d - a * c) * dx,
            2.0 * (c * d + a * b) * dy,
            (a * a + d * d - b * b - c * c) * dz,
            q[5] as f64,
        ],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn geom(dims: [usize; 3]) -> Geometry {
        Geometry::with_spacing(dims, [1.0; 3]).unwrap()
    }

    #[test]
    fn zeros_image_loads() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("z.nii");
        save_volume(&Volume3D::zeros(geom([4, 4, 4])), &p).unwrap();
        let v = load_volume(&p).unwrap();
        assert_eq!(v.geometry.dims(), [4, 4, 4]);
        assert!(v.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn spacing_is_bit_exact() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("s.nii.gz");
        let g = Geometry::with_spacing([3, 3, 3], [1.25, 1.25, 1.25]).unwrap();
        save_volume(&Volume3D::zeros(g), &p).unwrap();
        let v = load_volume(&p).unwrap();
        assert_eq!(v.geometry.spacing(), [1.25, 1.25, 1.25]);
    }

    #[test]
    fn labelmap_uses_integer_datatype() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("l.nii");
        let g = geom([10, 1, 1]);
        let lm = Labelmap::new(g, (0..10).collect()).unwrap();
        save_volume(&lm, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(LittleEndian::read_i16(&bytes[70..72]), 2);
        assert_eq!(load_labelmap(&p).unwrap().data, (0..10).collect::<Vec<u32>>());

        let big = Labelmap::new(geom([2, 1, 1]), vec![0, 70000]).unwrap();
        save_volume(&big, &p).unwrap();
        assert_eq!(load_labelmap(&p).unwrap().data, vec![0, 70000]);
    }

    #[test]
    fn rejects_non_3d() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("4d.nii");
        let mut bytes = encode_header(&geom([2, 2, 2]), Datatype::Uint8);
        LittleEndian::write_i16(&mut bytes[40..42], 4);
        LittleEndian::write_i16(&mut bytes[48..50], 3);
        bytes.extend(vec![0u8; 24]);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Dimensionality(_))));

        // a trailing singleton time axis is still a 3D image
        LittleEndian::write_i16(&mut bytes[48..50], 1);
        fs::write(&p, &bytes).unwrap();
        assert_eq!(load_volume(&p).unwrap().geometry.dims(), [2, 2, 2]);
    }

    #[test]
    fn rejects_bad_headers() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.nii");
        fs::write(&p, vec![0u8; 400]).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Format(_))));

        let mut bytes = encode_header(&geom([2, 2, 2]), Datatype::Uint8);
        bytes.extend(vec![0u8; 8]);
        bytes[344..348].copy_from_slice(b"ni1\0");
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Format(_))));

        let mut bytes = encode_header(&geom([2, 2, 2]), Datatype::Uint8);
        bytes.extend(vec![0u8; 7]);
        fs::write(&p, &bytes).unwrap();
        let err = load_volume(&p).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        let mut bytes = encode_header(&geom([2, 2, 2]), Datatype::Uint8);
        LittleEndian::write_i32(&mut bytes[0..4], 540);
        fs::write(&p, &bytes).unwrap();
        assert!(load_volume(&p).unwrap_err().to_string().contains("NIfTI-2"));
    }

    #[test]
    fn big_endian_and_scaling() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("be.nii");
        let g = geom([2, 1, 1]);
        let le = encode_header(&g, Datatype::Int16);
        // re-encode the fields the reader uses in big-endian order
        let mut h = vec![0u8; VOX_OFFSET];
        BigEndian::write_i32(&mut h[0..4], 348);
        let mut dim = [0i16; 8];
        LittleEndian::read_i16_into(&le[40..56], &mut dim);
        BigEndian::write_i16_into(&dim, &mut h[40..56]);
        BigEndian::write_i16(&mut h[70..72], 4);
        BigEndian::write_f32_into(&[1.0, 2.0, 2.0, 2.0, 1.0, 1.0, 1.0, 1.0], &mut h[76..108]);
        BigEndian::write_f32(&mut h[108..112], 352.0);
        BigEndian::write_f32(&mut h[112..116], 0.5);
        BigEndian::write_f32(&mut h[116..120], 1.0);
        h[344..348].copy_from_slice(b"n+1\0");
        let mut payload = [0u8; 4];
        BigEndian::write_i16_into(&[4, -2], &mut payload);
        h.extend_from_slice(&payload);
        fs::write(&p, &h).unwrap();
        let v = load_volume(&p).unwrap();
        assert_eq!(v.data, vec![3.0, 0.0]);
        assert_eq!(v.geometry.spacing(), [2.0, 2.0, 2.0]);
    }

    #[test]
    fn qform_identity_rotation() {
        let a = qform_affine([0.0, 0.0, 0.0, 10.0, 20.0, 30.0], [1.0, 2.0, 3.0, 4.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(a[0][0], 2.0);
        assert_eq!(a[1][1], 3.0);
        assert_eq!(a[2][2], 4.0);
        assert_eq!([a[0][3], a[1][3], a[2][3]], [10.0, 20.0, 30.0]);
    }

    #[test]
    fn mask_value_check() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.nii");
        let lm = Labelmap::new(geom([3, 1, 1]), vec![0, 1, 2]).unwrap();
        save_volume(&lm, &p).unwrap();
        assert!(load_mask(&p).is_err());
        let v = Volume3D::new(geom([2, 1, 1]), vec![0.5, -1.0]).unwrap();
        save_volume(&v, &p).unwrap();
        assert!(load_labelmap(&p).is_err());
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let err = save_volume(&Volume3D::zeros(geom([1, 1, 1])), "/nonexistent-dir/x.nii").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
