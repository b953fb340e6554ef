//! Minimal NIfTI-1 volume I/O: single-file `.nii`, little-endian, float32.
//!
//! Only the fields this pipeline relies on are honored. The voxel array is
//! stored `(D, H, W)` with W fastest, which matches NIfTI's x-fastest layout
//! with `nx = W`, `ny = H`, `nz = D`.

use crate::volume::{Volume, VolumeSource};
use crate::{Error, Result};
use ndarray::Array3;
use std::io::{Read, Write};
use std::path::Path;

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const DT_FLOAT32: i16 = 16;
const MAGIC: &[u8; 4] = b"n+1\0";

fn put_i16(buf: &mut [u8], off: usize, v: i16) {
    buf[off..off + 2].copy_from_slice(&v.to_le_bytes());
}
fn put_i32(buf: &mut [u8], off: usize, v: i32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}
fn put_f32(buf: &mut [u8], off: usize, v: f32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}
fn get_i16(buf: &[u8], off: usize) -> i16 {
    i16::from_le_bytes(buf[off..off + 2].try_into().unwrap())
}
fn get_i32(buf: &[u8], off: usize) -> i32 {
    i32::from_le_bytes(buf[off..off + 4].try_into().unwrap())
}
fn get_f32(buf: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(buf[off..off + 4].try_into().unwrap())
}

/// Writes a volume as a deterministic single-file NIfTI-1 image.
pub fn write_nifti(path: &Path, volume: &Volume) -> Result<()> {
    let [d, h, w] = volume.shape();
    let mut hdr = vec![0u8; VOX_OFFSET];
    put_i32(&mut hdr, 0, HEADER_SIZE as i32);
    hdr[38] = b'r';
    put_i16(&mut hdr, 40, 3); // dim[0]
    put_i16(&mut hdr, 42, w as i16);
    put_i16(&mut hdr, 44, h as i16);
    put_i16(&mut hdr, 46, d as i16);
    for k in 4..8 {
        put_i16(&mut hdr, 40 + 2 * k, 1);
    }
    put_i16(&mut hdr, 70, DT_FLOAT32);
    put_i16(&mut hdr, 72, 32); // bitpix
    put_f32(&mut hdr, 76, 1.0); // pixdim[0] = qfac
    put_f32(&mut hdr, 80, volume.spacing[2] as f32);
    put_f32(&mut hdr, 84, volume.spacing[1] as f32);
    put_f32(&mut hdr, 88, volume.spacing[0] as f32);
    put_f32(&mut hdr, 108, VOX_OFFSET as f32);
    put_f32(&mut hdr, 112, 1.0); // scl_slope
    put_f32(&mut hdr, 116, 0.0); // scl_inter
    hdr[123] = 2; // xyzt_units: mm
    put_i16(&mut hdr, 254, 1); // sform_code: scanner
    put_f32(&mut hdr, 280, volume.spacing[2] as f32); // srow_x
    put_f32(&mut hdr, 300, volume.spacing[1] as f32); // srow_y
    put_f32(&mut hdr, 320, volume.spacing[0] as f32); // srow_z
    hdr[344..348].copy_from_slice(MAGIC);
    // 348..352 stays zero: no header extensions.

    let mut bytes = Vec::with_capacity(VOX_OFFSET + volume.data.len() * 4);
    bytes.extend_from_slice(&hdr);
    for v in volume.data.as_slice().expect("standard layout") {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let tmp = path.with_extension("nii.tmp");
    std::fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a single-file little-endian float32 NIfTI-1 image.
pub fn read_nifti(path: &Path) -> Result<Volume> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < VOX_OFFSET {
        return Err(Error::Format(format!(
            "{}: file too small for a NIfTI-1 header ({} bytes)",
            path.display(),
            bytes.len()
        )));
    }
    let sizeof_hdr = get_i32(&bytes, 0);
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(Error::Format(format!(
            "{}: sizeof_hdr = {sizeof_hdr}; expected 348 (big-endian files are unsupported)",
            path.display()
        )));
    }
    if &bytes[344..348] != MAGIC {
        return Err(Error::Format(format!(
            "{}: magic {:?} is not a single-file NIfTI-1 image",
            path.display(),
            &bytes[344..348]
        )));
    }
    let ndim = get_i16(&bytes, 40);
    if ndim != 3 {
        return Err(Error::Format(format!(
            "{}: {ndim}-dimensional image; expected 3",
            path.display()
        )));
    }
    let datatype = get_i16(&bytes, 70);
    if datatype != DT_FLOAT32 {
        return Err(Error::Format(format!(
            "{}: datatype {datatype}; only float32 (16) is supported",
            path.display()
        )));
    }
    let (w, h, d) = (
        get_i16(&bytes, 42) as usize,
        get_i16(&bytes, 44) as usize,
        get_i16(&bytes, 46) as usize,
    );
    let spacing = [
        get_f32(&bytes, 88) as f64,
        get_f32(&bytes, 84) as f64,
        get_f32(&bytes, 80) as f64,
    ];
    let vox_offset = get_f32(&bytes, 108) as usize;
    let n = d * h * w;
    if bytes.len() < vox_offset + n * 4 {
        return Err(Error::Format(format!(
            "{}: truncated voxel data ({} bytes for {} voxels)",
            path.display(),
            bytes.len() - vox_offset.min(bytes.len()),
            n
        )));
    }
    let mut slope = get_f32(&bytes, 112);
    let inter = get_f32(&bytes, 116);
    if slope == 0.0 {
        slope = 1.0;
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let off = vox_offset + i * 4;
        data.push(get_f32(&bytes, off) * slope + inter);
    }
    let arr = Array3::from_shape_vec((d, h, w), data).expect("shape checked");
    Volume::new(arr, spacing, VolumeSource::Ingested)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn roundtrip_preserves_voxels_and_spacing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.nii");
        let data = Array3::from_shape_fn((5, 6, 7), |(i, j, k)| {
            (i as f32 * 0.11 + j as f32 * 0.07 + k as f32 * 0.03).sin()
        });
        let v = Volume::new(data, [4.0, 2.0, 1.0], VolumeSource::Phantom).unwrap();
        write_nifti(&path, &v).unwrap();
        let r = read_nifti(&path).unwrap();
        assert_eq!(r.shape(), [5, 6, 7]);
        assert_eq!(r.spacing, [4.0, 2.0, 1.0]);
        assert_eq!(r.data, v.data);
    }

    #[test]
    fn header_fields_are_pinned() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.nii");
        let v = Volume::new(
            Array3::from_elem((2, 3, 4), 0.25),
            [1.0; 3],
            VolumeSource::Phantom,
        )
        .unwrap();
        write_nifti(&path, &v).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(get_i32(&bytes, 0), 348);
        assert_eq!(get_i16(&bytes, 70), 16); // float32
        assert_eq!(get_i16(&bytes, 72), 32); // bitpix
        assert_eq!(&bytes[344..348], b"n+1\0");
        assert_eq!(bytes.len(), 352 + 2 * 3 * 4 * 4);
        // nx is the fastest axis (W)
        assert_eq!(get_i16(&bytes, 42), 4);
        assert_eq!(get_i16(&bytes, 46), 2);
    }

    #[test]
    fn rejects_wrong_datatype() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.nii");
        let v = Volume::new(
            Array3::from_elem((2, 2, 2), 0.5),
            [1.0; 3],
            VolumeSource::Phantom,
        )
        .unwrap();
        write_nifti(&path, &v).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        put_i16(&mut bytes, 70, 4); // int16
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_nifti(&path), Err(Error::Format(_))));
    }
}
