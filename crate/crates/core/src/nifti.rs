//! Strict NIfTI-1 single-file (`.nii` / `.nii.gz`) reader and writer.
//!
//! Supports `uint8`, `int16` and `float32` voxels in 2 to 4 dimensions. The
//! byte order is detected from `sizeof_hdr`. Orientation fields are carried
//! through untouched but never interpreted.

use crate::grid::Volume3D;
use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use std::io::{Read, Write};
use std::path::Path;

pub const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag.
pub const DATA_OFFSET: usize = 352;
pub const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
pub const MAGIC_PAIR: &[u8; 4] = b"ni1\0";

#[derive(Debug, thiserror::Error)]
pub enum NiftiError {
    #[error("stream too short for a NIfTI-1 header: {0} bytes, need {DATA_OFFSET}")]
    TooShort(usize),
    #[error("sizeof_hdr is {0} in both byte orders, expected 348")]
    BadSizeofHdr(i32),
    #[error("NIfTI-2 headers (sizeof_hdr = 540) are not supported")]
    Nifti2Unsupported,
    #[error("bad magic {0:?}, expected \"n+1\\0\"")]
    BadMagic([u8; 4]),
    #[error("magic \"ni1\" marks a detached .hdr/.img pair, which is not supported")]
    DetachedHeader,
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("bitpix {bitpix} does not match datatype code {datatype} ({expected} bits)")]
    BitpixMismatch {
        datatype: i16,
        bitpix: i16,
        expected: i16,
    },
    #[error("dim[0] = {0}, expected a rank between 2 and 4")]
    BadRank(i16),
    #[error("dim[{index}] = {value}, expected >= 1")]
    BadDim { index: usize, value: i16 },
    #[error("vox_offset {0} is not a valid data offset")]
    BadVoxOffset(f32),
    #[error("data section truncated: need {expected} bytes at offset {offset}, stream has {actual}")]
    Truncated {
        offset: usize,
        expected: usize,
        actual: usize,
    },
    #[error("volume has {actual} voxels but the header declares {expected}")]
    VoxelCountMismatch { expected: usize, actual: usize },
    #[error("gzip: {0}")]
    Gzip(std::io::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NiftiError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endianness {
    Little,
    Big,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    Uint8,
    Int16,
    Float32,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::Uint8 => 2,
            Datatype::Int16 => 4,
            Datatype::Float32 => 16,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(Datatype::Uint8),
            4 => Ok(Datatype::Int16),
            16 => Ok(Datatype::Float32),
            other => Err(NiftiError::UnsupportedDatatype(other)),
        }
    }

    pub fn bitpix(self) -> i16 {
        match self {
            Datatype::Uint8 => 8,
            Datatype::Int16 => 16,
            Datatype::Float32 => 32,
        }
    }

    pub fn bytes(self) -> usize {
        self.bitpix() as usize / 8
    }
}

/// Every field of the 348-byte NIfTI-1 header, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub sizeof_hdr: i32,
    pub data_type: [u8; 10],
    pub db_name: [u8; 18],
    pub extents: i32,
    pub session_error: i16,
    pub regular: u8,
    pub dim_info: u8,
    pub dim: [i16; 8],
    pub intent_p1: f32,
    pub intent_p2: f32,
    pub intent_p3: f32,
    pub intent_code: i16,
    pub datatype: i16,
    pub bitpix: i16,
    pub slice_start: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub slice_end: i16,
    pub slice_code: u8,
    pub xyzt_units: u8,
    pub cal_max: f32,
    pub cal_min: f32,
    pub slice_duration: f32,
    pub toffset: f32,
    pub glmax: i32,
    pub glmin: i32,
    pub descrip: [u8; 80],
    pub aux_file: [u8; 24],
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern_b: f32,
    pub quatern_c: f32,
    pub quatern_d: f32,
    pub qoffset_x: f32,
    pub qoffset_y: f32,
    pub qoffset_z: f32,
    pub srow_x: [f32; 4],
    pub srow_y: [f32; 4],
    pub srow_z: [f32; 4],
    pub intent_name: [u8; 16],
    pub magic: [u8; 4],
}

impl Default for NiftiHeader {
    fn default() -> Self {
        Self {
            sizeof_hdr: HEADER_SIZE as i32,
            data_type: [0; 10],
            db_name: [0; 18],
            extents: 0,
            session_error: 0,
            regular: b'r',
            dim_info: 0,
            dim: [3, 1, 1, 1, 1, 1, 1, 1],
            intent_p1: 0.0,
            intent_p2: 0.0,
            intent_p3: 0.0,
            intent_code: 0,
            datatype: Datatype::Float32.code(),
            bitpix: Datatype::Float32.bitpix(),
            slice_start: 0,
            pixdim: [1.0; 8],
            vox_offset: DATA_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            slice_end: 0,
            slice_code: 0,
            // mm + s
            xyzt_units: 2 | 8,
            cal_max: 0.0,
            cal_min: 0.0,
            slice_duration: 0.0,
            toffset: 0.0,
            glmax: 0,
            glmin: 0,
            descrip: [0; 80],
            aux_file: [0; 24],
            qform_code: 0,
            sform_code: 0,
            quatern_b: 0.0,
            quatern_c: 0.0,
            quatern_d: 0.0,
            qoffset_x: 0.0,
            qoffset_y: 0.0,
            qoffset_z: 0.0,
            srow_x: [0.0; 4],
            srow_y: [0.0; 4],
            srow_z: [0.0; 4],
            intent_name: [0; 16],
            magic: *MAGIC_SINGLE,
        }
    }
}

impl NiftiHeader {
    /// Header for a volume of `dims` (2 to 4 entries) with the given spacing.
    pub fn for_dims(dims: &[usize], pixdim: &[f32], datatype: Datatype) -> Self {
        assert!((2..=4).contains(&dims.len()), "rank must be 2..=4");
        let mut h = Self {
            datatype: datatype.code(),
            bitpix: datatype.bitpix(),
            ..Self::default()
        };
        h.dim[0] = dims.len() as i16;
        for (i, &d) in dims.iter().enumerate() {
            h.dim[i + 1] = i16::try_from(d).expect("dimension exceeds i16 range");
        }
        for (i, &p) in pixdim.iter().take(7).enumerate() {
            h.pixdim[i + 1] = p;
        }
        h
    }

    pub fn rank(&self) -> usize {
        self.dim[0] as usize
    }

    /// Used dimensions `dim[1..=rank]`.
    pub fn shape(&self) -> Vec<usize> {
        self.dim[1..=self.rank()].iter().map(|&d| d as usize).collect()
    }

    pub fn datatype(&self) -> Result<Datatype> {
        Datatype::from_code(self.datatype)
    }

    pub fn voxel_count(&self) -> Option<usize> {
        self.shape()
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
    }

    /// Effective `(slope, intercept)`; a zero slope means identity scaling.
    pub fn scaling(&self) -> (f64, f64) {
        if self.scl_slope == 0.0 || !self.scl_slope.is_finite() {
            (1.0, 0.0)
        } else {
            let inter = if self.scl_inter.is_finite() {
                self.scl_inter as f64
            } else {
                0.0
            };
            (self.scl_slope as f64, inter)
        }
    }

    fn validate(&self) -> Result<Datatype> {
        if &self.magic == MAGIC_PAIR {
            return Err(NiftiError::DetachedHeader);
        }
        if &self.magic != MAGIC_SINGLE {
            return Err(NiftiError::BadMagic(self.magic));
        }
        let rank = self.dim[0];
        if !(2..=4).contains(&rank) {
            return Err(NiftiError::BadRank(rank));
        }
        for index in 1..=rank as usize {
            if self.dim[index] < 1 {
                return Err(NiftiError::BadDim {
                    index,
                    value: self.dim[index],
                });
            }
        }
        let dt = self.datatype()?;
        if self.bitpix != dt.bitpix() {
            return Err(NiftiError::BitpixMismatch {
                datatype: self.datatype,
                bitpix: self.bitpix,
                expected: dt.bitpix(),
            });
        }
        if !self.vox_offset.is_finite() || self.vox_offset < DATA_OFFSET as f32 {
            return Err(NiftiError::BadVoxOffset(self.vox_offset));
        }
        Ok(dt)
    }

    fn decode<B: ByteOrder>(b: &[u8]) -> Self {
        fn arr<const N: usize>(b: &[u8], at: usize) -> [u8; N] {
            b[at..at + N].try_into().unwrap()
        }
        let f = |at: usize| B::read_f32(&b[at..]);
        let i16_at = |at: usize| B::read_i16(&b[at..]);
        let f4 = |at: usize| [f(at), f(at + 4), f(at + 8), f(at + 12)];
        let mut dim = [0i16; 8];
        let mut pixdim = [0f32; 8];
        for i in 0..8 {
            dim[i] = i16_at(40 + 2 * i);
            pixdim[i] = f(76 + 4 * i);
        }
        Self {
            sizeof_hdr: B::read_i32(&b[0..]),
            data_type: arr(b, 4),
            db_name: arr(b, 14),
            extents: B::read_i32(&b[32..]),
            session_error: i16_at(36),
            regular: b[38],
            dim_info: b[39],
            dim,
            intent_p1: f(56),
            intent_p2: f(60),
            intent_p3: f(64),
            intent_code: i16_at(68),
            datatype: i16_at(70),
            bitpix: i16_at(72),
            slice_start: i16_at(74),
            pixdim,
            vox_offset: f(108),
            scl_slope: f(112),
            scl_inter: f(116),
            slice_end: i16_at(120),
            slice_code: b[122],
            xyzt_units: b[123],
            cal_max: f(124),
            cal_min: f(128),
            slice_duration: f(132),
            toffset: f(136),
            glmax: B::read_i32(&b[140..]),
            glmin: B::read_i32(&b[144..]),
            descrip: arr(b, 148),
            aux_file: arr(b, 228),
            qform_code: i16_at(252),
            sform_code: i16_at(254),
            quatern_b: f(256),
            quatern_c: f(260),
            quatern_d: f(264),
            qoffset_x: f(268),
            qoffset_y: f(272),
            qoffset_z: f(276),
            srow_x: f4(280),
            srow_y: f4(296),
            srow_z: f4(312),
            intent_name: arr(b, 328),
            magic: arr(b, 344),
        }
    }

    fn encode<B: ByteOrder>(&self) -> [u8; HEADER_SIZE] {
        let mut b = [0u8; HEADER_SIZE];
        B::write_i32(&mut b[0..], self.sizeof_hdr);
        b[4..14].copy_from_slice(&self.data_type);
        b[14..32].copy_from_slice(&self.db_name);
        B::write_i32(&mut b[32..], self.extents);
        B::write_i16(&mut b[36..], self.session_error);
        b[38] = self.regular;
        b[39] = self.dim_info;
        for i in 0..8 {
            B::write_i16(&mut b[40 + 2 * i..], self.dim[i]);
            B::write_f32(&mut b[76 + 4 * i..], self.pixdim[i]);
        }
        B::write_f32(&mut b[56..], self.intent_p1);
        B::write_f32(&mut b[60..], self.intent_p2);
        B::write_f32(&mut b[64..], self.intent_p3);
        B::write_i16(&mut b[68..], self.intent_code);
        B::write_i16(&mut b[70..], self.datatype);
        B::write_i16(&mut b[72..], self.bitpix);
        B::write_i16(&mut b[74..], self.slice_start);
        B::write_f32(&mut b[108..], self.vox_offset);
        B::write_f32(&mut b[112..], self.scl_slope);
        B::write_f32(&mut b[116..], self.scl_inter);
        B::write_i16(&mut b[120..], self.slice_end);
        b[122] = self.slice_code;
        b[123] = self.xyzt_units;
        B::write_f32(&mut b[124..], self.cal_max);
        B::write_f32(&mut b[128..], self.cal_min);
        B::write_f32(&mut b[132..], self.slice_duration);
        B::write_f32(&mut b[136..], self.toffset);
        B::write_i32(&mut b[140..], self.glmax);
        B::write_i32(&mut b[144..], self.glmin);
        b[148..228].copy_from_slice(&self.descrip);
        b[228..252].copy_from_slice(&self.aux_file);
        B::write_i16(&mut b[252..], self.qform_code);
        B::write_i16(&mut b[254..], self.sform_code);
        for (i, v) in [
            self.quatern_b,
            self.quatern_c,
            self.quatern_d,
            self.qoffset_x,
            self.qoffset_y,
            self.qoffset_z,
        ]
        .into_iter()
        .enumerate()
        {
            B::write_f32(&mut b[256 + 4 * i..], v);
        }
        for i in 0..4 {
            B::write_f32(&mut b[280 + 4 * i..], self.srow_x[i]);
            B::write_f32(&mut b[296 + 4 * i..], self.srow_y[i]);
            B::write_f32(&mut b[312 + 4 * i..], self.srow_z[i]);
        }
        b[328..344].copy_from_slice(&self.intent_name);
        b[344..348].copy_from_slice(&self.magic);
        b
    }
}

/// A decoded NIfTI image: one [`Volume3D`] per time frame (a single frame for
/// rank 2 and 3 images). Voxel values have `scl_slope`/`scl_inter` applied.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiVolume {
    pub header: NiftiHeader,
    frames: Vec<Volume3D>,
}

impl NiftiVolume {
    /// Wraps frames under `header`, checking the voxel count.
    pub fn new(header: NiftiHeader, frames: Vec<Volume3D>) -> Result<Self> {
        let expected = header.voxel_count().unwrap_or(usize::MAX);
        let actual: usize = frames.iter().map(|f| f.data().len()).sum();
        if expected != actual {
            return Err(NiftiError::VoxelCountMismatch { expected, actual });
        }
        Ok(Self { header, frames })
    }

    /// Single 3-D volume with identity scaling.
    pub fn from_volume(vol: Volume3D, datatype: Datatype) -> Self {
        let (w, h, s) = vol.dims();
        let (dx, dy, dz) = vol.spacing();
        let header = NiftiHeader::for_dims(&[w, h, s], &[dx as f32, dy as f32, dz as f32], datatype);
        Self {
            header,
            frames: vec![vol],
        }
    }

    /// 4-D image from equally shaped frames.
    pub fn from_frames(frames: Vec<Volume3D>, datatype: Datatype) -> Self {
        let first = frames.first().expect("at least one frame");
        let (w, h, s) = first.dims();
        let (dx, dy, dz) = first.spacing();
        assert!(frames.iter().all(|f| f.dims() == (w, h, s)));
        let header = NiftiHeader::for_dims(
            &[w, h, s, frames.len()],
            &[dx as f32, dy as f32, dz as f32, 1.0],
            datatype,
        );
        Self { header, frames }
    }

    pub fn frames(&self) -> &[Volume3D] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> Option<&Volume3D> {
        self.frames.get(t)
    }

    pub fn volume(&self) -> &Volume3D {
        &self.frames[0]
    }

    pub fn into_volume(mut self) -> Volume3D {
        self.frames.swap_remove(0)
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }
}

fn gunzip(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    GzDecoder::new(bytes)
        .read_to_end(&mut out)
        .map_err(NiftiError::Gzip)?;
    Ok(out)
}

/// Detects the byte order from `sizeof_hdr`.
fn detect_endianness(raw: &[u8]) -> Result<Endianness> {
    let le = LittleEndian::read_i32(raw);
    let be = BigEndian::read_i32(raw);
    match (le, be) {
        (348, _) => Ok(Endianness::Little),
        (_, 348) => Ok(Endianness::Big),
        (540, _) | (_, 540) => Err(NiftiError::Nifti2Unsupported),
        _ => Err(NiftiError::BadSizeofHdr(le)),
    }
}

/// Parses and validates just the header.
pub fn read_header(raw: &[u8]) -> Result<(NiftiHeader, Endianness)> {
    if raw.len() < 4 {
        return Err(NiftiError::TooShort(raw.len()));
    }
    let endian = detect_endianness(raw)?;
    if raw.len() < DATA_OFFSET {
        return Err(NiftiError::TooShort(raw.len()));
    }
    let header = match endian {
        Endianness::Little => NiftiHeader::decode::<LittleEndian>(raw),
        Endianness::Big => NiftiHeader::decode::<BigEndian>(raw),
    };
    header.validate()?;
    Ok((header, endian))
}

/// Decodes a NIfTI-1 stream, gunzipping first when `gz` is set.
pub fn read_nifti(bytes: &[u8], gz: bool) -> Result<NiftiVolume> {
    let owned;
    let raw = if gz {
        owned = gunzip(bytes)?;
        &owned[..]
    } else {
        bytes
    };
    let (header, endian) = read_header(raw)?;
    let dt = header.datatype()?;
    let offset = header.vox_offset as usize;
    let count = header.voxel_count().unwrap_or(usize::MAX);
    let expected = count.checked_mul(dt.bytes()).unwrap_or(usize::MAX);
    let available = raw.len().saturating_sub(offset);
    if expected > available {
        return Err(NiftiError::Truncated {
            offset,
            expected,
            actual: raw.len(),
        });
    }
    let data = &raw[offset..offset + expected];
    let (slope, inter) = header.scaling();
    let values: Vec<f64> = match (dt, endian) {
        (Datatype::Uint8, _) => data.iter().map(|&v| v as f64).collect(),
        (Datatype::Int16, Endianness::Little) => decode_with(data, 2, |c| LittleEndian::read_i16(c) as f64),
        (Datatype::Int16, Endianness::Big) => decode_with(data, 2, |c| BigEndian::read_i16(c) as f64),
        (Datatype::Float32, Endianness::Little) => decode_with(data, 4, |c| LittleEndian::read_f32(c) as f64),
        (Datatype::Float32, Endianness::Big) => decode_with(data, 4, |c| BigEndian::read_f32(c) as f64),
    };
    let values = if (slope, inter) == (1.0, 0.0) {
        values
    } else {
        values.into_iter().map(|v| v * slope + inter).collect()
    };

    let shape = header.shape();
    let (w, h) = (shape[0], shape[1]);
    let slices = shape.get(2).copied().unwrap_or(1);
    let frames = shape.get(3).copied().unwrap_or(1);
    let spacing = |i: usize| {
        let p = header.pixdim[i];
        if p.is_finite() && p > 0.0 {
            p as f64
        } else {
            1.0
        }
    };
    let per_frame = w * h * slices;
    let frames = (0..frames)
        .map(|t| {
            Volume3D::new(
                w,
                h,
                slices,
                values[t * per_frame..(t + 1) * per_frame].to_vec(),
                (spacing(1), spacing(2), spacing(3)),
            )
            .expect("dimensions validated above")
        })
        .collect();
    Ok(NiftiVolume { header, frames })
}

fn decode_with(data: &[u8], width: usize, f: impl Fn(&[u8]) -> f64) -> Vec<f64> {
    data.chunks_exact(width).map(f).collect()
}

/// Encodes `vol` little-endian.
pub fn write_nifti(vol: &NiftiVolume, gz: bool) -> Result<Vec<u8>> {
    write_nifti_with(vol, gz, Endianness::Little)
}

/// Encodes `vol` in the requested byte order: header, zero extension flag,
/// voxel data at offset 352.
pub fn write_nifti_with(vol: &NiftiVolume, gz: bool, endian: Endianness) -> Result<Vec<u8>> {
    let dt = vol.header.datatype()?;
    let mut header = vol.header.clone();
    header.sizeof_hdr = HEADER_SIZE as i32;
    header.bitpix = dt.bitpix();
    header.vox_offset = DATA_OFFSET as f32;
    header.magic = *MAGIC_SINGLE;

    let (slope, inter) = header.scaling();
    let count: usize = vol.frames.iter().map(|f| f.data().len()).sum();
    let mut out = Vec::with_capacity(DATA_OFFSET + count * dt.bytes());
    out.extend_from_slice(&match endian {
        Endianness::Little => header.encode::<LittleEndian>(),
        Endianness::Big => header.encode::<BigEndian>(),
    });
    out.extend_from_slice(&[0u8; 4]);

    let raw = vol
        .frames
        .iter()
        .flat_map(|f| f.data().iter())
        .map(|&v| (v - inter) / slope);
    let mut buf = [0u8; 4];
    for v in raw {
        match dt {
            Datatype::Uint8 => out.push(v.round().clamp(0.0, 255.0) as u8),
            Datatype::Int16 => {
                let q = v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
                match endian {
                    Endianness::Little => LittleEndian::write_i16(&mut buf, q),
                    Endianness::Big => BigEndian::write_i16(&mut buf, q),
                }
                out.extend_from_slice(&buf[..2]);
            }
            Datatype::Float32 => {
                match endian {
                    Endianness::Little => LittleEndian::write_f32(&mut buf, v as f32),
                    Endianness::Big => BigEndian::write_f32(&mut buf, v as f32),
                }
                out.extend_from_slice(&buf);
            }
        }
    }

    if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&out)?;
        Ok(enc.finish()?)
    } else {
        Ok(out)
    }
}

fn is_gz_path(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

/// Reads a `.nii` or `.nii.gz` file, choosing the codec from the extension.
pub fn read_file(path: &Path) -> Result<NiftiVolume> {
    let bytes = std::fs::read(path)?;
    read_nifti(&bytes, is_gz_path(path))
}

pub fn write_file(path: &Path, vol: &NiftiVolume) -> Result<()> {
    let bytes = write_nifti(vol, is_gz_path(path))?;
    std::fs::write(path, bytes)?;
    Ok(())
}
