//! Reading and writing of single-file NIfTI-1 volumes.
//!
//! Only the fields needed to locate and scale voxel data are interpreted.
//! Orientation fields (qform/sform) are parsed and kept on the header but
//! never applied: every volume is assumed to already live on a common
//! registered grid.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::MultiGzDecoder;
use thiserror::Error;

/// Size of a NIfTI-1 header in bytes.
pub const HEADER_SIZE: usize = 348;
/// Voxel offset used when writing single-file volumes (header + 4 byte extension flag).
pub const WRITE_VOX_OFFSET: usize = 352;
/// Magic code for single-file NIfTI-1 (`.nii`).
pub const MAGIC_SINGLE: [u8; 4] = *b"n+1\0";
/// Magic code for header/image pairs (`.hdr` + `.img`).
pub const MAGIC_PAIR: [u8; 4] = *b"ni1\0";

const NIFTI2_HEADER_SIZE: i32 = 540;

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("TooShort: need at least {needed} bytes, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("BadSizeofHdr: sizeof_hdr is {0} under both byte orders, expected 348")]
    BadSizeofHdr(i32),
    #[error("Nifti2Unsupported: NIfTI-2 headers are not supported")]
    Nifti2Unsupported,
    #[error("BadMagic: {0:?} is not a NIfTI-1 magic code")]
    BadMagic([u8; 4]),
    #[error("PairUnsupported: .hdr/.img pairs are not supported, convert to a single .nii file")]
    PairUnsupported,
    #[error("UnsupportedDatatype: datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("InconsistentBitpix: datatype {datatype} requires bitpix {expected}, header says {got}")]
    InconsistentBitpix { datatype: i16, expected: i16, got: i16 },
    #[error("BadDim: {0}")]
    BadDim(String),
    #[error("TruncatedData: header promises {expected} bytes of voxel data, file has {got}")]
    TruncatedData { expected: usize, got: usize },
    #[error("NonFiniteVoxel: voxel {index} is not finite")]
    NonFiniteVoxel { index: usize },
    #[error("ShapeMismatch: {0}")]
    ShapeMismatch(String),
    #[error("IoFailure: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NiftiError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ByteOrder {
    Little,
    Big,
}

impl ByteOrder {
    fn swap_needed(self) -> bool {
        match self {
            ByteOrder::Little => cfg!(target_endian = "big"),
            ByteOrder::Big => cfg!(target_endian = "little"),
        }
    }
}

/// Voxel storage types accepted by the reader.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    U8,
    I16,
    I32,
    F32,
    F64,
}

impl Datatype {
    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(Datatype::U8),
            4 => Ok(Datatype::I16),
            8 => Ok(Datatype::I32),
            16 => Ok(Datatype::F32),
            64 => Ok(Datatype::F64),
            other => Err(NiftiError::UnsupportedDatatype(other)),
        }
    }

    pub fn code(self) -> i16 {
        match self {
            Datatype::U8 => 2,
            Datatype::I16 => 4,
            Datatype::I32 => 8,
            Datatype::F32 => 16,
            Datatype::F64 => 64,
        }
    }

    pub fn bitpix(self) -> i16 {
        match self {
            Datatype::U8 => 8,
            Datatype::I16 => 16,
            Datatype::I32 => 32,
            Datatype::F32 => 32,
            Datatype::F64 => 64,
        }
    }

    pub fn byte_size(self) -> usize {
        self.bitpix() as usize / 8
    }
}

/// The interpreted subset of a NIfTI-1 header.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub sizeof_hdr: i32,
    pub dim: [i16; 8],
    pub datatype: Datatype,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub xyzt_units: u8,
    pub descrip: [u8; 80],
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
    pub magic: [u8; 4],
    /// Detected from `sizeof_hdr`; not a stored field.
    pub byte_order: ByteOrder,
}

struct Fields<'a> {
    bytes: &'a [u8],
    order: ByteOrder,
}

impl Fields<'_> {
    fn raw<const N: usize>(&self, offset: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.bytes[offset..offset + N]);
        if self.order.swap_needed() {
            b.reverse();
        }
        b
    }

    fn i16(&self, offset: usize) -> i16 {
        i16::from_ne_bytes(self.raw(offset))
    }

    fn f32(&self, offset: usize) -> f32 {
        f32::from_ne_bytes(self.raw(offset))
    }

    fn f32_array<const N: usize>(&self, offset: usize) -> [f32; N] {
        std::array::from_fn(|i| self.f32(offset + 4 * i))
    }
}

/// Parse the first 348 bytes of a NIfTI-1 file.
///
/// Byte order is detected by testing `sizeof_hdr == 348` natively and
/// swapped; every multi-byte field is then decoded with that order.
pub fn parse_header(bytes: &[u8]) -> Result<NiftiHeader> {
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::TooShort {
            needed: HEADER_SIZE,
            got: bytes.len(),
        });
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let be = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let byte_order = if le == HEADER_SIZE as i32 {
        ByteOrder::Little
    } else if be == HEADER_SIZE as i32 {
        ByteOrder::Big
    } else if le == NIFTI2_HEADER_SIZE || be == NIFTI2_HEADER_SIZE {
        return Err(NiftiError::Nifti2Unsupported);
    } else {
        return Err(NiftiError::BadSizeofHdr(le));
    };
    let f = Fields {
        bytes,
        order: byte_order,
    };

    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[344..348]);
    if magic != MAGIC_SINGLE && magic != MAGIC_PAIR {
        return Err(NiftiError::BadMagic(magic));
    }

    let dim: [i16; 8] = std::array::from_fn(|i| f.i16(40 + 2 * i));
    let rank = dim[0];
    if !(1..=7).contains(&rank) {
        return Err(NiftiError::BadDim(format!("dim[0]={rank} outside 1..7")));
    }
    if let Some(i) = (1..=rank as usize).find(|&i| dim[i] < 1) {
        return Err(NiftiError::BadDim(format!("dim[{i}]={} < 1", dim[i])));
    }

    let code = f.i16(70);
    let datatype = Datatype::from_code(code)?;
    let bitpix = f.i16(72);
    if bitpix != datatype.bitpix() {
        return Err(NiftiError::InconsistentBitpix {
            datatype: code,
            expected: datatype.bitpix(),
            got: bitpix,
        });
    }

    let mut descrip = [0u8; 80];
    descrip.copy_from_slice(&bytes[148..228]);

    Ok(NiftiHeader {
        sizeof_hdr: HEADER_SIZE as i32,
        dim,
        datatype,
        bitpix,
        pixdim: f.f32_array(76),
        vox_offset: f.f32(108),
        scl_slope: f.f32(112),
        scl_inter: f.f32(116),
        xyzt_units: bytes[123],
        descrip,
        qform_code: f.i16(252),
        sform_code: f.i16(254),
        quatern: f.f32_array(256),
        qoffset: f.f32_array(268),
        srow: [f.f32_array(280), f.f32_array(296), f.f32_array(312)],
        magic,
        byte_order,
    })
}

impl NiftiHeader {
    /// Header for a single-file float32 volume written by this crate.
    pub fn for_f32(dims: &[usize], spacing: [f32; 3]) -> Self {
        let mut dim = [1i16; 8];
        dim[0] = dims.len() as i16;
        for (d, &n) in dim[1..].iter_mut().zip(dims) {
            *d = n as i16;
        }
        let mut pixdim = [1.0f32; 8];
        pixdim[1..4].copy_from_slice(&spacing);
        NiftiHeader {
            sizeof_hdr: HEADER_SIZE as i32,
            dim,
            datatype: Datatype::F32,
            bitpix: 32,
            pixdim,
            vox_offset: WRITE_VOX_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            // mm + seconds
            xyzt_units: 2 | 8,
            descrip: [0; 80],
            qform_code: 0,
            sform_code: 0,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            srow: [[0.0; 4]; 3],
            magic: MAGIC_SINGLE,
            byte_order: ByteOrder::Little,
        }
    }

    /// Serialize into 348 bytes using `order`.
    pub fn to_bytes(&self, order: ByteOrder) -> [u8; HEADER_SIZE] {
        let mut out = [0u8; HEADER_SIZE];
        let swap = order.swap_needed();
        let mut put = |offset: usize, mut b: Vec<u8>| {
            if swap {
                b.reverse();
            }
            out[offset..offset + b.len()].copy_from_slice(&b);
        };
        put(0, self.sizeof_hdr.to_ne_bytes().to_vec());
        // "regular" = 'r' for historical Analyze compatibility
        put(38, vec![b'r']);
        for (i, d) in self.dim.iter().enumerate() {
            put(40 + 2 * i, d.to_ne_bytes().to_vec());
        }
        put(70, self.datatype.code().to_ne_bytes().to_vec());
        put(72, self.bitpix.to_ne_bytes().to_vec());
        for (i, p) in self.pixdim.iter().enumerate() {
            put(76 + 4 * i, p.to_ne_bytes().to_vec());
        }
        put(108, self.vox_offset.to_ne_bytes().to_vec());
        put(112, self.scl_slope.to_ne_bytes().to_vec());
        put(116, self.scl_inter.to_ne_bytes().to_vec());
        put(123, vec![self.xyzt_units]);
        put(252, self.qform_code.to_ne_bytes().to_vec());
        put(254, self.sform_code.to_ne_bytes().to_vec());
        for i in 0..3 {
            put(256 + 4 * i, self.quatern[i].to_ne_bytes().to_vec());
            put(268 + 4 * i, self.qoffset[i].to_ne_bytes().to_vec());
        }
        for (r, row) in self.srow.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                put(280 + 16 * r + 4 * c, v.to_ne_bytes().to_vec());
            }
        }
        out[148..228].copy_from_slice(&self.descrip);
        out[344..348].copy_from_slice(&self.magic);
        out
    }

    pub fn rank(&self) -> usize {
        self.dim[0] as usize
    }

    /// Spatial extent (nx, ny, nz); missing trailing dims count as 1.
    pub fn spatial_dims(&self) -> [usize; 3] {
        std::array::from_fn(|i| {
            if i < self.rank() {
                self.dim[i + 1] as usize
            } else {
                1
            }
        })
    }

    /// Number of voxels the header promises across all dimensions.
    pub fn voxel_count(&self) -> usize {
        self.dim[1..=self.rank()]
            .iter()
            .map(|&d| d as usize)
            .product()
    }

    fn scaling(&self) -> Option<(f64, f64)> {
        if self.scl_slope != 0.0 && self.scl_slope.is_finite() {
            Some((self.scl_slope as f64, self.scl_inter as f64))
        } else {
            None
        }
    }
}

/// One real-valued volume, x fastest: `index = x + nx * (y + ny * z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    voxels: Vec<f32>,
    spacing: [f32; 3],
}

impl Volume3D {
    pub fn new(dims: [usize; 3], voxels: Vec<f32>) -> Result<Self> {
        Self::with_spacing(dims, voxels, [1.0; 3])
    }

    pub fn with_spacing(dims: [usize; 3], voxels: Vec<f32>, spacing: [f32; 3]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if dims.contains(&0) || voxels.len() != n {
            return Err(NiftiError::ShapeMismatch(format!(
                "{} voxels for grid {}x{}x{}",
                voxels.len(),
                dims[0],
                dims[1],
                dims[2]
            )));
        }
        if let Some(index) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(NiftiError::NonFiniteVoxel { index });
        }
        Ok(Volume3D {
            dims,
            voxels,
            spacing,
        })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Volume3D {
            dims,
            voxels: vec![0.0; dims.iter().product()],
            spacing: [1.0; 3],
        }
    }

    /// Build from a function of voxel coordinates.
    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let [nx, ny, nz] = dims;
        let mut voxels = Vec::with_capacity(nx * ny * nz);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    voxels.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, voxels)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.index(x, y, z)]
    }
}

/// All ICA component volumes of one subject, in on-disk order.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentStack {
    pub subject_id: String,
    pub volumes: Vec<Volume3D>,
    pub source_path: String,
}

impl ComponentStack {
    pub fn new(subject_id: impl Into<String>, volumes: Vec<Volume3D>) -> Result<Self> {
        if let Some(first) = volumes.first() {
            if let Some(bad) = volumes.iter().find(|v| v.dims() != first.dims()) {
                return Err(NiftiError::ShapeMismatch(format!(
                    "stack mixes grids {:?} and {:?}",
                    first.dims(),
                    bad.dims()
                )));
            }
        }
        Ok(ComponentStack {
            subject_id: subject_id.into(),
            volumes,
            source_path: String::new(),
        })
    }

    pub fn dims(&self) -> Option<[usize; 3]> {
        self.volumes.first().map(Volume3D::dims)
    }
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

fn decode_voxels(data: &[u8], header: &NiftiHeader, count: usize) -> Vec<f64> {
    let size = header.datatype.byte_size();
    let swap = header.byte_order.swap_needed();
    data[..count * size]
        .chunks_exact(size)
        .map(|chunk| {
            let mut b = [0u8; 8];
            b[..size].copy_from_slice(chunk);
            if swap {
                b[..size].reverse();
            }
            match header.datatype {
                Datatype::U8 => b[0] as f64,
                Datatype::I16 => i16::from_ne_bytes([b[0], b[1]]) as f64,
                Datatype::I32 => i32::from_ne_bytes([b[0], b[1], b[2], b[3]]) as f64,
                Datatype::F32 => f32::from_ne_bytes([b[0], b[1], b[2], b[3]]) as f64,
                Datatype::F64 => f64::from_ne_bytes(b),
            }
        })
        .collect()
}

/// Decode an in-memory `.nii` (optionally gzip-wrapped) into a component stack.
pub fn read_stack_bytes(bytes: &[u8], subject_id: &str) -> Result<ComponentStack> {
    let inflated;
    let bytes = if is_gzip(bytes) {
        let mut buf = Vec::new();
        MultiGzDecoder::new(bytes).read_to_end(&mut buf)?;
        inflated = buf;
        &inflated[..]
    } else {
        bytes
    };

    let header = parse_header(bytes)?;
    if header.magic == MAGIC_PAIR {
        return Err(NiftiError::PairUnsupported);
    }
    let rank = header.rank();
    if rank != 3 && rank != 4 {
        return Err(NiftiError::BadDim(format!(
            "expected a 3D or 4D image, got dim[0]={rank}"
        )));
    }
    let dims = header.spatial_dims();
    let per_volume: usize = dims.iter().product();
    let n_volumes = if rank == 4 { header.dim[4] as usize } else { 1 };
    let total = per_volume * n_volumes;

    let offset = header.vox_offset.max(0.0) as usize;
    if offset < HEADER_SIZE {
        return Err(NiftiError::BadDim(format!(
            "vox_offset {} lies inside the header",
            header.vox_offset
        )));
    }
    let expected = total * header.datatype.byte_size();
    let available = bytes.len().saturating_sub(offset);
    if available < expected {
        return Err(NiftiError::TruncatedData {
            expected,
            got: available,
        });
    }

    let raw = decode_voxels(&bytes[offset..], &header, total);
    let scaling = header.scaling();
    let spacing = [header.pixdim[1], header.pixdim[2], header.pixdim[3]];
    let mut volumes = Vec::with_capacity(n_volumes);
    for (v, chunk) in raw.chunks_exact(per_volume).enumerate() {
        let voxels: Vec<f32> = chunk
            .iter()
            .map(|&r| match scaling {
                Some((slope, inter)) => (r * slope + inter) as f32,
                None => r as f32,
            })
            .collect();
        if let Some(i) = voxels.iter().position(|x| !x.is_finite()) {
            return Err(NiftiError::NonFiniteVoxel {
                index: v * per_volume + i,
            });
        }
        volumes.push(Volume3D {
            dims,
            voxels,
            spacing,
        });
    }
    ComponentStack::new(subject_id, volumes)
}

/// Subject id derived from a file name: the name with `.nii` / `.nii.gz` removed.
pub fn subject_id_from_path(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = name.strip_suffix(".gz").unwrap_or(&name);
    name.strip_suffix(".nii").unwrap_or(name).to_string()
}

/// Read a 3D or 4D NIfTI-1 file; a 3D file becomes a stack of one volume.
pub fn read_stack(path: impl AsRef<Path>) -> Result<ComponentStack> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let mut stack = read_stack_bytes(&bytes, &subject_id_from_path(path))?;
    stack.source_path = path.display().to_string();
    Ok(stack)
}

fn encode_f32(header: &NiftiHeader, volumes: &[&Volume3D]) -> Vec<u8> {
    let n: usize = volumes.iter().map(|v| v.voxels.len()).sum();
    let mut out = Vec::with_capacity(WRITE_VOX_OFFSET + 4 * n);
    out.extend_from_slice(&header.to_bytes(ByteOrder::Little));
    // no extensions
    out.extend_from_slice(&[0u8; 4]);
    for v in volumes {
        for x in &v.voxels {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn check_writable(v: &Volume3D) -> Result<()> {
    if let Some(index) = v.voxels.iter().position(|x| !x.is_finite()) {
        return Err(NiftiError::NonFiniteVoxel { index });
    }
    Ok(())
}

/// Encode a single volume as a little-endian float32 `.nii` image.
pub fn volume_to_bytes(v: &Volume3D) -> Result<Vec<u8>> {
    check_writable(v)?;
    let header = NiftiHeader::for_f32(&v.dims, v.spacing);
    Ok(encode_f32(&header, &[v]))
}

pub fn write_volume(v: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let bytes = volume_to_bytes(v)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Encode a stack as one 4D float32 image, components along the 4th axis.
pub fn stack_to_bytes(stack: &ComponentStack) -> Result<Vec<u8>> {
    let dims = stack
        .dims()
        .ok_or_else(|| NiftiError::ShapeMismatch("empty component stack".into()))?;
    for v in &stack.volumes {
        check_writable(v)?;
        if v.dims != dims {
            return Err(NiftiError::ShapeMismatch(format!(
                "stack mixes grids {:?} and {:?}",
                dims, v.dims
            )));
        }
    }
    let header = NiftiHeader::for_f32(
        &[dims[0], dims[1], dims[2], stack.volumes.len()],
        stack.volumes[0].spacing,
    );
    let refs: Vec<&Volume3D> = stack.volumes.iter().collect();
    Ok(encode_f32(&header, &refs))
}

pub fn write_stack(stack: &ComponentStack, path: impl AsRef<Path>) -> Result<()> {
    let bytes = stack_to_bytes(stack)?;
    fs::write(path, bytes)?;
    Ok(())
}
