//! Volume container, `.mvol` persistence, intensity normalization and
//! assembly of adjacent-slice triplets.
//!
//! `.mvol` layout:
//!
//! ```text
//! offset 0        8-byte magic "MVOL0001"
//! offset 8        u32 LE header length N
//! offset 12       N bytes of UTF-8 JSON {"dims":[nx,ny,nz],"spacing":[sx,sy,sz],"dtype":"f32le"}
//! offset 12 + N   4*nx*ny*nz bytes of f32 LE, x fastest, z slowest
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MVOL_MAGIC: &[u8; 8] = b"MVOL0001";

/// A 2D single-channel image, row-major with x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub nx: usize,
    pub ny: usize,
    pub data: Vec<f32>,
}

impl Slice {
    pub fn new(nx: usize, ny: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != nx * ny {
            return Err(Error::shape(format!(
                "slice {nx}x{ny} needs {} values, got {}",
                nx * ny,
                data.len()
            )));
        }
        Ok(Slice { nx, ny, data })
    }

    pub fn zeros(nx: usize, ny: usize) -> Self {
        Slice {
            nx,
            ny,
            data: vec![0.0; nx * ny],
        }
    }

    pub fn filled(nx: usize, ny: usize, value: f32) -> Self {
        Slice {
            nx,
            ny,
            data: vec![value; nx * ny],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.nx + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.nx + x] = v;
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn same_dims(&self, other: &Slice) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(format!(
                "slice dims {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    pub fn clipped(&self, lo: f32, hi: f32) -> Slice {
        Slice {
            nx: self.nx,
            ny: self.ny,
            data: self.data.iter().map(|v| v.clamp(lo, hi)).collect(),
        }
    }
}

/// A 3D scalar volume with voxel spacing in millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f32; 3],
    data: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MvolHeader {
    dims: [usize; 3],
    spacing: [f32; 3],
    dtype: String,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        validate_dims(dims)?;
        for (axis, s) in spacing.iter().enumerate() {
            if !(s.is_finite() && *s > 0.0) {
                return Err(Error::config(
                    format!("spacing[{axis}]"),
                    format!("must be finite and positive, got {s}"),
                ));
            }
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::shape(format!(
                "volume {dims:?} needs {n} voxels, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite voxel at index {i}")));
        }
        Ok(Volume {
            dims,
            spacing,
            data,
        })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f32; 3]) -> Result<Self> {
        Volume::new(dims, spacing, vec![0.0; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Returns a copy of axial slice `z`.
    pub fn slice(&self, z: usize) -> Result<Slice> {
        let [nx, ny, nz] = self.dims;
        if z >= nz {
            return Err(Error::config(
                "slice_index",
                format!("{z} out of range [0, {})", nz),
            ));
        }
        let n = nx * ny;
        Ok(Slice {
            nx,
            ny,
            data: self.data[z * n..(z + 1) * n].to_vec(),
        })
    }

    /// Assembles a volume from equally sized slices stacked along z.
    pub fn from_slices(slices: &[Slice], spacing: [f32; 3]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::config("slices", "at least one slice required"))?;
        let mut data = Vec::with_capacity(first.nx * first.ny * slices.len());
        for s in slices {
            first.same_dims(s)?;
            data.extend_from_slice(&s.data);
        }
        Volume::new([first.nx, first.ny, slices.len()], spacing, data)
    }

    /// Same geometry, new voxel values.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Volume::new(self.dims, self.spacing, data)
    }

    /// Applies `f` voxel-wise.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }
}

fn validate_dims(dims: [usize; 3]) -> Result<()> {
    for (axis, d) in dims.iter().enumerate() {
        if *d == 0 {
            return Err(Error::config(
                format!("dims[{axis}]"),
                "must be at least 1",
            ));
        }
    }
    Ok(())
}

/// Serializes a volume into `.mvol` bytes.
pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let header = serde_json::to_vec(&MvolHeader {
        dims: v.dims,
        spacing: v.spacing,
        dtype: "f32le".to_string(),
    })
    .expect("header serialization cannot fail");
    let mut out = Vec::with_capacity(12 + header.len() + 4 * v.data.len());
    out.extend_from_slice(MVOL_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for x in &v.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Parses `.mvol` bytes. Errors carry the byte offset of the problem.
pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < 12 {
        return Err(Error::format(
            bytes.len() as u64,
            "file shorter than the 12-byte preamble",
        ));
    }
    if &bytes[..8] != MVOL_MAGIC {
        return Err(Error::format(0, "bad magic, expected MVOL0001"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let hend = 12 + hlen;
    if bytes.len() < hend {
        return Err(Error::format(
            bytes.len() as u64,
            format!("header length {hlen} exceeds file size"),
        ));
    }
    let header: MvolHeader = serde_json::from_slice(&bytes[12..hend])
        .map_err(|e| Error::format(12, format!("malformed header: {e}")))?;
    if header.dtype != "f32le" {
        return Err(Error::format(
            12,
            format!("unsupported dtype {:?}", header.dtype),
        ));
    }
    validate_dims(header.dims).map_err(|e| Error::format(12, e.to_string()))?;
    let n: usize = header.dims.iter().product();
    let blob = &bytes[hend..];
    if blob.len() != 4 * n {
        return Err(Error::format(
            hend as u64,
            format!(
                "data length mismatch: dims {:?} need {} bytes, found {}",
                header.dims,
                4 * n,
                blob.len()
            ),
        ));
    }
    let mut data = Vec::with_capacity(n);
    for (i, chunk) in blob.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(
                (hend + 4 * i) as u64,
                format!("non-finite value {v}"),
            ));
        }
        data.push(v);
    }
    Volume::new(header.dims, header.spacing, data).map_err(|e| Error::format(12, e.to_string()))
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io_at(path, e))?;
    f.write_all(&encode_volume(v)).map_err(|e| Error::io_at(path, e))?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    decode_volume(&fs::read(path).map_err(|e| Error::io_at(path, e))?)
}

/// Linear-interpolated percentile of already sorted values, `p` in [0, 100].
pub fn percentile_sorted(sorted: &[f32], p: f64) -> f32 {
    debug_assert!(!sorted.is_empty());
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    (sorted[lo] as f64 + (sorted[hi] as f64 - sorted[lo] as f64) * frac) as f32
}

/// Clips to the `[P(p_lo), P(p_hi)]` window and maps it affinely onto
/// `[0, 1]`. A degenerate window yields an all-zero volume.
pub fn normalize_volume(v: &Volume, p_lo: f64, p_hi: f64) -> Result<Volume> {
    if !(0.0..=100.0).contains(&p_lo) || !(0.0..=100.0).contains(&p_hi) || p_lo >= p_hi {
        return Err(Error::config(
            "percentiles",
            format!("need 0 <= p_lo < p_hi <= 100, got ({p_lo}, {p_hi})"),
        ));
    }
    let mut sorted = v.data.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let lo = percentile_sorted(&sorted, p_lo);
    let hi = percentile_sorted(&sorted, p_hi);
    if hi <= lo {
        return v.map(|_| 0.0);
    }
    let scale = 1.0 / (hi as f64 - lo as f64);
    v.map(|x| ((x.clamp(lo, hi) as f64 - lo as f64) * scale).clamp(0.0, 1.0) as f32)
}

/// The network's multi-input sample for slice `slice_index` of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceTriplet {
    pub prev: Slice,
    pub center: Slice,
    pub next: Slice,
    pub extra_prior: Option<Slice>,
    pub slice_index: usize,
    pub subject_id: String,
}

/// Builds the triplet for slice `i`; the first and last slices reuse the
/// center slice in place of the missing neighbour.
pub fn extract_triplet(
    v: &Volume,
    i: usize,
    extra: Option<&Volume>,
    subject_id: &str,
) -> Result<SliceTriplet> {
    let nz = v.dims[2];
    if i >= nz {
        return Err(Error::config(
            "slice_index",
            format!("{i} out of range [0, {nz})"),
        ));
    }
    if let Some(e) = extra {
        if e.dims != v.dims {
            return Err(Error::shape(format!(
                "extra prior dims {:?} differ from volume dims {:?}",
                e.dims, v.dims
            )));
        }
    }
    let center = v.slice(i)?;
    let prev = if i == 0 { center.clone() } else { v.slice(i - 1)? };
    let next = if i + 1 == nz {
        center.clone()
    } else {
        v.slice(i + 1)?
    };
    Ok(SliceTriplet {
        prev,
        center,
        next,
        extra_prior: extra.map(|e| e.slice(i)).transpose()?,
        slice_index: i,
        subject_id: subject_id.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3]) -> Volume {
        let n = dims.iter().product::<usize>();
        Volume::new(dims, [1.0; 3], (0..n).map(|i| i as f32 * 0.01).collect()).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let v = ramp([4, 3, 2]);
        let w = decode_volume(&encode_volume(&v)).unwrap();
        assert_eq!(v, w);
    }

    #[test]
    fn truncated_blob_is_length_error() {
        let v = ramp([4, 3, 2]);
        let mut b = encode_volume(&v);
        b.pop();
        match decode_volume(&b) {
            Err(Error::Format { reason, .. }) => assert!(reason.contains("length mismatch")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_dim_header_rejected() {
        let header = br#"{"dims":[0,64,32],"spacing":[1,1,1],"dtype":"f32le"}"#;
        let mut b = MVOL_MAGIC.to_vec();
        b.extend_from_slice(&(header.len() as u32).to_le_bytes());
        b.extend_from_slice(header);
        assert!(matches!(decode_volume(&b), Err(Error::Format { .. })));
    }

    #[test]
    fn non_finite_reports_offset() {
        let v = ramp([2, 2, 1]);
        let mut b = encode_volume(&v);
        let n = b.len();
        b[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        match decode_volume(&b) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, n - 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic() {
        let mut b = encode_volume(&ramp([2, 2, 1]));
        b[0] = b'X';
        assert!(matches!(decode_volume(&b), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn normalize_full_window_is_affine() {
        let v = Volume::new([4, 1, 1], [1.0; 3], vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let n = normalize_volume(&v, 0.0, 100.0).unwrap();
        assert_eq!(n.data()[0], 0.0);
        assert_eq!(n.data()[3], 1.0);
        assert!((n.data()[1] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn normalize_constant_is_zero() {
        let v = Volume::new([3, 3, 1], [1.0; 3], vec![0.7; 9]).unwrap();
        let n = normalize_volume(&v, 0.5, 99.5).unwrap();
        assert!(n.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn normalize_clips_outlier() {
        // 1000 voxels uniformly in [0, 0.999] plus one outlier at 10.
        let mut data: Vec<f32> = (0..1000).map(|i| i as f32 / 1000.0).collect();
        data.push(10.0);
        let v = Volume::new([1001, 1, 1], [1.0; 3], data.clone()).unwrap();
        let out = normalize_volume(&v, 0.0, 99.5).unwrap();
        // Oracle percentile by sorting.
        let mut s = data;
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank: f64 = 0.995 * 1000.0;
        let p = s[rank as usize] + (s[rank as usize + 1] - s[rank as usize]) * (rank - rank.floor()) as f32;
        assert!(p < 10.0);
        assert_eq!(out.data()[1000], 1.0);
        assert!(out.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn normalize_idempotent() {
        let v = ramp([8, 4, 2]);
        let a = normalize_volume(&v, 0.0, 100.0).unwrap();
        let b = normalize_volume(&a, 0.0, 100.0).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn bad_percentiles_rejected() {
        let v = ramp([2, 2, 2]);
        assert!(normalize_volume(&v, 50.0, 50.0).is_err());
        assert!(normalize_volume(&v, -1.0, 50.0).is_err());
    }

    #[test]
    fn triplet_edges_repeat_center() {
        let v = ramp([4, 4, 5]);
        let t0 = extract_triplet(&v, 0, None, "s").unwrap();
        assert_eq!(t0.prev, t0.center);
        assert_eq!(t0.next, v.slice(1).unwrap());
        let t4 = extract_triplet(&v, 4, None, "s").unwrap();
        assert_eq!(t4.next, t4.center);
        let t2 = extract_triplet(&v, 2, Some(&v), "s").unwrap();
        assert_eq!(t2.prev, v.slice(1).unwrap());
        assert_eq!(t2.extra_prior.unwrap(), v.slice(2).unwrap());
    }

    #[test]
    fn triplet_errors() {
        let v = ramp([4, 4, 5]);
        assert!(extract_triplet(&v, 5, None, "s").is_err());
        let w = ramp([4, 4, 4]);
        assert!(matches!(
            extract_triplet(&v, 1, Some(&w), "s"),
            Err(Error::Shape(_))
        ));
    }
}
