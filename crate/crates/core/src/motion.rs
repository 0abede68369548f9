//! Rigid-motion artifact simulation.
//!
//! The clean image is rotated in the image domain, transformed to k-space,
//! multiplied by the linear phase ramp of the current translation, and only
//! the k-space lines (2D) or points (3D) acquired while that motion state was
//! active are copied into the output k-space. The corrupted image is the real
//! part of the inverse transform.
//!
//! Acquisition order is linear: state `j` of a 2D trajectory acquires the
//! line with signed frequency `ky = j - ny/2`, so the middle of a trajectory
//! is the center of k-space. 3D trajectories iterate ky fastest, then kz.

use std::collections::HashMap;
use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;

use rand::Rng;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{signed_freq, to_complex, FftNd};
use crate::seed;
use crate::volume::{Slice, Volume};

/// Global bound on rotations (degrees) and translations (mm).
pub const MOTION_LIMIT: f64 = 7.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MotionState {
    pub rot_deg: [f64; 3],
    pub trans_mm: [f64; 3],
}

impl MotionState {
    pub const ZERO: MotionState = MotionState {
        rot_deg: [0.0; 3],
        trans_mm: [0.0; 3],
    };

    pub fn is_zero(&self) -> bool {
        *self == Self::ZERO
    }

    fn rot_key(&self) -> [u64; 3] {
        self.rot_deg.map(f64::to_bits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ordering {
    /// One state per ky line, ky ascending.
    Lines2d,
    /// One state per (ky, kz) point, ky inner loop, kz outer loop.
    Points3d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionTrajectory {
    pub ordering: Ordering,
    pub states: Vec<MotionState>,
}

impl MotionTrajectory {
    pub fn zeros(ordering: Ordering, n_pe: usize) -> Self {
        MotionTrajectory {
            ordering,
            states: vec![MotionState::ZERO; n_pe],
        }
    }

    pub fn constant(ordering: Ordering, n_pe: usize, state: MotionState) -> Self {
        MotionTrajectory {
            ordering,
            states: vec![state; n_pe],
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.states.iter().all(MotionState::is_zero)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Mild,
    Moderate,
    Severe,
}

impl Severity {
    pub const ALL: [Severity; 3] = [Severity::Mild, Severity::Moderate, Severity::Severe];

    pub fn preset(self) -> SeverityPreset {
        match self {
            Severity::Mild => SeverityPreset::new(self, 2, 2.0, 2.0),
            Severity::Moderate => SeverityPreset::new(self, 4, 4.0, 4.0),
            Severity::Severe => SeverityPreset::new(self, 8, 7.0, 7.0),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Mild => "mild",
            Severity::Moderate => "moderate",
            Severity::Severe => "severe",
        }
    }
}

impl std::str::FromStr for Severity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mild" => Ok(Severity::Mild),
            "moderate" => Ok(Severity::Moderate),
            "severe" => Ok(Severity::Severe),
            _ => Err(Error::config(
                "preset",
                format!("unknown preset {s:?}, expected mild|moderate|severe"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeverityPreset {
    pub name: Severity,
    pub max_peaks: usize,
    pub rot_limit_deg: f64,
    pub trans_limit_mm: f64,
}

impl SeverityPreset {
    pub fn new(name: Severity, max_peaks: usize, rot_limit_deg: f64, trans_limit_mm: f64) -> Self {
        SeverityPreset {
            name,
            max_peaks,
            rot_limit_deg,
            trans_limit_mm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("rot_limit_deg", self.rot_limit_deg),
            ("trans_limit_mm", self.trans_limit_mm),
        ] {
            if !(0.0..=MOTION_LIMIT).contains(&v) {
                return Err(Error::config(
                    field,
                    format!("must lie in [0, {MOTION_LIMIT}], got {v}"),
                ));
            }
        }
        Ok(())
    }

    /// Severe motion may hit the center of k-space.
    pub fn allows_dc(&self) -> bool {
        self.name == Severity::Severe
    }
}

/// Simulation switches.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SimConfig {
    /// Apply the translation phase only along phase-encoded axes.
    #[serde(default)]
    pub pe_only: bool,
}

/// Units reserved for the center of k-space, as a half-open range.
fn dc_region(n_pe: usize) -> (usize, usize) {
    let half = ((0.02 * n_pe as f64).ceil() as usize).max(1);
    let c = n_pe / 2;
    (c.saturating_sub(half), (c + half).min(n_pe))
}

/// Random-peak trajectory: zero motion except for a few contiguous intervals
/// holding a constant state drawn uniformly within the preset limits.
pub fn generate_trajectory(
    seed: u64,
    n_pe: usize,
    preset: &SeverityPreset,
    ordering: Ordering,
) -> Result<MotionTrajectory> {
    if n_pe < 4 {
        return Err(Error::config("n_pe", format!("must be >= 4, got {n_pe}")));
    }
    preset.validate()?;
    let mut traj = MotionTrajectory::zeros(ordering, n_pe);
    if preset.max_peaks == 0 {
        return Ok(traj);
    }
    let mut rng = seed::rng(seed);
    let n_peaks = rng.random_range(1..=preset.max_peaks);
    let min_len = ((0.02 * n_pe as f64).round() as usize).max(1);
    let max_len = ((0.15 * n_pe as f64).round() as usize).max(min_len);
    let (dc_lo, dc_hi) = dc_region(n_pe);
    for _ in 0..n_peaks {
        let len = rng.random_range(min_len..=max_len);
        let state = MotionState {
            rot_deg: std::array::from_fn(|_| uniform_sym(&mut rng, preset.rot_limit_deg)),
            trans_mm: std::array::from_fn(|_| uniform_sym(&mut rng, preset.trans_limit_mm)),
        };
        let mut placed = None;
        for _ in 0..64 {
            let start = rng.random_range(0..=n_pe - len);
            let overlaps_dc = start < dc_hi && start + len > dc_lo;
            if preset.allows_dc() || !overlaps_dc {
                placed = Some(start);
                break;
            }
        }
        if let Some(start) = placed {
            traj.states[start..start + len].fill(state);
        }
    }
    Ok(traj)
}

fn uniform_sym(rng: &mut impl Rng, limit: f64) -> f64 {
    if limit == 0.0 {
        0.0
    } else {
        rng.random_range(-limit..=limit)
    }
}

/// Rotates about the image center by `deg` degrees (counter-clockwise in
/// (x, y) index coordinates) with bilinear interpolation and zero fill.
pub fn rotate_image_2d(img: &Slice, deg: f64) -> Slice {
    if deg == 0.0 {
        return img.clone();
    }
    let (nx, ny) = img.dims();
    let (s, c) = (deg * PI / 180.0).sin_cos();
    let cx = (nx as f64 - 1.0) / 2.0;
    let cy = (ny as f64 - 1.0) / 2.0;
    let mut out = Slice::zeros(nx, ny);
    for y in 0..ny {
        for x in 0..nx {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            // Inverse rotation gives the source location.
            let sx = c * dx + s * dy + cx;
            let sy = -s * dx + c * dy + cy;
            out.data[y * nx + x] = bilinear(img, sx, sy) as f32;
        }
    }
    out
}

fn bilinear(img: &Slice, sx: f64, sy: f64) -> f64 {
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let mut acc = 0.0;
    for (oy, wy) in [(0, 1.0 - fy), (1, fy)] {
        let yy = y0 + oy;
        if yy < 0 || yy >= img.ny as i64 || wy == 0.0 {
            continue;
        }
        for (ox, wx) in [(0, 1.0 - fx), (1, fx)] {
            let xx = x0 + ox;
            if xx < 0 || xx >= img.nx as i64 || wx == 0.0 {
                continue;
            }
            acc += wx * wy * img.get(xx as usize, yy as usize) as f64;
        }
    }
    acc
}

/// Rotation matrix `Rz * Ry * Rx` for angles in degrees.
pub fn rotation_matrix(rot_deg: [f64; 3]) -> [[f64; 3]; 3] {
    let [ax, ay, az] = rot_deg.map(|d| d * PI / 180.0);
    let (sx, cx) = ax.sin_cos();
    let (sy, cy) = ay.sin_cos();
    let (sz, cz) = az.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    matmul3(&rz, &matmul3(&ry, &rx))
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

/// Rigid 3D rotation about the volume center, trilinear, zero fill.
pub fn rotate_volume(v: &Volume, rot_deg: [f64; 3]) -> Result<Volume> {
    if rot_deg == [0.0; 3] {
        return Ok(v.clone());
    }
    let [nx, ny, nz] = v.dims();
    let r = rotation_matrix(rot_deg);
    let c = [nx, ny, nz].map(|n| (n as f64 - 1.0) / 2.0);
    let mut out = vec![0.0f32; v.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let d = [x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]];
                // Source = R^T d + c.
                let src: [f64; 3] =
                    std::array::from_fn(|i| (0..3).map(|k| r[k][i] * d[k]).sum::<f64>() + c[i]);
                out[(z * ny + y) * nx + x] = trilinear(v, src) as f32;
            }
        }
    }
    v.with_data(out)
}

fn trilinear(v: &Volume, p: [f64; 3]) -> f64 {
    let dims = v.dims();
    let base = p.map(f64::floor);
    let frac: [f64; 3] = std::array::from_fn(|i| p[i] - base[i]);
    let mut acc = 0.0;
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        let mut inside = true;
        for a in 0..3 {
            let off = (corner >> a) & 1;
            let wa = if off == 1 { frac[a] } else { 1.0 - frac[a] };
            let q = base[a] as i64 + off as i64;
            if wa == 0.0 || q < 0 || q >= dims[a] as i64 {
                inside = false;
                break;
            }
            w *= wa;
            idx[a] = q as usize;
        }
        if inside {
            acc += w * v.get(idx[0], idx[1], idx[2]) as f64;
        }
    }
    acc
}

/// `exp(-i 2pi (kx dx / nx + ky dy / ny))` for signed frequencies.
pub fn translation_phase(kx: i64, ky: i64, dims: (usize, usize), trans_px: (f64, f64)) -> Complex64 {
    let arg = -TAU
        * (kx as f64 * trans_px.0 / dims.0 as f64 + ky as f64 * trans_px.1 / dims.1 as f64);
    Complex64::from_polar(1.0, arg)
}

fn translation_phase_3d(k: [i64; 3], dims: [usize; 3], trans_px: [f64; 3]) -> Complex64 {
    let arg = -TAU * (0..3).map(|a| k[a] as f64 * trans_px[a] / dims[a] as f64).sum::<f64>();
    Complex64::from_polar(1.0, arg)
}

/// FFT bin of the `j`-th unit along an axis acquired in ascending signed order.
#[inline]
fn acquisition_bin(j: usize, n: usize) -> usize {
    (j + n / 2) % n
}

fn check_pow2(dims: &[usize]) -> Result<()> {
    for (axis, &d) in dims.iter().enumerate() {
        if !d.is_power_of_two() {
            return Err(Error::config(
                format!("dims[{axis}]"),
                format!("must be a power of two, got {d}"),
            ));
        }
    }
    Ok(())
}

/// Corrupted k-space of a 2D slice (before the inverse transform).
pub fn corrupt_slice_kspace(
    clean: &Slice,
    traj: &MotionTrajectory,
    spacing: (f32, f32),
    cfg: &SimConfig,
) -> Result<Vec<Complex64>> {
    let (nx, ny) = clean.dims();
    check_pow2(&[nx, ny])?;
    if traj.ordering != Ordering::Lines2d {
        return Err(Error::config("trajectory.ordering", "2D corruption needs lines2d"));
    }
    if traj.len() != ny {
        return Err(Error::shape(format!(
            "trajectory has {} states, slice has {ny} phase-encode lines",
            traj.len()
        )));
    }
    let fft = FftNd::new(&[nx, ny]);
    let mut spectra: HashMap<[u64; 3], Vec<Complex64>> = HashMap::new();
    let mut out = vec![Complex64::new(0.0, 0.0); nx * ny];
    for (j, state) in traj.states.iter().enumerate() {
        let spec = spectra.entry(state.rot_key()).or_insert_with(|| {
            let rotated = rotate_image_2d(clean, state.rot_deg[2]);
            let mut buf = to_complex(&rotated.data);
            fft.forward(&mut buf);
            buf
        });
        let dx = if cfg.pe_only { 0.0 } else { state.trans_mm[0] / spacing.0 as f64 };
        let dy = state.trans_mm[1] / spacing.1 as f64;
        let kyb = acquisition_bin(j, ny);
        let ky = signed_freq(kyb, ny);
        let row = kyb * nx;
        for kxb in 0..nx {
            let kx = signed_freq(kxb, nx);
            let phase = if dx == 0.0 && dy == 0.0 {
                Complex64::new(1.0, 0.0)
            } else {
                translation_phase(kx, ky, (nx, ny), (dx, dy))
            };
            out[row + kxb] = spec[row + kxb] * phase;
        }
    }
    Ok(out)
}

/// Corrupts one 2D slice with a line-wise trajectory.
pub fn corrupt_slice(
    clean: &Slice,
    traj: &MotionTrajectory,
    spacing: (f32, f32),
    cfg: &SimConfig,
) -> Result<Slice> {
    let (nx, ny) = clean.dims();
    let mut k = corrupt_slice_kspace(clean, traj, spacing, cfg)?;
    FftNd::new(&[nx, ny]).inverse(&mut k);
    real_part(k, "slice").map(|data| Slice { nx, ny, data })
}

fn real_part(k: Vec<Complex64>, what: &str) -> Result<Vec<f32>> {
    let max_imag = k.iter().fold(0.0f64, |m, c| m.max(c.im.abs()));
    log::debug!("{what}: discarded imaginary residual, max |im| = {max_imag:.3e}");
    let data: Vec<f32> = k.iter().map(|c| c.re as f32).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("{what}: non-finite corrupted value")));
    }
    Ok(data)
}

/// Full 3D corruption with a point-wise (ky, kz) trajectory.
pub fn corrupt_volume(clean: &Volume, traj: &MotionTrajectory, cfg: &SimConfig) -> Result<Volume> {
    let dims = clean.dims();
    let [nx, ny, nz] = dims;
    check_pow2(&dims)?;
    if traj.ordering != Ordering::Points3d {
        return Err(Error::config("trajectory.ordering", "3D corruption needs points3d"));
    }
    if traj.len() != ny * nz {
        return Err(Error::shape(format!(
            "trajectory has {} states, volume has {} phase-encode points",
            traj.len(),
            ny * nz
        )));
    }
    let spacing = clean.spacing();
    let fft = FftNd::new(&dims);
    let mut spectra: HashMap<[u64; 3], Vec<Complex64>> = HashMap::new();
    let mut out = vec![Complex64::new(0.0, 0.0); clean.len()];
    for (u, state) in traj.states.iter().enumerate() {
        if !spectra.contains_key(&state.rot_key()) {
            let rotated = rotate_volume(clean, state.rot_deg)?;
            let mut buf = to_complex(rotated.data());
            fft.forward(&mut buf);
            spectra.insert(state.rot_key(), buf);
        }
        let spec = &spectra[&state.rot_key()];
        let mut shift: [f64; 3] = std::array::from_fn(|a| state.trans_mm[a] / spacing[a] as f64);
        if cfg.pe_only {
            shift[0] = 0.0;
        }
        let kyb = acquisition_bin(u % ny, ny);
        let kzb = acquisition_bin(u / ny, nz);
        let row = (kzb * ny + kyb) * nx;
        let ky = signed_freq(kyb, ny);
        let kz = signed_freq(kzb, nz);
        for kxb in 0..nx {
            let kx = signed_freq(kxb, nx);
            let phase = if shift == [0.0; 3] {
                Complex64::new(1.0, 0.0)
            } else {
                translation_phase_3d([kx, ky, kz], dims, shift)
            };
            out[row + kxb] = spec[row + kxb] * phase;
        }
    }
    fft.inverse(&mut out);
    clean.with_data(real_part(out, "volume")?)
}

/// Corrupts every z-slice independently; slice `z` uses the trajectory
/// seeded by `mix(seed, z)`.
pub fn corrupt_subject(
    clean: &Volume,
    seed: u64,
    preset: &SeverityPreset,
    cfg: &SimConfig,
) -> Result<(Volume, Vec<MotionTrajectory>)> {
    let [_, ny, nz] = clean.dims();
    let sp = clean.spacing();
    let mut slices = Vec::with_capacity(nz);
    let mut trajs = Vec::with_capacity(nz);
    for z in 0..nz {
        let traj = generate_trajectory(seed::mix(seed, z as u64), ny, preset, Ordering::Lines2d)?;
        slices.push(corrupt_slice(&clean.slice(z)?, &traj, (sp[0], sp[1]), cfg)?);
        trajs.push(traj);
    }
    Ok((Volume::from_slices(&slices, sp)?, trajs))
}

/// Applies recorded per-slice trajectories (replay of `corrupt_subject`).
pub fn corrupt_subject_with(
    clean: &Volume,
    trajs: &[MotionTrajectory],
    cfg: &SimConfig,
) -> Result<Volume> {
    let nz = clean.dims()[2];
    if trajs.len() != 1 && trajs.len() != nz {
        return Err(Error::shape(format!(
            "{} trajectories for {nz} slices",
            trajs.len()
        )));
    }
    let sp = clean.spacing();
    let slices = (0..nz)
        .map(|z| {
            let t = &trajs[if trajs.len() == 1 { 0 } else { z }];
            corrupt_slice(&clean.slice(z)?, t, (sp[0], sp[1]), cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Volume::from_slices(&slices, sp)
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum TrajectoryFile {
    One(MotionTrajectory),
    Many(Vec<MotionTrajectory>),
}

/// Writes `.mtraj`: a single trajectory object, or an array of them (one per
/// slice).
pub fn save_trajectories(trajs: &[MotionTrajectory], path: impl AsRef<Path>) -> Result<()> {
    let file = if trajs.len() == 1 {
        TrajectoryFile::One(trajs[0].clone())
    } else {
        TrajectoryFile::Many(trajs.to_vec())
    };
    let path = path.as_ref();
    fs::write(path, serde_json::to_vec_pretty(&file)?).map_err(|e| Error::io_at(path, e))?;
    Ok(())
}

pub fn load_trajectories(path: impl AsRef<Path>) -> Result<Vec<MotionTrajectory>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io_at(path, e))?;
    let file: TrajectoryFile = serde_json::from_slice(&bytes)
        .map_err(|e| Error::format(e.column() as u64, format!("malformed trajectory: {e}")))?;
    Ok(match file {
        TrajectoryFile::One(t) => vec![t],
        TrajectoryFile::Many(v) => v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{make_phantom, PhantomSpec};

    fn phantom_slice(seed: u64) -> Slice {
        let v = make_phantom(&PhantomSpec::with_seed(seed, [64, 64, 16])).unwrap();
        v.slice(8).unwrap()
    }

    fn max_abs(a: &[f32], b: &[f32]) -> f32 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn no_peaks_means_zero_trajectory() {
        let p = SeverityPreset::new(Severity::Mild, 0, 2.0, 2.0);
        let t = generate_trajectory(1, 64, &p, Ordering::Lines2d).unwrap();
        assert!(t.is_zero());
    }

    #[test]
    fn trajectory_deterministic_and_bounded() {
        let p = Severity::Severe.preset();
        let a = generate_trajectory(5, 128, &p, Ordering::Lines2d).unwrap();
        let b = generate_trajectory(5, 128, &p, Ordering::Lines2d).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_zero());
        for s in &a.states {
            for v in s.rot_deg.iter().chain(&s.trans_mm) {
                assert!(v.abs() <= 7.0);
            }
        }
    }

    #[test]
    fn severe_reaches_large_amplitudes() {
        let p = Severity::Severe.preset();
        let largest = (0..50)
            .flat_map(|s| generate_trajectory(s, 64, &p, Ordering::Lines2d).unwrap().states)
            .flat_map(|s| s.rot_deg.into_iter().chain(s.trans_mm))
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(largest > 6.0 && largest <= 7.0, "{largest}");
    }

    #[test]
    fn mild_avoids_dc_region() {
        let p = Severity::Mild.preset();
        let (lo, hi) = dc_region(64);
        for s in 0..200 {
            let t = generate_trajectory(s, 64, &p, Ordering::Lines2d).unwrap();
            assert!(t.states[lo..hi].iter().all(MotionState::is_zero));
        }
    }

    #[test]
    fn short_trajectory_rejected() {
        assert!(generate_trajectory(0, 3, &Severity::Mild.preset(), Ordering::Lines2d).is_err());
    }

    #[test]
    fn rotation_zero_is_identity() {
        let s = phantom_slice(1);
        assert_eq!(rotate_image_2d(&s, 0.0), s);
    }

    #[test]
    fn rotation_90_is_permutation() {
        let s = phantom_slice(2);
        let r = rotate_image_2d(&s, 90.0);
        let n = s.nx;
        for y in 0..n {
            for x in 0..n {
                // Oracle: out(x, y) = in(y, n - 1 - x).
                let expect = s.get(y, n - 1 - x);
                assert!((r.get(x, y) - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rotation_roundtrip_interior() {
        let s = phantom_slice(3);
        let back = rotate_image_2d(&rotate_image_2d(&s, 5.0), -5.0);
        let (lo, hi) = (16, 48);
        let mut err = 0.0f32;
        for y in lo..hi {
            for x in lo..hi {
                err = err.max((back.get(x, y) - s.get(x, y)).abs());
            }
        }
        assert!(err < 5e-2, "{err}");
    }

    #[test]
    fn phase_factors() {
        assert_eq!(translation_phase(3, -2, (64, 64), (0.0, 0.0)), Complex64::new(1.0, 0.0));
        for kx in -32..32 {
            let f = translation_phase(kx, 0, (64, 64), (64.0, 0.0));
            assert!((f - Complex64::new(1.0, 0.0)).norm() < 1e-9);
            assert!((f.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_trajectory_identity() {
        let s = phantom_slice(4);
        let t = MotionTrajectory::zeros(Ordering::Lines2d, 64);
        let out = corrupt_slice(&s, &t, (1.0, 1.0), &SimConfig::default()).unwrap();
        assert!(max_abs(&out.data, &s.data) < 1e-4);
    }

    #[test]
    fn constant_translation_is_circular_shift() {
        let s = phantom_slice(5);
        let state = MotionState {
            rot_deg: [0.0; 3],
            trans_mm: [0.0, 3.0, 0.0],
        };
        let t = MotionTrajectory::constant(Ordering::Lines2d, 64, state);
        let out = corrupt_slice(&s, &t, (1.0, 1.0), &SimConfig::default()).unwrap();
        let mut shifted = Slice::zeros(64, 64);
        for y in 0..64 {
            for x in 0..64 {
                shifted.set(x, (y + 3) % 64, s.get(x, y));
            }
        }
        assert!(max_abs(&out.data, &shifted.data) < 1e-4);
    }

    #[test]
    fn zero_rotation_preserves_kspace_energy() {
        let s = phantom_slice(6);
        let mut t = generate_trajectory(9, 64, &Severity::Severe.preset(), Ordering::Lines2d).unwrap();
        for st in &mut t.states {
            st.rot_deg = [0.0; 3];
        }
        let k = corrupt_slice_kspace(&s, &t, (1.0, 1.0), &SimConfig::default()).unwrap();
        let mut clean = to_complex(&s.data);
        FftNd::new(&[64, 64]).forward(&mut clean);
        let e_out: f64 = k.iter().map(|c| c.norm_sqr()).sum();
        let e_in: f64 = clean.iter().map(|c| c.norm_sqr()).sum();
        assert!(((e_out - e_in) / e_in).abs() < 1e-12);
    }

    #[test]
    fn length_and_dims_errors() {
        let s = phantom_slice(7);
        let t = MotionTrajectory::zeros(Ordering::Lines2d, 32);
        assert!(matches!(
            corrupt_slice(&s, &t, (1.0, 1.0), &SimConfig::default()),
            Err(Error::Shape(_))
        ));
        let odd = Slice::zeros(48, 48);
        let t = MotionTrajectory::zeros(Ordering::Lines2d, 48);
        assert!(matches!(
            corrupt_slice(&odd, &t, (1.0, 1.0), &SimConfig::default()),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn subject_is_deterministic_and_slices_differ() {
        let v = make_phantom(&PhantomSpec::with_seed(3, [32, 32, 16])).unwrap();
        let p = Severity::Moderate.preset();
        let (a, ta) = corrupt_subject(&v, 42, &p, &SimConfig::default()).unwrap();
        let (b, _) = corrupt_subject(&v, 42, &p, &SimConfig::default()).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(ta.windows(2).any(|w| w[0] != w[1]));
        let replay = corrupt_subject_with(&v, &ta, &SimConfig::default()).unwrap();
        assert_eq!(replay.data(), a.data());
    }

    #[test]
    fn trajectory_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mtraj");
        let t = generate_trajectory(1, 16, &Severity::Severe.preset(), Ordering::Lines2d).unwrap();
        save_trajectories(&[t.clone()], &path).unwrap();
        assert_eq!(load_trajectories(&path).unwrap(), vec![t.clone()]);
        save_trajectories(&[t.clone(), t.clone()], &path).unwrap();
        assert_eq!(load_trajectories(&path).unwrap().len(), 2);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"ordering\": \"lines2d\""));
    }
}
