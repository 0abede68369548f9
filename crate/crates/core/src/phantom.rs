//! Deterministic synthetic head phantoms.
//!
//! A phantom is a composition of ellipsoids: an outer "skull" shell, a brain
//! body, and `n_structures` randomly placed interior ellipsoids. The result
//! is smoothed with a separable Gaussian (sigma = 1 voxel) and masked so that
//! everything outside the skull ellipsoid is exactly zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub n_structures: usize,
    pub intensity_range: [f32; 2],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 0,
            dims: [64, 64, 32],
            spacing: [1.0, 1.0, 1.0],
            n_structures: 6,
            intensity_range: [0.1, 1.0],
        }
    }
}

impl PhantomSpec {
    pub fn with_seed(seed: u64, dims: [usize; 3]) -> Self {
        PhantomSpec {
            seed,
            dims,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (axis, &d) in self.dims.iter().enumerate() {
            if d < 16 {
                return Err(Error::config(
                    format!("dims[{axis}]"),
                    format!("must be >= 16, got {d}"),
                ));
            }
        }
        for axis in 0..2 {
            if !self.dims[axis].is_power_of_two() {
                return Err(Error::config(
                    format!("dims[{axis}]"),
                    format!("must be a power of two, got {}", self.dims[axis]),
                ));
            }
        }
        for (axis, s) in self.spacing.iter().enumerate() {
            if !(s.is_finite() && *s > 0.0) {
                return Err(Error::config(
                    format!("spacing[{axis}]"),
                    format!("must be positive, got {s}"),
                ));
            }
        }
        let [lo, hi] = self.intensity_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
            return Err(Error::config(
                "intensity_range",
                format!("need 0 <= lo < hi <= 1, got [{lo}, {hi}]"),
            ));
        }
        Ok(())
    }
}

struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
    /// Rotation about z, radians.
    angle: f64,
    value: f64,
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let dz = p[2] - self.center[2];
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.semi[0]).powi(2) + (v / self.semi[1]).powi(2) + (dz / self.semi[2]).powi(2)
            <= 1.0
    }
}

const SKULL_SEMI: [f64; 3] = [0.88, 0.94, 0.86];
const BRAIN_SCALE: f64 = 0.86;

/// Builds the phantom described by `spec`.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Volume> {
    spec.validate()?;
    let [nx, ny, nz] = spec.dims;
    let [lo, hi] = spec.intensity_range.map(f64::from);
    let span = hi - lo;

    let skull = Ellipsoid {
        center: [0.0; 3],
        semi: SKULL_SEMI,
        angle: 0.0,
        value: hi,
    };
    let brain = Ellipsoid {
        center: [0.0; 3],
        semi: SKULL_SEMI.map(|s| s * BRAIN_SCALE),
        angle: 0.0,
        value: lo + 0.35 * span,
    };

    let mut tex_rng = seed::child_rng(spec.seed, u64::MAX);
    let tex_freq: [f64; 3] = std::array::from_fn(|_| tex_rng.random_range(2.0..5.0));
    let tex_phase: [f64; 3] = std::array::from_fn(|_| tex_rng.random_range(0.0..std::f64::consts::TAU));

    let structures: Vec<Ellipsoid> = (0..spec.n_structures)
        .map(|k| {
            let mut rng = seed::child_rng(spec.seed, k as u64);
            // Center inside the inner part of the brain body.
            let center = loop {
                let c: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                if c.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                    break std::array::from_fn(|a| c[a] * 0.55 * brain.semi[a]);
                }
            };
            Ellipsoid {
                center,
                semi: std::array::from_fn(|a| rng.random_range(0.12..0.35) * brain.semi[a]),
                angle: rng.random_range(0.0..std::f64::consts::PI),
                value: rng.random_range(lo..=hi),
            }
        })
        .collect();

    let norm = |i: usize, n: usize| (i as f64 - (n as f64 - 1.0) / 2.0) / (n as f64 / 2.0);
    let mut raw = vec![0.0f64; nx * ny * nz];
    let mut mask = vec![false; nx * ny * nz];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [norm(x, nx), norm(y, ny), norm(z, nz)];
                let i = (z * ny + y) * nx + x;
                if !skull.contains(p) {
                    continue;
                }
                mask[i] = true;
                let mut v = skull.value;
                if brain.contains(p) {
                    let tex = (tex_freq[0] * p[0] * std::f64::consts::PI + tex_phase[0]).sin()
                        * (tex_freq[1] * p[1] * std::f64::consts::PI + tex_phase[1]).sin()
                        * (tex_freq[2] * p[2] * std::f64::consts::PI + tex_phase[2]).cos();
                    v = brain.value + 0.06 * span * tex;
                    for s in &structures {
                        if s.contains(p) {
                            v = s.value;
                        }
                    }
                }
                raw[i] = v;
            }
        }
    }

    let smoothed = gaussian_smooth_3d(&raw, spec.dims, 1.0);
    let data = smoothed
        .iter()
        .zip(&mask)
        .map(|(&v, &inside)| if inside { v.clamp(0.0, 1.0) as f32 } else { 0.0 })
        .collect();
    Volume::new(spec.dims, spec.spacing, data)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian with zero padding.
fn gaussian_smooth_3d(data: &[f64], dims: [usize; 3], sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let strides = [1usize, dims[0], dims[0] * dims[1]];
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let n = dims[axis] as i64;
        let stride = strides[axis];
        let mut out = vec![0.0; cur.len()];
        for (i, o) in out.iter_mut().enumerate() {
            let pos = ((i / stride) % dims[axis]) as i64;
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let q = pos + k as i64 - r;
                if q >= 0 && q < n {
                    acc += w * cur[(i as i64 + (q - pos) * stride as i64) as usize];
                }
            }
            *o = acc;
        }
        cur = out;
    }
    cur
}

/// Strictly increasing piecewise-linear intensity lookup through the origin.
#[derive(Debug, Clone)]
pub struct IntensityRemap {
    knots_x: Vec<f64>,
    knots_y: Vec<f64>,
}

impl IntensityRemap {
    pub fn seeded(seed: u64) -> Self {
        let mut rng = seed::rng(seed::mix(seed, 0xC0FFEE));
        let mut xs: Vec<f64> = (0..4).map(|_| rng.random_range(0.1..0.9)).collect();
        xs.sort_by(|a, b| a.total_cmp(b));
        xs.dedup();
        let mut knots_x = vec![0.0];
        knots_x.extend(xs);
        knots_x.push(1.0);
        let incs: Vec<f64> = (1..knots_x.len())
            .map(|i| (knots_x[i] - knots_x[i - 1]) * rng.random_range(0.25..2.5))
            .collect();
        let total: f64 = incs.iter().sum();
        let mut knots_y = vec![0.0];
        let mut acc = 0.0;
        for inc in incs {
            acc += inc / total;
            knots_y.push(acc);
        }
        *knots_y.last_mut().unwrap() = 1.0;
        IntensityRemap { knots_x, knots_y }
    }

    pub fn apply(&self, v: f32) -> f32 {
        let x = v as f64;
        let n = self.knots_x.len();
        // Segment index; values outside [0, 1] extend the end segments.
        let seg = match self.knots_x.iter().position(|&k| k > x) {
            Some(0) => 0,
            Some(i) => i - 1,
            None => n - 2,
        };
        let (x0, x1) = (self.knots_x[seg], self.knots_x[seg + 1]);
        let (y0, y1) = (self.knots_y[seg], self.knots_y[seg + 1]);
        let slope = (y1 - y0) / (x1 - x0);
        if seg == 0 {
            (slope * x) as f32
        } else {
            (y0 + slope * (x - x0)) as f32
        }
    }
}

/// Synthetic second contrast: a seeded monotone remap that keeps zero at zero.
pub fn make_contrast_variant(v: &Volume, seed: u64) -> Result<Volume> {
    let remap = IntensityRemap::seeded(seed);
    v.map(|x| remap.apply(x))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> PhantomSpec {
        PhantomSpec {
            seed,
            dims: [64, 64, 32],
            n_structures: 6,
            ..Default::default()
        }
    }

    #[test]
    fn range_and_background() {
        let v = make_phantom(&spec(7)).unwrap();
        let min = v.data().iter().cloned().fold(f32::INFINITY, f32::min);
        let max = v.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!(min, 0.0);
        assert!(max <= 1.0 && max > 0.0);
        // Corner voxel lies outside the skull.
        assert_eq!(v.get(0, 0, 16), 0.0);
        assert!(v.get(32, 32, 16) > 0.0);
    }

    #[test]
    fn deterministic() {
        let a = make_phantom(&spec(7)).unwrap();
        let b = make_phantom(&spec(7)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn seeds_differ() {
        let a = make_phantom(&spec(7)).unwrap();
        let b = make_phantom(&spec(8)).unwrap();
        let differing = a
            .data()
            .iter()
            .zip(b.data())
            .filter(|(x, y)| x != y)
            .count();
        assert!(differing as f64 >= 0.01 * a.len() as f64, "{differing}");
    }

    #[test]
    fn invalid_dims_name_field() {
        let mut s = spec(1);
        s.dims = [48, 64, 32];
        match make_phantom(&s) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "dims[0]"),
            other => panic!("{other:?}"),
        }
        s.dims = [64, 64, 8];
        match make_phantom(&s) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "dims[2]"),
            other => panic!("{other:?}"),
        }
        let mut s = spec(1);
        s.intensity_range = [0.5, 0.5];
        assert!(make_phantom(&s).is_err());
    }

    #[test]
    fn contrast_variant_constant_and_zero() {
        let v = Volume::new([4, 4, 1], [1.0; 3], vec![0.5; 16]).unwrap();
        let w = make_contrast_variant(&v, 3).unwrap();
        let r = IntensityRemap::seeded(3).apply(0.5);
        assert!(w.data().iter().all(|&x| x == r));
        let z = Volume::zeros([4, 4, 1], [1.0; 3]).unwrap();
        let wz = make_contrast_variant(&z, 3).unwrap();
        assert!(wz.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn contrast_variant_preserves_order() {
        let v = make_phantom(&spec(11)).unwrap();
        let w = make_contrast_variant(&v, 5).unwrap();
        let mut rng = seed::rng(99);
        for _ in 0..20000 {
            let a = rng.random_range(0..v.len());
            let b = rng.random_range(0..v.len());
            if v.data()[a] < v.data()[b] {
                assert!(w.data()[a] <= w.data()[b]);
            }
        }
    }
}
