//! Multi-dimensional DFTs over row-major complex buffers (x fastest).
//!
//! Forward transforms are unnormalized; inverse transforms divide by the
//! number of samples so that `inverse(forward(x)) == x` up to rounding.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

pub use rustfft::num_complex::Complex64 as C64;

/// Plans for an N-dimensional grid (N = 2 or 3).
pub struct FftNd {
    dims: Vec<usize>,
    forward: Vec<Arc<dyn Fft<f64>>>,
    inverse: Vec<Arc<dyn Fft<f64>>>,
}

impl FftNd {
    pub fn new(dims: &[usize]) -> Self {
        let mut planner = FftPlanner::new();
        FftNd {
            dims: dims.to_vec(),
            forward: dims.iter().map(|&n| planner.plan_fft_forward(n)).collect(),
            inverse: dims.iter().map(|&n| planner.plan_fft_inverse(n)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn forward(&self, buf: &mut [Complex64]) {
        self.run(buf, &self.forward);
    }

    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.run(buf, &self.inverse);
        let scale = 1.0 / self.len() as f64;
        for v in buf.iter_mut() {
            *v *= scale;
        }
    }

    fn run(&self, buf: &mut [Complex64], plans: &[Arc<dyn Fft<f64>>]) {
        assert_eq!(buf.len(), self.len(), "buffer does not match FFT grid");
        let mut stride = 1;
        for (axis, &n) in self.dims.iter().enumerate() {
            let plan = &plans[axis];
            if stride == 1 {
                plan.process(buf);
            } else {
                // Gather each line along `axis`, transform, scatter back.
                let mut line = vec![Complex64::new(0.0, 0.0); n];
                let block = stride * n;
                for outer in (0..buf.len()).step_by(block) {
                    for inner in 0..stride {
                        let base = outer + inner;
                        for (k, l) in line.iter_mut().enumerate() {
                            *l = buf[base + k * stride];
                        }
                        plan.process(&mut line);
                        for (k, l) in line.iter().enumerate() {
                            buf[base + k * stride] = *l;
                        }
                    }
                }
            }
            stride *= n;
        }
    }
}

/// Maps an FFT bin index in `[0, n)` to its signed frequency in `[-n/2, n/2)`.
#[inline]
pub fn signed_freq(k: usize, n: usize) -> i64 {
    if k < n.div_ceil(2) {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

pub fn to_complex(data: &[f32]) -> Vec<Complex64> {
    data.iter().map(|&v| Complex64::new(v as f64, 0.0)).collect()
}
