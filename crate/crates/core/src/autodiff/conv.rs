//! Same-padded stride-1 convolution kernels via im2col + GEMM.

use super::tensor::Real;

/// Geometry of one convolution call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// Unfolds one sample `[cin, h, w]` into `[cin*k*k, h*w]` with zero padding.
fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let r = (g.k / 2) as isize;
    let (h, w) = (g.h as isize, g.w as isize);
    let hw = g.hw();
    for ci in 0..g.cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let oy = ky as isize - r;
                let ox = kx as isize - r;
                for y in 0..h {
                    let sy = y + oy;
                    let drow = &mut dst[(y * w) as usize..((y + 1) * w) as usize];
                    if sy < 0 || sy >= h {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &plane[(sy * w) as usize..((sy + 1) * w) as usize];
                    for x in 0..w {
                        let sx = x + ox;
                        drow[x as usize] = if sx < 0 || sx >= w {
                            T::zero()
                        } else {
                            srow[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `[cin*k*k, h*w]` back into `[cin, h, w]`.
fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let r = (g.k / 2) as isize;
    let (h, w) = (g.h as isize, g.w as isize);
    let hw = g.hw();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let oy = ky as isize - r;
                let ox = kx as isize - r;
                for y in 0..h {
                    let sy = y + oy;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x + ox;
                        if sx >= 0 && sx < w {
                            plane[(sy * w + sx) as usize] += src[(y * w + x) as usize];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Real>(g: &ConvGeom, x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let hw = g.hw();
    let mut out = vec![T::zero(); g.n * g.cout * hw];
    let mut cols = vec![T::zero(); g.patch() * hw];
    for n in 0..g.n {
        im2col(g, &x[n * g.cin * hw..(n + 1) * g.cin * hw], &mut cols);
        let o = &mut out[n * g.cout * hw..(n + 1) * g.cout * hw];
        for (co, b) in bias.iter().enumerate() {
            o[co * hw..(co + 1) * hw].fill(*b);
        }
        T::gemm(
            g.cout,
            g.patch(),
            hw,
            weight,
            g.patch() as isize,
            1,
            &cols,
            hw as isize,
            1,
            T::one(),
            o,
            hw as isize,
            1,
        );
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub(crate) fn backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    gout: &[T],
    need_dx: bool,
) -> ConvGrads<T> {
    let hw = g.hw();
    let patch = g.patch();
    let mut dw = vec![T::zero(); g.cout * patch];
    let mut db = vec![T::zero(); g.cout];
    let mut dx = need_dx.then(|| vec![T::zero(); g.n * g.cin * hw]);
    let mut cols = vec![T::zero(); patch * hw];
    let mut dcols = vec![T::zero(); patch * hw];
    for n in 0..g.n {
        let go = &gout[n * g.cout * hw..(n + 1) * g.cout * hw];
        for co in 0..g.cout {
            db[co] += go[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
        }
        im2col(g, &x[n * g.cin * hw..(n + 1) * g.cin * hw], &mut cols);
        // dW += dOut [cout, hw] * cols^T [hw, patch]
        T::gemm(
            g.cout,
            hw,
            patch,
            go,
            hw as isize,
            1,
            &cols,
            1,
            hw as isize,
            T::one(),
            &mut dw,
            patch as isize,
            1,
        );
        if let Some(dx) = dx.as_mut() {
            // dcols = W^T [patch, cout] * dOut [cout, hw]
            T::gemm(
                patch,
                g.cout,
                hw,
                weight,
                1,
                patch as isize,
                go,
                hw as isize,
                1,
                T::zero(),
                &mut dcols,
                hw as isize,
                1,
            );
            col2im(g, &dcols, &mut dx[n * g.cin * hw..(n + 1) * g.cin * hw]);
        }
    }
    ConvGrads { dx, dw, db }
}
