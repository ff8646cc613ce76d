//! 3D convolution kernels (im2col + GEMM) and nearest-neighbour upsampling.
//!
//! Layout is `[batch, channels, d0, d1, d2]` with `d2` fastest. Weights are
//! `[out_channels, in_channels, k0, k1, k2]`. 2D convolutions are expressed
//! as 3D ones with a unit kernel extent along the last axis.

use super::tensor::{Array, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    /// Cubic kernel with "same"-style padding.
    pub fn cube(kernel: usize, stride: usize) -> Self {
        Self {
            kernel: [kernel; 3],
            stride: [stride; 3],
            pad: [kernel / 2; 3],
        }
    }

    /// Planar kernel for `[h, w, 1]` slices.
    pub fn planar(kernel: usize, stride: usize) -> Self {
        Self {
            kernel: [kernel, kernel, 1],
            stride: [stride, stride, 1],
            pad: [kernel / 2, kernel / 2, 0],
        }
    }

    pub fn pointwise() -> Self {
        Self::cube(1, 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.pad == [0; 3]
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn out_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = dims[a] + 2 * self.pad[a];
            assert!(
                padded >= self.kernel[a],
                "kernel {:?} larger than padded input {:?}",
                self.kernel,
                dims
            );
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        out
    }
}

pub(crate) fn spatial(shape: &[usize]) -> [usize; 3] {
    assert_eq!(shape.len(), 5, "expected [n, c, d0, d1, d2], got {shape:?}");
    [shape[2], shape[3], shape[4]]
}

/// Walks every (row, column) slot of the im2col matrix, calling `f(row, col, src)`
/// where `src` is the flat input offset within one sample or `None` for padding.
#[inline]
fn for_each_tap(
    channels: usize,
    dims: [usize; 3],
    geom: &ConvGeom,
    out: [usize; 3],
    mut f: impl FnMut(usize, usize, Option<usize>),
) {
    let [k0, k1, k2] = geom.kernel;
    let [s0, s1, s2] = geom.stride;
    let [p0, p1, p2] = geom.pad;
    let [d0, d1, d2] = dims;
    let [o0, o1, o2] = out;
    let n_out = o0 * o1 * o2;
    let vox = d0 * d1 * d2;
    for c in 0..channels {
        for a in 0..k0 {
            for b in 0..k1 {
                for e in 0..k2 {
                    let row = ((c * k0 + a) * k1 + b) * k2 + e;
                    let base = row * n_out;
                    for x in 0..o0 {
                        let i0 = (x * s0 + a) as isize - p0 as isize;
                        let in0 = i0 >= 0 && (i0 as usize) < d0;
                        for y in 0..o1 {
                            let i1 = (y * s1 + b) as isize - p1 as isize;
                            let in1 = in0 && i1 >= 0 && (i1 as usize) < d1;
                            let col0 = (x * o1 + y) * o2;
                            for z in 0..o2 {
                                let i2 = (z * s2 + e) as isize - p2 as isize;
                                let src = if in1 && i2 >= 0 && (i2 as usize) < d2 {
                                    Some(c * vox + (i0 as usize * d1 + i1 as usize) * d2 + i2 as usize)
                                } else {
                                    None
                                };
                                f(row, base + col0 + z, src);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: Real>(input: &[T], channels: usize, dims: [usize; 3], geom: &ConvGeom, cols: &mut [T]) {
    let out = geom.out_dims(dims);
    for_each_tap(channels, dims, geom, out, |_, slot, src| {
        cols[slot] = match src {
            Some(i) => input[i],
            None => T::zero(),
        };
    });
}

fn col2im<T: Real>(cols: &[T], channels: usize, dims: [usize; 3], geom: &ConvGeom, grad: &mut [T]) {
    let out = geom.out_dims(dims);
    for_each_tap(channels, dims, geom, out, |_, slot, src| {
        if let Some(i) = src {
            grad[i] = grad[i] + cols[slot];
        }
    });
}

pub fn conv_forward<T: Real>(x: &Array<T>, w: &Array<T>, bias: Option<&Array<T>>, geom: &ConvGeom) -> Array<T> {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(ws.len(), 5, "conv weight must be 5-D, got {ws:?}");
    let (n, cin, cout) = (xs[0], xs[1], ws[0]);
    assert_eq!(ws[1], cin, "conv expects {} input channels, got {}", ws[1], cin);
    assert_eq!(&ws[2..], &geom.kernel, "weight kernel does not match geometry");
    let dims = spatial(xs);
    let out_dims = geom.out_dims(dims);
    let n_in: usize = dims.iter().product();
    let n_out: usize = out_dims.iter().product();
    let k = cin * geom.taps();

    let mut out = Array::zeros(&[n, cout, out_dims[0], out_dims[1], out_dims[2]]);
    let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); k * n_out] };
    for s in 0..n {
        let x_s = &x.data()[s * cin * n_in..(s + 1) * cin * n_in];
        let cols_ref: &[T] = if geom.is_pointwise() {
            x_s
        } else {
            im2col(x_s, cin, dims, geom, &mut cols);
            &cols
        };
        let out_s = &mut out.data_mut()[s * cout * n_out..(s + 1) * cout * n_out];
        if let Some(b) = bias {
            for (o, row) in out_s.chunks_mut(n_out).enumerate() {
                row.fill(b.data()[o]);
            }
        }
        T::gemm(
            cout,
            k,
            n_out,
            T::one(),
            w.data(),
            k as isize,
            1,
            cols_ref,
            n_out as isize,
            1,
            T::one(),
            out_s,
            n_out as isize,
            1,
        );
    }
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Array<T>>,
    pub weight: Array<T>,
    pub bias: Array<T>,
}

pub fn conv_backward<T: Real>(
    x: &Array<T>,
    w: &Array<T>,
    geom: &ConvGeom,
    grad_out: &Array<T>,
    need_input: bool,
) -> ConvGrads<T> {
    let xs = x.shape();
    let (n, cin, cout) = (xs[0], xs[1], w.shape()[0]);
    let dims = spatial(xs);
    let out_dims = geom.out_dims(dims);
    let n_in: usize = dims.iter().product();
    let n_out: usize = out_dims.iter().product();
    let k = cin * geom.taps();

    let mut dw = Array::zeros(w.shape());
    let mut db = Array::zeros(&[cout]);
    let mut dx = need_input.then(|| Array::zeros(xs));
    let pointwise = geom.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * n_out] };
    let mut dcols = vec![T::zero(); k * n_out];

    for s in 0..n {
        let x_s = &x.data()[s * cin * n_in..(s + 1) * cin * n_in];
        let g_s = &grad_out.data()[s * cout * n_out..(s + 1) * cout * n_out];
        for (o, row) in g_s.chunks(n_out).enumerate() {
            db.data_mut()[o] = db.data()[o] + row.iter().copied().sum::<T>();
        }
        let cols_ref: &[T] = if pointwise {
            x_s
        } else {
            im2col(x_s, cin, dims, geom, &mut cols);
            &cols
        };
        // dW += dOut · colsᵀ
        T::gemm(
            cout,
            n_out,
            k,
            T::one(),
            g_s,
            n_out as isize,
            1,
            cols_ref,
            1,
            n_out as isize,
            T::one(),
            dw.data_mut(),
            k as isize,
            1,
        );
        if let Some(dx) = dx.as_mut() {
            // dCols = Wᵀ · dOut
            T::gemm(
                k,
                cout,
                n_out,
                T::one(),
                w.data(),
                1,
                k as isize,
                g_s,
                n_out as isize,
                1,
                T::zero(),
                &mut dcols,
                n_out as isize,
                1,
            );
            let dx_s = &mut dx.data_mut()[s * cin * n_in..(s + 1) * cin * n_in];
            if pointwise {
                dx_s.copy_from_slice(&dcols);
            } else {
                col2im(&dcols, cin, dims, geom, dx_s);
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// Nearest-neighbour upsampling by 2 along all three spatial axes.
pub fn upsample2_forward<T: Real>(x: &Array<T>) -> Array<T> {
    let xs = x.shape();
    let [d0, d1, d2] = spatial(xs);
    let planes = xs[0] * xs[1];
    let (u0, u1, u2) = (2 * d0, 2 * d1, 2 * d2);
    let mut out = Array::zeros(&[xs[0], xs[1], u0, u1, u2]);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..planes {
        let sb = p * d0 * d1 * d2;
        let db = p * u0 * u1 * u2;
        for a in 0..u0 {
            for b in 0..u1 {
                let srow = sb + ((a / 2) * d1 + b / 2) * d2;
                let drow = db + (a * u1 + b) * u2;
                for c in 0..u2 {
                    dst[drow + c] = src[srow + c / 2];
                }
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(input_shape: &[usize], grad_out: &Array<T>) -> Array<T> {
    let [d0, d1, d2] = spatial(input_shape);
    let planes = input_shape[0] * input_shape[1];
    let (u0, u1, u2) = (2 * d0, 2 * d1, 2 * d2);
    let mut dx = Array::zeros(input_shape);
    let g = grad_out.data();
    let dst = dx.data_mut();
    for p in 0..planes {
        let sb = p * d0 * d1 * d2;
        let gb = p * u0 * u1 * u2;
        for a in 0..u0 {
            for b in 0..u1 {
                let srow = sb + ((a / 2) * d1 + b / 2) * d2;
                let grow = gb + (a * u1 + b) * u2;
                for c in 0..u2 {
                    dst[srow + c / 2] = dst[srow + c / 2] + g[grow + c];
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-summation convolution used as an oracle for the im2col path.
    fn naive_conv(x: &Array<f64>, w: &Array<f64>, b: &Array<f64>, g: &ConvGeom) -> Array<f64> {
        let xs = x.shape();
        let ws = w.shape();
        let dims = spatial(xs);
        let od = g.out_dims(dims);
        let mut out = Array::zeros(&[xs[0], ws[0], od[0], od[1], od[2]]);
        let mut idx = 0;
        for n in 0..xs[0] {
            for o in 0..ws[0] {
                for p in 0..od[0] {
                    for q in 0..od[1] {
                        for r in 0..od[2] {
                            let mut acc = b.data()[o];
                            for c in 0..xs[1] {
                                for a in 0..ws[2] {
                                    for bb in 0..ws[3] {
                                        for e in 0..ws[4] {
                                            let i0 = (p * g.stride[0] + a) as isize - g.pad[0] as isize;
                                            let i1 = (q * g.stride[1] + bb) as isize - g.pad[1] as isize;
                                            let i2 = (r * g.stride[2] + e) as isize - g.pad[2] as isize;
                                            if i0 < 0 || i1 < 0 || i2 < 0 {
                                                continue;
                                            }
                                            let (i0, i1, i2) = (i0 as usize, i1 as usize, i2 as usize);
                                            if i0 >= dims[0] || i1 >= dims[1] || i2 >= dims[2] {
                                                continue;
                                            }
                                            let xv = x.data()[(((n * xs[1] + c) * dims[0] + i0) * dims[1] + i1) * dims[2] + i2];
                                            let wv = w.data()[(((o * ws[1] + c) * ws[2] + a) * ws[3] + bb) * ws[4] + e];
                                            acc += xv * wv;
                                        }
                                    }
                                }
                            }
                            out.data_mut()[idx] = acc;
                            idx += 1;
                        }
                    }
                }
            }
        }
        out
    }

    fn lcg(seed: u64, n: usize) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn im2col_matches_direct_summation() {
        for geom in [
            ConvGeom::cube(3, 1),
            ConvGeom::cube(3, 2),
            ConvGeom::pointwise(),
            ConvGeom::planar(3, 1),
        ] {
            let x = Array::from_vec(&[2, 3, 6, 4, 4], lcg(1, 2 * 3 * 96));
            let wshape = [5, 3, geom.kernel[0], geom.kernel[1], geom.kernel[2]];
            let wn: usize = wshape.iter().product();
            let w = Array::from_vec(&wshape, lcg(2, wn));
            let b = Array::from_vec(&[5], lcg(3, 5));
            let fast = conv_forward(&x, &w, Some(&b), &geom);
            let slow = naive_conv(&x, &w, &b, &geom);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12, "{geom:?}");
        }
    }

    #[test]
    fn strided_output_halves_even_dims() {
        assert_eq!(ConvGeom::cube(3, 2).out_dims([32, 32, 16]), [16, 16, 8]);
        assert_eq!(ConvGeom::cube(3, 1).out_dims([8, 8, 4]), [8, 8, 4]);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = Array::from_vec(&[1, 2, 2, 3, 2], lcg(4, 24));
        let g = Array::from_vec(&[1, 2, 4, 6, 4], lcg(5, 192));
        let up = upsample2_forward(&x);
        let lhs: f64 = up.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let back = upsample2_backward(x.shape(), &g);
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
