//! 2-D cross-correlation lowered to GEMM through im2col.

use super::tape::when;
use super::{Scalar, Tape, Tensor, Var};
use crate::error::{dim_err, Result};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_area(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let area = g.out_area();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * area..(row + 1) * area];
                for oy in 0..g.ho {
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let area = g.out_area();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * area..(row + 1) * area];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Cross-correlation of `x: [B,Cin,H,W]` with `weight: [Cout,Cin,k,k]`
    /// plus a per-output-channel `bias: [Cout]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let [b, cin, h, w] = self.value(x).dims4("conv2d")?;
        let [cout, wcin, k, k2] = self.value(weight).dims4("conv2d")?;
        if wcin != cin {
            return Err(dim_err("conv2d", format!("input channels {cin} vs weight channels {wcin}")));
        }
        if k != k2 || k % 2 == 0 {
            return Err(dim_err("conv2d", format!("kernel must be square and odd, got {k}x{k2}")));
        }
        if self.shape(bias) != [cout] {
            return Err(dim_err("conv2d", format!("bias {:?} vs out channels {cout}", self.shape(bias))));
        }
        if stride == 0 {
            return Err(dim_err("conv2d", "stride must be positive"));
        }
        let (span_h, span_w) = (h + 2 * pad, w + 2 * pad);
        if span_h < k || span_w < k || (span_h - k) % stride != 0 || (span_w - k) % stride != 0 {
            return Err(dim_err(
                "conv2d",
                format!("height/width ({h},{w}) with pad {pad}, kernel {k}, stride {stride} do not tile"),
            ));
        }
        let g = ConvGeom {
            cin,
            h,
            w,
            k,
            stride,
            pad,
            ho: (span_h - k) / stride + 1,
            wo: (span_w - k) / stride + 1,
        };
        let (patch, area) = (g.patch(), g.out_area());

        let xv = self.value(x).data();
        let wv = self.value(weight).data();
        let bv = self.value(bias).data();
        let mut out = vec![T::zero(); b * cout * area];
        let mut cols = vec![T::zero(); patch * area];
        for s in 0..b {
            im2col(&xv[s * cin * h * w..(s + 1) * cin * h * w], &g, &mut cols);
            let dst = &mut out[s * cout * area..(s + 1) * cout * area];
            for (co, chunk) in dst.chunks_exact_mut(area).enumerate() {
                chunk.fill(bv[co]);
            }
            T::gemm(false, false, cout, patch, area, T::one(), wv, &cols, T::one(), dst);
        }
        let value = Tensor::new(&[b, cout, g.ho, g.wo], out)?;

        Ok(self.record(&[x, weight, bias], value, move |ctx| {
            let (xv, wv, dy) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
            let mut dx = ctx.needs[0].then(|| vec![T::zero(); xv.len()]);
            let mut dw = ctx.needs[1].then(|| vec![T::zero(); wv.len()]);
            let mut cols = vec![T::zero(); patch * area];
            let mut dcols = vec![T::zero(); patch * area];
            for s in 0..b {
                let dys = &dy[s * cout * area..(s + 1) * cout * area];
                if let Some(dw) = dw.as_mut() {
                    im2col(&xv[s * cin * h * w..(s + 1) * cin * h * w], &g, &mut cols);
                    T::gemm(false, true, cout, area, patch, T::one(), dys, &cols, T::one(), dw);
                }
                if let Some(dx) = dx.as_mut() {
                    T::gemm(true, false, patch, cout, area, T::one(), wv, dys, T::zero(), &mut dcols);
                    col2im(&dcols, &g, &mut dx[s * cin * h * w..(s + 1) * cin * h * w]);
                }
            }
            let db = when(ctx.needs[2], || {
                let mut db = vec![T::zero(); cout];
                for s in 0..b {
                    for (co, acc) in db.iter_mut().enumerate() {
                        let base = (s * cout + co) * area;
                        *acc += dy[base..base + area].iter().copied().sum::<T>();
                    }
                }
                db
            });
            vec![dx, dw, db]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, bias: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
        let [b, cin, h, wd] = x.dims4("t").unwrap();
        let [cout, _, k, _] = w.dims4("t").unwrap();
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        Tensor::from_fn(&[b, cout, ho, wo], |idx| {
            let ox = idx % wo;
            let oy = (idx / wo) % ho;
            let co = (idx / (wo * ho)) % cout;
            let s = idx / (wo * ho * cout);
            let mut acc = bias[co];
            for c in 0..cin {
                for ki in 0..k {
                    for kj in 0..k {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += x.data()[((s * cin + c) * h + iy as usize) * wd + ix as usize]
                                * w.data()[((co * cin + c) * k + ki) * k + kj];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn matches_direct_loop_with_stride_and_padding() {
        for (stride, pad, k, h) in [(1, 1, 3, 5), (2, 1, 3, 7), (1, 0, 3, 5), (1, 2, 5, 6), (2, 0, 1, 5)] {
            let x = Tensor::<f64>::from_fn(&[2, 3, h, h], |i| ((i * 7919) % 13) as f64 / 6.0 - 1.0);
            let w = Tensor::<f64>::from_fn(&[4, 3, k, k], |i| ((i * 104729) % 11) as f64 / 5.0 - 1.0);
            let bias = [0.1, -0.2, 0.3, 0.0];
            let mut tape = Tape::new();
            let (xv, wv, bv) = (
                tape.constant(x.clone()),
                tape.constant(w.clone()),
                tape.constant(Tensor::new(&[4], bias.to_vec()).unwrap()),
            );
            let y = tape.conv2d(xv, wv, bv, stride, pad).unwrap();
            let want = naive_conv(&x, &w, &bias, stride, pad);
            assert_eq!(tape.shape(y), want.shape());
            for (a, b) in tape.value(y).data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad}");
            }
        }
    }

    #[test]
    fn identity_kernel_and_bias_only() {
        let x = Tensor::<f32>::from_fn(&[1, 2, 3, 3], |i| i as f32 * 0.5 - 2.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut w = Tensor::zeros(&[2, 2, 1, 1]);
        w.data_mut()[0] = 1.0;
        w.data_mut()[3] = 1.0;
        let wv = tape.constant(w);
        let bv = tape.constant(Tensor::zeros(&[2]));
        let y = tape.conv2d(xv, wv, bv, 1, 0).unwrap();
        assert_eq!(tape.value(y), &x);

        let zero = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w3 = tape.constant(Tensor::full(&[3, 2, 3, 3], 0.7));
        let b3 = tape.constant(Tensor::new(&[3], vec![1.5, -2.0, 0.25]).unwrap());
        let y = tape.conv2d(zero, w3, b3, 1, 1).unwrap();
        for (i, v) in tape.value(y).data().iter().enumerate() {
            assert_eq!(*v, [1.5, -2.0, 0.25][i / 16]);
        }
    }

    #[test]
    fn shape_errors_name_the_axis() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 5, 5]));
        let w = tape.constant(Tensor::zeros(&[3, 4, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let err = tape.conv2d(x, w, b, 1, 1).unwrap_err().to_string();
        assert!(err.contains("channels"), "{err}");
        let w_even = tape.constant(Tensor::zeros(&[3, 2, 2, 2]));
        assert!(tape.conv2d(x, w_even, b, 1, 1).is_err());
        let w_ok = tape.constant(Tensor::zeros(&[3, 2, 3, 3]));
        assert!(tape.conv2d(x, w_ok, b, 2, 0).is_ok());
        assert!(tape.conv2d(x, w_ok, b, 3, 0).is_err());
    }
}
