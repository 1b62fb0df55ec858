//! Layer primitives recorded on the tape, each with its backward rule.

use super::tape::when;
use super::{Scalar, Tape, Tensor, Var};
use crate::error::{dim_err, Result};

/// Which axes a normalization layer pools statistics over.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Normalization<'a, T> {
    /// Per (sample, channel) over the spatial field.
    Instance,
    /// Per channel over (batch, spatial), using the statistics of this batch.
    BatchTrain,
    /// Per channel with frozen running statistics.
    BatchEval { mean: &'a [T], var: &'a [T] },
}

/// Batch statistics produced by [`Normalization::BatchTrain`]; `var` is the
/// unbiased estimate, ready to be folded into running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Prelu,
    Tanh,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    L1Mean,
    L2Mean,
}

fn same_shape<T: Scalar>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(dim_err(op, format!("{:?} vs {:?}", tape.shape(a), tape.shape(b))));
    }
    Ok(())
}

fn from_usize<T: Scalar>(n: usize) -> T {
    T::from_usize(n).expect("count fits scalar")
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    /// Mean over non-overlapping 2x2 windows.
    pub fn avg_pool2x2(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4("avg_pool2x2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(dim_err("avg_pool2x2", format!("height/width ({h},{w}) must be even")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let quarter = T::of(0.25);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * c * ho * wo];
        for p in 0..b * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let (r0, r1) = (2 * oy * w, (2 * oy + 1) * w);
                    out[(p * ho + oy) * wo + ox] =
                        (src[r0 + 2 * ox] + src[r0 + 2 * ox + 1] + src[r1 + 2 * ox] + src[r1 + 2 * ox + 1])
                            * quarter;
                }
            }
        }
        let value = Tensor::new(&[b, c, ho, wo], out)?;
        Ok(self.record(&[x], value, move |ctx| {
            let mut dx = vec![T::zero(); b * c * h * w];
            for p in 0..b * c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let g = ctx.grad[(p * ho + oy) * wo + ox] * quarter;
                        for (dy, dxo) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            dx[p * h * w + (2 * oy + dy) * w + 2 * ox + dxo] += g;
                        }
                    }
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Normalizes `x: [B,C,H,W]` then applies the per-channel affine map
    /// `gamma * x_hat + beta`.
    pub fn normalize(
        &mut self,
        x: Var,
        kind: Normalization<'_, T>,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let [b, c, h, w] = self.value(x).dims4("normalize")?;
        let area = h * w;
        if area == 0 || b == 0 {
            return Err(dim_err("normalize", "zero-size spatial field"));
        }
        if eps <= T::zero() {
            return Err(dim_err("normalize", "eps must be positive"));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(dim_err("normalize", format!("affine params must have shape [{c}]")));
        }
        // Each group is a list of contiguous spatial planes sharing statistics.
        let per_channel = !matches!(kind, Normalization::Instance);
        let groups: Vec<(usize, Vec<usize>)> = if per_channel {
            (0..c).map(|ch| (ch, (0..b).map(|s| (s * c + ch) * area).collect())).collect()
        } else {
            (0..b * c).map(|p| (p % c, vec![p * area])).collect()
        };
        let count = if per_channel { b * area } else { area };
        let n = from_usize::<T>(count);

        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); groups.len()];
        let mut stats = BatchStats { mean: vec![T::zero(); c], var: vec![T::zero(); c] };
        for (gi, (ch, starts)) in groups.iter().enumerate() {
            let (mean, var) = match kind {
                Normalization::BatchEval { mean, var } => (mean[*ch], var[*ch]),
                _ => {
                    let mut sum = T::zero();
                    for &s in starts {
                        sum += xv[s..s + area].iter().copied().sum::<T>();
                    }
                    let mean = sum / n;
                    let mut sq = T::zero();
                    for &s in starts {
                        sq += xv[s..s + area].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
                    }
                    (mean, sq / n)
                }
            };
            if kind == Normalization::BatchTrain {
                stats.mean[*ch] = mean;
                stats.var[*ch] = if count > 1 { var * n / (n - T::one()) } else { var };
            }
            let inv = T::one() / (var + eps).sqrt();
            inv_std[gi] = inv;
            for &s in starts {
                for i in s..s + area {
                    xhat[i] = (xv[i] - mean) * inv;
                }
            }
        }
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / area) % c;
                gv[ch] * v + bv[ch]
            })
            .collect();
        let value = Tensor::new(&[b, c, h, w], out)?;
        let frozen_stats = matches!(kind, Normalization::BatchEval { .. });
        let var = self.record(&[x, gamma, beta], value, move |ctx| {
            let (gv, dy) = (ctx.inputs[1].data(), ctx.grad);
            let dx = when(ctx.needs[0], || {
                let mut dx = vec![T::zero(); dy.len()];
                for (gi, (ch, starts)) in groups.iter().enumerate() {
                    let (gamma, inv) = (gv[*ch], inv_std[gi]);
                    if frozen_stats {
                        for &s in starts {
                            for i in s..s + area {
                                dx[i] = dy[i] * gamma * inv;
                            }
                        }
                        continue;
                    }
                    let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
                    for &s in starts {
                        for i in s..s + area {
                            let g = dy[i] * gamma;
                            sum_g += g;
                            sum_gx += g * xhat[i];
                        }
                    }
                    for &s in starts {
                        for i in s..s + area {
                            dx[i] = inv / n * (n * dy[i] * gamma - sum_g - xhat[i] * sum_gx);
                        }
                    }
                }
                dx
            });
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for (i, &g) in dy.iter().enumerate() {
                let ch = (i / area) % c;
                dgamma[ch] += g * xhat[i];
                dbeta[ch] += g;
            }
            vec![dx, Some(dgamma), Some(dbeta)]
        });
        Ok((var, (kind == Normalization::BatchTrain).then_some(stats)))
    }

    /// Elementwise activation. `slope` is required for PReLU: one learnable
    /// negative-side slope per channel (axis 1).
    pub fn activate(&mut self, x: Var, kind: Activation, slope: Option<Var>) -> Result<Var> {
        match kind {
            Activation::Tanh => Ok(self.unary(x, |v| v.tanh(), |_, y| T::one() - y * y)),
            Activation::Sigmoid => Ok(self.unary(x, sigmoid, |_, y| y * (T::one() - y))),
            Activation::Prelu => {
                let slope = slope.ok_or_else(|| dim_err("activate", "prelu needs a slope tensor"))?;
                self.prelu(x, slope)
            }
        }
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (T::one() - y))
    }

    /// Elementwise map with derivative expressed through input and output.
    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var {
        let value = self.value(x).map(f);
        self.record(&[x], value, move |ctx| {
            let (xv, yv) = (ctx.inputs[0].data(), ctx.output.data());
            vec![Some(
                ctx.grad.iter().zip(xv.iter().zip(yv)).map(|(&g, (&a, &b))| g * df(a, b)).collect(),
            )]
        })
    }

    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(dim_err("prelu", format!("need a channel axis, got {shape:?}")));
        }
        let c = shape[1];
        if self.shape(slope) != [c] {
            return Err(dim_err("prelu", format!("slope {:?} vs channels {c}", self.shape(slope))));
        }
        let inner: usize = shape[2..].iter().product();
        let sv = self.value(slope).data();
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if v >= T::zero() { v } else { sv[(i / inner) % c] * v })
            .collect();
        let value = Tensor::new(&shape, out)?;
        Ok(self.record(&[x, slope], value, move |ctx| {
            let (xv, sv, dy) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
            let dx = when(ctx.needs[0], || {
                dy.iter()
                    .zip(xv)
                    .enumerate()
                    .map(|(i, (&g, &v))| if v >= T::zero() { g } else { g * sv[(i / inner) % c] })
                    .collect()
            });
            let ds = when(ctx.needs[1], || {
                let mut ds = vec![T::zero(); c];
                for (i, (&g, &v)) in dy.iter().zip(xv).enumerate() {
                    if v < T::zero() {
                        ds[(i / inner) % c] += g * v;
                    }
                }
                ds
            });
            vec![dx, ds]
        }))
    }

    /// Softmax over the spatial positions of each (sample, channel) map.
    pub fn spatial_softmax(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4("spatial_softmax")?;
        let area = h * w;
        let mut out = self.value(x).data().to_vec();
        for map in out.chunks_exact_mut(area.max(1)) {
            let max = map.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in map.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            map.iter_mut().for_each(|v| *v /= sum);
        }
        let value = Tensor::new(&[b, c, h, w], out)?;
        Ok(self.record(&[x], value, move |ctx| {
            let (y, dy) = (ctx.output.data(), ctx.grad);
            let mut dx = vec![T::zero(); y.len()];
            for ((ym, gm), dm) in y.chunks_exact(area).zip(dy.chunks_exact(area)).zip(dx.chunks_exact_mut(area)) {
                let dot: T = ym.iter().zip(gm).map(|(&a, &b)| a * b).sum();
                for ((d, &yv), &g) in dm.iter_mut().zip(ym).zip(gm) {
                    *d = yv * (g - dot);
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Spatial mean per channel: `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4("global_avg_pool")?;
        let area = h * w;
        if area == 0 {
            return Err(dim_err("global_avg_pool", "zero-size spatial field"));
        }
        let n = from_usize::<T>(area);
        let out: Vec<T> = self.value(x).data().chunks_exact(area).map(|m| m.iter().copied().sum::<T>() / n).collect();
        let value = Tensor::new(&[b, c], out)?;
        Ok(self.record(&[x], value, move |ctx| {
            vec![Some(ctx.grad.iter().flat_map(|&g| std::iter::repeat_n(g / n, area)).collect())]
        }))
    }

    /// Affine map `x W^T + b` for `x: [B,C]`, `W: [O,C]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        let (&[b, c], &[o, wc]) = (&xs[..], &ws[..]) else {
            return Err(dim_err("linear", format!("expected [B,C] and [O,C], got {xs:?} and {ws:?}")));
        };
        if c != wc || self.shape(bias) != [o] {
            return Err(dim_err("linear", format!("x {xs:?}, weight {ws:?}, bias {:?}", self.shape(bias))));
        }
        let bv = self.value(bias).data();
        let mut out: Vec<T> = (0..b * o).map(|i| bv[i % o]).collect();
        T::gemm(false, true, b, c, o, T::one(), self.value(x).data(), self.value(weight).data(), T::one(), &mut out);
        let value = Tensor::new(&[b, o], out)?;
        Ok(self.record(&[x, weight, bias], value, move |ctx| {
            let (xv, wv, dy) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
            let dx = when(ctx.needs[0], || {
                let mut dx = vec![T::zero(); b * c];
                T::gemm(false, false, b, o, c, T::one(), dy, wv, T::zero(), &mut dx);
                dx
            });
            let dw = when(ctx.needs[1], || {
                let mut dw = vec![T::zero(); o * c];
                T::gemm(true, false, o, b, c, T::one(), dy, xv, T::zero(), &mut dw);
                dw
            });
            let db = when(ctx.needs[2], || {
                let mut db = vec![T::zero(); o];
                for row in dy.chunks_exact(o) {
                    db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                }
                db
            });
            vec![dx, dw, db]
        }))
    }

    /// Joins `a` then `b` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ba, ca, ha, wa] = self.value(a).dims4("concat_channels")?;
        let [bb, cb, hb, wb] = self.value(b).dims4("concat_channels")?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(dim_err(
                "concat_channels",
                format!("batch/height/width differ: ({ba},{ha},{wa}) vs ({bb},{hb},{wb})"),
            ));
        }
        let area = ha * wa;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ba * (ca + cb) * area);
        for s in 0..ba {
            out.extend_from_slice(&av[s * ca * area..(s + 1) * ca * area]);
            out.extend_from_slice(&bv[s * cb * area..(s + 1) * cb * area]);
        }
        let value = Tensor::new(&[ba, ca + cb, ha, wa], out)?;
        Ok(self.record(&[a, b], value, move |ctx| {
            let dy = ctx.grad;
            let stride = (ca + cb) * area;
            let da = when(ctx.needs[0], || {
                (0..ba).flat_map(|s| dy[s * stride..s * stride + ca * area].iter().copied()).collect()
            });
            let db = when(ctx.needs[1], || {
                (0..ba).flat_map(|s| dy[s * stride + ca * area..(s + 1) * stride].iter().copied()).collect()
            });
            vec![da, db]
        }))
    }

    /// Joins `[B, k_i]` matrices side by side into `[B, sum k_i]`.
    pub fn concat_columns(&mut self, items: &[Var]) -> Result<Var> {
        let mut widths = Vec::with_capacity(items.len());
        let mut rows = None;
        for &v in items {
            let &[b, k] = self.shape(v) else {
                return Err(dim_err("concat_columns", format!("expected rank 2, got {:?}", self.shape(v))));
            };
            if *rows.get_or_insert(b) != b {
                return Err(dim_err("concat_columns", "row counts differ"));
            }
            widths.push(k);
        }
        let b = rows.ok_or_else(|| dim_err("concat_columns", "empty list"))?;
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); b * total];
        let mut col = 0;
        for (&v, &k) in items.iter().zip(&widths) {
            let src = self.value(v).data();
            for r in 0..b {
                out[r * total + col..r * total + col + k].copy_from_slice(&src[r * k..(r + 1) * k]);
            }
            col += k;
        }
        let value = Tensor::new(&[b, total], out)?;
        Ok(self.record(items, value, move |ctx| {
            let mut col = 0;
            widths
                .iter()
                .enumerate()
                .map(|(i, &k)| {
                    let start = col;
                    col += k;
                    when(ctx.needs[i], || {
                        (0..b).flat_map(|r| ctx.grad[r * total + start..r * total + start + k].iter().copied()).collect()
                    })
                })
                .collect()
        }))
    }

    /// Mean absolute or mean squared difference, as a scalar.
    pub fn reduce(&mut self, a: Var, b: Var, kind: Reduction) -> Result<Var> {
        same_shape(self, "reduce", a, b)?;
        let n = from_usize::<T>(self.value(a).numel().max(1));
        let diff = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y);
        let total: T = match kind {
            Reduction::L1Mean => diff.map(|d| d.abs()).sum(),
            Reduction::L2Mean => diff.map(|d| d * d).sum(),
        };
        let value = Tensor::scalar(total / n);
        Ok(self.record(&[a, b], value, move |ctx| {
            let g = ctx.grad[0] / n;
            let local: Vec<T> = ctx.inputs[0]
                .data()
                .iter()
                .zip(ctx.inputs[1].data())
                .map(|(&x, &y)| match kind {
                    Reduction::L1Mean => g * (x - y).signum() * T::from_u8(u8::from(x != y)).unwrap(),
                    Reduction::L2Mean => g * (T::one() + T::one()) * (x - y),
                })
                .collect();
            let neg = when(ctx.needs[1], || local.iter().map(|&v| -v).collect());
            vec![Some(local), neg]
        }))
    }

    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        self.reduce(a, b, Reduction::L1Mean)
    }

    pub fn l2_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        self.reduce(a, b, Reduction::L2Mean)
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn elementwise_sum(&mut self, items: &[Var]) -> Result<Var> {
        let first = *items.first().ok_or_else(|| dim_err("elementwise_sum", "empty list"))?;
        for &v in &items[1..] {
            same_shape(self, "elementwise_sum", first, v)?;
        }
        let mut out = self.value(first).clone();
        for &v in &items[1..] {
            out.data_mut().iter_mut().zip(self.value(v).data()).for_each(|(o, &x)| *o += x);
        }
        let k = items.len();
        Ok(self.record(items, out, move |ctx| {
            (0..k).map(|i| when(ctx.needs[i], || ctx.grad.to_vec())).collect()
        }))
    }

    /// Sum over the channel axis, keeping it: `[B,C,H,W] -> [B,1,H,W]`.
    pub fn sum_channels(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4("sum_channels")?;
        let area = h * w;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * area];
        for s in 0..b {
            let dst = &mut out[s * area..(s + 1) * area];
            for ch in 0..c {
                let src = &xv[(s * c + ch) * area..(s * c + ch + 1) * area];
                dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v);
            }
        }
        let value = Tensor::new(&[b, 1, h, w], out)?;
        Ok(self.record(&[x], value, move |ctx| {
            let mut dx = Vec::with_capacity(b * c * area);
            for s in 0..b {
                for _ in 0..c {
                    dx.extend_from_slice(&ctx.grad[s * area..(s + 1) * area]);
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let out: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a), out)?;
        Ok(self.record(&[a, b], value, |ctx| {
            let (av, bv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
            vec![
                when(ctx.needs[0], || g.iter().zip(bv).map(|(&g, &b)| g * b).collect()),
                when(ctx.needs[1], || g.iter().zip(av).map(|(&g, &a)| g * a).collect()),
            ]
        }))
    }

    /// Value-identical copy through which no gradient flows.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let n = self.value(x).numel();
        self.record(&[x], value, move |ctx| vec![Some(vec![ctx.grad[0]; n])])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.scale(s, T::one() / from_usize::<T>(n.max(1)))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.record(&[x], value, move |ctx| vec![Some(ctx.grad.iter().map(|&g| g * factor).collect())])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_sum(&[a, b])
    }

    /// `sum_i w_i * x_i` over equally shaped tensors.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let (first, _) = *terms.first().ok_or_else(|| dim_err("weighted_sum", "empty list"))?;
        for &(v, _) in &terms[1..] {
            same_shape(self, "weighted_sum", first, v)?;
        }
        let mut out = Tensor::zeros(self.shape(first));
        for &(v, wt) in terms {
            out.data_mut().iter_mut().zip(self.value(v).data()).for_each(|(o, &x)| *o += wt * x);
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let weights: Vec<T> = terms.iter().map(|t| t.1).collect();
        Ok(self.record(&inputs, out, move |ctx| {
            weights
                .iter()
                .enumerate()
                .map(|(i, &wt)| when(ctx.needs[i], || ctx.grad.iter().map(|&g| g * wt).collect()))
                .collect()
        }))
    }
}
