//! Raw slice kernels behind the differentiable operations.

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// True when `small` can be broadcast to `big`.
pub(crate) fn broadcastable_to(small: &[usize], big: &[usize]) -> bool {
    if small.len() > big.len() {
        return false;
    }
    let off = big.len() - small.len();
    small.iter().enumerate().all(|(i, &d)| d == 1 || d == big[off + i])
}

/// Strides of `small` laid out against the rank of `big`, zero on broadcast dims.
fn aligned_strides(small: &[usize], big: &[usize]) -> Vec<usize> {
    let off = big.len() - small.len();
    let mut strides = vec![0; big.len()];
    let mut acc = 1;
    for i in (0..small.len()).rev() {
        strides[off + i] = if small[i] == 1 { 0 } else { acc };
        acc *= small[i];
    }
    strides
}

fn for_each_mapped(small: &[usize], big: &[usize], mut f: impl FnMut(usize, usize)) {
    let strides = aligned_strides(small, big);
    let total: usize = big.iter().product();
    let rank = big.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for dst in 0..total {
        f(dst, src);
        // odometer increment
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            src += strides[d];
            if idx[d] < big[d] {
                break;
            }
            src -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_to(data: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return data.to_vec();
    }
    let mut out = vec![0.0; to.iter().product()];
    for_each_mapped(from, to, |dst, src| out[dst] = data[src]);
    out
}

pub(crate) fn sum_to(data: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return data.to_vec();
    }
    let mut out = vec![0.0; to.iter().product()];
    for_each_mapped(to, from, |src, dst| out[dst] += data[src]);
    out
}

/// `[m,k] x [k,n]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Geometry of a 2-D convolution over NCHW inputs with OIHW kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Option<Self> {
        if x.len() != 4 || k.len() != 4 || x[1] != k[1] || stride == 0 {
            return None;
        }
        let (h, w) = (x[2] + 2 * pad, x[3] + 2 * pad);
        if k[2] > h || k[3] > w {
            return None;
        }
        Some(ConvGeom {
            n: x[0],
            c: x[1],
            h: x[2],
            w: x[3],
            o: k[0],
            kh: k[2],
            kw: k[3],
            stride,
            pad,
            oh: (h - k[2]) / stride + 1,
            ow: (w - k[3]) / stride + 1,
        })
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.n, self.c, self.h, self.w]
    }

    pub fn kernel_shape(&self) -> Vec<usize> {
        vec![self.o, self.c, self.kh, self.kw]
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.oh, self.ow]
    }

    /// Output rows `oh` whose input row `oh*stride + k - pad` is in range.
    fn valid_range(&self, k: usize, out_len: usize, in_len: usize) -> (usize, usize) {
        // need 0 <= o*s + k - pad < in_len
        let s = self.stride;
        let lo = if k >= self.pad { 0 } else { (self.pad - k).div_ceil(s) };
        let hi_excl = if in_len + self.pad > k {
            ((in_len + self.pad - k - 1) / s + 1).min(out_len)
        } else {
            0
        };
        (lo, hi_excl.max(lo))
    }

    #[inline]
    /// Unfolds image `n` of `x` into a `[C*kh*kw, oh*ow]` column matrix
    /// (zero where the kernel overhangs the padding).
    fn im2col(&self, x: &[f64], n: usize, cols: &mut [f64]) {
        let (hw, ohw) = (self.h * self.w, self.oh * self.ow);
        cols.fill(0.0);
        for c in 0..self.c {
            let img = &x[(n * self.c + c) * hw..(n * self.c + c + 1) * hw];
            for ki in 0..self.kh {
                let (i_lo, i_hi) = self.valid_range(ki, self.oh, self.h);
                for kj in 0..self.kw {
                    let (j_lo, j_hi) = self.valid_range(kj, self.ow, self.w);
                    let row = &mut cols[((c * self.kh + ki) * self.kw + kj) * ohw..][..ohw];
                    for oi in i_lo..i_hi {
                        let src = &img[(oi * self.stride + ki - self.pad) * self.w..];
                        let dst = &mut row[oi * self.ow..(oi + 1) * self.ow];
                        for oj in j_lo..j_hi {
                            dst[oj] = src[oj * self.stride + kj - self.pad];
                        }
                    }
                }
            }
        }
    }

    /// Adds a column matrix back onto image `n` of `out` (adjoint of `im2col`).
    fn col2im(&self, cols: &[f64], n: usize, out: &mut [f64]) {
        let (hw, ohw) = (self.h * self.w, self.oh * self.ow);
        for c in 0..self.c {
            let img = &mut out[(n * self.c + c) * hw..(n * self.c + c + 1) * hw];
            for ki in 0..self.kh {
                let (i_lo, i_hi) = self.valid_range(ki, self.oh, self.h);
                for kj in 0..self.kw {
                    let (j_lo, j_hi) = self.valid_range(kj, self.ow, self.w);
                    let row = &cols[((c * self.kh + ki) * self.kw + kj) * ohw..][..ohw];
                    for oi in i_lo..i_hi {
                        let base = (oi * self.stride + ki - self.pad) * self.w;
                        let src = &row[oi * self.ow..(oi + 1) * self.ow];
                        for oj in j_lo..j_hi {
                            img[base + oj * self.stride + kj - self.pad] += src[oj];
                        }
                    }
                }
            }
        }
    }

    fn col_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn forward(&self, x: &[f64], k: &[f64]) -> Vec<f64> {
        let (ckk, ohw) = (self.col_len(), self.oh * self.ow);
        let mut out = Vec::with_capacity(self.n * self.o * ohw);
        let mut cols = vec![0.0; ckk * ohw];
        for n in 0..self.n {
            self.im2col(x, n, &mut cols);
            out.extend(matmul(k, &cols, self.o, ckk, ohw));
        }
        out
    }

    pub fn input_grad(&self, g: &[f64], k: &[f64]) -> Vec<f64> {
        let (ckk, ohw) = (self.col_len(), self.oh * self.ow);
        let kt = transpose(k, self.o, ckk);
        let mut out = vec![0.0; self.n * self.c * self.h * self.w];
        for n in 0..self.n {
            let cols = matmul(&kt, &g[n * self.o * ohw..(n + 1) * self.o * ohw], ckk, self.o, ohw);
            self.col2im(&cols, n, &mut out);
        }
        out
    }

    pub fn kernel_grad(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        let (ckk, ohw) = (self.col_len(), self.oh * self.ow);
        let mut out = vec![0.0; self.o * ckk];
        let mut cols = vec![0.0; ckk * ohw];
        for n in 0..self.n {
            self.im2col(x, n, &mut cols);
            let gn = &g[n * self.o * ohw..(n + 1) * self.o * ohw];
            // out[o, r] += sum_p g[o, p] * cols[r, p]
            for o in 0..self.o {
                let grow = &gn[o * ohw..(o + 1) * ohw];
                for r in 0..ckk {
                    let crow = &cols[r * ohw..(r + 1) * ohw];
                    out[o * ckk + r] += grow.iter().zip(crow).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        out
    }
}

/// `(outer, len, inner)` decomposition around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax(data: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| data[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = (0..len).map(|k| (data[at(k)] - max).exp()).sum();
            for k in 0..len {
                let z = data[at(k)] - max;
                out[at(k)] = if log { z - denom.ln() } else { z.exp() / denom };
            }
        }
    }
    out
}
