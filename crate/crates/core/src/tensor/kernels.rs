//! Raw numeric kernels behind the graph operations.

use rayon::prelude::*;

use super::numel;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Output shape of a same-rank broadcast where each axis is equal or 1.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}: rank differs")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

/// For every flat index of `out`, the flat index it reads in `input`.
pub(crate) fn broadcast_index(out: &[usize], input: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut in_strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        in_strides[d] = if input[d] == 1 { 0 } else { acc };
        acc *= input[d];
    }
    let total = numel(out);
    let mut map = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        map.push(offset);
        for d in (0..rank).rev() {
            counter[d] += 1;
            offset += in_strides[d];
            if counter[d] < out[d] {
                break;
            }
            offset -= in_strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    map
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        let [batch, cin, h, w] = input[..] else {
            return Err(Error::shape(format!("conv2d input must be rank 4, got {input:?}")));
        };
        let [cout, cpg, kh, kw] = weight[..] else {
            return Err(Error::shape(format!("conv2d weight must be rank 4, got {weight:?}")));
        };
        if groups == 0 || stride == 0 {
            return Err(Error::shape("conv2d stride and groups must be positive"));
        }
        if cin % groups != 0 || cout % groups != 0 || cin / groups != cpg {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input has {cin} channels, weight expects {} ({groups} groups)",
                cpg * groups
            )));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape("conv2d kernel larger than padded input"));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom { batch, cin, h, w, cout, kh, kw, stride, pad, groups, oh, ow })
    }

    fn cin_per_group(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_per_group(&self) -> usize {
        self.cout / self.groups
    }

    fn rows(&self) -> usize {
        self.cin_per_group() * self.kh * self.kw
    }

    fn spatial_out(&self) -> usize {
        self.oh * self.ow
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.oh, self.ow]
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds the channels of group `g` of one image into a `rows x (oh*ow)` matrix.
fn im2col<T: Scalar>(x: &[T], geom: &ConvGeom, g: usize, cols: &mut [T]) {
    let cpg = geom.cin_per_group();
    let so = geom.spatial_out();
    let (h, w) = (geom.h as isize, geom.w as isize);
    for ci in 0..cpg {
        let plane = &x[(g * cpg + ci) * geom.h * geom.w..][..geom.h * geom.w];
        for ky in 0..geom.kh {
            for kx in 0..geom.kw {
                let row = (ci * geom.kh + ky) * geom.kw + kx;
                let dst = &mut cols[row * so..(row + 1) * so];
                for oy in 0..geom.oh {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    let line = &mut dst[oy * geom.ow..(oy + 1) * geom.ow];
                    if iy < 0 || iy >= h {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * geom.w..][..geom.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        *v = if ix < 0 || ix >= w { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds a column matrix back into the image.
fn col2im<T: Scalar>(cols: &[T], geom: &ConvGeom, g: usize, dx: &mut [T]) {
    let cpg = geom.cin_per_group();
    let so = geom.spatial_out();
    let (h, w) = (geom.h as isize, geom.w as isize);
    for ci in 0..cpg {
        let plane = &mut dx[(g * cpg + ci) * geom.h * geom.w..][..geom.h * geom.w];
        for ky in 0..geom.kh {
            for kx in 0..geom.kw {
                let row = (ci * geom.kh + ky) * geom.kw + kx;
                let src = &cols[row * so..(row + 1) * so];
                for oy in 0..geom.oh {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * geom.w..][..geom.w];
                    for ox in 0..geom.ow {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += src[oy * geom.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Columns of group `g` for one image, borrowing the input when pointwise.
fn columns<'a, T: Scalar>(x: &'a [T], geom: &ConvGeom, g: usize, buf: &'a mut Vec<T>) -> &'a [T] {
    if geom.is_pointwise() {
        let cpg = geom.cin_per_group();
        let hw = geom.h * geom.w;
        &x[g * cpg * hw..(g + 1) * cpg * hw]
    } else {
        buf.resize(geom.rows() * geom.spatial_out(), T::zero());
        im2col(x, geom, g, buf);
        buf
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    geom: &ConvGeom,
) -> Vec<T> {
    let in_item = geom.cin * geom.h * geom.w;
    let so = geom.spatial_out();
    let out_item = geom.cout * so;
    let rows = geom.rows();
    let cog = geom.cout_per_group();
    let mut out = vec![T::zero(); geom.batch * out_item];
    out.par_chunks_mut(out_item).enumerate().for_each(|(b, out_b)| {
        let xb = &x[b * in_item..(b + 1) * in_item];
        let mut buf = Vec::new();
        for g in 0..geom.groups {
            let cols = columns(xb, geom, g, &mut buf);
            let wg = &weight[g * cog * rows..(g + 1) * cog * rows];
            let og = &mut out_b[g * cog * so..(g + 1) * cog * so];
            T::gemm(cog, rows, so, T::one(), wg, rows as isize, 1, cols, so as isize, 1, T::zero(), og, so as isize, 1);
        }
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                out_b[co * so..(co + 1) * so].iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    dout: &[T],
    x: &[T],
    weight: &[T],
    geom: &ConvGeom,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let in_item = geom.cin * geom.h * geom.w;
    let so = geom.spatial_out();
    let out_item = geom.cout * so;
    let rows = geom.rows();
    let cog = geom.cout_per_group();

    // Per-item partials; reduced in batch order so the result is independent of scheduling.
    let partials: Vec<(Vec<T>, Vec<T>)> = (0..geom.batch)
        .into_par_iter()
        .map(|b| {
            let xb = &x[b * in_item..(b + 1) * in_item];
            let db = &dout[b * out_item..(b + 1) * out_item];
            let mut dx = if need_input { vec![T::zero(); in_item] } else { Vec::new() };
            let mut dw = if need_weight { vec![T::zero(); weight.len()] } else { Vec::new() };
            let mut buf = Vec::new();
            let mut dcols = Vec::new();
            for g in 0..geom.groups {
                let dg = &db[g * cog * so..(g + 1) * cog * so];
                if need_weight {
                    let cols = columns(xb, geom, g, &mut buf);
                    let dwg = &mut dw[g * cog * rows..(g + 1) * cog * rows];
                    // dW = dOut · colsᵀ
                    T::gemm(cog, so, rows, T::one(), dg, so as isize, 1, cols, 1, so as isize, T::zero(), dwg, rows as isize, 1);
                }
                if need_input {
                    let wg = &weight[g * cog * rows..(g + 1) * cog * rows];
                    if geom.is_pointwise() {
                        let cpg = geom.cin_per_group();
                        let dxg = &mut dx[g * cpg * so..(g + 1) * cpg * so];
                        T::gemm(rows, cog, so, T::one(), wg, 1, rows as isize, dg, so as isize, 1, T::one(), dxg, so as isize, 1);
                    } else {
                        dcols.resize(rows * so, T::zero());
                        // dCols = Wᵀ · dOut
                        T::gemm(rows, cog, so, T::one(), wg, 1, rows as isize, dg, so as isize, 1, T::zero(), &mut dcols, so as isize, 1);
                        col2im(&dcols, geom, g, &mut dx);
                    }
                }
            }
            (dx, dw)
        })
        .collect();

    let input = need_input.then(|| {
        let mut dx = Vec::with_capacity(geom.batch * in_item);
        for (p, _) in &partials {
            dx.extend_from_slice(p);
        }
        dx
    });
    let weight_grad = need_weight.then(|| {
        let mut dw = vec![T::zero(); weight.len()];
        for (_, p) in &partials {
            for (a, &b) in dw.iter_mut().zip(p) {
                *a += b;
            }
        }
        dw
    });
    let bias = need_bias.then(|| {
        let mut dbias = vec![T::zero(); geom.cout];
        for b in 0..geom.batch {
            for (co, acc) in dbias.iter_mut().enumerate() {
                let s = &dout[b * out_item + co * so..b * out_item + (co + 1) * so];
                *acc += s.iter().copied().sum::<T>();
            }
        }
        dbias
    });
    ConvGrads { input, weight: weight_grad, bias }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct MatmulGeom {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub transpose_b: bool,
}

impl MatmulGeom {
    pub fn new(a: &[usize], b: &[usize], transpose_b: bool) -> Result<Self> {
        if a.len() < 2 || a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2] {
            return Err(Error::shape(format!("batched matmul of {a:?} and {b:?}")));
        }
        let r = a.len();
        let (m, k) = (a[r - 2], a[r - 1]);
        let (kb, n) = if transpose_b { (b[r - 1], b[r - 2]) } else { (b[r - 2], b[r - 1]) };
        if k != kb {
            return Err(Error::shape(format!(
                "batched matmul inner extents differ: {a:?} x {b:?} (transpose_b = {transpose_b})"
            )));
        }
        Ok(MatmulGeom { batch: numel(&a[..r - 2]), m, k, n, transpose_b })
    }

    /// Row and column strides of the `k x n` right operand.
    fn b_strides(&self) -> (isize, isize) {
        if self.transpose_b {
            (1, self.k as isize)
        } else {
            (self.n as isize, 1)
        }
    }
}

pub(crate) fn bmm_forward<T: Scalar>(a: &[T], b: &[T], g: &MatmulGeom) -> Vec<T> {
    let (m, k, n) = (g.m, g.k, g.n);
    let (rsb, csb) = g.b_strides();
    let mut out = vec![T::zero(); g.batch * m * n];
    out.par_chunks_mut(m * n).enumerate().for_each(|(i, o)| {
        T::gemm(m, k, n, T::one(), &a[i * m * k..][..m * k], k as isize, 1, &b[i * k * n..][..k * n], rsb, csb, T::zero(), o, n as isize, 1);
    });
    out
}

/// Gradients of `C = A·B` (or `A·Bᵀ`) with respect to both operands.
pub(crate) fn bmm_backward<T: Scalar>(
    dc: &[T],
    a: &[T],
    b: &[T],
    g: &MatmulGeom,
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (m, k, n) = (g.m, g.k, g.n);
    let (rsb, csb) = g.b_strides();
    let da = need_a.then(|| {
        let mut da = vec![T::zero(); g.batch * m * k];
        da.par_chunks_mut(m * k).enumerate().for_each(|(i, d)| {
            // dA = dC · Bᵀ, where B is the k x n operand.
            T::gemm(m, n, k, T::one(), &dc[i * m * n..][..m * n], n as isize, 1, &b[i * k * n..][..k * n], csb, rsb, T::zero(), d, k as isize, 1);
        });
        da
    });
    let db = need_b.then(|| {
        let mut db = vec![T::zero(); g.batch * k * n];
        db.par_chunks_mut(k * n).enumerate().for_each(|(i, d)| {
            let ai = &a[i * m * k..][..m * k];
            let dci = &dc[i * m * n..][..m * n];
            // dB = Aᵀ · dC, written in the storage layout of B.
            let (rs, cs) = if g.transpose_b { (1, k as isize) } else { (n as isize, 1) };
            T::gemm(k, m, n, T::one(), ai, 1, k as isize, dci, n as isize, 1, T::zero(), d, rs, cs);
        });
        db
    });
    (da, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[1, 1, 4, 4], &[1, 3, 4, 4]).unwrap(), vec![1, 3, 4, 4]);
        assert!(broadcast_shape(&[1, 2, 4, 4], &[1, 3, 4, 4]).is_err());
        assert!(broadcast_shape(&[3, 4], &[1, 3, 4]).is_err());
    }

    #[test]
    fn broadcast_index_replicates_channel() {
        let map = broadcast_index(&[1, 3, 1, 2], &[1, 1, 1, 2]);
        assert_eq!(map, vec![0, 1, 0, 1, 0, 1]);
        let map = broadcast_index(&[2, 2], &[2, 1]);
        assert_eq!(map, vec![0, 0, 1, 1]);
    }

    #[test]
    fn conv_channel_mismatch_is_rejected() {
        assert!(ConvGeom::new(&[1, 3, 4, 4], &[2, 2, 3, 3], 1, 1, 1).is_err());
        let g = ConvGeom::new(&[1, 4, 4, 4], &[4, 1, 3, 3], 1, 1, 4).unwrap();
        assert_eq!(g.out_shape(), vec![1, 4, 4, 4]);
    }

    #[test]
    fn strided_conv_shape() {
        let g = ConvGeom::new(&[1, 1, 5, 5], &[1, 1, 3, 3], 2, 1, 1).unwrap();
        assert_eq!((g.oh, g.ow), (3, 3));
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)>
        let geom = ConvGeom::new(&[1, 2, 4, 5], &[1, 2, 3, 3], 1, 1, 1).unwrap();
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let c: Vec<f64> = (0..geom.rows() * geom.spatial_out()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&x, &geom, 0, &mut cols);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&c, &geom, 0, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
