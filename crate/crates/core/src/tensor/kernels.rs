// Raw numeric kernels over flat row-major buffers. Shape validation happens in
// the tape; these functions assume consistent inputs.

use super::{broadcast_offsets, counter, strides};
use crate::error::{Error, Result};

/// `c = a·b + beta·c` for strided row-major views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the debug assertions above document the bounds every caller
    // upholds; matrixmultiply only touches elements inside those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

pub(crate) struct MatmulPlan {
    pub out_shape: Vec<usize>,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub batch: usize,
    /// Matrix index into `a`/`b` for every output batch entry.
    pub a_idx: Vec<usize>,
    pub b_idx: Vec<usize>,
    /// `b` carries no batch dimensions and `a` is not broadcast: one gemm.
    pub flat: bool,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InnerExtent {
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::InnerExtent {
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let batch_shape = if a_batch.is_empty() && b_batch.is_empty() {
        vec![]
    } else {
        let ab = if a_batch.is_empty() { vec![1] } else { a_batch.to_vec() };
        let bb = if b_batch.is_empty() { vec![1] } else { b_batch.to_vec() };
        super::broadcast_shape(&ab, &bb).map_err(|_| Error::Broadcast {
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })?
    };
    let batch: usize = batch_shape.iter().product();
    let (a_idx, b_idx) = if batch_shape.is_empty() {
        (vec![0], vec![0])
    } else {
        let ab = if a_batch.is_empty() { vec![1] } else { a_batch.to_vec() };
        let bb = if b_batch.is_empty() { vec![1] } else { b_batch.to_vec() };
        (
            broadcast_offsets(&batch_shape, &ab),
            broadcast_offsets(&batch_shape, &bb),
        )
    };
    let a_count: usize = a_batch.iter().product();
    let b_count: usize = b_batch.iter().product();
    let flat = b_count == 1 && a_count == batch.max(1);
    let mut out_shape = batch_shape;
    out_shape.push(m);
    out_shape.push(n);
    Ok(MatmulPlan {
        out_shape,
        m,
        k,
        n,
        batch: batch.max(1),
        a_idx,
        b_idx,
        flat,
    })
}

pub(crate) fn matmul_forward(plan: &MatmulPlan, a: &[f64], b: &[f64]) -> Vec<f64> {
    let (m, k, n) = (plan.m, plan.k, plan.n);
    counter::record((plan.batch * m * k * n) as u64);
    let mut out = vec![0.0; plan.batch * m * n];
    if plan.flat {
        gemm(plan.batch * m, k, n, a, k, 1, b, n, 1, 0.0, &mut out, n, 1);
        return out;
    }
    for i in 0..plan.batch {
        let ao = plan.a_idx[i] * m * k;
        let bo = plan.b_idx[i] * k * n;
        gemm(
            m,
            k,
            n,
            &a[ao..ao + m * k],
            k,
            1,
            &b[bo..bo + k * n],
            n,
            1,
            0.0,
            &mut out[i * m * n..(i + 1) * m * n],
            n,
            1,
        );
    }
    out
}

/// Gradients of `a·b` given the output gradient `g`.
pub(crate) fn matmul_backward(
    plan: &MatmulPlan,
    a: &[f64],
    b: &[f64],
    g: &[f64],
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut ga = need_a.then(|| vec![0.0; a.len()]);
    let mut gb = need_b.then(|| vec![0.0; b.len()]);
    if plan.flat {
        let rows = plan.batch * m;
        if let Some(ga) = ga.as_mut() {
            // ga[rows,k] = g[rows,n] · bᵀ
            gemm(rows, n, k, g, n, 1, b, 1, n, 0.0, ga, k, 1);
        }
        if let Some(gb) = gb.as_mut() {
            // gb[k,n] = aᵀ[k,rows] · g[rows,n]
            gemm(k, rows, n, a, 1, k, g, n, 1, 0.0, gb, n, 1);
        }
        return (ga, gb);
    }
    for i in 0..plan.batch {
        let ao = plan.a_idx[i] * m * k;
        let bo = plan.b_idx[i] * k * n;
        let gi = &g[i * m * n..(i + 1) * m * n];
        if let Some(ga) = ga.as_mut() {
            gemm(
                m,
                n,
                k,
                gi,
                n,
                1,
                &b[bo..bo + k * n],
                1,
                n,
                1.0,
                &mut ga[ao..ao + m * k],
                k,
                1,
            );
        }
        if let Some(gb) = gb.as_mut() {
            gemm(
                k,
                m,
                n,
                &a[ao..ao + m * k],
                1,
                k,
                gi,
                n,
                1,
                1.0,
                &mut gb[bo..bo + k * n],
                n,
                1,
            );
        }
    }
    (ga, gb)
}

// ── convolution ──────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_sp: [usize; 3],
    pub k: [usize; 3],
    pub s: [usize; 3],
    pub p: [usize; 3],
    pub out_sp: [usize; 3],
}

impl ConvGeom {
    /// Geometry of a forward convolution reading `in_sp`.
    pub fn forward(in_sp: [usize; 3], k: [usize; 3], s: [usize; 3], p: [usize; 3]) -> Result<Self> {
        let mut out_sp = [0; 3];
        for d in 0..3 {
            if s[d] == 0 || k[d] == 0 || in_sp[d] + 2 * p[d] < k[d] {
                return Err(Error::InvalidShape {
                    shape: in_sp.to_vec(),
                    reason: format!(
                        "kernel {:?} stride {:?} padding {:?} leaves no output",
                        k, s, p
                    ),
                });
            }
            out_sp[d] = (in_sp[d] + 2 * p[d] - k[d]) / s[d] + 1;
        }
        Ok(Self { in_sp, k, s, p, out_sp })
    }

    /// Geometry of the convolution whose adjoint maps `out_sp` (the transposed
    /// conv input) to `(out_sp - 1)·s − 2p + k`.
    pub fn transposed(t_in_sp: [usize; 3], k: [usize; 3], s: [usize; 3], p: [usize; 3]) -> Result<Self> {
        let mut in_sp = [0; 3];
        for d in 0..3 {
            let full = (t_in_sp[d] - 1) * s[d] + k[d];
            if s[d] == 0 || full <= 2 * p[d] {
                return Err(Error::InvalidShape {
                    shape: t_in_sp.to_vec(),
                    reason: format!(
                        "transposed kernel {:?} stride {:?} padding {:?} leaves no output",
                        k, s, p
                    ),
                });
            }
            in_sp[d] = full - 2 * p[d];
        }
        let g = Self::forward(in_sp, k, s, p)?;
        debug_assert_eq!(g.out_sp, t_in_sp);
        Ok(g)
    }

    pub fn kvol(&self) -> usize {
        self.k.iter().product()
    }

    pub fn in_n(&self) -> usize {
        self.in_sp.iter().product()
    }

    pub fn out_n(&self) -> usize {
        self.out_sp.iter().product()
    }

    pub fn is_pointwise(&self) -> bool {
        self.k == [1, 1, 1] && self.s == [1, 1, 1] && self.p == [0, 0, 0]
    }
}

#[inline]
fn src_index(o: usize, s: usize, k: usize, p: usize, n: usize) -> Option<usize> {
    let i = (o * s + k) as isize - p as isize;
    (i >= 0 && (i as usize) < n).then_some(i as usize)
}

/// Unfolds `x` (channels × in volume) into columns (channels·kvol × out volume).
pub(crate) fn im2col(x: &[f64], channels: usize, g: &ConvGeom) -> Vec<f64> {
    let [ix, iy, iz] = g.in_sp;
    let [ox, oy, oz] = g.out_sp;
    let out_n = g.out_n();
    let mut cols = vec![0.0; channels * g.kvol() * out_n];
    let mut row = 0;
    for c in 0..channels {
        let xc = &x[c * ix * iy * iz..(c + 1) * ix * iy * iz];
        for kx in 0..g.k[0] {
            for ky in 0..g.k[1] {
                for kz in 0..g.k[2] {
                    let dst = &mut cols[row * out_n..(row + 1) * out_n];
                    for a in 0..ox {
                        let Some(sx) = src_index(a, g.s[0], kx, g.p[0], ix) else { continue };
                        for b in 0..oy {
                            let Some(sy) = src_index(b, g.s[1], ky, g.p[1], iy) else { continue };
                            let base_src = (sx * iy + sy) * iz;
                            let base_dst = (a * oy + b) * oz;
                            for cz in 0..oz {
                                if let Some(sz) = src_index(cz, g.s[2], kz, g.p[2], iz) {
                                    dst[base_dst + cz] = xc[base_src + sz];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates columns back into `x`.
pub(crate) fn col2im(cols: &[f64], channels: usize, g: &ConvGeom, x: &mut [f64]) {
    let [ix, iy, iz] = g.in_sp;
    let [ox, oy, oz] = g.out_sp;
    let out_n = g.out_n();
    let mut row = 0;
    for c in 0..channels {
        let xc = &mut x[c * ix * iy * iz..(c + 1) * ix * iy * iz];
        for kx in 0..g.k[0] {
            for ky in 0..g.k[1] {
                for kz in 0..g.k[2] {
                    let src = &cols[row * out_n..(row + 1) * out_n];
                    for a in 0..ox {
                        let Some(sx) = src_index(a, g.s[0], kx, g.p[0], ix) else { continue };
                        for b in 0..oy {
                            let Some(sy) = src_index(b, g.s[1], ky, g.p[1], iy) else { continue };
                            let base_x = (sx * iy + sy) * iz;
                            let base_c = (a * oy + b) * oz;
                            for cz in 0..oz {
                                if let Some(sz) = src_index(cz, g.s[2], kz, g.p[2], iz) {
                                    xc[base_x + sz] += src[base_c + cz];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn columns<'a>(x: &'a [f64], channels: usize, g: &ConvGeom) -> std::borrow::Cow<'a, [f64]> {
    if g.is_pointwise() {
        std::borrow::Cow::Borrowed(x)
    } else {
        std::borrow::Cow::Owned(im2col(x, channels, g))
    }
}

/// Forward convolution. `w` is `[cout, cin, k…]`, `x` is `[batch, cin, in…]`.
pub(crate) fn conv_forward(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    batch: usize,
    cin: usize,
    cout: usize,
    g: &ConvGeom,
) -> Vec<f64> {
    let (in_n, out_n, kk) = (g.in_n(), g.out_n(), cin * g.kvol());
    counter::record((batch * cout * kk * out_n) as u64);
    let mut out = vec![0.0; batch * cout * out_n];
    for bi in 0..batch {
        let cols = columns(&x[bi * cin * in_n..(bi + 1) * cin * in_n], cin, g);
        let ob = &mut out[bi * cout * out_n..(bi + 1) * cout * out_n];
        for (co, chunk) in ob.chunks_mut(out_n).enumerate() {
            chunk.fill(bias[co]);
        }
        gemm(cout, kk, out_n, w, kk, 1, &cols, out_n, 1, 1.0, ob, out_n, 1);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    x: &[f64],
    w: &[f64],
    g_out: &[f64],
    batch: usize,
    cin: usize,
    cout: usize,
    g: &ConvGeom,
    need: [bool; 3],
) -> [Option<Vec<f64>>; 3] {
    let (in_n, out_n, kk) = (g.in_n(), g.out_n(), cin * g.kvol());
    let mut gx = need[0].then(|| vec![0.0; x.len()]);
    let mut gw = need[1].then(|| vec![0.0; w.len()]);
    let mut gb = need[2].then(|| vec![0.0; cout]);
    for bi in 0..batch {
        let go = &g_out[bi * cout * out_n..(bi + 1) * cout * out_n];
        if let Some(gb) = gb.as_mut() {
            for (co, chunk) in go.chunks(out_n).enumerate() {
                gb[co] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(gw) = gw.as_mut() {
            let cols = columns(&x[bi * cin * in_n..(bi + 1) * cin * in_n], cin, g);
            // gw[cout,kk] += go[cout,out_n] · colsᵀ
            gemm(cout, out_n, kk, go, out_n, 1, &cols, 1, out_n, 1.0, gw, kk, 1);
        }
        if let Some(gx) = gx.as_mut() {
            let gxb = &mut gx[bi * cin * in_n..(bi + 1) * cin * in_n];
            if g.is_pointwise() {
                gemm(cin, cout, out_n, w, 1, cin, go, out_n, 1, 1.0, gxb, out_n, 1);
            } else {
                let mut dcols = vec![0.0; kk * out_n];
                // dcols[kk,out_n] = wᵀ[kk,cout] · go
                gemm(kk, cout, out_n, w, 1, kk, go, out_n, 1, 0.0, &mut dcols, out_n, 1);
                col2im(&dcols, cin, g, gxb);
            }
        }
    }
    [gx, gw, gb]
}

/// Transposed convolution: `y` is `[batch, c_hi, g.out…]`, `w` is
/// `[c_hi, c_lo, k…]`, output is `[batch, c_lo, g.in…]`.
pub(crate) fn conv_transpose_forward(
    y: &[f64],
    w: &[f64],
    bias: &[f64],
    batch: usize,
    c_hi: usize,
    c_lo: usize,
    g: &ConvGeom,
) -> Vec<f64> {
    let (in_n, out_n, kk) = (g.in_n(), g.out_n(), c_lo * g.kvol());
    counter::record((batch * c_hi * kk * out_n) as u64);
    let mut out = vec![0.0; batch * c_lo * in_n];
    let mut cols = vec![0.0; kk * out_n];
    for bi in 0..batch {
        let yb = &y[bi * c_hi * out_n..(bi + 1) * c_hi * out_n];
        // cols[kk,out_n] = wᵀ[kk,c_hi] · y[c_hi,out_n]
        gemm(kk, c_hi, out_n, w, 1, kk, yb, out_n, 1, 0.0, &mut cols, out_n, 1);
        let ob = &mut out[bi * c_lo * in_n..(bi + 1) * c_lo * in_n];
        for (c, chunk) in ob.chunks_mut(in_n).enumerate() {
            chunk.fill(bias[c]);
        }
        col2im(&cols, c_lo, g, ob);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose_backward(
    y: &[f64],
    w: &[f64],
    g_out: &[f64],
    batch: usize,
    c_hi: usize,
    c_lo: usize,
    g: &ConvGeom,
    need: [bool; 3],
) -> [Option<Vec<f64>>; 3] {
    let (in_n, out_n, kk) = (g.in_n(), g.out_n(), c_lo * g.kvol());
    let mut gy = need[0].then(|| vec![0.0; y.len()]);
    let mut gw = need[1].then(|| vec![0.0; w.len()]);
    let mut gb = need[2].then(|| vec![0.0; c_lo]);
    for bi in 0..batch {
        let go = &g_out[bi * c_lo * in_n..(bi + 1) * c_lo * in_n];
        if let Some(gb) = gb.as_mut() {
            for (c, chunk) in go.chunks(in_n).enumerate() {
                gb[c] += chunk.iter().sum::<f64>();
            }
        }
        if !(need[0] || need[1]) {
            continue;
        }
        let cols = im2col(go, c_lo, g);
        if let Some(gy) = gy.as_mut() {
            // gy[c_hi,out_n] = w[c_hi,kk] · cols[kk,out_n]
            let gyb = &mut gy[bi * c_hi * out_n..(bi + 1) * c_hi * out_n];
            gemm(c_hi, kk, out_n, w, kk, 1, &cols, out_n, 1, 1.0, gyb, out_n, 1);
        }
        if let Some(gw) = gw.as_mut() {
            let yb = &y[bi * c_hi * out_n..(bi + 1) * c_hi * out_n];
            // gw[c_hi,kk] += y[c_hi,out_n] · colsᵀ
            gemm(c_hi, out_n, kk, yb, out_n, 1, &cols, 1, out_n, 1.0, gw, kk, 1);
        }
    }
    [gy, gw, gb]
}

// ── normalization ────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Grouping {
    /// Statistics per (sample, channel group).
    Group(usize),
    /// Statistics per channel across the batch.
    Batch,
}

impl Grouping {
    fn count(self, batch: usize, channels: usize) -> usize {
        match self {
            Grouping::Group(g) => batch * g,
            Grouping::Batch => channels,
        }
    }

    #[inline]
    fn id(self, b: usize, c: usize, channels: usize) -> usize {
        match self {
            Grouping::Group(g) => b * g + c / (channels / g),
            Grouping::Batch => c,
        }
    }
}

/// Per-group mean and biased variance.
pub(crate) fn group_stats(
    x: &[f64],
    batch: usize,
    channels: usize,
    spatial: usize,
    grouping: Grouping,
) -> (Vec<f64>, Vec<f64>, usize) {
    let ng = grouping.count(batch, channels);
    let per = batch * channels * spatial / ng;
    let mut mean = vec![0.0; ng];
    for b in 0..batch {
        for c in 0..channels {
            let id = grouping.id(b, c, channels);
            let o = (b * channels + c) * spatial;
            mean[id] += x[o..o + spatial].iter().sum::<f64>();
        }
    }
    for m in &mut mean {
        *m /= per as f64;
    }
    let mut var = vec![0.0; ng];
    for b in 0..batch {
        for c in 0..channels {
            let id = grouping.id(b, c, channels);
            let o = (b * channels + c) * spatial;
            let mu = mean[id];
            var[id] += x[o..o + spatial].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
        }
    }
    for v in &mut var {
        *v /= per as f64;
    }
    (mean, var, per)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn norm_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    batch: usize,
    channels: usize,
    spatial: usize,
    grouping: Grouping,
    eps: f64,
) -> Vec<f64> {
    let (mean, var, _) = group_stats(x, batch, channels, spatial, grouping);
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let id = grouping.id(b, c, channels);
            let o = (b * channels + c) * spatial;
            let (mu, s, ga, be) = (mean[id], inv[id], gamma[c], beta[c]);
            for (dst, &v) in out[o..o + spatial].iter_mut().zip(&x[o..o + spatial]) {
                *dst = (v - mu) * s * ga + be;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn norm_backward(
    x: &[f64],
    gamma: &[f64],
    g_out: &[f64],
    batch: usize,
    channels: usize,
    spatial: usize,
    grouping: Grouping,
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (mean, var, per) = group_stats(x, batch, channels, spatial, grouping);
    let ng = mean.len();
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut ggamma = vec![0.0; channels];
    let mut gbeta = vec![0.0; channels];
    let mut sum_d = vec![0.0; ng];
    let mut sum_dx = vec![0.0; ng];
    for b in 0..batch {
        for c in 0..channels {
            let id = grouping.id(b, c, channels);
            let o = (b * channels + c) * spatial;
            let (mu, s) = (mean[id], inv[id]);
            for i in o..o + spatial {
                let xhat = (x[i] - mu) * s;
                ggamma[c] += g_out[i] * xhat;
                gbeta[c] += g_out[i];
                let d = g_out[i] * gamma[c];
                sum_d[id] += d;
                sum_dx[id] += d * xhat;
            }
        }
    }
    let mut gx = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let id = grouping.id(b, c, channels);
            let o = (b * channels + c) * spatial;
            let (mu, s) = (mean[id], inv[id]);
            let md = sum_d[id] / per as f64;
            let mdx = sum_dx[id] / per as f64;
            for i in o..o + spatial {
                let xhat = (x[i] - mu) * s;
                gx[i] = s * (g_out[i] * gamma[c] - md - xhat * mdx);
            }
        }
    }
    (gx, ggamma, gbeta)
}

// ── shape manipulation ───────────────────────────────────────────────

pub(crate) fn permute(x: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    if rank == 0 || n == 0 {
        return (x.to_vec(), out_shape);
    }
    // innermost loop unrolled over the last output axis
    let last = rank - 1;
    let inner = out_shape[last];
    let inner_stride = eff[last];
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n / inner {
        let mut o = off;
        for _ in 0..inner {
            out.push(x[o]);
            o += inner_stride;
        }
        for d in (0..last).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(crate) fn softmax_last(x: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(len).zip(out.chunks_mut(len)) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

pub(crate) fn softmax_last_backward(y: &[f64], g: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    for ((ys, gs), dst) in y.chunks(len).zip(g.chunks(len)).zip(out.chunks_mut(len)) {
        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
        for ((d, &yv), &gv) in dst.iter_mut().zip(ys).zip(gs) {
            *d = yv * (gv - dot);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_index_mapping() {
        let shape = [2, 3, 4];
        let x: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let (y, ys) = permute(&x, &shape, &[2, 0, 1]);
        assert_eq!(ys, vec![4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(y[(c * 2 + a) * 3 + b], x[(a * 3 + b) * 4 + c]);
                }
            }
        }
        let (back, bs) = permute(&y, &ys, &inverse_permutation(&[2, 0, 1]));
        assert_eq!(bs, shape.to_vec());
        assert_eq!(back, x);
    }

    #[test]
    fn conv_geometry_shape_law() {
        let g = ConvGeom::forward([128; 3], [3; 3], [2; 3], [1; 3]).unwrap();
        assert_eq!(g.out_sp, [64; 3]);
        let g = ConvGeom::transposed([8; 3], [2; 3], [2; 3], [0; 3]).unwrap();
        assert_eq!(g.in_sp, [16; 3]);
        assert!(ConvGeom::forward([2; 3], [5; 3], [1; 3], [0; 3]).is_err());
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeom::forward([4, 3, 5], [3; 3], [2, 1, 2], [1; 3]).unwrap();
        let c = 2;
        let x: Vec<f64> = (0..c * g.in_n()).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let cols = im2col(&x, c, &g);
        let y: Vec<f64> = (0..cols.len()).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let mut back = vec![0.0; x.len()];
        col2im(&y, c, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}
