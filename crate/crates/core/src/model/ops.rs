//! Dense kernels. Every output element is accumulated in a fixed order that
//! does not depend on how many rows are processed together, so a row's
//! result is the same whether it is computed alone or inside a larger batch.

/// `out[rows, n] = x[rows, k] * w[k, n]`, `w` row-major.
pub fn matmul(x: &[f32], rows: usize, k: usize, w: &[f32], n: usize) -> Vec<f32> {
    debug_assert_eq!(x.len(), rows * k);
    debug_assert_eq!(w.len(), k * n);
    let mut out = vec![0.0f32; rows * n];
    let mut r = 0;
    while r + 4 <= rows {
        let (o0, rest) = out[r * n..(r + 4) * n].split_at_mut(n);
        let (o1, rest) = rest.split_at_mut(n);
        let (o2, o3) = rest.split_at_mut(n);
        let x0 = &x[r * k..(r + 1) * k];
        let x1 = &x[(r + 1) * k..(r + 2) * k];
        let x2 = &x[(r + 2) * k..(r + 3) * k];
        let x3 = &x[(r + 3) * k..(r + 4) * k];
        for kk in 0..k {
            let wr = &w[kk * n..(kk + 1) * n];
            let (a0, a1, a2, a3) = (x0[kk], x1[kk], x2[kk], x3[kk]);
            for j in 0..n {
                let wv = wr[j];
                o0[j] += a0 * wv;
                o1[j] += a1 * wv;
                o2[j] += a2 * wv;
                o3[j] += a3 * wv;
            }
        }
        r += 4;
    }
    while r < rows {
        let o = &mut out[r * n..(r + 1) * n];
        let xr = &x[r * k..(r + 1) * k];
        for kk in 0..k {
            let wr = &w[kk * n..(kk + 1) * n];
            let a = xr[kk];
            for j in 0..n {
                o[j] += a * wr[j];
            }
        }
        r += 1;
    }
    out
}

/// Dot product accumulated in `f64`.
#[inline]
pub fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += f64::from(a[c * 4 + l]) * f64::from(b[c * 4 + l]);
        }
    }
    for i in chunks * 4..a.len() {
        acc[i % 4] += f64::from(a[i]) * f64::from(b[i]);
    }
    (acc[0] + acc[2]) + (acc[1] + acc[3])
}

/// Parameter-free layer norm over each row of width `width`.
pub fn layer_norm(x: &[f32], width: usize) -> Vec<f32> {
    const EPS: f32 = 1e-5;
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(width) {
        let mean = row.iter().sum::<f32>() / width as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / width as f32;
        let inv = 1.0 / (var + EPS).sqrt();
        out.extend(row.iter().map(|v| (v - mean) * inv));
    }
    out
}

/// tanh-approximated GELU, in place.
pub fn gelu(x: &mut [f32]) {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    for v in x {
        let u = *v;
        *v = 0.5 * u * (1.0 + (C * (u + 0.044_715 * u * u * u)).tanh());
    }
}

pub fn add_assign(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
