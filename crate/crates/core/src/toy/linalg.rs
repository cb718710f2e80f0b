//! Dense row-major kernels used by the toy model.

/// `out = a * b` with `a: n x k`, `b: k x m`.
pub fn matmul(out: &mut [f64], a: &[f64], b: &[f64], n: usize, k: usize, m: usize) {
    debug_assert_eq!(out.len(), n * m);
    out.iter_mut().for_each(|v| *v = 0.0);
    let mut i = 0;
    while i + 4 <= n {
        let (o0, rest) = out[i * m..(i + 4) * m].split_at_mut(m);
        let (o1, rest) = rest.split_at_mut(m);
        let (o2, o3) = rest.split_at_mut(m);
        for p in 0..k {
            let (s0, s1, s2, s3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
            let row = &b[p * m..(p + 1) * m];
            for ((((x0, x1), x2), x3), bv) in o0.iter_mut().zip(o1.iter_mut()).zip(o2.iter_mut()).zip(o3.iter_mut()).zip(row) {
                *x0 += s0 * bv;
                *x1 += s1 * bv;
                *x2 += s2 * bv;
                *x3 += s3 * bv;
            }
        }
        i += 4;
    }
    for i in i..n {
        let o = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let s = a[i * k + p];
            let row = &b[p * m..(p + 1) * m];
            for (ov, bv) in o.iter_mut().zip(row) {
                *ov += s * bv;
            }
        }
    }
}

/// `out = a * b + bias` (bias broadcast over rows).
pub fn affine(out: &mut [f64], a: &[f64], w: &[f64], bias: &[f64], n: usize, k: usize, m: usize) {
    matmul(out, a, w, n, k, m);
    for row in out.chunks_exact_mut(m) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// `dw += a^T * g` with `a: n x k`, `g: n x m`.
pub fn acc_at_b(dw: &mut [f64], a: &[f64], g: &[f64], n: usize, k: usize, m: usize) {
    let mut i = 0;
    while i + 4 <= n {
        let (g0, g1, g2, g3) = (
            &g[i * m..(i + 1) * m],
            &g[(i + 1) * m..(i + 2) * m],
            &g[(i + 2) * m..(i + 3) * m],
            &g[(i + 3) * m..(i + 4) * m],
        );
        for p in 0..k {
            let (s0, s1, s2, s3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
            let row = &mut dw[p * m..(p + 1) * m];
            for ((((d, v0), v1), v2), v3) in row.iter_mut().zip(g0).zip(g1).zip(g2).zip(g3) {
                *d += s0 * v0 + s1 * v1 + s2 * v2 + s3 * v3;
            }
        }
        i += 4;
    }
    for i in i..n {
        let gr = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let s = a[i * k + p];
            let row = &mut dw[p * m..(p + 1) * m];
            for (d, gv) in row.iter_mut().zip(gr) {
                *d += s * gv;
            }
        }
    }
}

/// `out = g * w^T` with `g: n x m`, `w: k x m`.
pub fn matmul_bt(out: &mut [f64], g: &[f64], w: &[f64], n: usize, m: usize, k: usize) {
    for i in 0..n {
        let gr = &g[i * m..(i + 1) * m];
        for p in 0..k {
            out[i * k + p] = dot(gr, &w[p * m..(p + 1) * m]);
        }
    }
}

/// Column sums of `g: n x m` added to `db`.
pub fn acc_rows(db: &mut [f64], g: &[f64], m: usize) {
    for row in g.chunks_exact(m) {
        for (d, v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

const GELU_C: f64 = 0.797_884_560_802_865_4;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = libm::tanh(GELU_C * (x + 0.044715 * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Softmax of `x` in place.
pub fn softmax(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    x.iter_mut().for_each(|v| *v /= sum);
}
