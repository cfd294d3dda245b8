// Dense row-major kernels. Inner loops are written as axpy updates so they
// vectorize without reassociating floating point sums.

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// c[m×p] = a[m×k] · b[k×p]
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * p];
    matmul_acc(a, b, &mut c, m, k, p);
    c
}

/// c[m×p] += a[m×k] · b[k×p]
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    if p == 0 {
        return;
    }
    for (arow, crow) in a.chunks_exact(k.max(1)).take(m).zip(c.chunks_exact_mut(p)) {
        for (t, &aik) in arow.iter().enumerate().take(k) {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[t * p..(t + 1) * p];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

/// c[m×p] += a[m×k] · b[p×k]ᵀ
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    let bt = transpose(b, p, k);
    matmul_acc(a, &bt, c, m, k, p);
}

/// c[k×p] += a[m×k]ᵀ · g[m×p]
pub(crate) fn matmul_tn_acc(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    if p == 0 {
        return;
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * p..(i + 1) * p];
        for (t, &ait) in arow.iter().enumerate() {
            if ait == 0.0 {
                continue;
            }
            let crow = &mut c[t * p..(t + 1) * p];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += ait * gv;
            }
        }
    }
}
