// Raw row-major kernels shared by forward and backward rules. All of them
// accumulate into `out`.

/// out[m×n] += a[m×k] · b[k×n]
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            out[i * n + j] += dot;
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &b_ij) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_ij;
            }
        }
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `src` (shape `shape`) into the axis-permuted layout.
/// Output axis `i` is input axis `perm[i]`.
pub(crate) fn permute(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..src.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2×3
        let b = [1.0, 0.5, -1.0, 2.0, 0.0, 1.0]; // 3×2
        let mut nn = [0.0; 4];
        gemm_nn(&a, &b, &mut nn, 2, 3, 2);
        assert_eq!(nn, [-1.0, 7.5, -1.0, 18.0]);
        // bᵀ stored as 2×3
        let bt = [1.0, -1.0, 0.0, 0.5, 2.0, 1.0];
        let mut nt = [0.0; 4];
        gemm_nt(&a, &bt, &mut nt, 2, 3, 2);
        assert_eq!(nn, nt);
        // aᵀ stored as 3×2
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut tn = [0.0; 4];
        gemm_tn(&at, &b, &mut tn, 3, 2, 2);
        assert_eq!(nn, tn);
    }

    #[test]
    fn permute_round_trip() {
        let shape = [2, 3, 4];
        let src: Vec<f64> = (0..24).map(f64::from).collect();
        let perm = [2, 0, 1];
        let out = permute(&src, &shape, &perm);
        let out_shape = [4, 2, 3];
        let back = permute(&out, &out_shape, &inverse_perm(&perm));
        assert_eq!(back, src);
        // element [i,j,k] of the source lands at [k,i,j]
        assert_eq!(out[(3 * 2 + 1) * 3 + 2], src[(1 * 3 + 2) * 4 + 3]);
    }
}
