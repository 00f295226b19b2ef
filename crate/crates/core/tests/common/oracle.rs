//! Nested-loop references for the vectorized losses.

use mgca_tensor::Tensor;

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = *t.shape().last().unwrap();
    t.data().chunks(d).map(|r| r.to_vec()).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn naive_ita(v: &Tensor, t: &Tensor, tau: f64) -> f64 {
    let (v, t) = (rows(v), rows(t));
    let b = v.len();
    let s: Vec<Vec<f64>> = v.iter().map(|vi| t.iter().map(|tj| dot(vi, tj) / tau).collect()).collect();
    let mut total = 0.0;
    for i in 0..b {
        total += log_sum_exp(&s[i]) - s[i][i];
        let col: Vec<f64> = (0..b).map(|k| s[k][i]).collect();
        total += log_sum_exp(&col) - s[i][i];
    }
    total / (2.0 * b as f64)
}

/// `tokens`, `cross` as `[B][n][d]`, weights `[B][n]`.
pub fn naive_local(tokens: &[Vec<Vec<f64>>], cross: &[Vec<Vec<f64>>], w: &[Vec<f64>], tau: f64) -> f64 {
    let (b, n) = (tokens.len(), tokens[0].len());
    let mut total = 0.0;
    for i in 0..b {
        let c: Vec<Vec<f64>> = cross[i]
            .iter()
            .map(|r| {
                let norm = dot(r, r).sqrt();
                r.iter().map(|x| x / norm).collect()
            })
            .collect();
        let s: Vec<Vec<f64>> = tokens[i].iter().map(|a| c.iter().map(|o| dot(a, o) / tau).collect()).collect();
        for j in 0..n {
            let row = log_sum_exp(&s[j]) - s[j][j];
            let col: Vec<f64> = (0..n).map(|k| s[k][j]).collect();
            let col = log_sum_exp(&col) - s[j][j];
            total += w[i][j] * (row + col);
        }
    }
    total / (2.0 * (b * n) as f64)
}

pub fn split3(t: &Tensor) -> Vec<Vec<Vec<f64>>> {
    let s = t.shape();
    t.data()
        .chunks(s[1] * s[2])
        .map(|inst| inst.chunks(s[2]).map(|r| r.to_vec()).collect())
        .collect()
}

pub fn naive_cross(q: &[Vec<f64>], kv: &[Vec<f64>], m: [&Tensor; 4]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = q[0].len();
    let apply = |mt: &Tensor, x: &[f64]| -> Vec<f64> { (0..d).map(|r| dot(mt.row(r), x)).collect() };
    let keys: Vec<Vec<f64>> = kv.iter().map(|x| apply(m[1], x)).collect();
    let vals: Vec<Vec<f64>> = kv.iter().map(|x| apply(m[2], x)).collect();
    let mut outs = vec![];
    let mut alphas = vec![];
    for x in q {
        let qq = apply(m[0], x);
        let s: Vec<f64> = keys.iter().map(|k| dot(&qq, k) / (d as f64).sqrt()).collect();
        let lse = log_sum_exp(&s);
        let a: Vec<f64> = s.iter().map(|v| (v - lse).exp()).collect();
        let mix: Vec<f64> = (0..d).map(|c| a.iter().zip(&vals).map(|(w, v)| w * v[c]).sum()).collect();
        outs.push(apply(m[3], &mix));
        alphas.push(a);
    }
    (outs, alphas)
}

pub fn naive_cpa(pv: &Tensor, pt: &Tensor, qv: &Tensor, qt: &Tensor) -> f64 {
    let (b, k) = pv.dims2().unwrap();
    let mut total = 0.0;
    for i in 0..b {
        for j in 0..k {
            total -= qt.at2(i, j) * pv.at2(i, j).ln() + qv.at2(i, j) * pt.at2(i, j).ln();
        }
    }
    total / (2.0 * b as f64)
}

pub fn naive_similarity(a: &Tensor, c: &Tensor) -> Vec<f64> {
    let cr = rows(c);
    rows(a).iter().flat_map(|x| cr.iter().map(move |y| dot(x, y))).collect()
}

pub fn naive_prototype_probs(e: &Tensor, c: &Tensor, tau: f64) -> Vec<f64> {
    let mut out = vec![];
    for er in rows(e) {
        let logits: Vec<f64> = rows(c).iter().map(|cr| dot(&er, cr) / tau).collect();
        let lse = log_sum_exp(&logits);
        out.extend(logits.iter().map(|l| (l - lse).exp()));
    }
    out
}
