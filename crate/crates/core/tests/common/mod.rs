//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Weight tables written straight from the count formulas, one AU at a
/// time: `(reg[6], class[5][2], det[2])`.
pub fn weights(n: &[u64; 6]) -> ([f64; 6], [[f64; 2]; 5], [f64; 2]) {
    let total = |lo: usize, hi: usize| -> f64 {
        let mut s = 0u64;
        for k in lo..hi {
            s += n[k];
        }
        if s == 0 {
            1.0
        } else {
            s as f64
        }
    };
    let n01 = total(0, 2);
    let n25 = total(2, 6);
    let denom = 2.0 / n01 + 4.0 / n25;
    let low = (2.0 / n01) / denom;
    let high = (4.0 / n25) / denom;
    let reg = [low, low, high, high, high, high];

    let mut d = 0.0;
    for j in 1..=5 {
        d += 1.0 / total(0, j) + 1.0 / total(j, 6);
    }
    let mut class = [[0.0; 2]; 5];
    for j in 1..=5 {
        class[j - 1][0] = (1.0 / total(0, j)) / d;
        class[j - 1][1] = (1.0 / total(j, 6)) / d;
    }

    let pos = 1.0 / total(2, 6);
    let neg = 1.0 / total(0, 2);
    (reg, class, [neg / (pos + neg), pos / (pos + neg)])
}

pub fn mse(y: &[u8], reg: &[f64], w: &[[f64; 6]]) -> f64 {
    let mut s = 0.0;
    for i in 0..y.len() {
        let e = y[i] as f64 - reg[i];
        s += w[i][y[i] as usize] * e * e;
    }
    s
}

pub fn cosine(y: &[u8], reg: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut yy = 0.0;
    let mut rr = 0.0;
    for i in 0..y.len() {
        dot += y[i] as f64 * reg[i];
        yy += (y[i] as f64).powi(2);
        rr += reg[i] * reg[i];
    }
    if yy == 0.0 {
        return 0.0;
    }
    1.0 - dot / (yy.sqrt() * rr.sqrt() + 1e-8)
}

fn bce(target: bool, z: f64, w_neg: f64, w_pos: f64) -> f64 {
    let p = sigmoid(z);
    if target {
        -w_pos * p.max(1e-12).ln()
    } else {
        -w_neg * (1.0 - p).max(1e-12).ln()
    }
}

pub fn ordinal(y: &[u8], logits: &[[f64; 5]], w: &[[[f64; 2]; 5]]) -> f64 {
    let mut s = 0.0;
    for i in 0..y.len() {
        for j in 1..=5 {
            s += bce(y[i] as usize >= j, logits[i][j - 1], w[i][j - 1][0], w[i][j - 1][1]);
        }
    }
    s
}

pub fn detection(y: &[u8], logits: &[f64], w: &[[f64; 2]]) -> f64 {
    let mut s = 0.0;
    for i in 0..y.len() {
        s += bce(y[i] >= 2, logits[i], w[i][0], w[i][1]);
    }
    s
}

/// ICC(3,1) from a two-way ANOVA sum-of-squares decomposition of an
/// `n x 2` matrix.
pub fn icc_anova(x: &[[f64; 2]]) -> f64 {
    let n = x.len() as f64;
    let k = 2.0;
    let grand: f64 = x.iter().map(|r| r[0] + r[1]).sum::<f64>() / (n * k);
    let ss_total: f64 = x.iter().flat_map(|r| r.iter()).map(|v| (v - grand).powi(2)).sum();
    let ss_rows: f64 = x.iter().map(|r| k * ((r[0] + r[1]) / k - grand).powi(2)).sum();
    let ss_cols: f64 = (0..2)
        .map(|c| n * (x.iter().map(|r| r[c]).sum::<f64>() / n - grand).powi(2))
        .sum();
    let ss_err = ss_total - ss_rows - ss_cols;
    let bms = ss_rows / (n - 1.0);
    let ems = ss_err / ((n - 1.0) * (k - 1.0));
    (bms - ems) / (bms + (k - 1.0) * ems)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &t in &idx[i..=j] {
            r[t] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}
