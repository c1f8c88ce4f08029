//! Independent scalar reference implementations used by the integration
//! tests. Written as plain f64 loops and deliberately share no code with the
//! library paths they check.
#![allow(dead_code)]

use rand::Rng;

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// `features[h][w][d]`, `logits[h][w]`.
pub fn pool(features: &[Vec<Vec<f64>>], logits: &[Vec<f64>]) -> Vec<f64> {
    let h = features.len();
    let w = features[0].len();
    let d = features[0][0].len();
    let mut max = f64::NEG_INFINITY;
    for r in 0..h {
        for c in 0..w {
            max = max.max(logits[r][c]);
        }
    }
    let mut z = 0.0;
    for r in 0..h {
        for c in 0..w {
            z += (logits[r][c] - max).exp();
        }
    }
    let mut out = vec![0.0; d];
    for k in 0..d {
        for r in 0..h {
            for c in 0..w {
                out[k] += features[r][c][k] * (logits[r][c] - max).exp() / z;
            }
        }
    }
    out
}

/// Plain projection: `w_a[i][o]` is input-major.
pub struct Psi {
    pub w_a: Vec<Vec<f64>>,
    pub b_a: Vec<f64>,
    pub w_b: Vec<Vec<f64>>,
    pub b_b: Vec<f64>,
}

impl Psi {
    pub fn apply(&self, t: &[f64]) -> Vec<f64> {
        let dv = self.b_a.len();
        let mut hidden = vec![0.0; dv];
        for o in 0..dv {
            let mut z = self.b_a[o];
            for i in 0..t.len() {
                z += self.w_a[i][o] * t[i];
            }
            hidden[o] = z.tanh();
        }
        let mut out = vec![0.0; dv];
        for o in 0..dv {
            let mut y = self.b_b[o];
            for i in 0..dv {
                y += self.w_b[i][o] * hidden[i];
            }
            out[o] = y;
        }
        out
    }

    /// Flat parameter vector in the order W_a, b_a, W_b, b_b.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for row in &self.w_a {
            v.extend(row);
        }
        v.extend(&self.b_a);
        for row in &self.w_b {
            v.extend(row);
        }
        v.extend(&self.b_b);
        v
    }

    pub fn from_flat(dt: usize, dv: usize, v: &[f64]) -> Psi {
        let mut it = v.iter().copied();
        let mut take = |n: usize| -> Vec<f64> { (&mut it).take(n).collect() };
        let w_a = (0..dt).map(|_| take(dv)).collect();
        let b_a = take(dv);
        let w_b = (0..dv).map(|_| take(dv)).collect();
        let b_b = take(dv);
        Psi { w_a, b_a, w_b, b_b }
    }
}

/// Symmetric InfoNCE evaluated literally, without log-sum-exp tricks.
pub fn info_nce(s: &[Vec<f64>]) -> f64 {
    let b = s.len();
    let mut loss = 0.0;
    for i in 0..b {
        let col: f64 = (0..b).map(|j| s[j][i].exp()).sum();
        let row: f64 = (0..b).map(|j| s[i][j].exp()).sum();
        loss -= (s[i][i].exp() / col).ln() / (2 * b) as f64;
        loss -= (s[i][i].exp() / row).ln() / (2 * b) as f64;
    }
    loss
}

pub struct OraclePair {
    pub features: Vec<Vec<Vec<f64>>>,
    pub heads: Vec<Vec<Vec<f64>>>,
    pub text: Vec<f64>,
}

/// Full training loss with the kept head of every pair given.
pub fn batch_loss(psi: &Psi, pairs: &[OraclePair], kept: &[usize]) -> f64 {
    let visual: Vec<Vec<f64>> = pairs
        .iter()
        .zip(kept)
        .map(|(p, &k)| pool(&p.features, &p.heads[k]))
        .collect();
    let texts: Vec<Vec<f64>> = pairs.iter().map(|p| psi.apply(&p.text)).collect();
    let b = pairs.len();
    let s: Vec<Vec<f64>> = (0..b)
        .map(|i| (0..b).map(|j| cosine(&visual[i], &texts[j])).collect())
        .collect();
    info_nce(&s)
}

/// Head with the highest cosine to the pair's own projected caption.
pub fn best_head(psi: &Psi, pair: &OraclePair) -> usize {
    let t = psi.apply(&pair.text);
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (k, head) in pair.heads.iter().enumerate() {
        let v = cosine(&pool(&pair.features, head), &t);
        if v > best_val {
            best_val = v;
            best = k;
        }
    }
    best
}

/// Central finite differences of `f` at `x`.
pub fn finite_differences(x: &[f64], eps: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// IEEE-754 binary16 decode by its textbook definition.
pub fn half_to_f64(bits: u16) -> f64 {
    let sign = if bits >> 15 == 1 { -1.0 } else { 1.0 };
    let exp = ((bits >> 10) & 0x1f) as i32;
    let frac = (bits & 0x3ff) as f64;
    match exp {
        0 => sign * frac * 2f64.powi(-24),
        31 if frac == 0.0 => sign * f64::INFINITY,
        31 => f64::NAN,
        e => sign * (1.0 + frac / 1024.0) * 2f64.powi(e - 15),
    }
}

/// Per-class IoU from pixel index sets, mean over classes present in either mask.
pub fn set_miou(
    pred: &[u32],
    gt: &[u32],
    classes: usize,
    ignore: Option<u32>,
) -> Option<(f64, Vec<Option<f64>>)> {
    use std::collections::BTreeSet;
    let keep: Vec<usize> = (0..gt.len()).filter(|&i| Some(gt[i]) != ignore).collect();
    let per: Vec<Option<f64>> = (0..classes as u32)
        .map(|c| {
            let p: BTreeSet<usize> = keep.iter().copied().filter(|&i| pred[i] == c).collect();
            let g: BTreeSet<usize> = keep.iter().copied().filter(|&i| gt[i] == c).collect();
            let inter = p.intersection(&g).count();
            let union = p.union(&g).count();
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    if present.is_empty() {
        None
    } else {
        Some((present.iter().sum::<f64>() / present.len() as f64, per))
    }
}

pub fn gaussian_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
        .collect()
}
