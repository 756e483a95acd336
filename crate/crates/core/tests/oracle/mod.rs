//! Brute-force reference implementations, written from the definitions and
//! sharing no code with the library.
#![allow(dead_code)]

use ucad_core::rng::Rng;

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        s += d * d;
    }
    s.sqrt()
}

pub fn random_points(rng: &mut Rng, n: usize, c: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..c).map(|_| rng.uniform_range(-2.0, 2.0)).collect()).collect()
}

/// Max-min selection from point 0; ties to the lowest index.
pub fn fps(points: &[Vec<f64>], k: usize) -> Vec<usize> {
    let mut chosen = vec![0];
    while chosen.len() < k {
        let mut best = None;
        let mut best_d = -1.0;
        for i in 0..points.len() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen.iter().map(|&c| dist(&points[i], &points[c])).fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best = Some(i);
            }
        }
        chosen.push(best.unwrap());
    }
    chosen
}

pub fn covering_radius(selected: &[Vec<f64>], all: &[Vec<f64>]) -> f64 {
    all.iter()
        .map(|p| selected.iter().map(|s| dist(p, s)).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
}

/// Smallest covering radius over all `k`-subsets.
pub fn optimal_radius(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let sel: Vec<Vec<f64>> = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| points[i].clone()).collect();
        best = best.min(covering_radius(&sel, points));
    }
    best
}

pub fn score_visual(patches: &[Vec<f64>], bank: &[Vec<f64>]) -> Vec<f64> {
    patches.iter().map(|p| bank.iter().map(|b| dist(p, b)).fold(f64::INFINITY, f64::min)).collect()
}

/// Fraction of (positive, negative) pairs ranked correctly, ties as half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

/// Sum over distinct thresholds of precision times the recall step, with
/// precision and recall recounted from scratch at every threshold.
pub fn aupr(scores: &[f64], labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let tp = (0..scores.len()).filter(|&i| scores[i] >= t && labels[i]).count() as f64;
        let flagged = scores.iter().filter(|&&s| s >= t).count() as f64;
        let recall = tp / pos;
        ap += (recall - prev_recall) * (tp / flagged);
        prev_recall = recall;
    }
    ap
}

pub fn loss_text(scores: &[f64], labels: &[f64]) -> f64 {
    scores.iter().zip(labels).map(|(s, l)| (s - l).powi(2)).sum::<f64>() / scores.len() as f64
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (dist(a, &vec![0.0; a.len()]) * dist(b, &vec![0.0; b.len()]))
}

pub fn loss_visual(patches: &[Vec<f64>], regions: &[u16], la: f64, lb: f64) -> f64 {
    let mut cross = 0.0;
    let mut same = 0.0;
    for i in 0..patches.len() {
        for j in 0..patches.len() {
            if i < j {
                let c = cosine(&patches[i], &patches[j]);
                if regions[i] == regions[j] {
                    same += c;
                } else {
                    cross += c;
                }
            }
        }
    }
    la * cross - lb * same
}

/// Standard multi-head self-attention on row-major `n x c` input, with the
/// projections given as row-major `c x 3c` / `c x c` matrices.
pub fn vanilla_attention(
    x: &[Vec<f64>],
    qkv: &[Vec<f64>],
    qkv_bias: &[f64],
    out: &[Vec<f64>],
    out_bias: &[f64],
    heads: usize,
) -> Vec<Vec<f64>> {
    let n = x.len();
    let c = x[0].len();
    let d = c / heads;
    let proj = |row: &[f64]| -> Vec<f64> {
        (0..3 * c).map(|j| qkv_bias[j] + (0..c).map(|i| row[i] * qkv[i][j]).sum::<f64>()).collect()
    };
    let p: Vec<Vec<f64>> = x.iter().map(|r| proj(r)).collect();
    let mut concat = vec![vec![0.0; c]; n];
    for h in 0..heads {
        for a in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|b| (0..d).map(|t| p[a][h * d + t] * p[b][c + h * d + t]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..d {
                concat[a][h * d + t] = (0..n).map(|b| e[b] / z * p[b][2 * c + h * d + t]).sum();
            }
        }
    }
    concat
        .iter()
        .map(|r| (0..c).map(|j| out_bias[j] + (0..c).map(|i| r[i] * out[i][j]).sum::<f64>()).collect())
        .collect()
}

/// Average over earlier tasks of the largest drop from any earlier stage to
/// the last one.
pub fn forgetting(rows: &[Vec<f64>]) -> f64 {
    let k = rows.len();
    let mut total = 0.0;
    for j in 0..k - 1 {
        let mut worst = f64::NEG_INFINITY;
        for l in j..k - 1 {
            worst = worst.max(rows[l][j] - rows[k - 1][j]);
        }
        total += worst;
    }
    total / (k - 1) as f64
}
