//! Slow, loop-only reference implementations used to cross-check the graph
//! losses, the ranking metrics and the anaglyph filter.

use crate::config::Platform;
use crate::intermediary::EdgeOperator;

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for &v in row {
        if v > max {
            max = v;
        }
    }
    let mut z = 0.0;
    for &v in row {
        z += (v - max).exp();
    }
    let lz = max + z.ln();
    row.iter().map(|v| v - lz).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += (a[k] - b[k]) * (a[k] - b[k]);
    }
    s.sqrt()
}

fn unit(a: &[f64]) -> Vec<f64> {
    let n = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    a.iter().map(|v| v / n).collect()
}

/// Label-smoothed cross-entropy, averaged over rows.
pub fn cross_entropy(logits: &[Vec<f64>], ids: &[usize], eps: f64) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(ids) {
        let lp = log_softmax_row(row);
        let c = row.len() as f64;
        let mut smooth = 0.0;
        for v in &lp {
            smooth -= v / c;
        }
        total += (1.0 - eps) * -lp[y] + eps * smooth;
    }
    total / logits.len() as f64
}

/// Unsmoothed identity loss on attacked logits plus mean squared distance
/// between original and attacked features.
pub fn loss_sa(attacked_logits: &[Vec<f64>], original: &[Vec<f64>], attacked: &[Vec<f64>], ids: &[usize]) -> f64 {
    let mut con = 0.0;
    for (o, a) in original.iter().zip(attacked) {
        let d = dist(o, a);
        con += d * d;
    }
    cross_entropy(attacked_logits, ids, 0.0) + con / original.len() as f64
}

/// Exhaustive triplet scan: each anchor contributes its worst hinge over all
/// (positive, negative) pairs.
pub fn loss_tri(features: &[Vec<f64>], ids: &[usize], margin: f64) -> f64 {
    let b = features.len();
    let mut total = 0.0;
    for a in 0..b {
        let mut worst = 0.0f64;
        for p in 0..b {
            if p == a || ids[p] != ids[a] {
                continue;
            }
            for n in 0..b {
                if ids[n] == ids[a] {
                    continue;
                }
                let h = dist(&features[a], &features[p]) - dist(&features[a], &features[n]) + margin;
                worst = worst.max(h);
            }
        }
        total += worst;
    }
    total / b as f64
}

/// Video-to-memory contrastive loss. `memory[k]` belongs to `cells[k]`.
pub fn loss_v2m(
    features: &[Vec<f64>],
    ids: &[u32],
    platforms: &[Platform],
    memory: &[Vec<f64>],
    cells: &[(u32, Platform)],
    tau: f64,
) -> f64 {
    let mut anchors: Vec<(u32, Platform)> = Vec::new();
    for i in 0..ids.len() {
        if !anchors.contains(&(ids[i], platforms[i])) {
            anchors.push((ids[i], platforms[i]));
        }
    }
    let v: Vec<Vec<f64>> = features.iter().map(|f| unit(f)).collect();
    let mut total = 0.0;
    for key in &anchors {
        let k = cells.iter().position(|c| c == key).expect("memory cell");
        let m = unit(&memory[k]);
        let sims: Vec<f64> = v.iter().map(|f| f.iter().zip(&m).map(|(a, b)| a * b).sum::<f64>() / tau).collect();
        let lp = log_softmax_row(&sims);
        let mut sum = 0.0;
        let mut count = 0;
        for j in 0..ids.len() {
            if ids[j] == key.0 {
                sum -= lp[j];
                count += 1;
            }
        }
        total += sum / count as f64;
    }
    total / anchors.len() as f64
}

/// Cross-reconstruction loss with a per-row reconstruction map.
pub fn loss_cr(vis: &[Vec<f64>], ir: &[Vec<f64>], recon: impl Fn(&[f64]) -> Vec<f64>) -> f64 {
    let mut total = 0.0;
    for i in 0..vis.len() {
        total += dist(&vis[i], &recon(&ir[i]));
        total += dist(&ir[i], &recon(&vis[i]));
    }
    total / vis.len() as f64
}

/// Ranking metrics by explicit counting: the rank of a gallery item is the
/// number of valid items that beat it (smaller distance, or equal distance and
/// lower index). Returns `(cmc, per-query AP)` or `None` when some query has
/// no relevant item.
pub fn rank(
    dist: &[Vec<f64>],
    query: &[(u32, String)],
    gallery: &[(u32, String, bool)],
    camera_filter: bool,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let g = gallery.len();
    let mut cmc = vec![0.0; g];
    let mut aps = Vec::new();
    for (qi, (qid, qcam)) in query.iter().enumerate() {
        let valid = |j: usize| !(camera_filter && gallery[j].0 == *qid && gallery[j].1 == *qcam);
        let relevant = |j: usize| valid(j) && gallery[j].0 == *qid && !gallery[j].2;
        let position = |j: usize| {
            let mut r = 0;
            for k in 0..g {
                if valid(k) && (dist[qi][k] < dist[qi][j] || (dist[qi][k] == dist[qi][j] && k < j)) {
                    r += 1;
                }
            }
            r
        };
        let mut ap = 0.0;
        let mut hits = 0;
        let mut first = usize::MAX;
        for j in 0..g {
            if !relevant(j) {
                continue;
            }
            let r = position(j);
            let mut better_relevant = 0;
            for k in 0..g {
                if relevant(k) && position(k) < r {
                    better_relevant += 1;
                }
            }
            ap += (better_relevant + 1) as f64 / (r + 1) as f64;
            hits += 1;
            first = first.min(r);
        }
        if hits == 0 {
            return None;
        }
        aps.push(ap / hits as f64);
        for (r, c) in cmc.iter_mut().enumerate() {
            if r >= first {
                *c += 1.0;
            }
        }
    }
    let q = query.len() as f64;
    Some((cmc.into_iter().map(|c| c / q).collect(), aps))
}

/// Edge filter of one `h x w` intensity plane with mirrored borders, built by
/// materialising the padded image first.
pub fn anaglyph(plane: &[f64], h: usize, w: usize, op: &EdgeOperator) -> Vec<f64> {
    let mirror = |i: isize, n: usize| -> usize {
        if i < 0 {
            1
        } else if i as usize >= n {
            n - 2
        } else {
            i as usize
        }
    };
    let (ph, pw) = (h + 2, w + 2);
    let mut padded = vec![0.0; ph * pw];
    for y in 0..ph {
        for x in 0..pw {
            padded[y * pw + x] = plane[mirror(y as isize - 1, h) * w + mirror(x as isize - 1, w)];
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in 0..3 {
                for dx in 0..3 {
                    acc += op.kernel[dy][dx] * padded[(y + dy) * pw + x + dx];
                }
            }
            out[y * w + x] = acc + op.offset;
        }
    }
    out
}
