//! Stream fusion, the identity and triplet losses, and the weighted total.

use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{Bound, Linear, ParamStore};
use crate::autodiff::{Tensor, Var};
use crate::config::{ExperimentConfig, Stream, StreamSet};
use crate::error::{ReidError, Result};
use crate::rng::ReidRng;
use crate::style::cross_entropy;

/// Per-stream scalars applied to the normalised blocks before projection.
pub type StreamWeights = [f64; 3];

pub const UNIFORM_WEIGHTS: StreamWeights = [1.0, 1.0, 1.0];

/// Normalise, weight, concatenate, project.
#[derive(Clone, Copy, Debug)]
pub struct Fusion {
    pub mask: StreamSet,
    pub projection: Linear,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, mask: StreamSet, dim: usize, out: usize, rng: &mut ReidRng) -> Self {
        Self { mask, projection: Linear::new(store, "fusion.projection", dim * mask.len(), out, true, rng) }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, streams: [Option<Var<'g>>; 3], weights: &StreamWeights) -> Result<Var<'g>> {
        Ok(self.projection.forward(p, fuse_blocks(streams, weights)?))
    }
}

/// The pre-projection block: each present stream L2-normalised and scaled.
pub fn fuse_blocks<'g>(streams: [Option<Var<'g>>; 3], weights: &StreamWeights) -> Result<Var<'g>> {
    let parts: Vec<Var<'g>> = streams
        .iter()
        .zip(weights)
        .filter_map(|(s, &w)| s.map(|v| v.l2_normalize(1e-12).mul_scalar(w)))
        .collect();
    if parts.is_empty() {
        return Err(ReidError::InvalidArgument("fusion needs at least one stream".into()));
    }
    Ok(if parts.len() == 1 { parts[0] } else { Var::concat(&parts, 1) })
}

/// Mean cross-entropy with label smoothing.
pub fn loss_id<'g>(logits: Var<'g>, ids: &[usize], smoothing: f64) -> Result<Var<'g>> {
    cross_entropy(logits, ids, smoothing)
}

/// Batch-hard triplet loss on Euclidean distances.
pub fn loss_tri<'g>(features: Var<'g>, ids: &[usize], margin: f64) -> Result<Var<'g>> {
    let s = features.shape();
    if s.len() != 2 || s[0] != ids.len() {
        return Err(ReidError::Shape(format!("features {s:?} with {} labels", ids.len())));
    }
    let (b, d) = (s[0], s[1]);
    let mut distinct: Vec<usize> = ids.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(ReidError::InvalidArgument("triplet loss needs at least two identities".into()));
    }
    let diff = features.reshape(&[b, 1, d]).sub(features.reshape(&[1, b, d]));
    let dist = diff.square().sum_axis(2, false).sqrt();
    let dv = dist.value();
    let mut pos = Vec::with_capacity(b);
    let mut neg = Vec::with_capacity(b);
    for i in 0..b {
        let row = dv.row(i);
        let hardest_pos = (0..b)
            .filter(|&j| j != i && ids[j] == ids[i])
            .max_by(|&x, &y| row[x].total_cmp(&row[y]))
            .ok_or_else(|| ReidError::InvalidArgument(format!("identity {} has a single sample", ids[i])))?;
        let hardest_neg = (0..b).filter(|&j| ids[j] != ids[i]).min_by(|&x, &y| row[x].total_cmp(&row[y])).expect("two identities");
        pos.push(i * b + hardest_pos);
        neg.push(i * b + hardest_neg);
    }
    Ok(dist.gather_flat(&pos).sub(dist.gather_flat(&neg)).add_scalar(margin).relu().mean())
}

/// Loss terms and their weights for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_id: f64,
    pub l_tri: f64,
    pub l_sa: f64,
    pub l_cr: f64,
    pub l_v2m: f64,
    pub total: f64,
    pub lambdas: [f64; 4],
}

/// Raw per-term values, absent where a stream is disabled.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub l_id: f64,
    pub l_tri: f64,
    pub l_sa: Option<f64>,
    pub l_cr: Option<f64>,
    pub l_v2m: Option<f64>,
}

impl LossReport {
    /// `l_id + l1*l_tri + l2*l_sa + l3*l_cr + l4*l_v2m`, in that order.
    pub fn recombine(&self) -> f64 {
        let [a, b, c, d] = self.lambdas;
        self.l_id + a * self.l_tri + b * self.l_sa + c * self.l_cr + d * self.l_v2m
    }

    /// The term named `name` (`total` included).
    pub fn term(&self, name: &str) -> Option<f64> {
        Some(match name {
            "l_id" => self.l_id,
            "l_tri" => self.l_tri,
            "l_sa" => self.l_sa,
            "l_cr" => self.l_cr,
            "l_v2m" => self.l_v2m,
            "total" => self.total,
            _ => return None,
        })
    }

    pub const TERMS: [&'static str; 5] = ["l_id", "l_tri", "l_sa", "l_cr", "l_v2m"];
}

/// Assemble a report; terms for streams outside `mask` are forced to zero.
pub fn total_loss(terms: &LossTerms, mask: StreamSet, lambdas: [f64; 4]) -> LossReport {
    let on = |s: Stream, v: Option<f64>| if mask.contains(s) { v.unwrap_or(0.0) } else { 0.0 };
    let mut r = LossReport {
        l_id: terms.l_id,
        l_tri: terms.l_tri,
        l_sa: on(Stream::Style, terms.l_sa),
        l_cr: on(Stream::Intermediary, terms.l_cr),
        l_v2m: on(Stream::Memory, terms.l_v2m),
        total: 0.0,
        lambdas,
    };
    r.total = r.recombine();
    r
}

/// Graph-side total with the same term order as [`LossReport::recombine`].
pub fn total_var<'g>(
    l_id: Var<'g>,
    l_tri: Var<'g>,
    extra: [Option<Var<'g>>; 3],
    cfg: &ExperimentConfig,
) -> Var<'g> {
    let [a, b, c, d] = cfg.lambdas();
    let mut t = l_id.add(l_tri.mul_scalar(a));
    for (term, w) in extra.into_iter().zip([b, c, d]) {
        if let Some(v) = term {
            t = t.add(v.mul_scalar(w));
        }
    }
    t
}

/// Every `{0, 0.5, 1}` assignment over the enabled streams, excluding all-zero.
pub fn weight_grid(mask: StreamSet) -> Vec<StreamWeights> {
    let levels = [0.0, 0.5, 1.0];
    let mut out = Vec::new();
    for a in levels {
        for b in levels {
            for c in levels {
                let w = [a, b, c];
                let valid = Stream::ALL.iter().enumerate().all(|(i, s)| mask.contains(*s) || w[i] == 0.0);
                if valid && w.iter().any(|&x| x > 0.0) {
                    out.push(w);
                }
            }
        }
    }
    out
}

fn spread(w: &StreamWeights, mask: StreamSet) -> f64 {
    let vals: Vec<f64> = Stream::ALL.iter().enumerate().filter(|(_, s)| mask.contains(**s)).map(|(i, _)| w[i]).collect();
    let total: f64 = vals.iter().sum();
    if total == 0.0 {
        return f64::INFINITY;
    }
    let norm: Vec<f64> = vals.iter().map(|v| v / total).collect();
    let mean = 1.0 / norm.len() as f64;
    norm.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
}

/// Grid point with the highest validation mAP; ties prefer the most even
/// weighting, then the earlier grid point.
pub fn select_weights(scored: &[(StreamWeights, f64)], mask: StreamSet) -> Result<StreamWeights> {
    let mut best: Option<(StreamWeights, f64, f64)> = None;
    for &(w, map) in scored {
        let s = spread(&w, mask);
        let better = match best {
            None => true,
            Some((_, bm, bs)) => map > bm || (map == bm && s < bs),
        };
        if better {
            best = Some((w, map, s));
        }
    }
    best.map(|b| b.0).ok_or_else(|| ReidError::InvalidArgument("empty weight grid".into()))
}

/// Column-wise identity matrix padded for a `[d_in, d_out]` projection.
pub fn identity_projection(d_in: usize, d_out: usize) -> Tensor {
    Tensor::from_fn([d_in, d_out], |i| if i / d_out == i % d_out { 1.0 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::rng::derive_rng;

    #[test]
    fn single_stream_identity_projection_returns_normalised_input() {
        let mut store = ParamStore::new();
        let mask: StreamSet = "St1".parse().unwrap();
        let f = Fusion::new(&mut store, mask, 3, 3, &mut derive_rng(0, "f", 0));
        *store.get_mut(f.projection.weight) = identity_projection(3, 3);
        let g = Graph::new();
        let p = store.bind(&g, false);
        let x = g.constant(Tensor::from_rows(&[vec![3.0, 0.0, 4.0]]));
        let out = f.forward(&p, [Some(x), None, None], &UNIFORM_WEIGHTS).unwrap();
        assert!(out.value().max_abs_diff(&Tensor::from_rows(&[vec![0.6, 0.0, 0.8]])) < 1e-12);
    }

    #[test]
    fn three_streams_concatenate_and_zero_weight_masks_a_stream() {
        let g = Graph::new();
        let mk = |s: f64| g.constant(Tensor::from_fn([2, 4], |i| (i as f64 + s).sin()));
        let block = fuse_blocks([Some(mk(0.0)), Some(mk(1.0)), Some(mk(2.0))], &UNIFORM_WEIGHTS).unwrap();
        assert_eq!(block.shape(), vec![2, 12]);
        let w = [1.0, 0.0, 1.0];
        let a = fuse_blocks([Some(mk(0.0)), Some(mk(1.0)), Some(mk(2.0))], &w).unwrap();
        let b = fuse_blocks([Some(mk(0.0)), Some(mk(7.0)), Some(mk(2.0))], &w).unwrap();
        assert_eq!(*a.value(), *b.value());
        assert!(fuse_blocks([None, None, None], &w).is_err());
    }

    #[test]
    fn identity_loss_closed_forms() {
        let g = Graph::new();
        let sure = g.constant(Tensor::from_rows(&[vec![0.0, -1e9, -1e9]]));
        assert!(loss_id(sure, &[0], 0.0).unwrap().item().abs() < 1e-12);
        let uniform = g.constant(Tensor::zeros([4, 5]));
        for eps in [0.0, 0.1] {
            assert!((loss_id(uniform, &[0, 1, 2, 4], eps).unwrap().item() - 5f64.ln()).abs() < 1e-12);
        }
        assert!(loss_id(uniform, &[5, 0, 0, 0], 0.1).is_err());
    }

    #[test]
    fn triplet_closed_forms() {
        let g = Graph::new();
        let sep = g.constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![10.0, 0.0], vec![10.0, 0.0]]));
        assert_eq!(loss_tri(sep, &[0, 0, 1, 1], 0.3).unwrap().item(), 0.0);
        let collapsed = g.constant(Tensor::zeros([4, 3]));
        assert!((loss_tri(collapsed, &[0, 0, 1, 1], 0.3).unwrap().item() - 0.3).abs() < 1e-12);
        assert!(loss_tri(collapsed, &[0, 0, 0, 0], 0.3).is_err());
        assert!(loss_tri(collapsed, &[0, 0, 1, 2], 0.3).is_err());
    }

    #[test]
    fn report_recombination_and_masking() {
        let terms = LossTerms { l_id: 1.0, l_tri: 1.0, l_sa: Some(1.0), l_cr: Some(1.0), l_v2m: Some(1.0) };
        let r = total_loss(&terms, StreamSet::ALL, [1.0, 1.5, 1.0, 1.5]);
        assert_eq!(r.total, 6.0);
        let r = total_loss(&terms, StreamSet::ALL, [0.0; 4]);
        assert_eq!(r.total, 1.0);
        let r = total_loss(&terms, "St12".parse().unwrap(), [1.0, 1.5, 1.0, 1.5]);
        assert_eq!(r.l_cr, 0.0);
        assert_eq!(r.total, 5.0);
    }

    #[test]
    fn weight_selection() {
        let mask = StreamSet::ALL;
        assert_eq!(weight_grid(mask).len(), 26);
        assert_eq!(weight_grid("St2".parse().unwrap()), vec![[0.0, 0.5, 0.0], [0.0, 1.0, 0.0]]);
        assert_eq!(select_weights(&[([1.0, 0.0, 0.5], 0.3)], mask).unwrap(), [1.0, 0.0, 0.5]);
        let scored: Vec<_> = weight_grid(mask).into_iter().map(|w| (w, if w == UNIFORM_WEIGHTS { 0.9 } else { 0.5 })).collect();
        assert_eq!(select_weights(&scored, mask).unwrap(), UNIFORM_WEIGHTS);
        // a tie between uniform and skewed goes to a uniform point
        let tie = [([1.0, 0.5, 0.0], 0.7), ([0.5, 0.5, 0.5], 0.7), ([1.0, 1.0, 1.0], 0.7)];
        assert_eq!(select_weights(&tie, mask).unwrap(), [0.5, 0.5, 0.5]);
        assert_eq!(select_weights(&tie, mask).unwrap(), select_weights(&tie, mask).unwrap());
        assert!(select_weights(&[], mask).is_err());
    }
}
