//! Query/gallery protocols, cosine ranking, CMC and mAP.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::config::{Modality, Platform};
use crate::data::{eval_clips, FrameStore, Manifest, Split};
use crate::error::{ReidError, Result};
use crate::fusion::{select_weights, weight_grid, StreamWeights};
use crate::model::ReidModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    V2I,
    I2V,
}

impl Direction {
    pub fn query_modality(self) -> Modality {
        match self {
            Direction::V2I => Modality::Visible,
            Direction::I2V => Modality::Infrared,
        }
    }

    pub fn gallery_modality(self) -> Modality {
        match self {
            Direction::V2I => Modality::Infrared,
            Direction::I2V => Modality::Visible,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::V2I => "V2I",
            Direction::I2V => "I2V",
        })
    }
}

impl FromStr for Direction {
    type Err = ReidError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "V2I" => Ok(Direction::V2I),
            "I2V" => Ok(Direction::I2V),
            _ => Err(ReidError::InvalidArgument(format!("unknown direction `{s}` (V2I or I2V)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub query_platform: Platform,
    pub gallery_platform: Platform,
    pub direction: Direction,
    pub include_distractors: bool,
}

impl ProtocolSpec {
    pub fn new(query_platform: Platform, gallery_platform: Platform, direction: Direction) -> Self {
        Self { query_platform, gallery_platform, direction, include_distractors: false }
    }

    /// The eight standard protocols: ground-ground, aerial-aerial,
    /// ground-aerial, aerial-ground, each V2I then I2V. Distractors join the
    /// I2V galleries.
    pub fn standard() -> Vec<ProtocolSpec> {
        use Platform::{Aerial, Ground};
        let mut out = Vec::new();
        for (q, g) in [(Ground, Ground), (Aerial, Aerial), (Ground, Aerial), (Aerial, Ground)] {
            for d in [Direction::V2I, Direction::I2V] {
                out.push(ProtocolSpec { include_distractors: d == Direction::I2V, ..ProtocolSpec::new(q, g, d) });
            }
        }
        out
    }

    /// Platform pair label, e.g. `ground-to-aerial`.
    pub fn name(&self) -> String {
        format!("{}-to-{}", self.query_platform, self.gallery_platform)
    }
}

impl FromStr for ProtocolSpec {
    type Err = ReidError;

    /// `ground-to-ground:V2I`, optionally suffixed with `+distractors`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || ReidError::InvalidArgument(format!("bad protocol `{s}` (expected e.g. ground-to-aerial:V2I)"));
        let (body, distractors) = match s.strip_suffix("+distractors") {
            Some(b) => (b, true),
            None => (s, false),
        };
        let (pair, dir) = body.split_once(':').ok_or_else(bad)?;
        let (q, g) = pair.split_once("-to-").ok_or_else(bad)?;
        let q = q.parse::<Platform>().map_err(|_| bad())?;
        let g = g.parse::<Platform>().map_err(|_| bad())?;
        Ok(ProtocolSpec { include_distractors: distractors, ..ProtocolSpec::new(q, g, dir.parse()?) })
    }
}

/// Manifest indices of the query and gallery tracklets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Protocol {
    pub spec: ProtocolSpec,
    pub query: Vec<usize>,
    pub gallery: Vec<usize>,
}

/// Select queries and gallery from `split`; distractors (gallery only) come
/// from the distractor split and must match the gallery platform and modality.
pub fn build_protocol(manifest: &Manifest, spec: &ProtocolSpec, split: Split) -> Result<Protocol> {
    let cell = |i: usize, p: Platform, m: Modality| {
        let t = manifest.tracklet(i);
        t.platform == p && t.modality == m && !t.is_distractor
    };
    let qm = spec.direction.query_modality();
    let gm = spec.direction.gallery_modality();
    let query: Vec<usize> = manifest.indices(split).into_iter().filter(|&i| cell(i, spec.query_platform, qm)).collect();
    let mut gallery: Vec<usize> =
        manifest.indices(split).into_iter().filter(|&i| cell(i, spec.gallery_platform, gm)).collect();
    if spec.include_distractors {
        gallery.extend(manifest.indices(Split::Distractor).into_iter().filter(|&i| {
            let t = manifest.tracklet(i);
            t.platform == spec.gallery_platform && t.modality == gm
        }));
    }
    if query.is_empty() || gallery.is_empty() {
        return Err(ReidError::Data(format!(
            "protocol {}:{} on the {split} split is empty ({} query / {} gallery tracklets)",
            spec.name(),
            spec.direction,
            query.len(),
            gallery.len()
        )));
    }
    let gallery_ids: BTreeSet<u32> = gallery.iter().map(|&i| manifest.tracklet(i).id).collect();
    if let Some(&missing) = query.iter().find(|&&i| !gallery_ids.contains(&manifest.tracklet(i).id)) {
        return Err(ReidError::Data(format!(
            "protocol {}:{}: query identity {} has no gallery tracklet",
            spec.name(),
            spec.direction,
            manifest.tracklet(missing).id
        )));
    }
    Ok(Protocol { spec: *spec, query, gallery })
}

/// What ranking needs to know about a tracklet.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrackletMeta {
    pub id: u32,
    pub camera: String,
    pub is_distractor: bool,
}

impl TrackletMeta {
    pub fn of(manifest: &Manifest, i: usize) -> Self {
        let t = manifest.tracklet(i);
        Self { id: t.id, camera: t.camera.clone(), is_distractor: t.is_distractor }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    /// `cmc[r]`: fraction of queries with a correct match within the top `r + 1`.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub per_query_ap: Vec<f64>,
}

impl RankingResult {
    /// CMC at a 1-based rank, saturating at the gallery size.
    pub fn rank(&self, r: usize) -> f64 {
        self.cmc[r.clamp(1, self.cmc.len()) - 1]
    }
}

/// Cosine distances `[Q, G]`.
pub fn cosine_distances(query: &Tensor, gallery: &Tensor) -> Result<Tensor> {
    if query.rank() != 2 || gallery.rank() != 2 || query.dim(1) != gallery.dim(1) {
        return Err(ReidError::Shape(format!("feature shapes {:?} and {:?}", query.shape(), gallery.shape())));
    }
    let norm = |t: &Tensor| {
        let d = t.dim(1);
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        out
    };
    Ok(norm(query).matmul_t(&norm(gallery), false, true).map(|s| 1.0 - s))
}

/// Rank the gallery for every query. Gallery entries with the query's id and
/// camera are dropped when `camera_filter` is set; distractors are never
/// relevant.
pub fn rank(
    query: &Tensor,
    gallery: &Tensor,
    query_meta: &[TrackletMeta],
    gallery_meta: &[TrackletMeta],
    camera_filter: bool,
) -> Result<RankingResult> {
    if query.dim(0) != query_meta.len() || gallery.dim(0) != gallery_meta.len() {
        return Err(ReidError::Shape("features and metadata disagree in length".into()));
    }
    let dist = cosine_distances(query, gallery)?;
    let g = gallery.dim(0);
    let mut cmc = vec![0.0; g];
    let mut aps = Vec::with_capacity(query_meta.len());
    for (qi, qm) in query_meta.iter().enumerate() {
        let row = dist.row(qi);
        let mut order: Vec<usize> = (0..g)
            .filter(|&j| !(camera_filter && gallery_meta[j].id == qm.id && gallery_meta[j].camera == qm.camera))
            .collect();
        if order.is_empty() {
            return Err(ReidError::InvalidArgument(format!("query {qi} has no valid gallery entries")));
        }
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        let mut first = None;
        for (pos, &j) in order.iter().enumerate() {
            if gallery_meta[j].id == qm.id && !gallery_meta[j].is_distractor {
                hits += 1;
                precision_sum += hits as f64 / (pos + 1) as f64;
                first.get_or_insert(pos);
            }
        }
        let first = first.ok_or_else(|| ReidError::InvalidArgument(format!("query {qi} (id {}) has no relevant gallery entry", qm.id)))?;
        cmc[first..].iter_mut().for_each(|c| *c += 1.0);
        aps.push(precision_sum / hits as f64);
    }
    let q = query_meta.len() as f64;
    cmc.iter_mut().for_each(|c| *c /= q);
    let map = aps.iter().sum::<f64>() / q;
    Ok(RankingResult { cmc, map, per_query_ap: aps })
}

/// One results-table line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub label: Option<String>,
    pub protocol: String,
    pub direction: Direction,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub r20: f64,
    pub map: f64,
}

impl ResultRow {
    pub fn new(spec: &ProtocolSpec, r: &RankingResult) -> Self {
        Self {
            label: None,
            protocol: spec.name(),
            direction: spec.direction,
            r1: r.rank(1),
            r5: r.rank(5),
            r10: r.rank(10),
            r20: r.rank(20),
            map: r.map,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    fn labelled(&self) -> bool {
        self.rows.iter().any(|r| r.label.is_some())
    }

    /// Machine-readable form; metrics as fractions in `[0, 1]`.
    pub fn to_csv(&self) -> String {
        let lead = if self.labelled() { "streams," } else { "" };
        let mut s = format!("{lead}protocol,direction,R1,R5,R10,R20,mAP\n");
        for r in &self.rows {
            if self.labelled() {
                s += &format!("{},", r.label.as_deref().unwrap_or(""));
            }
            s += &format!("{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n", r.protocol, r.direction, r.r1, r.r5, r.r10, r.r20, r.map);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| ReidError::Data("empty results table".into()))?;
        let labelled = header.starts_with("streams,");
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let mut f: Vec<&str> = line.split(',').collect();
            let label = if labelled { Some(f.remove(0).to_string()) } else { None };
            if f.len() != 7 {
                return Err(ReidError::Data(format!("bad results row `{line}`")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| ReidError::Data(format!("bad number `{s}`")));
            rows.push(ResultRow {
                label,
                protocol: f[0].to_string(),
                direction: f[1].parse()?,
                r1: num(f[2])?,
                r5: num(f[3])?,
                r10: num(f[4])?,
                r20: num(f[5])?,
                map: num(f[6])?,
            });
        }
        Ok(Self { rows })
    }

    /// Human-readable table with percentages.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let lead = if self.labelled() { format!("{:<8}", "streams") } else { String::new() };
        s += &format!("{lead}{:<20} {:<4} {:>7} {:>7} {:>7} {:>7} {:>7}\n", "protocol", "dir", "R1", "R5", "R10", "R20", "mAP");
        for r in &self.rows {
            let lead = if self.labelled() { format!("{:<8}", r.label.as_deref().unwrap_or("")) } else { String::new() };
            s += &format!(
                "{lead}{:<20} {:<4} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2}\n",
                r.protocol,
                r.direction.to_string(),
                100.0 * r.r1,
                100.0 * r.r5,
                100.0 * r.r10,
                100.0 * r.r20,
                100.0 * r.map
            );
        }
        s
    }

    /// Write `<stem>.csv` and `<stem>.txt` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| ReidError::io(dir, e))?;
        for (ext, body) in [("csv", self.to_csv()), ("txt", self.render())] {
            let path = dir.join(format!("{stem}.{ext}"));
            std::fs::write(&path, body).map_err(|e| ReidError::io(&path, e))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub split: Split,
    pub weights: StreamWeights,
    pub camera_filter: bool,
}

/// Tracklet embeddings: the mean over uniform-stride clips.
pub fn extract_features(
    model: &ReidModel,
    frames: &mut FrameStore,
    manifest: &Manifest,
    tracklets: &[usize],
    weights: &StreamWeights,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    const CHUNK: usize = 32;
    let t = model.cfg.frames_per_clip;
    let clips: Vec<(usize, Vec<usize>)> = tracklets
        .iter()
        .flat_map(|&ti| eval_clips(manifest.tracklet(ti).frames.len(), t).into_iter().map(move |c| (ti, c)))
        .collect();
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for chunk in clips.chunks(CHUNK) {
        let batch = frames.assemble(manifest, chunk)?;
        let emb = model.embed(&batch, weights)?;
        for (k, (ti, _)) in chunk.iter().enumerate() {
            let e = sums.entry(*ti).or_insert_with(|| (vec![0.0; emb.dim(1)], 0));
            e.0.iter_mut().zip(emb.row(k)).for_each(|(a, b)| *a += b);
            e.1 += 1;
        }
    }
    Ok(sums.into_iter().map(|(ti, (s, n))| (ti, s.into_iter().map(|v| v / n as f64).collect())).collect())
}

fn stack(features: &BTreeMap<usize, Vec<f64>>, idx: &[usize]) -> Tensor {
    let d = features.values().next().map_or(0, Vec::len);
    Tensor::new([idx.len(), d], idx.iter().flat_map(|i| features[i].iter().copied()).collect())
}

/// Rank every protocol from precomputed tracklet features.
pub fn evaluate_features(
    manifest: &Manifest,
    protocols: &[Protocol],
    features: &BTreeMap<usize, Vec<f64>>,
    camera_filter: bool,
) -> Result<Vec<RankingResult>> {
    protocols
        .iter()
        .map(|p| {
            let qm: Vec<_> = p.query.iter().map(|&i| TrackletMeta::of(manifest, i)).collect();
            let gm: Vec<_> = p.gallery.iter().map(|&i| TrackletMeta::of(manifest, i)).collect();
            rank(&stack(features, &p.query), &stack(features, &p.gallery), &qm, &gm, camera_filter)
        })
        .collect()
}

/// Extract features once and produce one row per protocol spec.
pub fn evaluate(
    model: &ReidModel,
    frames: &mut FrameStore,
    manifest: &Manifest,
    specs: &[ProtocolSpec],
    opts: &EvalOptions,
) -> Result<ResultsTable> {
    if specs.is_empty() {
        return Err(ReidError::InvalidArgument("no protocols to evaluate".into()));
    }
    let protocols = specs.iter().map(|s| build_protocol(manifest, s, opts.split)).collect::<Result<Vec<_>>>()?;
    let needed: BTreeSet<usize> = protocols.iter().flat_map(|p| p.query.iter().chain(&p.gallery).copied()).collect();
    let needed: Vec<usize> = needed.into_iter().collect();
    let features = extract_features(model, frames, manifest, &needed, &opts.weights)?;
    let results = evaluate_features(manifest, &protocols, &features, opts.camera_filter)?;
    Ok(ResultsTable { rows: specs.iter().zip(&results).map(|(s, r)| ResultRow::new(s, r)).collect() })
}

/// Score every fusion grid point on a validation protocol and keep the best
/// (see [`select_weights`]). Returns the choice and the scored grid.
pub fn select_stream_weights(
    model: &ReidModel,
    frames: &mut FrameStore,
    manifest: &Manifest,
    validation: &ProtocolSpec,
    split: Split,
    camera_filter: bool,
) -> Result<(StreamWeights, Vec<(StreamWeights, f64)>)> {
    let protocol = build_protocol(manifest, validation, split)?;
    let needed: Vec<usize> = protocol.query.iter().chain(&protocol.gallery).copied().collect();
    let mut scored = Vec::new();
    for w in weight_grid(model.mask()) {
        let feats = extract_features(model, frames, manifest, &needed, &w)?;
        let r = evaluate_features(manifest, std::slice::from_ref(&protocol), &feats, camera_filter)?;
        scored.push((w, r[0].map));
    }
    Ok((select_weights(&scored, model.mask())?, scored))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Tracklet;

    fn meta(id: u32, cam: &str) -> TrackletMeta {
        TrackletMeta { id, camera: cam.into(), is_distractor: false }
    }

    #[test]
    fn perfect_retrieval() {
        let q = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let g = Tensor::from_rows(&[vec![0.0, 2.0], vec![3.0, 0.1]]);
        let r = rank(&q, &g, &[meta(0, "a"), meta(1, "a")], &[meta(1, "b"), meta(0, "b")], true).unwrap();
        assert_eq!(r.rank(1), 1.0);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn hand_case_average_precision() {
        // relevant at ranks 1 and 3
        let q = Tensor::from_rows(&[vec![1.0, 0.0]]);
        let g = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.5], vec![1.0, 1.0], vec![0.0, 1.0]]);
        let gm = [meta(7, "b"), meta(2, "b"), meta(7, "c"), meta(3, "b")];
        let r = rank(&q, &g, &[meta(7, "a")], &gm, true).unwrap();
        assert!((r.map - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(r.cmc, vec![1.0; 4]);
    }

    #[test]
    fn same_camera_matches_are_filtered() {
        let q = Tensor::from_rows(&[vec![1.0, 0.0]]);
        let g = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let gm = [meta(1, "a"), meta(1, "b"), meta(2, "b")];
        let r = rank(&q, &g, &[meta(1, "a")], &gm, true).unwrap();
        assert_eq!(r.rank(1), 0.0);
        assert_eq!(r.rank(2), 1.0);
        let unfiltered = rank(&q, &g, &[meta(1, "a")], &gm, false).unwrap();
        assert_eq!(unfiltered.rank(1), 1.0);
        assert!(rank(&q, &g.narrow(0, 0, 1), &[meta(1, "a")], &gm[..1], true).is_err());
    }

    #[test]
    fn protocol_spec_parsing_and_order() {
        let all = ProtocolSpec::standard();
        assert_eq!(all.len(), 8);
        assert_eq!(all[0].name(), "ground-to-ground");
        assert_eq!(all[1].direction, Direction::I2V);
        assert!(all[1].include_distractors && !all[0].include_distractors);
        let p: ProtocolSpec = "aerial-to-ground:I2V+distractors".parse().unwrap();
        assert_eq!(p, ProtocolSpec { include_distractors: true, ..ProtocolSpec::new(Platform::Aerial, Platform::Ground, Direction::I2V) });
        assert!("aerial:I2V".parse::<ProtocolSpec>().is_err());
    }

    fn push(m: &mut Manifest, split: Split, id: u32, p: Platform, md: Modality, cam: &str) {
        m.push(split, Tracklet { id, platform: p, modality: md, camera: cam.into(), frames: vec!["x.png".into()], is_distractor: split == Split::Distractor });
    }

    #[test]
    fn distractors_only_join_the_gallery_when_enabled() {
        let mut m = Manifest::new("/x");
        for id in 0..3 {
            push(&mut m, Split::Test, id, Platform::Ground, Modality::Visible, "g-rgb");
            push(&mut m, Split::Test, id, Platform::Ground, Modality::Infrared, "g-ir");
        }
        for id in 100..105 {
            push(&mut m, Split::Distractor, id, Platform::Ground, Modality::Visible, "g-rgb");
        }
        let mut spec = ProtocolSpec::new(Platform::Ground, Platform::Ground, Direction::I2V);
        let p = build_protocol(&m, &spec, Split::Test).unwrap();
        assert!(p.gallery.iter().all(|&i| !m.tracklet(i).is_distractor));
        spec.include_distractors = true;
        let p = build_protocol(&m, &spec, Split::Test).unwrap();
        let ids: BTreeSet<u32> = p.gallery.iter().map(|&i| m.tracklet(i).id).collect();
        assert_eq!(ids, [0, 1, 2, 100, 101, 102, 103, 104].into_iter().collect());
        push(&mut m, Split::Test, 9, Platform::Ground, Modality::Infrared, "g-ir");
        assert!(build_protocol(&m, &spec, Split::Test).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let t = ResultsTable {
            rows: vec![ResultRow { label: Some("St12".into()), protocol: "ground-to-ground".into(), direction: Direction::V2I, r1: 0.5, r5: 0.75, r10: 1.0, r20: 1.0, map: 0.625 }],
        };
        assert_eq!(ResultsTable::from_csv(&t.to_csv()).unwrap(), t);
        assert!(t.render().contains("62.50"));
    }
}
