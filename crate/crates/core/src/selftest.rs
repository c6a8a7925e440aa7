//! In-binary property checks: each graph loss against its loop oracle, finite
//! differences, the style, memory and anaglyph identities, ranking metrics and
//! protocol counts.

use rand::Rng;

use crate::autodiff::{analytic_gradient, finite_difference, Graph, Tensor, Var};
use crate::config::{Modality, Platform};
use crate::data::{Manifest, Split, Tracklet};
use crate::eval::{build_protocol, rank, Direction, ProtocolSpec, TrackletMeta};
use crate::fusion::{loss_id, loss_tri, total_loss, LossTerms};
use crate::intermediary::{anaglyph, loss_cr, EdgeOperator};
use crate::memory::{build_memory, loss_v2m, update_memory, MemoryDecoder, SequenceFeature};
use crate::oracle;
use crate::rng::{derive_rng, ReidRng};
use crate::style::{channel_stats, loss_sa, style_attack, style_augment, BlockFeature, StyleCoeffs};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.dim(0)).map(|i| t.row(i).to_vec()).collect()
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ReidRng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Labels for `b` samples over `p` identities with at least two each.
fn pk_labels(rng: &mut ReidRng, max_b: usize) -> Vec<usize> {
    let p = rng.random_range(2..=(max_b / 2).min(4));
    let mut ids: Vec<usize> = (0..p).flat_map(|i| [i, i]).collect();
    let extra = rng.random_range(0..=max_b - ids.len());
    ids.extend((0..extra).map(|_| rng.random_range(0..p)));
    ids
}

/// A random small instance of each loss: inputs plus oracle value.
pub struct LossCase {
    pub name: &'static str,
    pub input: Tensor,
    pub graph: Box<dyn for<'g> Fn(Var<'g>) -> Var<'g>>,
    pub oracle: Box<dyn Fn(&Tensor) -> f64>,
}

/// Random cases for the five losses; every case is a scalar function of one
/// input tensor of width `d`.
pub fn loss_cases(rng: &mut ReidRng, d: usize, max_b: usize) -> Vec<LossCase> {
    let mut out = Vec::new();

    // identity loss on logits
    let ids = pk_labels(rng, max_b);
    let c = ids.iter().max().unwrap() + 1 + rng.random_range(0..3);
    let x = uniform(&[ids.len(), c], -3.0, 3.0, rng);
    let (i1, i2) = (ids.clone(), ids.clone());
    out.push(LossCase {
        name: "loss_id",
        input: x,
        graph: Box::new(move |v| loss_id(v, &i1, 0.1).unwrap()),
        oracle: Box::new(move |t| oracle::cross_entropy(&rows(t), &i2, 0.1)),
    });

    // triplet loss on features
    let ids = pk_labels(rng, max_b);
    let x = uniform(&[ids.len(), d], -1.0, 1.0, rng);
    let (i1, i2) = (ids.clone(), ids.clone());
    out.push(LossCase {
        name: "loss_tri",
        input: x,
        graph: Box::new(move |v| loss_tri(v, &i1, 0.3).unwrap()),
        oracle: Box::new(move |t| oracle::loss_tri(&rows(t), &i2, 0.3)),
    });

    // style-attack defence: attacked = x * s + t, logits = attacked @ W
    let ids = pk_labels(rng, max_b);
    let c = ids.iter().max().unwrap() + 2;
    let b = ids.len();
    let x = uniform(&[b, d], -1.0, 1.0, rng);
    let s = uniform(&[1, d], 0.5, 1.5, rng);
    let sh = uniform(&[1, d], -0.5, 0.5, rng);
    let w = uniform(&[d, c], -1.0, 1.0, rng);
    let (s2, sh2, w2, i2) = (s.clone(), sh.clone(), w.clone(), ids.clone());
    out.push(LossCase {
        name: "loss_sa",
        input: x,
        graph: Box::new(move |v| {
            let g = v.graph();
            let att = v.mul(g.constant(s.clone())).add(g.constant(sh.clone()));
            let logits = att.matmul(g.constant(w.clone()));
            loss_sa(logits, v, att, &ids).unwrap()
        }),
        oracle: Box::new(move |t| {
            let orig = rows(t);
            let att: Vec<Vec<f64>> =
                orig.iter().map(|r| r.iter().enumerate().map(|(k, v)| v * s2.data()[k] + sh2.data()[k]).collect()).collect();
            let logits: Vec<Vec<f64>> = att
                .iter()
                .map(|r| (0..c).map(|j| (0..d).map(|k| r[k] * w2.data()[k * c + j]).sum()).collect())
                .collect();
            oracle::loss_sa(&logits, &orig, &att, &i2)
        }),
    });

    // video-to-memory contrastive loss
    let b = rng.random_range(2..=max_b);
    let n_ids = rng.random_range(1..=4u32);
    let ids: Vec<u32> = (0..b).map(|_| rng.random_range(0..n_ids)).collect();
    let platforms: Vec<Platform> = (0..b).map(|_| Platform::ALL[rng.random_range(0..2)]).collect();
    let mut cells: Vec<(u32, Platform)> = Vec::new();
    for id in 0..n_ids + 1 {
        for p in Platform::ALL {
            cells.push((id, p));
        }
    }
    let mem = uniform(&[cells.len(), d], -1.0, 1.0, rng);
    let x = uniform(&[b, d], -1.0, 1.0, rng);
    let (ids2, pl2, cells2, mem2) = (ids.clone(), platforms.clone(), cells.clone(), mem.clone());
    out.push(LossCase {
        name: "loss_v2m",
        input: x,
        graph: Box::new(move |v| {
            let m = v.graph().constant(mem.clone());
            loss_v2m(v, &ids, &platforms, m, &cells, 0.5).unwrap()
        }),
        oracle: Box::new(move |t| oracle::loss_v2m(&rows(t), &ids2, &pl2, &rows(&mem2), &cells2, 0.5)),
    });

    // cross-reconstruction with a linear reconstruction map; rows [0, n) are
    // visible, [n, 2n) infrared
    let n = rng.random_range(1..=max_b / 2);
    let x = uniform(&[2 * n, d], -1.0, 1.0, rng);
    let r = uniform(&[d, d], -0.5, 0.5, rng);
    let r2 = r.clone();
    out.push(LossCase {
        name: "loss_cr",
        input: x,
        graph: Box::new(move |v| {
            let g = v.graph();
            let rm = g.constant(r.clone());
            loss_cr(v.narrow(0, 0, n), v.narrow(0, n, n), |z| z.matmul(rm)).unwrap()
        }),
        oracle: Box::new(move |t| {
            let all = rows(t);
            let map = |z: &[f64]| (0..d).map(|j| (0..d).map(|k| z[k] * r2.data()[k * d + j]).sum()).collect();
            oracle::loss_cr(&all[..n], &all[n..], map)
        }),
    });
    out
}

fn eval_case(case: &LossCase, x: &Tensor) -> f64 {
    let g = Graph::new();
    (case.graph)(g.constant(x.clone())).item()
}

/// Graph losses against loop oracles on `trials` random instances each.
pub fn check_loss_oracles(seed: u64, trials: usize) -> CheckResult {
    let mut worst = (0.0, "");
    for t in 0..trials {
        let mut rng = derive_rng(seed, "selftest-loss", t as u64);
        let d = rng.random_range(2..=8);
        for case in loss_cases(&mut rng, d, 16) {
            let e = rel(eval_case(&case, &case.input), (case.oracle)(&case.input));
            if e > worst.0 {
                worst = (e, case.name);
            }
        }
    }
    CheckResult::new(
        "loss-oracle equivalence",
        worst.0 <= 1e-5,
        format!("{trials} instances x 5 losses, worst relative error {:.2e} ({})", worst.0, worst.1),
    )
}

/// `||a - b|| / max(||a||, ||b||)`.
pub fn gradient_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff = analytic.data().iter().zip(numeric.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    diff / analytic.norm_sq().sqrt().max(numeric.norm_sq().sqrt()).max(1e-12)
}

/// Tape gradients against central differences (step 1e-3), D = 8.
pub fn check_gradients(seed: u64, trials: usize) -> CheckResult {
    let mut worst = (0.0, "");
    for t in 0..trials {
        let mut rng = derive_rng(seed, "selftest-grad", t as u64);
        for case in loss_cases(&mut rng, 8, 8) {
            let (_, analytic) = analytic_gradient(|v| (case.graph)(v), &case.input);
            let numeric = finite_difference(|x| eval_case(&case, x), &case.input, 1e-3);
            let e = gradient_error(&analytic, &numeric);
            if e > worst.0 {
                worst = (e, case.name);
            }
        }
    }
    CheckResult::new(
        "gradient checks",
        worst.0 <= 1e-3,
        format!("{trials} instances x 5 losses, worst relative error {:.2e} ({})", worst.0, worst.1),
    )
}

/// Attacked channels carry the donor's mean and standard deviation; a sample
/// attacked with itself is unchanged.
pub fn check_style_transfer(seed: u64, pairs: usize) -> CheckResult {
    let mut rng = derive_rng(seed, "selftest-style", 0);
    let mut worst: f64 = 0.0;
    let mut fixed_point = true;
    let mut done = 0;
    while done < pairs {
        let (h, w) = (rng.random_range(2..6), rng.random_range(2..6));
        let (a, b) = (rng.random_range(0.1..3.0), rng.random_range(-2.0..2.0));
        let target = Tensor::from_fn([1, 1, h, w], |_| rng.random_range(-1.0..1.0) * a + b);
        if channel_stats(&target).1[0] <= 1e-6 {
            continue;
        }
        let (c, d) = (rng.random_range(0.1..3.0), rng.random_range(-2.0..2.0));
        let donor = Tensor::from_fn([1, 1, h, w], |_| rng.random_range(-1.0..1.0) * c + d);
        let (out, _) = style_attack(&BlockFeature { values: target.clone(), block: 3 }, &BlockFeature { values: donor.clone(), block: 3 })
            .expect("shapes match");
        let (mo, so) = channel_stats(&out.values);
        let (md, sd) = channel_stats(&donor);
        worst = worst.max((mo[0] - md[0]).abs()).max((so[0] - sd[0]).abs());
        let (same, _) = style_attack(&BlockFeature { values: target.clone(), block: 3 }, &BlockFeature { values: target.clone(), block: 3 })
            .expect("shapes match");
        fixed_point &= same.values == target;
        done += 1;
    }
    CheckResult::new(
        "style-attack statistic transfer",
        worst <= 1e-4 && fixed_point,
        format!("{pairs} channel pairs, worst stat error {worst:.2e}, self-attack exact: {fixed_point}"),
    )
}

/// Sampled coefficients stay in [0.5, 1.5]; unit coefficients are exact.
pub fn check_augment_range(seed: u64, samples: usize) -> CheckResult {
    let mut rng = derive_rng(seed, "selftest-augment", 0);
    let mut in_range = true;
    for _ in 0..samples {
        in_range &= StyleCoeffs::sample(&mut rng).all().iter().all(|c| (0.5..=1.5).contains(c));
    }
    let frame = uniform(&[3, 6, 5], 0.0, 1.0, &mut rng);
    let identity = Modality::ALL
        .iter()
        .all(|&m| style_augment(&frame, m, &StyleCoeffs::IDENTITY, 1.0).map(|o| o == frame).unwrap_or(false));
    CheckResult::new(
        "style-augment range",
        in_range && identity,
        format!("{samples} coefficient draws in range: {in_range}, identity coefficients exact: {identity}"),
    )
}

/// Base memory equals the per-cell mean; zero prompts leave it unchanged.
pub fn check_memory(seed: u64, trials: usize) -> CheckResult {
    let mut worst: f64 = 0.0;
    let mut residual = true;
    for t in 0..trials {
        let mut rng = derive_rng(seed, "selftest-memory", t as u64);
        let d = rng.random_range(1..=8);
        let n = rng.random_range(1..=24);
        let feats: Vec<SequenceFeature> = (0..n)
            .map(|_| SequenceFeature {
                vector: (0..d).map(|_| rng.random_range(-5.0..5.0)).collect(),
                id: rng.random_range(0..4),
                platform: Platform::ALL[rng.random_range(0..2)],
            })
            .collect();
        let mem = build_memory(&feats).expect("non-empty");
        for (k, key) in mem.cells.iter().enumerate() {
            let members: Vec<&SequenceFeature> = feats.iter().filter(|f| (f.id, f.platform) == *key).collect();
            for j in 0..d {
                let mut s = 0.0;
                for f in &members {
                    s += f.vector[j];
                }
                worst = worst.max((mem.base[k][j] - s / members.len() as f64).abs());
            }
        }
        let zero = Tensor::zeros([mem.len(), d]);
        let kept = mem.clone().with_prompts(&zero);
        residual &= kept.updated == kept.base;
        // a decoder whose output projections are zero produces zero prompts
        let mut store = crate::autodiff::nn::ParamStore::new();
        let dec = MemoryDecoder::new(&mut store, d, 1, &mut rng);
        for id in dec.output_weights() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(shape);
        }
        let upd = update_memory(mem.clone(), &dec, &store);
        residual &= upd.updated == upd.base;
    }
    CheckResult::new(
        "memory construction",
        worst <= 1e-6 && residual,
        format!("{trials} instances, worst mean error {worst:.2e}, zero-prompt identity: {residual}"),
    )
}

/// Filter output matches the padded-image oracle exactly on integer images;
/// a zero-sum kernel maps constant input to the offset.
pub fn check_anaglyph(seed: u64, trials: usize) -> CheckResult {
    let mut exact = true;
    let mut constant_ok = true;
    for t in 0..trials {
        let mut rng = derive_rng(seed, "selftest-anaglyph", t as u64);
        let (h, w) = (rng.random_range(3..12), rng.random_range(3..12));
        let mut kernel: Vec<f64> = (0..9).map(|_| rng.random_range(-4..=4) as f64).collect();
        let offset = rng.random_range(-3..=3) as f64;
        let img = Tensor::from_fn([1, h, w], |_| rng.random_range(0..=255) as f64);
        let op = EdgeOperator::from_slice(&kernel, offset).expect("nine values");
        let got = anaglyph(&img, Modality::Infrared, &op).expect("valid frame");
        exact &= got.data() == oracle::anaglyph(img.data(), h, w, &op).as_slice();

        let s: f64 = kernel[..8].iter().sum();
        kernel[8] = -s;
        let op = EdgeOperator::from_slice(&kernel, offset).expect("nine values");
        let flat = Tensor::full([1, h, w], rng.random_range(0..=255) as f64);
        constant_ok &= anaglyph(&flat, Modality::Infrared, &op).expect("valid frame").data().iter().all(|&v| v == offset);
    }
    CheckResult::new(
        "anaglyph exactness",
        exact && constant_ok,
        format!("{trials} integer images bit-exact: {exact}, zero-sum kernel gives offset: {constant_ok}"),
    )
}

/// A random ranking instance (Q, G <= 50) where every query has a relevant
/// gallery item on another camera.
pub fn random_ranking_instance(rng: &mut ReidRng) -> (Tensor, Tensor, Vec<TrackletMeta>, Vec<TrackletMeta>) {
    let q = rng.random_range(1..=50usize);
    let d = rng.random_range(1..=4);
    let n_ids = rng.random_range(1..=8u32);
    let cams = ["c0", "c1", "c2"];
    let qm: Vec<TrackletMeta> = (0..q)
        .map(|_| TrackletMeta { id: rng.random_range(0..n_ids), camera: cams[rng.random_range(0..2)].into(), is_distractor: false })
        .collect();
    let mut gm: Vec<TrackletMeta> = Vec::new();
    for id in 0..n_ids {
        if qm.iter().any(|m| m.id == id) {
            gm.push(TrackletMeta { id, camera: "c2".into(), is_distractor: false });
        }
    }
    let g = rng.random_range(gm.len()..=50);
    while gm.len() < g {
        gm.push(TrackletMeta {
            id: rng.random_range(0..n_ids + 2),
            camera: cams[rng.random_range(0..3)].into(),
            is_distractor: rng.random_bool(0.1),
        });
    }
    // shuffle so the guaranteed matches are not always first
    for i in (1..gm.len()).rev() {
        gm.swap(i, rng.random_range(0..=i));
    }
    // coarse values produce distance ties
    let coarse = rng.random_bool(0.5);
    let value = |rng: &mut ReidRng| if coarse { rng.random_range(-2..=2) as f64 } else { rng.random_range(-1.0..1.0) };
    let qf = Tensor::from_fn([q, d], |_| value(rng));
    let gf = Tensor::from_fn([gm.len(), d], |_| value(rng));
    (qf, gf, qm, gm)
}

fn oracle_ranking(qf: &Tensor, gf: &Tensor, qm: &[TrackletMeta], gm: &[TrackletMeta], filter: bool) -> Option<(Vec<f64>, Vec<f64>)> {
    let dist = crate::eval::cosine_distances(qf, gf).ok()?;
    let q: Vec<(u32, String)> = qm.iter().map(|m| (m.id, m.camera.clone())).collect();
    let g: Vec<(u32, String, bool)> = gm.iter().map(|m| (m.id, m.camera.clone(), m.is_distractor)).collect();
    oracle::rank(&rows(&dist), &q, &g, filter)
}

/// Ranking against the counting oracle, the hand case, CMC monotonicity and
/// distractor injection.
pub fn check_metrics(seed: u64, trials: usize) -> CheckResult {
    let mut worst: f64 = 0.0;
    let mut monotone = true;
    let mut distractor_ok = true;
    for t in 0..trials {
        let mut rng = derive_rng(seed, "selftest-rank", t as u64);
        let (qf, gf, qm, gm) = random_ranking_instance(&mut rng);
        let got = rank(&qf, &gf, &qm, &gm, true).expect("valid instance");
        let (cmc, aps) = oracle_ranking(&qf, &gf, &qm, &gm, true).expect("valid instance");
        for (a, b) in got.cmc.iter().zip(&cmc).chain(got.per_query_ap.iter().zip(&aps)) {
            worst = worst.max((a - b).abs());
        }
        monotone &= got.cmc.windows(2).all(|w| w[0] <= w[1]);
        monotone &= got.map <= got.cmc[got.cmc.len() - 1] + 1e-12 && got.cmc.iter().all(|c| (0.0..=1.0).contains(c));

        let extra = rng.random_range(1..5);
        let d = gf.dim(1);
        let more = Tensor::from_fn([extra, d], |_| rng.random_range(-1.0..1.0));
        let gf2 = Tensor::concat(&[&gf, &more], 0);
        let mut gm2 = gm.clone();
        for _ in 0..extra {
            gm2.push(TrackletMeta { id: qm[0].id, camera: "c2".into(), is_distractor: true });
        }
        let with = rank(&qf, &gf2, &qm, &gm2, true).expect("valid instance");
        distractor_ok &= with.per_query_ap.iter().zip(&got.per_query_ap).all(|(a, b)| *a <= *b + 1e-12);
    }
    let q = Tensor::from_rows(&[vec![1.0, 0.0]]);
    let g = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.5], vec![1.0, 1.0], vec![0.0, 1.0]]);
    let m = |id, cam: &str| TrackletMeta { id, camera: cam.into(), is_distractor: false };
    let hand = rank(&q, &g, &[m(7, "a")], &[m(7, "b"), m(2, "b"), m(7, "c"), m(3, "b")], true).map(|r| r.map).unwrap_or(f64::NAN);
    let hand_ok = (hand - 5.0 / 6.0).abs() < 1e-12;
    CheckResult::new(
        "metric oracle",
        worst <= 1e-9 && monotone && distractor_ok && hand_ok,
        format!(
            "{trials} instances, worst error {worst:.2e}; hand-case AP {hand:.6} (5/6); CMC monotone: {monotone}; distractors never raise AP: {distractor_ok}"
        ),
    )
}

/// Reported totals recombine exactly for the default and random weights.
pub fn check_recombination(seed: u64, trials: usize) -> CheckResult {
    let mut worst: f64 = 0.0;
    let defaults = [1.0, 1.5, 1.0, 1.5];
    let ones = LossTerms { l_id: 1.0, l_tri: 1.0, l_sa: Some(1.0), l_cr: Some(1.0), l_v2m: Some(1.0) };
    let six = total_loss(&ones, crate::config::StreamSet::ALL, defaults).total;
    for t in 0..trials {
        let mut rng = derive_rng(seed, "selftest-total", t as u64);
        let lambdas = if t == 0 { defaults } else { [0; 4].map(|_| rng.random_range(0.0..3.0)) };
        let mut r = || rng.random_range(0.0..10.0);
        let terms = LossTerms { l_id: r(), l_tri: r(), l_sa: Some(r()), l_cr: Some(r()), l_v2m: Some(r()) };
        let rep = total_loss(&terms, crate::config::StreamSet::ALL, lambdas);
        let [a, b, c, d] = lambdas;
        worst = worst.max((rep.total - (rep.l_id + a * rep.l_tri + b * rep.l_sa + c * rep.l_cr + d * rep.l_v2m)).abs());
    }
    CheckResult::new(
        "loss recombination",
        worst <= 1e-7 && six == 6.0,
        format!("{trials} reports, worst error {worst:.2e}; unit terms with default weights total {six}"),
    )
}

/// Test split shaped like the reference ground-ground and aerial-aerial
/// cells: 199 ground identities with 313 visible and 199 infrared
/// tracklets, and 174 aerial identities with one tracklet per modality.
pub fn benchmark_shaped_manifest() -> Manifest {
    let mut m = Manifest::new("/nonexistent");
    let mut push = |id: u32, p: Platform, md: Modality, cam: &str| {
        m.push(
            Split::Test,
            Tracklet { id, platform: p, modality: md, camera: cam.into(), frames: vec!["f.png".into()], is_distractor: false },
        )
    };
    for id in 0..199u32 {
        push(id, Platform::Ground, Modality::Visible, "G0-rgb");
        if id < 114 {
            push(id, Platform::Ground, Modality::Visible, "G1-rgb");
        }
        push(id, Platform::Ground, Modality::Infrared, "G0-ir");
    }
    for id in 1000..1174u32 {
        push(id, Platform::Aerial, Modality::Visible, "A0-rgb");
        push(id, Platform::Aerial, Modality::Infrared, "A0-ir");
    }
    m
}

/// Protocol sizes on the benchmark-shaped manifest.
pub fn check_protocol_counts() -> CheckResult {
    let m = benchmark_shaped_manifest();
    let count = |q, g, d| {
        build_protocol(&m, &ProtocolSpec::new(q, g, d), Split::Test).map(|p| (p.query.len(), p.gallery.len())).ok()
    };
    let gg = count(Platform::Ground, Platform::Ground, Direction::V2I);
    let gg_rev = count(Platform::Ground, Platform::Ground, Direction::I2V);
    let aa = count(Platform::Aerial, Platform::Aerial, Direction::V2I);
    CheckResult::new(
        "protocol counts",
        gg == Some((313, 199)) && gg_rev == Some((199, 313)) && aa == Some((174, 174)),
        format!("ground-to-ground V2I {gg:?}, I2V {gg_rev:?}, aerial-to-aerial V2I {aa:?}"),
    )
}

/// Every fast property check.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    vec![
        check_loss_oracles(seed, 50),
        check_gradients(seed, 10),
        check_style_transfer(seed, 1000),
        check_augment_range(seed, 10_000),
        check_memory(seed, 50),
        check_anaglyph(seed, 50),
        check_metrics(seed, 100),
        check_recombination(seed, 100),
        check_protocol_counts(),
    ]
}
