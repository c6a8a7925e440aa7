mod common;

use rand::Rng;

use vireid::autodiff::Tensor;
use vireid::config::{Modality, Platform};
use vireid::data::{generate_synthetic, ClipBatch, FrameStore, Manifest, Split, SynthSpec, Tracklet};
use vireid::error::ReidError;
use vireid::eval::{build_protocol, evaluate, rank, select_stream_weights, Direction, EvalOptions, ProtocolSpec, ResultsTable, TrackletMeta};
use vireid::fusion::UNIFORM_WEIGHTS;
use vireid::model::ReidModel;
use vireid::rng::derive_rng;
use vireid::selftest::benchmark_shaped_manifest;
use vireid::trainer::{train, TrainOptions};

use common::config;

#[test]
fn benchmark_shaped_split_gives_reference_cell_sizes() {
    let m = benchmark_shaped_manifest();
    let count = |q, g, d| {
        let p = build_protocol(&m, &ProtocolSpec::new(q, g, d), Split::Test).unwrap();
        (p.query.len(), p.gallery.len())
    };
    assert_eq!(count(Platform::Ground, Platform::Ground, Direction::V2I), (313, 199));
    assert_eq!(count(Platform::Ground, Platform::Ground, Direction::I2V), (199, 313));
    assert_eq!(count(Platform::Aerial, Platform::Aerial, Direction::V2I), (174, 174));
    assert_eq!(count(Platform::Aerial, Platform::Aerial, Direction::I2V), (174, 174));
}

fn tracklet(id: u32, platform: Platform, modality: Modality, distractor: bool) -> Tracklet {
    Tracklet { id, platform, modality, camera: "c".into(), frames: vec!["f.png".into()], is_distractor: distractor }
}

#[test]
fn distractors_join_only_the_matching_gallery_cell() {
    let mut m = Manifest::new("/nonexistent");
    for id in 0..3 {
        for p in Platform::ALL {
            for md in Modality::ALL {
                m.push(Split::Test, tracklet(id, p, md, false));
            }
        }
    }
    m.push(Split::Distractor, tracklet(50, Platform::Ground, Modality::Visible, true));
    m.push(Split::Distractor, tracklet(51, Platform::Ground, Modality::Infrared, true));
    m.push(Split::Distractor, tracklet(52, Platform::Aerial, Modality::Visible, true));

    let spec = ProtocolSpec::new(Platform::Aerial, Platform::Ground, Direction::I2V);
    assert_eq!(build_protocol(&m, &spec, Split::Test).unwrap().gallery.len(), 3);
    let with = build_protocol(&m, &ProtocolSpec { include_distractors: true, ..spec }, Split::Test).unwrap();
    let extra: Vec<u32> = with.gallery.iter().map(|&i| m.tracklet(i).id).filter(|&id| id >= 50).collect();
    assert_eq!(extra, vec![50]);
    assert!(with.query.iter().all(|&i| !m.tracklet(i).is_distractor));
}

#[test]
fn queries_without_gallery_identity_are_rejected() {
    let mut m = Manifest::new("/nonexistent");
    m.push(Split::Test, tracklet(0, Platform::Ground, Modality::Visible, false));
    m.push(Split::Test, tracklet(1, Platform::Ground, Modality::Visible, false));
    m.push(Split::Test, tracklet(0, Platform::Ground, Modality::Infrared, false));
    let err = build_protocol(&m, &ProtocolSpec::new(Platform::Ground, Platform::Ground, Direction::V2I), Split::Test).unwrap_err();
    assert!(matches!(err, ReidError::Data(_)), "{err}");
    let err = build_protocol(&m, &ProtocolSpec::new(Platform::Aerial, Platform::Ground, Direction::V2I), Split::Test).unwrap_err();
    assert!(matches!(err, ReidError::Data(_)), "{err}");
}

fn noise_batch(n: usize, cfg: &vireid::config::ExperimentConfig, rng: &mut vireid::rng::ReidRng, modality: Modality) -> ClipBatch {
    let [h, w] = cfg.image_size;
    let t = cfg.frames_per_clip;
    ClipBatch {
        pixels: Tensor::from_fn([n * t, 3, h, w], |_| rng.random_range(0.0..1.0)),
        ids: (0..n as u32).collect(),
        platforms: vec![Platform::Ground; n],
        modalities: vec![modality; n],
        cameras: vec!["c".into(); n],
        tracklets: (0..n).collect(),
        frames_per_clip: t,
    }
}

#[test]
fn untrained_encoder_on_unrelated_inputs_ranks_at_chance() {
    const GALLERY: usize = 100;
    const SEEDS: u64 = 8;
    let mut hits = 0.0;
    for seed in 0..SEEDS {
        let cfg = config(&[&format!("seed={seed}"), "frames_per_clip=2"]);
        let model = ReidModel::new(&cfg, (0..GALLERY as u32).collect()).unwrap();
        let mut rng = derive_rng(seed, "chance", 0);
        let q = model.embed(&noise_batch(GALLERY, &cfg, &mut rng, Modality::Visible), &UNIFORM_WEIGHTS).unwrap();
        let g = model.embed(&noise_batch(GALLERY, &cfg, &mut rng, Modality::Infrared), &UNIFORM_WEIGHTS).unwrap();
        let qm: Vec<_> = (0..GALLERY as u32).map(|id| TrackletMeta { id, camera: "q".into(), is_distractor: false }).collect();
        let gm: Vec<_> = (0..GALLERY as u32).map(|id| TrackletMeta { id, camera: "g".into(), is_distractor: false }).collect();
        hits += rank(&q, &g, &qm, &gm, true).unwrap().rank(1) * GALLERY as f64;
    }
    // binomial with p = 1/100 over 800 queries: mean 8, sd about 2.8
    let trials = (SEEDS as usize * GALLERY) as f64;
    let r1 = hits / trials;
    let sd = (0.01 * 0.99 / trials).sqrt();
    assert!((r1 - 0.01).abs() <= 4.0 * sd, "rank-1 {r1} vs chance 0.01");
}

#[test]
fn evaluation_of_a_trained_model_is_deterministic_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { num_identities: 12, num_test_identities: 4, num_distractors: 2, ..SynthSpec::default() };
    let manifest = generate_synthetic(&spec, 3, dir.path()).unwrap();
    let cfg = config(&["epochs=1"]);
    let model = train(&cfg, &manifest, &TrainOptions::default()).unwrap().model;
    let mut frames = FrameStore::new(cfg.image_size);
    let opts = EvalOptions { split: Split::Test, weights: UNIFORM_WEIGHTS, camera_filter: true };
    let specs = ProtocolSpec::standard();
    let a = evaluate(&model, &mut frames, &manifest, &specs, &opts).unwrap();
    let b = evaluate(&model, &mut FrameStore::new(cfg.image_size), &manifest, &specs, &opts).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 8);
    for r in &a.rows {
        assert!(r.r1 <= r.r5 && r.r5 <= r.r10 && r.r10 <= r.r20 && r.r20 <= 1.0);
        assert!((0.0..=1.0).contains(&r.map));
    }
    assert_eq!(ResultsTable::from_csv(&a.to_csv()).unwrap().to_csv(), a.to_csv());

    let validation = ProtocolSpec::new(Platform::Ground, Platform::Ground, Direction::V2I);
    let (w, scored) = select_stream_weights(&model, &mut frames, &manifest, &validation, Split::Train, true).unwrap();
    assert_eq!(scored.len(), 26);
    let best = scored.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    assert!(scored.iter().any(|(g, m)| *g == w && *m == best));
}
