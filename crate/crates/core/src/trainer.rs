//! Optimisation loop, resumable checkpoints and the stream ablation.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint::{clip_global_norm, Adam, Checkpoint};
use crate::config::{cosine_lr, ExperimentConfig, Stream, StreamSet};
use crate::data::{clip_indices, sample_batch, validate_manifest, FrameStore, Manifest, Split};
use crate::error::{ReidError, Result};
use crate::eval::{build_protocol, evaluate_features, extract_features, select_stream_weights, ProtocolSpec, RankingResult};
use crate::fusion::{LossReport, StreamWeights};
use crate::memory::{build_memory, update_memory, ViewMemory};
use crate::model::ReidModel;
use crate::rng::derive_rng;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossReport,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Log and checkpoint directory; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Stop after this many optimisation steps (the schedule still spans
    /// every configured epoch).
    pub max_steps: Option<usize>,
}

pub struct TrainOutcome {
    pub model: ReidModel,
    pub checkpoint: Checkpoint,
    pub log: Vec<StepRecord>,
}

/// Training identities of the manifest, sorted.
pub fn training_classes(manifest: &Manifest) -> Vec<u32> {
    manifest.identities(Split::Train).into_iter().collect()
}

/// Owns the model, optimiser and memories for one run.
pub struct Trainer<'m> {
    pub model: ReidModel,
    pub optimizer: Adam,
    pub memory: Option<ViewMemory>,
    pub epoch: usize,
    pub step: usize,
    manifest: &'m Manifest,
    frames: FrameStore,
    steps_per_epoch: usize,
}

impl<'m> Trainer<'m> {
    pub fn new(cfg: &ExperimentConfig, manifest: &'m Manifest) -> Result<Self> {
        cfg.validate()?;
        let report = validate_manifest(manifest, false);
        if !report.is_valid() {
            return Err(ReidError::Data(format!("invalid manifest: {}", report.violations[0])));
        }
        let model = ReidModel::new(cfg, training_classes(manifest))?;
        let optimizer = Adam::new(cfg, &model.store);
        let n_train = manifest.indices(Split::Train).len();
        Ok(Self {
            optimizer,
            memory: None,
            epoch: 0,
            step: 0,
            manifest,
            frames: FrameStore::new(cfg.image_size),
            steps_per_epoch: (n_train / cfg.batch_tracklets()).max(1),
            model,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint, manifest: &'m Manifest) -> Result<Self> {
        let cfg = ck.config()?;
        let mut t = Self::new(&cfg, manifest)?;
        if t.model.classes != ck.classes {
            return Err(ReidError::Checkpoint("checkpoint classes differ from the manifest's training identities".into()));
        }
        ck.restore_params(&mut t.model.store)?;
        if ck.optimizer.m.len() != t.model.store.len() {
            return Err(ReidError::Checkpoint("optimiser state does not match the parameters".into()));
        }
        t.optimizer = ck.optimizer.clone();
        t.memory = ck.memory.clone();
        t.epoch = ck.epoch;
        t.step = ck.step;
        Ok(t)
    }

    pub fn cfg(&self) -> &ExperimentConfig {
        &self.model.cfg
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.cfg().epochs * self.steps_per_epoch
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.cfg(), &self.model.classes, &self.model.store, &self.optimizer);
        ck.epoch = self.epoch;
        ck.step = self.step;
        ck.memory = self.memory.as_ref().map(|m| update_memory(m.clone(), &self.model.memory.as_ref().expect("stream 2").decoder, &self.model.store));
        ck
    }

    /// Rebuild the view memories from one clip of every training tracklet.
    pub fn rebuild_memory(&mut self) -> Result<()> {
        if !self.model.mask().contains(Stream::Memory) {
            return Ok(());
        }
        let t = self.cfg().frames_per_clip;
        let train = self.manifest.indices(Split::Train);
        let mut feats = Vec::with_capacity(train.len());
        for chunk in train.chunks(16) {
            let clips: Vec<(usize, Vec<usize>)> =
                chunk.iter().map(|&ti| (ti, clip_indices(self.manifest.tracklet(ti).frames.len(), t))).collect();
            let batch = self.frames.assemble(self.manifest, &clips)?;
            feats.extend(self.model.sequence_features(&batch)?);
        }
        self.memory = Some(build_memory(&feats)?);
        Ok(())
    }

    /// Loss report the current parameters give on the batch of `step`,
    /// without updating anything.
    pub fn evaluate_step(&mut self, step: usize) -> Result<LossReport> {
        let cfg = self.cfg().clone();
        let batch = sample_batch(&mut self.frames, self.manifest, &cfg, &mut derive_rng(cfg.seed, "batch", step as u64))?;
        let g = Graph::new();
        let p = self.model.store.bind(&g, false);
        let pass = self.model.training_pass(&g, &p, &batch, self.memory.as_ref(), &mut derive_rng(cfg.seed, "augment", step as u64))?;
        Ok(pass.report)
    }

    /// One optimisation step at the current counter.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let cfg = self.cfg().clone();
        let lr = cosine_lr(self.step, self.total_steps().saturating_sub(1).max(1), cfg.lr_init)?;
        let batch = sample_batch(&mut self.frames, self.manifest, &cfg, &mut derive_rng(cfg.seed, "batch", self.step as u64))?;
        let mut rng = derive_rng(cfg.seed, "augment", self.step as u64);
        let (report, mut grads) = {
            let g = Graph::new();
            let p = self.model.store.bind(&g, true);
            let pass = self.model.training_pass(&g, &p, &batch, self.memory.as_ref(), &mut rng)?;
            for (name, term) in LossReport::TERMS.iter().zip(&pass.terms) {
                if term.is_some_and(|v| !v.item().is_finite()) {
                    return Err(ReidError::Divergence { step: self.step, term: name.to_string() });
                }
            }
            if !pass.report.total.is_finite() {
                return Err(ReidError::Divergence { step: self.step, term: "total".into() });
            }
            let mut tape = g.backward(pass.total);
            (pass.report, p.grads(&self.model.store, &mut tape))
        };
        if !clip_global_norm(&mut grads, cfg.grad_clip_norm).is_finite() {
            return Err(ReidError::Divergence { step: self.step, term: "gradient".into() });
        }
        self.optimizer.step(&mut self.model.store, &grads, lr)?;
        let rec = StepRecord { epoch: self.epoch, step: self.step, lr, losses: report };
        self.step += 1;
        if self.step % self.steps_per_epoch == 0 {
            self.epoch += 1;
        }
        Ok(rec)
    }
}

fn write_log(path: &Path, records: &[StepRecord], append: bool) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(path)
        .map_err(|e| ReidError::io(path, e))?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r).expect("record serialises")).map_err(|e| ReidError::io(path, e))?;
    }
    Ok(())
}

/// Parse a JSONL training log.
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| ReidError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| ReidError::Data(format!("bad log line: {e}"))))
        .collect()
}

/// Run (or resume) training. With an output directory, every step is logged
/// to `train_log.jsonl`, `checkpoints/epoch_NNNN.ckpt` is written every
/// `checkpoint_every` epochs and `final.ckpt` at the end.
pub fn train(cfg: &ExperimentConfig, manifest: &Manifest, opts: &TrainOptions) -> Result<TrainOutcome> {
    let mut trainer = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let t = Trainer::from_checkpoint(&ck, manifest)?;
            if t.cfg() != cfg {
                return Err(ReidError::Checkpoint(format!("{} was written with a different config", path.display())));
            }
            t
        }
        None => Trainer::new(cfg, manifest)?,
    };
    let log_path = opts.out_dir.as_ref().map(|d| d.join(LOG_FILE));
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| ReidError::io(dir, e))?;
        let lp = log_path.as_ref().expect("log path");
        let kept: Vec<StepRecord> = if opts.resume.is_some() && lp.exists() {
            read_log(lp)?.into_iter().filter(|r| r.step < trainer.step).collect()
        } else {
            Vec::new()
        };
        write_log(lp, &kept, false)?;
    }
    let total = trainer.total_steps();
    let stop = opts.max_steps.map_or(total, |m| m.min(total));
    let mut log = Vec::new();
    while trainer.step < stop {
        if trainer.step % trainer.steps_per_epoch() == 0 || trainer.memory.is_none() {
            trainer.rebuild_memory()?;
        }
        let rec = trainer.train_step()?;
        if let Some(lp) = &log_path {
            write_log(lp, std::slice::from_ref(&rec), true)?;
        }
        log.push(rec);
        let every = trainer.cfg().checkpoint_every;
        let epoch_done = trainer.step % trainer.steps_per_epoch() == 0;
        if let (Some(dir), true) = (&opts.out_dir, epoch_done && every > 0 && trainer.epoch % every == 0) {
            trainer.checkpoint().save(&dir.join("checkpoints").join(format!("epoch_{:04}.ckpt", trainer.epoch)))?;
        }
    }
    let checkpoint = trainer.checkpoint();
    if let Some(dir) = &opts.out_dir {
        checkpoint.save(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome { model: trainer.model, checkpoint, log })
}

/// Rebuild an inference model from a checkpoint.
pub fn load_model(ck: &Checkpoint) -> Result<ReidModel> {
    let cfg = ck.config()?;
    let mut model = ReidModel::new(&cfg, ck.classes.clone())?;
    ck.restore_params(&mut model.store)?;
    Ok(model)
}

/// Split used for evaluation: test when present, otherwise held-in train.
pub fn default_eval_split(manifest: &Manifest) -> Split {
    if manifest.has_split(Split::Test) {
        Split::Test
    } else {
        Split::Train
    }
}

/// One trained subset: its selected fusion weights and a result per protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub streams: StreamSet,
    pub weights: StreamWeights,
    pub results: Vec<RankingResult>,
}

/// Stream-ablation table: one row per stream subset, metrics per protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub protocols: Vec<ProtocolSpec>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    fn column(spec: &ProtocolSpec) -> String {
        format!("{}:{}", spec.name(), spec.direction)
    }

    /// Result of `spec` for the subset `streams`.
    pub fn result(&self, streams: StreamSet, spec: &ProtocolSpec) -> Option<&RankingResult> {
        let col = self.protocols.iter().position(|p| p == spec)?;
        self.rows.iter().find(|r| r.streams == streams).map(|r| &r.results[col])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("streams,w1,w2,w3");
        for p in &self.protocols {
            for m in ["R1", "R5", "R10", "R20", "mAP"] {
                s += &format!(",{}:{m}", Self::column(p));
            }
        }
        s.push('\n');
        for row in &self.rows {
            let [a, b, c] = row.weights;
            s += &format!("{},{a},{b},{c}", row.streams);
            for r in &row.results {
                s += &format!(",{:.6},{:.6},{:.6},{:.6},{:.6}", r.rank(1), r.rank(5), r.rank(10), r.rank(20), r.map);
            }
            s.push('\n');
        }
        s
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (i, p) in self.protocols.iter().enumerate() {
            s += &format!("{}\n{:<8} {:>7} {:>7} {:>7} {:>7} {:>7}\n", Self::column(p), "streams", "R1", "R5", "R10", "R20", "mAP");
            for row in &self.rows {
                let r = &row.results[i];
                s += &format!(
                    "{:<8} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2}\n",
                    row.streams.to_string(),
                    100.0 * r.rank(1),
                    100.0 * r.rank(5),
                    100.0 * r.rank(10),
                    100.0 * r.rank(20),
                    100.0 * r.map
                );
            }
            s.push('\n');
        }
        s
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| ReidError::io(dir, e))?;
        for (ext, body) in [("csv", self.to_csv()), ("txt", self.render())] {
            let path = dir.join(format!("{stem}.{ext}"));
            std::fs::write(&path, body).map_err(|e| ReidError::io(&path, e))?;
        }
        Ok(())
    }
}

/// Train and evaluate every non-empty stream subset in table order. Each run
/// shares the config (and so the data seed); only `stream_mask` changes.
/// Fusion weights are chosen per subset on `validation` over the training
/// split. Runs go to `out_dir/<subset>` when an output directory is given.
pub fn ablate(
    cfg: &ExperimentConfig,
    manifest: &Manifest,
    protocols: &[ProtocolSpec],
    validation: &ProtocolSpec,
    opts: &TrainOptions,
) -> Result<AblationTable> {
    let split = default_eval_split(manifest);
    let built = protocols.iter().map(|s| build_protocol(manifest, s, split)).collect::<Result<Vec<_>>>()?;
    let needed: Vec<usize> =
        built.iter().flat_map(|p| p.query.iter().chain(&p.gallery).copied()).collect::<BTreeSet<_>>().into_iter().collect();
    let mut rows = Vec::new();
    for set in StreamSet::ABLATION_ORDER {
        let run_cfg = ExperimentConfig { stream_mask: set, ..cfg.clone() };
        let run_opts = TrainOptions {
            out_dir: opts.out_dir.as_ref().map(|d| d.join(set.to_string())),
            resume: None,
            max_steps: opts.max_steps,
        };
        let outcome = train(&run_cfg, manifest, &run_opts)?;
        let mut frames = FrameStore::new(cfg.image_size);
        let (weights, _) =
            select_stream_weights(&outcome.model, &mut frames, manifest, validation, Split::Train, cfg.camera_filter)?;
        let feats = extract_features(&outcome.model, &mut frames, manifest, &needed, &weights)?;
        let results = evaluate_features(manifest, &built, &feats, cfg.camera_filter)?;
        rows.push(AblationRow { streams: set, weights, results });
    }
    Ok(AblationTable { protocols: protocols.to_vec(), rows })
}
