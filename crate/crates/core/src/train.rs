//! Training loop, evaluation, checkpoints and the hidden-size sweep.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{backward, LossBreakdown, LossCoefficients, PairedBatch};
use crate::metrics::{
    fsc, retrieval_top1, summarize_block, tq, write_tq_csv, BlockSummary, MetricsReport,
};
use crate::model::{fit_proxy_decoder, param_count, AlignmentModel, Block, Dims, ParamCount};
use crate::numerics::{Matrix, NumericsError, RngState};
use crate::optim::{AdamHyper, AdamState, LearningRates};
use crate::simdata::{oracle_transfer, pair_by_similarity, sha256_hex, write_file, Dataset, SubjectSession};

const STREAM_INIT: u64 = 11;
const STREAM_ORDER: u64 = 1 << 32;
const STREAM_RETRIEVAL_IMAGE: u64 = 21;
const STREAM_RETRIEVAL_BRAIN: u64 = 22;

/// Training hyperparameters, read from JSON. Every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Hidden (rank) size `h` of the transfer factors.
    pub hidden: usize,
    /// Stimulus-embedding width; when set it must match the data.
    pub embed_dim: Option<usize>,
    pub alpha_rec: f64,
    pub alpha_kl: f64,
    pub alpha_latent: f64,
    pub lr: LearningRates,
    pub adam: AdamHyper,
    pub batch_size: usize,
    pub epochs: usize,
    /// Evaluate every this many epochs (and after the last one).
    pub eval_interval: usize,
    /// Stop once this many epochs pass without a better eval fSC; `0`
    /// disables early stopping.
    pub patience: usize,
    pub init_seed: u64,
    pub order_seed: u64,
    pub retrieval_seed: u64,
    /// Ridge strength of the proxy decoder fit on the known subject.
    pub decoder_ridge: f64,
    /// Ridge strength used to compute the ground-truth transfer.
    pub oracle_ridge: f64,
    /// Upper bound on retrieval candidates per trial.
    pub retrieval_candidates: usize,
    pub retrieval_repeats: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            embed_dim: None,
            alpha_rec: 1.0,
            alpha_kl: 0.001,
            alpha_latent: 0.001,
            lr: LearningRates::uniform(3e-4),
            adam: AdamHyper::default(),
            batch_size: 16,
            epochs: 200,
            eval_interval: 5,
            patience: 20,
            init_seed: 0,
            order_seed: 1,
            retrieval_seed: 2,
            decoder_ridge: 1.0,
            oracle_ridge: 1e-10,
            retrieval_candidates: 300,
            retrieval_repeats: 30,
        }
    }
}

impl TrainConfig {
    /// The published full-scale optimizer settings (all rates `1e-5`).
    pub fn full_scale_preset() -> Self {
        Self {
            lr: LearningRates::uniform(1e-5),
            ..Self::default()
        }
    }

    pub fn coefficients(&self) -> LossCoefficients {
        LossCoefficients {
            rec: self.alpha_rec,
            kl: self.alpha_kl,
            latent: self.alpha_latent,
        }
    }

    /// Replaces every seed (the `NEURALIGN_SEED` override).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self.order_seed = seed;
        self.retrieval_seed = seed;
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.hidden == 0 {
            return fail("hidden must be >= 1".into());
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.eval_interval == 0 {
            return fail("eval_interval must be >= 1".into());
        }
        for (name, v) in [
            ("alpha_rec", self.alpha_rec),
            ("alpha_kl", self.alpha_kl),
            ("alpha_latent", self.alpha_latent),
            ("lr.btm", self.lr.btm),
            ("lr.mapper", self.lr.mapper),
            ("lr.embedder", self.lr.embedder),
            ("decoder_ridge", self.decoder_ridge),
            ("oracle_ridge", self.oracle_ridge),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return fail(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        let h = self.adam;
        if !(0.0..1.0).contains(&h.beta1) || !(0.0..1.0).contains(&h.beta2) || !(h.eps > 0.0) {
            return fail("adam betas must lie in [0, 1) and eps be positive".into());
        }
        if self.retrieval_candidates == 0 || self.retrieval_repeats == 0 {
            return fail("retrieval_candidates and retrieval_repeats must be positive".into());
        }
        Ok(())
    }
}

/// Everything needed to train and score one novel -> known transfer.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentTask {
    pub novel_train: SubjectSession,
    pub known_train: SubjectSession,
    /// Shared stimuli, identical order in both sessions.
    pub novel_eval: SubjectSession,
    pub known_eval: SubjectSession,
    /// Ground-truth map, when the generating world is known.
    pub oracle: Option<Matrix>,
    /// Number of leading conserved voxels in the novel subject.
    pub novel_conserved: Option<usize>,
}

impl AlignmentTask {
    pub fn new(
        novel_train: SubjectSession,
        known_train: SubjectSession,
        novel_eval: SubjectSession,
        known_eval: SubjectSession,
    ) -> Result<Self> {
        if novel_eval.is_empty() || novel_eval.stimulus_ids != known_eval.stimulus_ids {
            return Err(Error::Config(
                "evaluation split must hold the same non-empty shared stimuli for both subjects".into(),
            ));
        }
        if novel_train.is_empty() || known_train.is_empty() {
            return Err(Error::Config("training sessions must be non-empty".into()));
        }
        if novel_train.voxels() != novel_eval.voxels() || known_train.voxels() != known_eval.voxels() {
            return Err(Error::Config("train and eval voxel counts differ".into()));
        }
        Ok(Self {
            novel_train,
            known_train,
            novel_eval,
            known_eval,
            oracle: None,
            novel_conserved: None,
        })
    }

    /// Builds the task from a dataset, regenerating its world for the
    /// ground-truth transfer and block layout.
    pub fn from_dataset(ds: &Dataset, novel: &str, known: &str, oracle_ridge: f64) -> Result<Self> {
        let n = ds.subject(novel)?;
        let k = ds.subject(known)?;
        let mut task = Self::new(n.train(), k.train(), n.eval(), k.eval())?;
        let world = ds.world()?;
        task.oracle = Some(oracle_transfer(&world, novel, known, oracle_ridge)?);
        task.novel_conserved = Some(world.subject(novel)?.conserved);
        Ok(task)
    }

    pub fn dims(&self, hidden: usize) -> Dims {
        Dims::new(
            self.novel_train.voxels(),
            self.known_train.voxels(),
            hidden,
            self.novel_train.embeddings.cols(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch means of each loss term over the epoch.
    pub losses: LossBreakdown,
    pub fsc_mean: Option<f64>,
    pub transfer_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestModel {
    pub epoch: usize,
    pub fsc_mean: f64,
    pub model: AlignmentModel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub novel: String,
    pub known: String,
    pub model: AlignmentModel,
    pub optimizer: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub best: Option<BestModel>,
    pub epochs_since_best: usize,
    pub stopped_early: bool,
}

impl Checkpoint {
    /// The model used for reporting: the best evaluated one if any.
    pub fn inference_model(&self) -> &AlignmentModel {
        self.best.as_ref().map_or(&self.model, |b| &b.model)
    }
}

/// Random factors plus the proxy decoder fitted on the known subject.
/// Scale applied to the random BTM factors before training. Directions of
/// `A` outside the span of the training fMRI get almost no gradient, so
/// whatever the start puts there survives into TQ; starting near zero keeps
/// TQ a property of the learned transfer.
pub const BTM_START_GAIN: f64 = 0.1;

/// Random init, then the training start point: shrunken BTM factors, a
/// mapper whose modulation is the identity (zero weights and bias, so the
/// FiLM scale cannot soak up transfer that BTM-only inference would miss)
/// and the proxy decoder fitted on the known subject.
pub fn initial_model(config: &TrainConfig, task: &AlignmentTask) -> Result<AlignmentModel> {
    config.validate()?;
    let dims = task.dims(config.hidden);
    if let Some(a) = config.embed_dim {
        if a != dims.a {
            return Err(Error::Config(format!("embed_dim {a} does not match data width {}", dims.a)));
        }
    }
    let mut model = AlignmentModel::init(dims, &mut RngState::new(config.init_seed, STREAM_INIT))?;
    for block in [Block::BtmA, Block::BtmB] {
        let shrunk = model.block(block).scale(BTM_START_GAIN);
        model.set_block(block, shrunk)?;
    }
    model.set_block(Block::MapperW, Matrix::zeros(dims.a, 2 * dims.h))?;
    let decoder = fit_proxy_decoder(&task.known_train.fmri, &task.known_train.embeddings, config.decoder_ridge)?;
    model.set_decoder(decoder)?;
    Ok(model)
}

fn fresh_checkpoint(config: &TrainConfig, task: &AlignmentTask) -> Result<Checkpoint> {
    let model = initial_model(config, task)?;
    let optimizer = AdamState::new(&model, config.lr, config.adam);
    Ok(Checkpoint {
        config: config.clone(),
        novel: task.novel_train.subject.clone(),
        known: task.known_train.subject.clone(),
        model,
        optimizer,
        epoch: 0,
        history: Vec::new(),
        best: None,
        epochs_since_best: 0,
        stopped_early: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuickEval {
    pub fsc_mean: f64,
    pub transfer_error: f64,
}

/// fSC and functional error on the shared split, BTM path only.
pub fn quick_eval(model: &AlignmentModel, task: &AlignmentTask) -> Result<QuickEval> {
    let pred = model.btm_apply(&task.novel_eval.fmri)?;
    let f = fsc(&pred, &task.known_eval.fmri)?;
    let denom = task.known_eval.fmri.frobenius_norm();
    if denom == 0.0 {
        return Err(NumericsError::ZeroNorm.into());
    }
    Ok(QuickEval {
        fsc_mean: f.mean,
        transfer_error: pred.sub(&task.known_eval.fmri)?.frobenius_norm() / denom,
    })
}

/// Full report for a model. Inference uses only `A · B` plus the frozen
/// decoder for retrieval.
pub fn evaluate(model: &AlignmentModel, task: &AlignmentTask, config: &TrainConfig) -> Result<MetricsReport> {
    let eval_n = &task.novel_eval;
    let eval_k = &task.known_eval;
    if eval_n.is_empty() {
        return Err(Error::Config("empty evaluation split".into()));
    }
    let pred = model.btm_apply(&eval_n.fmri)?;
    let f = fsc(&pred, &eval_k.fmri)?;
    let m = model.compose_btm();
    let tq_values = tq(&m);
    let denom = eval_k.fmri.frobenius_norm();
    if denom == 0.0 {
        return Err(NumericsError::ZeroNorm.into());
    }
    let model_err = pred.sub(&eval_k.fmri)?.frobenius_norm() / denom;
    let oracle_err = match &task.oracle {
        Some(ms) => Some(crate::metrics::transfer_error(&m, ms, &eval_n.fmri, &eval_k.fmri)?.oracle),
        None => None,
    };
    let mut tq_blocks: Vec<BlockSummary> = Vec::new();
    let n = tq_values.len();
    if let Some(c) = task.novel_conserved {
        if c > 0 {
            tq_blocks.push(summarize_block("conserved", &tq_values, 0, c)?);
        }
        if c < n {
            tq_blocks.push(summarize_block("variable", &tq_values, c, n)?);
        }
    } else {
        tq_blocks.push(summarize_block("all", &tq_values, 0, n)?);
    }
    let decoded = model.proxy_decode(&pred)?;
    let candidates = config.retrieval_candidates.min(eval_n.len());
    let repeats = config.retrieval_repeats;
    let image = retrieval_top1(
        &decoded,
        &eval_n.embeddings,
        candidates,
        repeats,
        &mut RngState::new(config.retrieval_seed, STREAM_RETRIEVAL_IMAGE),
    )?;
    let brain = retrieval_top1(
        &eval_n.embeddings,
        &decoded,
        candidates,
        repeats,
        &mut RngState::new(config.retrieval_seed, STREAM_RETRIEVAL_BRAIN),
    )?;
    Ok(MetricsReport {
        fsc_mean: f.mean,
        fsc: f,
        tq: tq_values,
        tq_blocks,
        retrieval_top1_image: image,
        retrieval_top1_brain: brain,
        retrieval_candidates: candidates,
        retrieval_repeats: repeats,
        transfer_relative_error: model_err,
        oracle_relative_error: oracle_err,
        loss_curve: Some(HISTORY_FILE.to_string()),
    })
}

/// Result of a completed run: the final checkpoint and the report of its
/// inference model.
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub report: MetricsReport,
}

/// Trains from scratch for `config.epochs` epochs.
pub fn train(config: &TrainConfig, task: &AlignmentTask) -> Result<TrainOutcome> {
    train_until(config, task, config.epochs)
}

/// Runs the `config.epochs` schedule but stops after `stop_epoch` epochs,
/// e.g. to checkpoint midway. Resuming the result with [`resume`] is
/// bit-identical to an uninterrupted run.
pub fn train_until(config: &TrainConfig, task: &AlignmentTask, stop_epoch: usize) -> Result<TrainOutcome> {
    let ckpt = fresh_checkpoint(config, task)?;
    run(ckpt, task, stop_epoch.min(config.epochs), &mut |_| {})
}

/// [`train_until`] with a callback after every completed epoch.
pub fn train_observed(
    config: &TrainConfig,
    task: &AlignmentTask,
    stop_epoch: usize,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let ckpt = fresh_checkpoint(config, task)?;
    run(ckpt, task, stop_epoch.min(config.epochs), on_epoch)
}

/// Continues a checkpoint to the end of its configured schedule. Raise
/// `ckpt.config.epochs` first to extend a finished run.
pub fn resume(ckpt: Checkpoint, task: &AlignmentTask) -> Result<TrainOutcome> {
    let target_epochs = ckpt.config.epochs;
    if ckpt.novel != task.novel_train.subject || ckpt.known != task.known_train.subject {
        return Err(Error::Config(format!(
            "checkpoint aligns {} -> {}, task is {} -> {}",
            ckpt.novel, ckpt.known, task.novel_train.subject, task.known_train.subject
        )));
    }
    if ckpt.model.dims != task.dims(ckpt.config.hidden) {
        return Err(Error::Config("checkpoint dims do not match the dataset".into()));
    }
    run(ckpt, task, target_epochs, &mut |_| {})
}

/// Per-epoch sample order, a pure function of the seed and epoch so runs
/// resume bit-exactly.
pub fn epoch_order(order_seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    RngState::new(order_seed, STREAM_ORDER + epoch as u64).shuffle(&mut order);
    order
}

fn run(
    mut ckpt: Checkpoint,
    task: &AlignmentTask,
    target_epochs: usize,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let config = ckpt.config.clone();
    let coeffs = config.coefficients();
    let pairs = pair_by_similarity(&task.novel_train, &task.known_train)?;
    if ckpt.best.is_none() {
        let q = quick_eval(&ckpt.model, task)?;
        ckpt.best = Some(BestModel {
            epoch: ckpt.epoch,
            fsc_mean: q.fsc_mean,
            model: ckpt.model.clone(),
        });
    }
    let nt = &task.novel_train;
    let kt = &task.known_train;
    while ckpt.epoch < target_epochs && !ckpt.stopped_early {
        let epoch = ckpt.epoch;
        let snapshot = ckpt.clone();
        let order = epoch_order(config.order_seed, epoch, nt.len());
        let mut sums = [0.0f64; 5];
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let known_rows: Vec<usize> = chunk.iter().map(|&i| pairs[i]).collect();
            let batch = PairedBatch {
                f_novel: nt.fmri.select_rows(chunk),
                f_known: kt.fmri.select_rows(&known_rows),
                e_novel: nt.embeddings.select_rows(chunk),
                e_known: kt.embeddings.select_rows(&known_rows),
                novel_index: chunk.to_vec(),
                known_index: known_rows,
            };
            let outcome = backward(&ckpt.model, &batch, coeffs);
            let (loss, grads) = match outcome {
                Ok((l, g)) if l.is_finite() && g.is_finite() => (l, g),
                Ok(_) | Err(Error::Numerics(NumericsError::ZeroNorm | NumericsError::NonFinite { .. })) => {
                    return Err(Error::Divergence {
                        epoch,
                        step,
                        last_finite: Box::new(snapshot),
                    })
                }
                Err(e) => return Err(e),
            };
            ckpt.optimizer.step(&mut ckpt.model, &grads)?;
            for (s, v) in sums.iter_mut().zip([loss.l_total, loss.l_rec, loss.l_kl, loss.l_latent, loss.l_dec]) {
                *s += v;
            }
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::Config(format!(
                "no batch of size >= 2 fits {} training samples",
                nt.len()
            )));
        }
        let b = batches as f64;
        let losses = LossBreakdown {
            l_total: sums[0] / b,
            l_rec: sums[1] / b,
            l_kl: sums[2] / b,
            l_latent: sums[3] / b,
            l_dec: sums[4] / b,
            coefficients: coeffs,
        };
        ckpt.epoch += 1;
        let is_eval = ckpt.epoch % config.eval_interval == 0 || ckpt.epoch == config.epochs;
        let mut record = EpochRecord {
            epoch: ckpt.epoch,
            losses,
            fsc_mean: None,
            transfer_error: None,
        };
        if !ckpt.model.btm_a.is_finite() || !ckpt.model.btm_b.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step: batches,
                last_finite: Box::new(snapshot),
            });
        }
        if is_eval {
            let q = quick_eval(&ckpt.model, task)?;
            record.fsc_mean = Some(q.fsc_mean);
            record.transfer_error = Some(q.transfer_error);
            let best_fsc = ckpt.best.as_ref().map_or(f64::NEG_INFINITY, |b| b.fsc_mean);
            if q.fsc_mean > best_fsc {
                ckpt.best = Some(BestModel {
                    epoch: ckpt.epoch,
                    fsc_mean: q.fsc_mean,
                    model: ckpt.model.clone(),
                });
                ckpt.epochs_since_best = 0;
            } else {
                ckpt.epochs_since_best = ckpt.epoch - ckpt.best.as_ref().map_or(0, |b| b.epoch);
            }
            if config.patience > 0 && ckpt.epochs_since_best >= config.patience {
                ckpt.stopped_early = true;
            }
        }
        on_epoch(&record);
        ckpt.history.push(record);
    }
    let report = evaluate(ckpt.inference_model(), task, &config)?;
    Ok(TrainOutcome { checkpoint: ckpt, report })
}

/// Conventional history file name inside a checkpoint directory.
pub const HISTORY_FILE: &str = "history.csv";

pub const HISTORY_HEADER: [&str; 8] = [
    "epoch",
    "l_total",
    "l_rec",
    "l_kl",
    "l_latent",
    "l_dec",
    "fsc_mean",
    "transfer_error",
];

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

/// History as CSV; eval columns are empty on epochs without evaluation.
pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let err = |e| crate::metrics::csv_err(path, e);
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(HISTORY_HEADER).map_err(err)?;
    for r in history {
        let l = &r.losses;
        w.write_record([
            r.epoch.to_string(),
            format!("{:e}", l.l_total),
            format!("{:e}", l.l_rec),
            format!("{:e}", l.l_kl),
            format!("{:e}", l.l_latent),
            format!("{:e}", l.l_dec),
            opt_field(r.fsc_mean),
            opt_field(r.transfer_error),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub use crate::metrics::write_tq_csv as export_tq_csv;

/// TQ of a checkpoint's inference model.
pub fn checkpoint_tq(ckpt: &Checkpoint) -> Vec<f64> {
    tq(&ckpt.inference_model().compose_btm())
}

/// Convenience wrapper writing a checkpoint's TQ CSV.
pub fn write_checkpoint_tq(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_tq_csv(path, &checkpoint_tq(ckpt))
}

// --- checkpoint files ---

pub const CHECKPOINT_VERSION: u32 = 1;
pub const HEADER_FILE: &str = "header.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockEntry {
    section: String,
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamMeta {
    t: u64,
    hyper: AdamHyper,
    lr: LearningRates,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BestMeta {
    epoch: usize,
    fsc_mean: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    novel: String,
    known: String,
    dims: Dims,
    config: TrainConfig,
    epoch: usize,
    history: Vec<EpochRecord>,
    adam: AdamMeta,
    best: Option<BestMeta>,
    epochs_since_best: usize,
    stopped_early: bool,
    /// Layout of `params.bin`: little-endian `f64`, row-major, in order.
    blocks: Vec<BlockEntry>,
    params_sha256: String,
}

fn layout(ckpt: &Checkpoint) -> Vec<(String, Block, &Matrix)> {
    let mut out = Vec::new();
    for b in Block::ALL {
        out.push(("model".to_string(), b, ckpt.model.block(b)));
    }
    for (i, &b) in Block::TRAINABLE.iter().enumerate() {
        out.push(("adam_m".to_string(), b, &ckpt.optimizer.m[i]));
    }
    for (i, &b) in Block::TRAINABLE.iter().enumerate() {
        out.push(("adam_v".to_string(), b, &ckpt.optimizer.v[i]));
    }
    if let Some(best) = &ckpt.best {
        for b in Block::ALL {
            out.push(("best".to_string(), b, best.model.block(b)));
        }
    }
    out
}

/// Writes `header.json` and `params.bin` into `dir`. Files are staged in a
/// sibling directory and moved into place, so a failed save leaves no
/// partial checkpoint behind.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut params = Vec::new();
    let mut blocks = Vec::new();
    for (section, block, m) in layout(ckpt) {
        for v in m.data() {
            params.extend_from_slice(&v.to_le_bytes());
        }
        blocks.push(BlockEntry {
            section,
            name: block.name().to_string(),
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    let header = Header {
        version: CHECKPOINT_VERSION,
        novel: ckpt.novel.clone(),
        known: ckpt.known.clone(),
        dims: ckpt.model.dims,
        config: ckpt.config.clone(),
        epoch: ckpt.epoch,
        history: ckpt.history.clone(),
        adam: AdamMeta {
            t: ckpt.optimizer.t,
            hyper: ckpt.optimizer.hyper,
            lr: ckpt.optimizer.lr,
        },
        best: ckpt.best.as_ref().map(|b| BestMeta {
            epoch: b.epoch,
            fsc_mean: b.fsc_mean,
        }),
        epochs_since_best: ckpt.epochs_since_best,
        stopped_early: ckpt.stopped_early,
        blocks,
        params_sha256: sha256_hex(&params),
    };
    let json = serde_json::to_vec_pretty(&header).expect("header serializes");

    let staging = staging_path(path);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    write_file(&staging.join(PARAMS_FILE), &params)?;
    write_file(&staging.join(HEADER_FILE), &json)?;
    if path.exists() {
        fs::remove_dir_all(path).map_err(|e| Error::io(path, e))?;
    }
    fs::rename(&staging, path).map_err(|e| Error::io(path, e))
}

fn staging_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let hpath = path.join(HEADER_FILE);
    let raw = fs::read(&hpath).map_err(|e| Error::io(&hpath, e))?;
    let value: serde_json::Value =
        serde_json::from_slice(&raw).map_err(|e| Error::malformed(&hpath, e.to_string()))?;
    let version = value.get("version").and_then(|v| v.as_u64());
    match version {
        Some(v) if v == CHECKPOINT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Version {
                found: v as u32,
                expected: CHECKPOINT_VERSION,
            })
        }
        None => return Err(Error::malformed(&hpath, "missing version")),
    }
    let header: Header = serde_json::from_value(value).map_err(|e| Error::malformed(&hpath, e.to_string()))?;
    let ppath = path.join(PARAMS_FILE);
    let params = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    if sha256_hex(&params) != header.params_sha256 {
        return Err(Error::Checksum { path: ppath });
    }
    header.dims.validate()?;

    let mut reader = ParamReader {
        entries: header.blocks.iter(),
        params: &params,
        offset: 0,
        dims: header.dims,
        hpath: &hpath,
        ppath: &ppath,
    };
    let model = reader.model("model")?;
    let m = reader.moments("adam_m")?;
    let v = reader.moments("adam_v")?;
    let best = match &header.best {
        Some(meta) => Some(BestModel {
            epoch: meta.epoch,
            fsc_mean: meta.fsc_mean,
            model: reader.model("best")?,
        }),
        None => None,
    };
    if reader.entries.next().is_some() || reader.offset != params.len() {
        return Err(Error::malformed(&ppath, "trailing parameter data"));
    }
    Ok(Checkpoint {
        config: header.config,
        novel: header.novel,
        known: header.known,
        model,
        optimizer: AdamState {
            m,
            v,
            t: header.adam.t,
            hyper: header.adam.hyper,
            lr: header.adam.lr,
        },
        epoch: header.epoch,
        history: header.history,
        best,
        epochs_since_best: header.epochs_since_best,
        stopped_early: header.stopped_early,
    })
}

struct ParamReader<'a> {
    entries: std::slice::Iter<'a, BlockEntry>,
    params: &'a [u8],
    offset: usize,
    dims: Dims,
    hpath: &'a Path,
    ppath: &'a Path,
}

impl ParamReader<'_> {
    fn take(&mut self, section: &str, expected: Block) -> Result<Matrix> {
        let entry = self
            .entries
            .next()
            .ok_or_else(|| Error::malformed(self.hpath, "block list too short"))?;
        let shape = self.dims.shape_of(expected);
        if entry.section != section || entry.name != expected.name() || (entry.rows, entry.cols) != shape {
            return Err(Error::malformed(
                self.hpath,
                format!("expected {section}/{} {shape:?}, found {}/{}", expected.name(), entry.section, entry.name),
            ));
        }
        let bytes = entry.rows * entry.cols * 8;
        let chunk = self
            .params
            .get(self.offset..self.offset + bytes)
            .ok_or_else(|| Error::malformed(self.ppath, "parameter file too short"))?;
        self.offset += bytes;
        let data = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        // checkpoints only ever hold finite state
        Matrix::from_vec(entry.rows, entry.cols, data).map_err(|e| Error::malformed(self.ppath, e.to_string()))
    }

    fn model(&mut self, section: &str) -> Result<AlignmentModel> {
        let mut model = AlignmentModel::init(self.dims, &mut RngState::new(0, 0))?;
        for block in Block::ALL {
            let m = self.take(section, block)?;
            model.set_block(block, m)?;
        }
        Ok(model)
    }

    fn moments(&mut self, section: &str) -> Result<Vec<Matrix>> {
        Block::TRAINABLE.iter().map(|&b| self.take(section, b)).collect()
    }
}

// --- hidden-size sweep ---

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub hidden: usize,
    pub params: ParamCount,
    /// `Err` carries the failure message for this row only.
    pub result: std::result::Result<SweepMetrics, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepMetrics {
    pub epochs_run: usize,
    pub fsc_mean: f64,
    pub transfer_error: f64,
    pub oracle_error: Option<f64>,
    pub retrieval_top1_image: f64,
    pub retrieval_top1_brain: f64,
}

/// Trains one model per hidden size with otherwise identical settings.
/// Rows come back in input order; a failing size fails only its row.
pub fn rank_sweep(config: &TrainConfig, hidden: &[usize], task: &AlignmentTask) -> Vec<SweepRow> {
    hidden
        .par_iter()
        .map(|&h| {
            let dims = task.dims(h.max(1));
            let params = param_count(&Dims { h, ..dims });
            let cfg = TrainConfig { hidden: h, ..config.clone() };
            let result = train(&cfg, task)
                .map(|out| SweepMetrics {
                    epochs_run: out.checkpoint.epoch,
                    fsc_mean: out.report.fsc_mean,
                    transfer_error: out.report.transfer_relative_error,
                    oracle_error: out.report.oracle_relative_error,
                    retrieval_top1_image: out.report.retrieval_top1_image,
                    retrieval_top1_brain: out.report.retrieval_top1_brain,
                })
                .map_err(|e| e.to_string());
            SweepRow { hidden: h, params, result }
        })
        .collect()
}

pub const SWEEP_HEADER: [&str; 13] = [
    "hidden",
    "status",
    "error",
    "epochs_run",
    "fsc_mean",
    "transfer_error",
    "oracle_error",
    "retrieval_top1_image",
    "retrieval_top1_brain",
    "btm_params",
    "mapper_params",
    "embedder_params",
    "total_params",
];

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let err = |e| crate::metrics::csv_err(path, e);
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(SWEEP_HEADER).map_err(err)?;
    for r in rows {
        let p = &r.params;
        let counts = [p.btm, p.mapper, p.embedder, p.total].map(|c| c.to_string());
        let mut rec: Vec<String> = vec![r.hidden.to_string()];
        match &r.result {
            Ok(m) => rec.extend([
                "ok".to_string(),
                String::new(),
                m.epochs_run.to_string(),
                format!("{:e}", m.fsc_mean),
                format!("{:e}", m.transfer_error),
                opt_field(m.oracle_error),
                format!("{:e}", m.retrieval_top1_image),
                format!("{:e}", m.retrieval_top1_brain),
            ]),
            Err(msg) => {
                rec.extend(["failed".to_string(), msg.clone()]);
                rec.extend(std::iter::repeat_n(String::new(), 6));
            }
        }
        rec.extend(counts);
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
