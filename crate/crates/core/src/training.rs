//! Training loop, run orchestration and held-out evaluation.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{CrossPair, Dataset, PairSampler};
use crate::error::{Error, Result};
use crate::losses::{LossReport, LossWeights};
use crate::model::{FrontendCache, Model, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::rig::{eve, lip_avg_error, lve, BlendMode, RigTemplateSet};

pub const LOG_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const REPORT_FILE: &str = "eval.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: u64,
    pub seed: u64,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    /// Overrides `epochs` when set.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 8,
            epochs: 10,
            seed: 0,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.weights.validate()
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> u64 {
        n_train.div_ceil(self.batch_size).max(1) as u64
    }

    pub fn total_steps(&self, n_train: usize) -> u64 {
        self.max_steps.unwrap_or(self.epochs * self.steps_per_epoch(n_train))
    }
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    #[serde(flatten)]
    pub loss: LossReport,
}

fn step_seed(seed: u64, step: u64) -> u64 {
    let mut z = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Model, optimizer state and step counter. Batch sampling is a pure
/// function of `(seed, step)`, so this is the whole training state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub config: TrainConfig,
    pub step: u64,
    cache: FrontendCache,
}

impl Trainer {
    pub fn new(model_config: &ModelConfig, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(model_config, config.seed)?;
        let adam = Adam::new(config.adam, &model.store);
        Ok(Self::from_parts(model, adam, config.clone(), 0))
    }

    pub fn from_parts(model: Model, adam: Adam, config: TrainConfig, step: u64) -> Self {
        Self {
            model,
            adam,
            config,
            step,
            cache: FrontendCache::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        checkpoint::load(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(self, path)
    }

    /// Pairs for the next step, drawn from a generator keyed by `(seed, step)`.
    pub fn next_batch(&self, dataset: &Dataset, sampler: &PairSampler) -> Vec<CrossPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(self.config.seed, self.step));
        (0..self.config.batch_size)
            .map(|_| sampler.sample(dataset, &mut rng))
            .collect()
    }

    /// One optimizer update on `pairs`. Returns the pre-update batch loss.
    pub fn train_step(&mut self, pairs: &[CrossPair]) -> Result<StepRecord> {
        let (loss, grads) = self
            .model
            .loss_and_gradients(pairs, &self.config.weights, &mut self.cache)?;
        self.adam.step(&mut self.model.store, &grads, self.config.learning_rate);
        self.step += 1;
        Ok(StepRecord { step: self.step, loss })
    }

    pub fn step_on(&mut self, dataset: &Dataset, sampler: &PairSampler) -> Result<StepRecord> {
        let batch = self.next_batch(dataset, sampler);
        self.train_step(&batch)
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Also write `checkpoints/step_NNNNNN.bin` every this many steps.
    pub checkpoint_every: Option<u64>,
    /// Stop early at this step (the log and checkpoint stay resumable).
    pub stop_at: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub records: Vec<StepRecord>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Keeps log lines up to `step` so a resumed run rewrites the tail identically.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let rec: StepRecord = serde_json::from_str(line)?;
        if rec.step <= step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Trains until the configured step count, appending one JSON line per step
/// to `metrics.jsonl` and saving `checkpoint.bin` at the end.
pub fn run(trainer: &mut Trainer, train: &Dataset, out_dir: &Path, opts: &RunOptions) -> Result<RunSummary> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let sampler = PairSampler::new(train)?;
    let n_classes = trainer.model.config.encoder.n_emotions;
    if train.n_emotions() > n_classes {
        return Err(Error::Config(format!(
            "dataset has {} emotions, classifier has {n_classes}",
            train.n_emotions()
        )));
    }
    let log = out_dir.join(LOG_FILE);
    truncate_log(&log, trainer.step)?;
    let mut log_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log)
        .map_err(|e| Error::io(&log, e))?;
    let total = trainer.config.total_steps(train.len());
    let stop = opts.stop_at.map_or(total, |s| s.min(total));
    let mut records = Vec::new();
    while trainer.step < stop {
        let rec = trainer.step_on(train, &sampler)?;
        writeln!(log_file, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&log, e))?;
        records.push(rec);
        if let Some(every) = opts.checkpoint_every.filter(|e| *e > 0) {
            if trainer.step.is_multiple_of(every) {
                let dir = out_dir.join("checkpoints");
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                trainer.save(&dir.join(format!("step_{:06}.bin", trainer.step)))?;
            }
        }
    }
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    trainer.save(&checkpoint)?;
    Ok(RunSummary {
        records,
        checkpoint,
        log,
    })
}

pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_clips: usize,
    pub lve_mm: f64,
    pub eve_mm: f64,
    pub lip_avg_mm: f64,
    pub emotion_accuracy: f64,
    pub n_emotions: usize,
    /// Cross-reconstruction pairs drawn from the split.
    pub n_pairs: usize,
    pub cross_error: Option<f64>,
    /// The same cross predictions scored against the wrong-emotion targets.
    pub shuffled_emotion_error: Option<f64>,
}

fn mean_square(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Vertex metrics, emotion accuracy and cross-reconstruction error on a split.
pub fn evaluate(model: &Model, split: &Dataset, rig: &RigTemplateSet, mode: BlendMode) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    let mut cache = FrontendCache::new();
    let mut feats: HashMap<usize, (Array2<f64>, Array2<f64>)> = HashMap::new();
    let (mut lve_sum, mut eve_sum, mut lip_sum, mut correct) = (0.0, 0.0, 0.0, 0usize);
    for (i, s) in split.samples.iter().enumerate() {
        let l = s.clip.labels;
        let t = s.target.frames();
        let (c, e) = model.clip_features(&s.clip, t, &mut cache)?;
        let pred = crate::data::BlendshapeSequence::new(model.decode_features(&e, &c, l.speaker_id, l.level)?)?;
        let pv = rig.blend_sequence(&pred, mode)?;
        let gv = rig.blend_sequence(&s.target, mode)?;
        lve_sum += lve(&pv, &gv, &rig.lip_mask)?;
        eve_sum += eve(&pv, &gv, &rig.eye_forehead_mask)?;
        lip_sum += lip_avg_error(&pv, &gv, &rig.lip_mask)?;

        let probs = model.classify(&s.clip)?;
        let argmax = probs
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |best, (k, &p)| if p > best.1 { (k, p) } else { best },
            )
            .0;
        correct += usize::from(argmax == l.emotion_id);
        feats.insert(i, (c, e));
    }
    let n = split.len() as f64;

    let (mut n_pairs, mut cross, mut shuffled) = (0, None, None);
    if let Ok(sampler) = PairSampler::new(split) {
        let (mut cs, mut ss) = (0.0, 0.0);
        let pairs = sampler.enumerate_indices();
        for [a, b, c1e1, c2e2] in &pairs {
            let s = &split.samples;
            let l = s[*a].clip.labels;
            let same_len = [*b, *c1e1, *c2e2]
                .iter()
                .all(|&k| s[k].target.frames() == s[*a].target.frames());
            if !same_len {
                return Err(Error::Alignment("cross pairs need equal clip lengths".into()));
            }
            let (ca, ea) = &feats[a];
            let (cb, eb) = &feats[b];
            let p11 = model.decode_features(eb, ca, l.speaker_id, l.level)?;
            let p22 = model.decode_features(ea, cb, l.speaker_id, l.level)?;
            cs += mean_square(&p11, s[*c1e1].target.coeffs()) + mean_square(&p22, s[*c2e2].target.coeffs());
            ss += mean_square(&p11, s[*a].target.coeffs()) + mean_square(&p22, s[*b].target.coeffs());
        }
        n_pairs = pairs.len();
        cross = Some(cs / n_pairs as f64);
        shuffled = Some(ss / n_pairs as f64);
    }

    Ok(EvalReport {
        n_clips: split.len(),
        lve_mm: lve_sum / n,
        eve_mm: eve_sum / n,
        lip_avg_mm: lip_sum / n,
        emotion_accuracy: correct as f64 / n,
        n_emotions: model.config.encoder.n_emotions,
        n_pairs,
        cross_error: cross,
        shuffled_emotion_error: shuffled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::DatasetSpec;
    use crate::data::FactorRanges;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            ranges: FactorRanges {
                n_contents: 2,
                n_emotions: 2,
                n_levels: 1,
                n_speakers: 1,
            },
            clips_per_cell: 1,
            heldout_per_cell: 1,
            duration_s: 0.3,
            seed: 4,
            smooth: false,
        }
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            max_steps: Some(4),
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn identical_steps_from_same_state() {
        let data = small_spec().generate().unwrap();
        let sampler = PairSampler::new(&data.train).unwrap();
        let mut a = Trainer::new(&ModelConfig::tiny(), &tiny_train()).unwrap();
        let mut b = a.clone();
        for _ in 0..3 {
            assert_eq!(
                a.step_on(&data.train, &sampler).unwrap(),
                b.step_on(&data.train, &sampler).unwrap()
            );
        }
        assert_eq!(a.model.store, b.model.store);
    }

    #[test]
    fn zero_weights_freeze_everything() {
        let data = small_spec().generate().unwrap();
        let sampler = PairSampler::new(&data.train).unwrap();
        let cfg = TrainConfig {
            weights: LossWeights::zero(),
            ..tiny_train()
        };
        let mut t = Trainer::new(&ModelConfig::tiny(), &cfg).unwrap();
        let before = t.model.store.clone();
        let rec = t.step_on(&data.train, &sampler).unwrap();
        assert_eq!(rec.loss.total, 0.0);
        assert_eq!(t.model.store, before);
    }

    #[test]
    fn frozen_frontend_survives_training() {
        let data = small_spec().generate().unwrap();
        let sampler = PairSampler::new(&data.train).unwrap();
        let mut t = Trainer::new(&ModelConfig::tiny(), &tiny_train()).unwrap();
        let sum = t.model.store.frozen_checksum();
        let trainable_before: Vec<_> = t
            .model
            .store
            .trainable()
            .map(|id| t.model.store.get(id).clone())
            .collect();
        for _ in 0..3 {
            t.step_on(&data.train, &sampler).unwrap();
        }
        assert_eq!(t.model.store.frozen_checksum(), sum);
        let changed = t
            .model
            .store
            .trainable()
            .zip(&trainable_before)
            .any(|(id, b)| t.model.store.get(id) != b);
        assert!(changed);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = small_spec().generate().unwrap();
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let mut full = Trainer::new(&ModelConfig::tiny(), &tiny_train()).unwrap();
        run(&mut full, &data.train, d1.path(), &RunOptions::default()).unwrap();

        let mut part = Trainer::new(&ModelConfig::tiny(), &tiny_train()).unwrap();
        let opts = RunOptions {
            stop_at: Some(2),
            ..RunOptions::default()
        };
        run(&mut part, &data.train, d2.path(), &opts).unwrap();
        let mut resumed = Trainer::load(&d2.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(resumed.step, 2);
        run(&mut resumed, &data.train, d2.path(), &RunOptions::default()).unwrap();

        let log1 = fs::read(d1.path().join(LOG_FILE)).unwrap();
        let log2 = fs::read(d2.path().join(LOG_FILE)).unwrap();
        assert_eq!(log1, log2);
        assert_eq!(read_log(&d1.path().join(LOG_FILE)).unwrap().len(), 4);
        assert_eq!(resumed.model.store, full.model.store);
        assert_eq!(resumed.adam, full.adam);
    }

    #[test]
    fn evaluation_of_exact_and_random_predictions() {
        let data = small_spec().generate().unwrap();
        let rig = crate::rig::make_synthetic_rig(300, 0).unwrap();
        let model = Model::new(&ModelConfig::tiny(), 0).unwrap();
        let r = evaluate(&model, &data.test, &rig, BlendMode::Delta).unwrap();
        assert_eq!(r.n_clips, 4);
        assert!(r.lve_mm > 0.0 && r.eve_mm > 0.0 && r.lip_avg_mm > 0.0);
        assert!(r.lip_avg_mm <= r.lve_mm);
        assert_eq!(r.n_pairs, 4);
        assert!(evaluate(&model, &Dataset::default(), &rig, BlendMode::Delta).is_err());

        let s = &data.test.samples[0];
        let gv = rig.blend_sequence(&s.target, BlendMode::Delta).unwrap();
        assert_eq!(lve(&gv, &gv, &rig.lip_mask).unwrap(), 0.0);
    }
}
