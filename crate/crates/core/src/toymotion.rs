//! Synthetic conditioned motion data and the pretraining loops that produce
//! the starting checkpoints for fine-tuning.
//!
//! A "motion" is an `L × d` trajectory of frames; each class traces a circle
//! of class-specific radius and angular frequency with a per-sample random
//! phase plus Gaussian jitter. The last two classes are deliberately placed
//! close together in parameter space so that retrieval has a hard negative
//! pair to fail on.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_noise, NoiseSchedule};
use crate::models::{multi_mse, AdamConfig, Denoiser, LrSchedule, Optimizer, RewardModel};
use crate::seeds;
use crate::spl::{eval_retrieval, PoolPolicy, RetrievalProtocol, RetrievalReport};
use crate::{Error, Result};

/// Discrete condition label in `[0, C)` — the toy stand-in for a text prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConditionId(pub usize);

/// One conditioned motion: `frames` is the flattened `L × d` array
/// (frame-major), standardized to the dataset statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSample {
    pub sample_id: u64,
    pub condition: ConditionId,
    pub frames: Vec<f64>,
}

/// Per-class circle parameters used by the generator.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct ClassPrototype {
    pub radius: f64,
    pub omega: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub frames: usize,
    pub frame_dim: usize,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            num_classes: 8,
            per_class: 256,
            frames: 16,
            frame_dim: 2,
            noise_scale: 0.05,
            seed: 0,
        }
    }
}

/// Global (scalar) standardization statistics over the train split.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct Standardization {
    pub mean: f64,
    pub std: f64,
}

impl Standardization {
    pub fn apply(&self, raw: f64) -> f64 {
        (raw - self.mean) / self.std
    }

    pub fn invert(&self, standardized: f64) -> f64 {
        standardized * self.std + self.mean
    }
}

#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub config: DatasetConfig,
    pub prototypes: Vec<ClassPrototype>,
    pub standardization: Standardization,
    pub train: Vec<MotionSample>,
    pub val: Vec<MotionSample>,
    pub test: Vec<MotionSample>,
}

impl ToyDataset {
    pub fn motion_dim(&self) -> usize {
        self.config.frames * self.config.frame_dim
    }

    pub fn splits(&self) -> [(&'static str, &[MotionSample]); 3] {
        [
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
        ]
    }
}

/// Class prototypes on a fixed grid. Classes `C-2` and `C-1` are planted as
/// near-duplicates (a hard negative pair for retrieval).
pub fn class_prototypes(num_classes: usize) -> Vec<ClassPrototype> {
    let mut protos: Vec<ClassPrototype> = (0..num_classes)
        .map(|c| ClassPrototype {
            radius: 0.8 + 0.12 * c as f64,
            omega: 0.25 + 1.1 * c as f64 / num_classes as f64,
        })
        .collect();
    if num_classes >= 2 {
        let base = protos[num_classes - 2];
        protos[num_classes - 1] = ClassPrototype {
            radius: base.radius + 0.02,
            omega: base.omega + 0.03,
        };
    }
    protos
}

fn prototype_frame(proto: &ClassPrototype, frame: usize, coord: usize, phase: f64) -> f64 {
    let angle = proto.omega * frame as f64 + phase;
    proto.radius * (angle - coord as f64 * std::f64::consts::FRAC_PI_2).cos()
}

/// Generates the dataset: per-class circular trajectories with random phase
/// and Gaussian jitter, split 80/10/10 per class, standardized to zero mean
/// and unit variance over the train split. A pure function of its arguments.
pub fn generate_dataset(config: DatasetConfig) -> Result<ToyDataset> {
    if config.num_classes < 2 {
        return Err(Error::DatasetConfig("need at least 2 classes".into()));
    }
    if config.per_class < 4 {
        return Err(Error::DatasetConfig(
            "need at least 4 samples per class".into(),
        ));
    }
    if config.frames == 0 || config.frame_dim == 0 {
        return Err(Error::DatasetConfig(
            "frames and frame_dim must be >= 1".into(),
        ));
    }
    if !(config.noise_scale.is_finite() && config.noise_scale >= 0.0) {
        return Err(Error::DatasetConfig(
            "noise_scale must be finite and >= 0".into(),
        ));
    }

    let prototypes = class_prototypes(config.num_classes);
    for (i, a) in prototypes.iter().enumerate() {
        for b in prototypes.iter().skip(i + 1) {
            if (a.radius - b.radius).abs() < 1e-9 && (a.omega - b.omega).abs() < 1e-9 {
                return Err(Error::DatasetConfig(
                    "degenerate class grid: duplicate prototypes".into(),
                ));
            }
        }
    }

    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    let mut next_id: u64 = 0;

    for class in 0..config.num_classes {
        let mut rng = seeds::rng(seeds::child_n(config.seed, "toymotion/class", class as u64));
        let mut class_samples = Vec::with_capacity(config.per_class);
        for _ in 0..config.per_class {
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let mut frames = Vec::with_capacity(config.frames * config.frame_dim);
            for i in 0..config.frames {
                for k in 0..config.frame_dim {
                    let jitter: f64 = StandardNormal.sample(&mut rng);
                    frames.push(
                        prototype_frame(&prototypes[class], i, k, phase)
                            + config.noise_scale * jitter,
                    );
                }
            }
            class_samples.push(MotionSample {
                sample_id: next_id,
                condition: ConditionId(class),
                frames,
            });
            next_id += 1;
        }
        class_samples.shuffle(&mut rng);
        let n_val = (config.per_class / 10).max(1);
        let n_test = (config.per_class / 10).max(1);
        let n_train = config.per_class - n_val - n_test;
        train.extend(class_samples.drain(..n_train));
        val.extend(class_samples.drain(..n_val));
        test.extend(class_samples.drain(..));
    }

    let n: f64 = train.iter().map(|s| s.frames.len() as f64).sum();
    let mean = train.iter().flat_map(|s| &s.frames).sum::<f64>() / n;
    let var = train
        .iter()
        .flat_map(|s| &s.frames)
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n;
    let std = var.sqrt().max(1e-12);
    let standardization = Standardization { mean, std };
    for split in [&mut train, &mut val, &mut test] {
        for s in split.iter_mut() {
            for v in s.frames.iter_mut() {
                *v = standardization.apply(*v);
            }
        }
    }

    Ok(ToyDataset {
        config,
        prototypes,
        standardization,
        train,
        val,
        test,
    })
}

// ── pretraining ──────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Evaluate retrieval quality every this many steps (retrieval
    /// pretraining only). Zero disables intermediate evals.
    pub eval_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            batch_size: 64,
            learning_rate: 1e-3,
            eval_every: 0,
        }
    }
}

fn sample_batch<'a>(
    train: &'a [MotionSample],
    batch_size: usize,
    rng: &mut impl Rng,
) -> Vec<&'a MotionSample> {
    rand::seq::index::sample(rng, train.len(), batch_size.min(train.len()))
        .iter()
        .map(|i| &train[i])
        .collect()
}

/// Standard noise-prediction pretraining: minimizes
/// `E‖ε − ε_θ(√ᾱ_t x₀ + √(1−ᾱ_t) ε, t, c)‖²` over random `(x₀, t, ε)`.
/// Returns the per-step loss trace. Aborts with a diagnostic if the loss
/// diverges past 1e3.
pub fn pretrain_diffusion(
    denoiser: &mut Denoiser,
    dataset: &ToyDataset,
    schedule: &NoiseSchedule,
    config: &PretrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let mut tape = crate::Tape::new();
    let binding = denoiser.mount(&mut tape, true)?;
    let mut host: Vec<Vec<f64>> = denoiser
        .store
        .tensors
        .iter()
        .map(|t| t.data.clone())
        .collect();
    let mut optimizer = Optimizer::new(
        AdamConfig::with_schedule(LrSchedule::Constant(config.learning_rate)),
        &denoiser.store.lens(),
    );
    let mut rng = seeds::rng(seeds::child(seed, "pretrain_diffusion"));
    let mut trace = Vec::with_capacity(config.steps);
    let param_ids = binding.param_ids();

    for step in 0..config.steps {
        let batch = sample_batch(&dataset.train, config.batch_size, &mut rng);
        let mut per_sample = Vec::with_capacity(batch.len());
        for sample in &batch {
            let t = rng.gen_range(1..=schedule.steps());
            let eps: Vec<f64> = (0..sample.frames.len())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let dim = sample.frames.len();
            let x0 = tape.constant(sample.frames.clone(), vec![dim])?;
            let eps_id = tape.constant(eps, vec![dim])?;
            let xt = forward_noise(&mut tape, x0, t, eps_id, schedule)?;
            let pred = binding.forward(&mut tape, xt, t, sample.condition)?;
            per_sample.push(multi_mse(&mut tape, pred, eps_id)?);
        }
        let stacked = tape.concat(&per_sample)?;
        let loss = tape.mean(stacked)?;
        let loss_value = tape.scalar(loss)?;
        if !loss_value.is_finite() || loss_value > 1e3 {
            return Err(Error::Diverged(format!(
                "diffusion pretraining loss {loss_value} at step {step}"
            )));
        }
        trace.push(loss_value);

        let grads = tape.backward(loss)?;
        let grad_vecs: Vec<Vec<f64>> = param_ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                grads
                    .get(*id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; host[i].len()])
            })
            .collect();
        optimizer.step(&mut host, &grad_vecs);
        for (id, data) in param_ids.iter().zip(&host) {
            tape.set_data(*id, data)?;
        }
        tape.release_graph();
    }

    denoiser.read_back(&tape, &binding)?;
    Ok(trace)
}

/// Symmetric InfoNCE-style contrastive pretraining of the retrieval encoder
/// over in-batch (motion, condition) pairs, temperature included. Returns
/// the loss trace and any intermediate retrieval evaluations.
pub fn pretrain_retrieval(
    reward: &mut RewardModel,
    dataset: &ToyDataset,
    config: &PretrainConfig,
    seed: u64,
) -> Result<(Vec<f64>, Vec<(usize, RetrievalReport)>)> {
    if config.batch_size < 2 {
        return Err(Error::InvalidArgument(
            "contrastive pretraining needs batch_size >= 2".into(),
        ));
    }
    let mut tape = crate::Tape::new();
    let binding = reward.mount(&mut tape, true)?;
    let mut host: Vec<Vec<f64>> = reward
        .store
        .tensors
        .iter()
        .map(|t| t.data.clone())
        .collect();
    let mut optimizer = Optimizer::new(
        AdamConfig::with_schedule(LrSchedule::Constant(config.learning_rate)),
        &reward.store.lens(),
    );
    let mut rng = seeds::rng(seeds::child(seed, "pretrain_retrieval"));
    let mut trace = Vec::with_capacity(config.steps);
    let mut evals = Vec::new();
    let param_ids = binding.param_ids();

    for step in 0..config.steps {
        let batch = sample_batch(&dataset.train, config.batch_size, &mut rng);
        let loss = crate::spl::contrastive_loss(&mut tape, &binding, &batch)?;
        let loss_value = tape.scalar(loss)?;
        if !loss_value.is_finite() || loss_value > 1e3 {
            return Err(Error::Diverged(format!(
                "retrieval pretraining loss {loss_value} at step {step}"
            )));
        }
        trace.push(loss_value);

        let grads = tape.backward(loss)?;
        let grad_vecs: Vec<Vec<f64>> = param_ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                grads
                    .get(*id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; host[i].len()])
            })
            .collect();
        optimizer.step(&mut host, &grad_vecs);
        for (id, data) in param_ids.iter().zip(&host) {
            tape.set_data(*id, data)?;
        }
        tape.release_graph();

        if config.eval_every > 0 && (step + 1) % config.eval_every == 0 {
            reward.read_back(&tape, &binding)?;
            let report = eval_retrieval(
                reward,
                &dataset.val,
                &RetrievalProtocol {
                    pool: PoolPolicy::RandomBatch(32),
                    num_batches: 20,
                    ks: vec![1, 2, 3],
                },
                seeds::child_n(seed, "pretrain_retrieval/eval", step as u64),
            )?;
            evals.push((step + 1, report));
        }
    }

    reward.read_back(&tape, &binding)?;
    Ok((trace, evals))
}

// ── dataset serialization ────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config: DatasetConfig,
    pub prototypes: Vec<ClassPrototype>,
    pub standardization: Standardization,
    pub train_ids: Vec<u64>,
    pub val_ids: Vec<u64>,
    pub test_ids: Vec<u64>,
}

/// Writes `dataset.csv` (one row per sample: sample_id, class, then the
/// L×d frame values) and `manifest.json` (generator parameters, split ids,
/// standardization statistics) into `dir`.
pub fn save_dataset(dataset: &ToyDataset, dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut csv = String::new();
    csv.push_str("sample_id,class");
    for i in 0..dataset.motion_dim() {
        csv.push_str(&format!(",f{i}"));
    }
    csv.push('\n');
    for (_, split) in dataset.splits() {
        for s in split {
            csv.push_str(&format!("{},{}", s.sample_id, s.condition.0));
            for v in &s.frames {
                csv.push_str(&format!(",{v}"));
            }
            csv.push('\n');
        }
    }
    std::fs::write(dir.join("dataset.csv"), csv)?;

    let manifest = DatasetManifest {
        format_version: 1,
        config: dataset.config,
        prototypes: dataset.prototypes.clone(),
        standardization: dataset.standardization,
        train_ids: dataset.train.iter().map(|s| s.sample_id).collect(),
        val_ids: dataset.val.iter().map(|s| s.sample_id).collect(),
        test_ids: dataset.test.iter().map(|s| s.sample_id).collect(),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_dataset(dir: &std::path::Path) -> Result<ToyDataset> {
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format_version != 1 {
        return Err(Error::DatasetConfig(format!(
            "unsupported dataset format version {}",
            manifest.format_version
        )));
    }
    let csv = std::fs::read_to_string(dir.join("dataset.csv"))?;
    let mut by_id = std::collections::HashMap::new();
    let dim = manifest.config.frames * manifest.config.frame_dim;
    for (lineno, line) in csv.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 + dim {
            return Err(Error::DatasetConfig(format!(
                "dataset.csv line {}: expected {} fields, got {}",
                lineno + 1,
                2 + dim,
                fields.len()
            )));
        }
        let parse_err = |what: &str| {
            Error::DatasetConfig(format!("dataset.csv line {}: bad {what}", lineno + 1))
        };
        let sample_id: u64 = fields[0].parse().map_err(|_| parse_err("sample_id"))?;
        let class: usize = fields[1].parse().map_err(|_| parse_err("class"))?;
        let frames: Vec<f64> = fields[2..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| parse_err("frame value")))
            .collect::<Result<_>>()?;
        by_id.insert(
            sample_id,
            MotionSample {
                sample_id,
                condition: ConditionId(class),
                frames,
            },
        );
    }
    let take = |ids: &[u64]| -> Result<Vec<MotionSample>> {
        ids.iter()
            .map(|id| {
                by_id
                    .get(id)
                    .cloned()
                    .ok_or_else(|| Error::DatasetConfig(format!("missing sample id {id}")))
            })
            .collect()
    };
    Ok(ToyDataset {
        config: manifest.config,
        prototypes: manifest.prototypes,
        standardization: manifest.standardization,
        train: take(&manifest.train_ids)?,
        val: take(&manifest.val_ids)?,
        test: take(&manifest.test_ids)?,
    })
}
