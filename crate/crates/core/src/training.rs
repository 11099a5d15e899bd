//! Joint min-max training with compute-matched baselines.
//!
//! Every iteration builds one computational graph: embed the message, attack
//! the marked image, extract, backprop once. The watermark networks descend
//! the combined objective; in the learned-adversary mode the attack
//! controller takes a reversed, rescaled step along the same gradients, so
//! it climbs the message loss and collects the entropy bonus without a
//! second backward pass. The baseline modes swap the controller for uniform
//! sampling, a UCB bandit, or nothing, keeping steps, batch sizes, and
//! attack depth identical.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::Adversary;
use crate::attacks::{self, AttackParams, NUM_PRIMITIVES};
use crate::config::{Mode, RunConfig};
use crate::data::{self, Dataset};
use crate::nn::{AdamW, ParamStore};
use crate::watermark::{self, WatermarkModel};
use crate::{rng, Error, Result};

/// Linear warmup from zero, then cosine decay from `peak` to `floor`. The
/// end of warmup lands on the peak and the final step on the floor exactly.
pub fn lr_schedule(
    step: usize,
    total_steps: usize,
    warmup_steps: usize,
    peak: f64,
    floor: f64,
) -> f64 {
    if step < warmup_steps {
        return peak * step as f64 / warmup_steps as f64;
    }
    let last = total_steps.saturating_sub(1);
    if last <= warmup_steps {
        return peak;
    }
    let t = ((step - warmup_steps) as f64 / (last - warmup_steps) as f64).min(1.0);
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Arm statistics of the bandit baseline; arms index the attack registry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UcbState {
    counts: Vec<u64>,
    means: Vec<f64>,
    c: f64,
}

impl UcbState {
    pub fn new(arms: usize, c: f64) -> Self {
        Self { counts: vec![0; arms], means: vec![0.0; arms], c }
    }

    /// Rebuilds a state snapshotted in a checkpoint.
    pub fn restore(counts: Vec<u64>, means: Vec<f64>, c: f64) -> Self {
        Self { counts, means, c }
    }

    /// Arm with the highest upper confidence bound
    /// `mean_i + c * sqrt(ln(total) / n_i)`; arms never pulled take
    /// priority in index order.
    pub fn select(&self) -> usize {
        if let Some(i) = self.counts.iter().position(|&n| n == 0) {
            return i;
        }
        let total: u64 = self.counts.iter().sum();
        let ln_total = (total as f64).ln();
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for i in 0..self.counts.len() {
            let score = self.means[i] + self.c * (ln_total / self.counts[i] as f64).sqrt();
            if score > best_score {
                best = i;
                best_score = score;
            }
        }
        best
    }

    /// Folds one observed reward into the pulled arm's running mean.
    pub fn update(&mut self, arm: usize, reward: f64) {
        self.counts[arm] += 1;
        self.means[arm] += (reward - self.means[arm]) / self.counts[arm] as f64;
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }
}

/// Uniform primitive indices, one draw per batch element.
pub fn sample_arms(r: &mut ChaCha12Rng, n: usize, arms: usize) -> Vec<usize> {
    (0..n).map(|_| r.gen_range(0..arms)).collect()
}

/// Scalars observed at one optimizer step.
#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub alpha: f64,
    pub l_msg: f64,
    pub l_perc: f64,
    /// Mean per-step policy entropy in nats; NaN when no policy ran.
    pub entropy: f64,
}

/// One row of the per-epoch log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub step: usize,
    pub lr: f64,
    pub alpha: f64,
    pub l_msg: f64,
    pub l_perc: f64,
    pub entropy: f64,
    pub val_bit_error: f64,
}

/// Sidecar metadata written next to every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: usize,
    pub epochs_done: usize,
    pub config_hash: String,
    pub seed: u64,
    pub opt_model_steps: usize,
    pub opt_adv_steps: usize,
    pub ucb_counts: Vec<u64>,
    pub ucb_means: Vec<f64>,
}

/// Paths and summary numbers of a finished (or interrupted) run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub log_path: PathBuf,
    pub manifest_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub records: Vec<EpochRecord>,
    pub final_val_bit_error: f64,
    pub resumed_from_epoch: Option<usize>,
}

/// Owns the models, both optimizers, and the step counter.
///
/// The adversary exists only in the learned mode; the bandit state exists
/// always but moves only in bandit mode.
pub struct Trainer {
    config: RunConfig,
    device: Device,
    pub model_store: ParamStore,
    pub model: WatermarkModel,
    pub adv_store: Option<ParamStore>,
    pub adversary: Option<Adversary>,
    opt_model: AdamW,
    opt_adv: Option<AdamW>,
    pub ucb: UcbState,
    step: usize,
}

impl Trainer {
    pub fn new(config: &RunConfig, device: &Device) -> Result<Self> {
        config.validate()?;
        let t = &config.train;
        let mut model_store = ParamStore::new(device);
        let model = WatermarkModel::new(
            &mut model_store,
            config.model.payload_bits,
            config.model.width,
            config.seed,
            device,
        )?;
        let opt_model = AdamW::new(model_store.all_vars(), t.lr, t.weight_decay)?;

        let (adversary, adv_store, opt_adv) = if t.mode == Mode::Cat {
            let mut store = ParamStore::new(device);
            let adv = Adversary::new(
                config.adversary.to_adversary_config(),
                config.adversary.backbone.kind(),
                &mut store,
                config.seed,
                device,
            )?;
            let opt = AdamW::new(store.all_vars(), t.lr, t.weight_decay)?;
            (Some(adv), Some(store), Some(opt))
        } else {
            (None, None, None)
        };

        Ok(Self {
            config: config.clone(),
            device: device.clone(),
            model_store,
            model,
            adv_store,
            adversary,
            opt_model,
            opt_adv,
            ucb: UcbState::new(NUM_PRIMITIVES, t.ucb_c),
            step: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn model_checksum(&self) -> Result<String> {
        self.model_store.checksum()
    }

    pub fn adversary_checksum(&self) -> Result<Option<String>> {
        self.adv_store.as_ref().map(|s| s.checksum()).transpose()
    }

    pub fn adversary_opt_steps(&self) -> usize {
        self.opt_adv.as_ref().map_or(0, |o| o.steps_taken())
    }

    /// One optimizer step over `grad_accum` micro-batches.
    ///
    /// Micro-batch losses are averaged into a single graph so one backward
    /// serves both optimizers: the watermark networks descend
    /// `lambda_dec * L_msg + lambda_i * L_perc`, and the controller ascends
    /// `L_msg - lambda_ent * sum_t H_t` via a step scaled by
    /// `-1 / lambda_dec`. Attacks stay off during warmup in every mode.
    pub fn train_step(&mut self, dataset: &Dataset) -> Result<StepMetrics> {
        let t = self.config.train.clone();
        let step = self.step;
        let lr = lr_schedule(
            step,
            self.config.total_steps(),
            self.config.warmup_steps(),
            t.lr,
            t.lr_floor,
        );
        let alpha = watermark::alpha_schedule(step / t.steps_per_epoch, t.epochs);
        self.opt_model.lr = lr;
        if let Some(o) = self.opt_adv.as_mut() {
            o.lr = lr;
        }

        let attacks_on = step >= self.config.warmup_steps();
        let accum = t.grad_accum;
        let micro = t.batch_size / accum;
        let seed = self.config.seed;
        let depth = self.config.adversary.depth;

        let mut l_msg_mean = 0.0;
        let mut l_perc_mean = 0.0;
        let mut ent_values: Vec<f64> = Vec::new();
        let mut pulled: Vec<(usize, f64)> = Vec::new();
        let mut total_loss: Option<Tensor> = None;

        for k in 0..accum {
            let draw = (step * accum + k) as u64;
            let x = dataset.train_batch(seed, draw, micro)?;
            let m = data::messages_for_step(seed, draw, micro, self.config.model.payload_bits, &self.device)?;
            let x_wm = self.model.embed(&x, &m, alpha)?;

            let mut entropy_term: Option<Tensor> = None;
            let mut arms_this: Vec<usize> = Vec::new();
            let x_att = if !attacks_on || t.mode == Mode::Noaug {
                x_wm.clone()
            } else {
                match t.mode {
                    Mode::Noaug => unreachable!(),
                    Mode::Cat => {
                        let adv = self.adversary.as_ref().expect("learned mode keeps an adversary");
                        let mut r = rng::stream(seed, "rollout", draw);
                        let out = adv.rollout(&x_wm, &mut r)?;
                        let steps = &out.trajectory.steps;
                        ent_values
                            .push(steps.iter().map(|s| s.entropy).sum::<f64>() / steps.len() as f64);
                        entropy_term = Some(out.entropy_sum);
                        out.x_out
                    }
                    Mode::Random => {
                        let mut r = rng::stream(seed, "attack-params", draw);
                        let mut y = x_wm.clone();
                        for _ in 0..depth {
                            let params: Vec<AttackParams> = attacks::registry()
                                .iter()
                                .map(|p| attacks::sample_params(p.kind, &mut r))
                                .collect();
                            let arms = sample_arms(&mut r, micro, NUM_PRIMITIVES);
                            y = attacks::apply_arms(&y, &arms, &params)?;
                        }
                        y
                    }
                    Mode::Ucb => {
                        let mut r = rng::stream(seed, "attack-params", draw);
                        let mut y = x_wm.clone();
                        for _ in 0..depth {
                            let arm = self.ucb.select();
                            let params = attacks::sample_params(attacks::registry()[arm].kind, &mut r);
                            y = attacks::apply_tensor(&y, &params)?;
                            arms_this.push(arm);
                        }
                        y
                    }
                }
            };

            let scores = self.model.extract(&x_att)?;
            let l_msg = watermark::message_loss(&scores, &m)?;
            let l_perc = watermark::perceptual_loss(&x, &x_wm)?;
            let l_msg_v = l_msg.to_scalar::<f32>()? as f64;
            let l_perc_v = l_perc.to_scalar::<f32>()? as f64;
            if !l_msg_v.is_finite() {
                return Err(Error::NonFiniteLoss { step, which: "message" });
            }
            if !l_perc_v.is_finite() {
                return Err(Error::NonFiniteLoss { step, which: "perceptual" });
            }
            l_msg_mean += l_msg_v / accum as f64;
            l_perc_mean += l_perc_v / accum as f64;
            for arm in arms_this {
                pulled.push((arm, l_msg_v));
            }

            let mut w = ((l_msg * t.lambda_dec)? + (l_perc * t.lambda_i)?)?;
            if let Some(e) = entropy_term {
                // Entropy enters the descent objective with a positive
                // weight; only the controller sees its gradient, and the
                // reversed step below turns it into a bonus.
                w = (w + (e * (t.lambda_dec * self.config.adversary.lambda_ent))?)?;
            }
            let w = (w / accum as f64)?;
            total_loss = Some(match total_loss {
                None => w,
                Some(acc) => (acc + w)?,
            });
        }

        let grads = total_loss.expect("at least one micro-batch").backward()?;
        self.opt_model.step(&grads)?;
        if attacks_on && t.mode == Mode::Cat {
            self.opt_adv
                .as_mut()
                .expect("learned mode keeps an optimizer")
                .step_scaled(&grads, -1.0 / t.lambda_dec)?;
        }
        for (arm, reward) in pulled {
            self.ucb.update(arm, reward);
        }

        let entropy = if ent_values.is_empty() {
            f64::NAN
        } else {
            ent_values.iter().sum::<f64>() / ent_values.len() as f64
        };
        self.step += 1;
        Ok(StepMetrics { step, lr, alpha, l_msg: l_msg_mean, l_perc: l_perc_mean, entropy })
    }

    /// Writes `checkpoint_ep{N}.safetensors` and its `.json` sidecar: all
    /// parameters of both stores plus optimizer moments in one file.
    pub fn save_checkpoint(&self, dir: &Path, epochs_done: usize) -> Result<PathBuf> {
        let mut map: HashMap<String, Tensor> = HashMap::new();
        for (n, v) in self.model_store.named_vars() {
            map.insert(n.clone(), v.as_tensor().clone());
        }
        if let Some(s) = &self.adv_store {
            for (n, v) in s.named_vars() {
                map.insert(n.clone(), v.as_tensor().clone());
            }
        }
        for (n, t) in self.opt_model.state_tensors("opt_model") {
            map.insert(n, t);
        }
        if let Some(o) = &self.opt_adv {
            for (n, t) in o.state_tensors("opt_adv") {
                map.insert(n, t);
            }
        }
        let stem = format!("checkpoint_ep{epochs_done:04}");
        let tensor_path = dir.join(format!("{stem}.safetensors"));
        candle_core::safetensors::save(&map, &tensor_path)?;
        let meta = CheckpointMeta {
            step: self.step,
            epochs_done,
            config_hash: self.config.hash(),
            seed: self.config.seed,
            opt_model_steps: self.opt_model.steps_taken(),
            opt_adv_steps: self.adversary_opt_steps(),
            ucb_counts: self.ucb.counts().to_vec(),
            ucb_means: self.ucb.means().to_vec(),
        };
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&meta)?)?;
        Ok(tensor_path)
    }

    /// Restores parameters, optimizer moments, bandit state, and the step
    /// counter. Refuses checkpoints written under a different config.
    pub fn load_checkpoint(&mut self, tensor_path: &Path, meta: &CheckpointMeta) -> Result<()> {
        if meta.config_hash != self.config.hash() {
            return Err(Error::Checkpoint(format!(
                "checkpoint belongs to config {}, current config is {}",
                meta.config_hash,
                self.config.hash()
            )));
        }
        let map = candle_core::safetensors::load(tensor_path, &self.device)?;
        self.model_store.load_from_map(&map, tensor_path)?;
        if let Some(s) = self.adv_store.as_mut() {
            s.load_from_map(&map, tensor_path)?;
        }
        self.opt_model.load_state("opt_model", &map, meta.opt_model_steps)?;
        if let Some(o) = self.opt_adv.as_mut() {
            o.load_state("opt_adv", &map, meta.opt_adv_steps)?;
        }
        self.ucb =
            UcbState::restore(meta.ucb_counts.clone(), meta.ucb_means.clone(), self.config.train.ucb_c);
        self.step = meta.step;
        Ok(())
    }
}

/// Fixed mid-strength validation attacks, one per family.
pub fn validation_attacks() -> Vec<AttackParams> {
    vec![
        AttackParams::Identity,
        AttackParams::Crop { area: 0.71, ox: 0.5, oy: 0.5 },
        AttackParams::Brightness { factor: 0.75 },
        AttackParams::Jpeg { quality: 60 },
    ]
}

/// Mean bit error over the validation split and the fixed attack set.
/// Messages are frozen per run so curves are comparable across epochs.
pub fn validation_bit_error(
    model: &WatermarkModel,
    dataset: &Dataset,
    alpha: f64,
    seed: u64,
) -> Result<f64> {
    let x = dataset.val_images()?;
    let n = x.dims4()?.0;
    let d_m = model.d_m();
    let mut r = rng::stream(seed, "val-messages", 0);
    let flat: Vec<f32> = (0..n * d_m)
        .map(|_| (rng::uniform_open01(&mut r) < 0.5) as u8 as f32)
        .collect();
    let m = Tensor::from_vec(flat, (n, d_m), x.device())?;
    let x_wm = model.embed(&x, &m, alpha)?.detach();
    let set = validation_attacks();
    let mut err = 0.0;
    for params in &set {
        let scores = model.extract(&attacks::apply_tensor(&x_wm, params)?)?;
        err += 1.0 - watermark::bit_accuracy(&scores, &m)?;
    }
    Ok(err / set.len() as f64)
}

/// Runs training to completion; see [`train_until`].
pub fn train(config: &RunConfig, device: &Device) -> Result<RunArtifacts> {
    train_until(config, device, None)
}

/// Runs training, resuming from the newest compatible checkpoint in the
/// output directory if one exists. `epoch_limit` caps the number of epochs
/// completed in total, leaving a resumable checkpoint behind; it stands in
/// for an interrupted run.
pub fn train_until(
    config: &RunConfig,
    device: &Device,
    epoch_limit: Option<usize>,
) -> Result<RunArtifacts> {
    config.validate()?;
    let out_dir = PathBuf::from(&config.out_dir);
    fs::create_dir_all(&out_dir)?;
    fs::write(out_dir.join("config.toml"), config.to_toml()?)?;
    let log_path = out_dir.join("log.csv");

    let dataset = config.build_dataset(device)?;
    let mut trainer = Trainer::new(config, device)?;

    let mut records: Vec<EpochRecord> = Vec::new();
    let mut resumed_from_epoch = None;
    if let Some((path, meta)) = find_latest_checkpoint(&out_dir)? {
        trainer.load_checkpoint(&path, &meta)?;
        resumed_from_epoch = Some(meta.epochs_done);
        // Rows past the checkpoint belong to a lost stretch of the previous
        // run; they are regenerated below.
        records = read_log(&log_path)?.into_iter().filter(|r| r.step <= meta.step).collect();
    }

    let spe = config.train.steps_per_epoch;
    let epochs = config.train.epochs;
    let start_epoch = trainer.step_count() / spe;
    let stop_epoch = epoch_limit.map_or(epochs, |l| l.min(epochs));

    let mut checkpoint_path = out_dir.join(format!("checkpoint_ep{start_epoch:04}.safetensors"));
    for epoch in start_epoch..stop_epoch {
        let mut l_msg = 0.0;
        let mut l_perc = 0.0;
        let mut ent = Vec::new();
        let mut lr = 0.0;
        let mut alpha = 0.0;
        for _ in 0..spe {
            let sm = trainer.train_step(&dataset)?;
            l_msg += sm.l_msg / spe as f64;
            l_perc += sm.l_perc / spe as f64;
            if sm.entropy.is_finite() {
                ent.push(sm.entropy);
            }
            lr = sm.lr;
            alpha = sm.alpha;
        }
        let val = validation_bit_error(&trainer.model, &dataset, alpha, config.seed)?;
        let entropy = if ent.is_empty() {
            f64::NAN
        } else {
            ent.iter().sum::<f64>() / ent.len() as f64
        };
        records.push(EpochRecord {
            step: trainer.step_count(),
            lr,
            alpha,
            l_msg,
            l_perc,
            entropy,
            val_bit_error: val,
        });
        write_log(&log_path, &records)?;

        let done = epoch + 1;
        if done % config.train.checkpoint_every == 0 || done == stop_epoch {
            checkpoint_path = trainer.save_checkpoint(&out_dir, done)?;
        }
    }

    let final_val_bit_error = records.last().map_or(f64::NAN, |r| r.val_bit_error);
    let manifest_path = write_manifest(
        &out_dir,
        config,
        &trainer,
        &dataset,
        final_val_bit_error,
        resumed_from_epoch,
        &checkpoint_path,
    )?;
    Ok(RunArtifacts {
        out_dir,
        log_path,
        manifest_path,
        checkpoint_path,
        records,
        final_val_bit_error,
        resumed_from_epoch,
    })
}

/// Newest checkpoint pair in `dir` by completed-epoch count.
pub fn find_latest_checkpoint(dir: &Path) -> Result<Option<(PathBuf, CheckpointMeta)>> {
    let mut best: Option<(usize, PathBuf)> = None;
    if !dir.exists() {
        return Ok(None);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(stem) = name.strip_prefix("checkpoint_ep").and_then(|s| s.strip_suffix(".json"))
        else {
            continue;
        };
        let Ok(epochs) = stem.parse::<usize>() else { continue };
        if best.as_ref().map_or(true, |(e, _)| epochs > *e) {
            best = Some((epochs, path));
        }
    }
    let Some((_, json_path)) = best else { return Ok(None) };
    let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(&json_path)?)?;
    let tensor_path = json_path.with_extension("safetensors");
    if !tensor_path.exists() {
        return Err(Error::Checkpoint(format!("missing tensor file for {json_path:?}")));
    }
    Ok(Some((tensor_path, meta)))
}

/// Reads a per-epoch log written by [`write_log`]; missing file means an
/// empty history.
pub fn read_log(path: &Path) -> Result<Vec<EpochRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

fn write_log(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for r in records {
        writer.serialize(r)?;
    }
    writer.flush().map_err(std::io::Error::from)?;
    Ok(())
}

fn write_manifest(
    out_dir: &Path,
    config: &RunConfig,
    trainer: &Trainer,
    dataset: &Dataset,
    final_val_bit_error: f64,
    resumed_from_epoch: Option<usize>,
    checkpoint_path: &Path,
) -> Result<PathBuf> {
    let backbone_checksum = match &trainer.adversary {
        Some(a) => Some(a.backbone_checksum()?),
        None => None,
    };
    let manifest = serde_json::json!({
        "config_hash": config.hash(),
        "seed": config.seed,
        "mode": config.train.mode.label(),
        "steps_completed": trainer.step_count(),
        "epochs_completed": trainer.step_count() / config.train.steps_per_epoch,
        "dataset": {
            "images": dataset.len(),
            "train": dataset.train_len(),
            "val": dataset.val_len(),
            "test": dataset.test_len(),
            "side": dataset.side(),
        },
        "model_params": trainer.model_store.count_params(),
        "adversary_params": trainer.adv_store.as_ref().map(|s| s.count_params()),
        "backbone_checksum": backbone_checksum,
        "resumed_from_epoch": resumed_from_epoch,
        "final_val_bit_error": if final_val_bit_error.is_finite() {
            serde_json::json!(final_val_bit_error)
        } else {
            serde_json::Value::Null
        },
        "artifacts": {
            "log": "log.csv",
            "config": "config.toml",
            "checkpoint": checkpoint_path.file_name().and_then(|n| n.to_str()),
        },
        "config": serde_json::to_value(config)?,
    });
    let path = out_dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}
