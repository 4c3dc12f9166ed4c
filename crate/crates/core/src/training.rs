//! The end-to-end training loop: embed, distort, extract, score, update.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, OptimizerState};
use crate::cim::{Cim, CimState};
use crate::config::RunConfig;
use crate::data::DataSource;
use crate::distortions::{training_distort, DistortionSpec};
use crate::embedder::Embedder;
use crate::error::{Error, Result};
use crate::image_io::ImageTensor;
use crate::losses::{total_loss, LossBreakdown, LossTerms, SsimLoss};
use crate::message::{threshold, BitMessage};
use crate::model::{stack_images, Model};
use crate::params::ParamStore;
use crate::rng::{tagged_stream, Rng};
use crate::tensor::{Graph, Tensor, Var};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One adaptive-moment update. Parameters without a gradient are left alone.
pub fn adam_update(
    params: &mut ParamStore<f32>,
    state: &mut OptimizerState,
    grads: &BTreeMap<String, Tensor<f32>>,
    lr: f64,
) {
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("gradient for a known parameter");
        let m = state.m.get_mut(name).expect("first moment present");
        let v = state.v.get_mut(name).expect("second moment present");
        for (((p, m), v), &g) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            let g = g as f64;
            let mn = ADAM_BETA1 * *m as f64 + (1.0 - ADAM_BETA1) * g;
            let vn = ADAM_BETA2 * *v as f64 + (1.0 - ADAM_BETA2) * g * g;
            *m = mn as f32;
            *v = vn as f32;
            let step = lr * (mn / c1) / ((vn / c2).sqrt() + ADAM_EPS);
            *p = (*p as f64 - step) as f32;
        }
    }
}

struct StepVars {
    bits: Vec<f32>,
    watermarked: Var,
    distorted: Var,
    logits: Var,
    probs: Var,
    terms: LossTerms,
    states_e: Vec<Var>,
    states_x: Vec<Var>,
}

/// Tape for one training step: guidance from the states smoothed up to the
/// previous step, embed, distort, extract and the weighted loss.
fn step_graph<'p>(
    model: &Model,
    params: &'p ParamStore<f32>,
    cim: &CimState,
    images: &[ImageTensor],
    messages: &[BitMessage],
    specs: &[DistortionSpec],
    rng: &mut Rng,
) -> Result<(Graph<'p, f32>, StepVars)> {
    let cfg = &model.config;
    let batch = stack_images(images)?;
    model
        .embedder
        .check_input(batch.shape(), messages.len(), cfg.message_length)?;
    if specs.len() != images.len() {
        return Err(Error::Contract("one distortion spec per image".into()));
    }
    let bits: Vec<f32> = messages.iter().flat_map(|m| m.bits().iter().map(|&b| b as f32)).collect();

    let mut g = Graph::with_params(params);
    let cover = g.constant(batch);
    let signs = g.constant(Embedder::message_signs(messages));
    let (p_e, p_x) = Cim::project_graph(&mut g, &cim.smooth_e, &cim.smooth_x);
    let emb = model.embed_graph(&mut g, cover, signs, p_e);
    let distorted = training_distort(&mut g, emb.image, specs, rng);
    let ext = model.extract_graph(&mut g, distorted, p_x);
    let terms = total_loss(&mut g, ext.probs, &bits, emb.image, cover, cfg.loss_weights, &SsimLoss);
    let vars = StepVars {
        bits,
        watermarked: emb.image,
        distorted,
        logits: ext.logits,
        probs: ext.probs,
        terms,
        states_e: emb.states,
        states_x: ext.states,
    };
    Ok((g, vars))
}

/// Outcome of one optimiser step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub loss: LossBreakdown,
    /// Bit accuracy of the distorted batch during this step.
    pub bit_accuracy: f64,
}

/// Parameters, optimiser moments and coupling state of a run in progress.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub params: ParamStore<f32>,
    pub optimizer: OptimizerState,
    pub cim: CimState,
    pub step: u64,
    pub epoch: u64,
}

/// Where `fit` writes its artefacts. All fields are optional.
#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Periodic and final checkpoints go here (`epoch-NNNN.ckpt`, `final.ckpt`).
    pub checkpoint_dir: Option<PathBuf>,
    /// One JSON object per step.
    pub loss_log: Option<PathBuf>,
    /// Stop after this epoch instead of the configured count.
    pub stop_after_epoch: Option<u64>,
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let model = Model::new(config)?;
        let params = model.init_params::<f32>();
        Ok(Self {
            optimizer: OptimizerState::zeros_like(&params),
            model,
            params,
            cim: CimState::default(),
            step: 0,
            epoch: 0,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.validate()?;
        let model = Model::new(&ck.config)?;
        let fresh = model.init_params::<f32>();
        let same = fresh.len() == ck.params.len()
            && fresh
                .iter()
                .all(|(n, t)| ck.params.get(n).is_some_and(|p| p.shape() == t.shape()));
        if !same {
            return Err(Error::Checkpoint("parameters do not match the configured architecture".into()));
        }
        Ok(Self {
            model,
            params: ck.params,
            optimizer: ck.optimizer,
            cim: ck.cim,
            step: ck.step,
            epoch: ck.epoch,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.model.config
    }

    /// Snapshot with frozen guidance once at least one step has run.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let guidance = if self.step > 0 {
            Some(Cim::freeze(&self.params, &self.cim)?)
        } else {
            None
        };
        Ok(Checkpoint {
            config: self.config().clone(),
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            cim: self.cim.clone(),
            guidance,
            step: self.step,
            epoch: self.epoch,
        })
    }

    /// One step with messages and distortions drawn from the step's stream.
    pub fn train_step(&mut self, images: &[ImageTensor]) -> Result<StepReport> {
        let cfg = self.config();
        let mut rng = tagged_stream(cfg.seed, "step", self.step);
        let messages: Vec<BitMessage> = images
            .iter()
            .map(|_| BitMessage::random(&mut rng, cfg.message_length))
            .collect();
        let specs: Vec<DistortionSpec> = images
            .iter()
            .map(|_| DistortionSpec::sample(&mut rng, &cfg.distortions))
            .collect();
        self.train_step_with(images, &messages, &specs, &mut rng)
    }

    /// One step with caller-chosen messages and distortions.
    pub fn train_step_with(
        &mut self,
        images: &[ImageTensor],
        messages: &[BitMessage],
        specs: &[DistortionSpec],
        rng: &mut Rng,
    ) -> Result<StepReport> {
        let cfg = &self.model.config;
        let (g, v) = step_graph(&self.model, &self.params, &self.cim, images, messages, specs, rng)?;
        let loss = v.terms.breakdown(&g, cfg.loss_weights);

        if !loss.total.is_finite() {
            let named = [
                ("watermarked image", v.watermarked),
                ("distorted image", v.distorted),
                ("extractor logits", v.logits),
                ("bce term", v.terms.bce),
                ("mse term", v.terms.mse),
                ("perceptual term", v.terms.perceptual),
            ];
            let first = named
                .iter()
                .find(|(_, x)| !g.value(*x).all_finite())
                .map_or("total loss", |(n, _)| *n);
            return Err(Error::NonFinite(format!("{first} at step {}", self.step)));
        }

        let hits = g
            .value(v.probs)
            .data()
            .iter()
            .zip(&v.bits)
            .filter(|(&p, &b)| threshold(p as f64) == b as u8)
            .count();
        let bit_accuracy = hits as f64 / v.bits.len() as f64;

        let scalar = |x| g.value(x).data()[0] as f64;
        let s_e: Vec<f64> = v.states_e.iter().map(|&x| scalar(x)).collect();
        let s_x: Vec<f64> = v.states_x.iter().map(|&x| scalar(x)).collect();

        let mut grads = g.backward(v.terms.total);
        let grads = g.param_grads(&mut grads);
        drop(g);
        if let Some((name, _)) = grads.iter().find(|(_, t)| !t.all_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{name}` at step {}", self.step)));
        }

        adam_update(&mut self.params, &mut self.optimizer, &grads, cfg.learning_rate);
        self.cim.update(&s_e, &s_x, cfg.ema_beta)?;
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            loss,
            bit_accuracy,
        })
    }

    /// Loss gradients for one batch without updating anything.
    pub fn gradients(
        &self,
        images: &[ImageTensor],
        messages: &[BitMessage],
        specs: &[DistortionSpec],
    ) -> Result<BTreeMap<String, Tensor<f32>>> {
        let mut rng = tagged_stream(self.config().seed, "probe", self.step);
        let (g, v) = step_graph(&self.model, &self.params, &self.cim, images, messages, specs, &mut rng)?;
        let mut grads = g.backward(v.terms.total);
        Ok(g.param_grads(&mut grads))
    }

    /// Runs epochs of shuffled mini-batches from the current epoch onwards.
    pub fn fit(&mut self, data: &dyn DataSource, opts: &FitOptions) -> Result<Checkpoint> {
        let cfg = self.config().clone();
        if data.is_empty() {
            return Err(Error::Config("training data is empty".into()));
        }
        if data.size() != (cfg.height(), cfg.width()) {
            return Err(Error::Config(format!(
                "data size {:?} does not match the configured {:?}",
                data.size(),
                cfg.image_size
            )));
        }
        let mut log = match &opts.loss_log {
            Some(path) => Some(open_log(path, self.step > 0)?),
            None => None,
        };
        let last_epoch = opts.stop_after_epoch.unwrap_or(cfg.epochs as u64).min(cfg.epochs as u64);
        while self.epoch < last_epoch {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut tagged_stream(cfg.seed, "shuffle", self.epoch));
            for chunk in order.chunks(cfg.batch_size) {
                let images = chunk.iter().map(|&i| data.get(i)).collect::<Result<Vec<_>>>()?;
                let report = self.train_step(&images)?;
                if let Some((path, w)) = log.as_mut() {
                    let line = LogLine {
                        epoch: self.epoch,
                        step: report.step,
                        bce: report.loss.bce,
                        mse: report.loss.mse,
                        perceptual: report.loss.perceptual,
                        total: report.loss.total,
                        bit_accuracy: report.bit_accuracy,
                    };
                    serde_json::to_writer(&mut *w, &line)?;
                    writeln!(w).map_err(|e| Error::io(path.as_path(), e))?;
                }
            }
            self.epoch += 1;
            if let Some(dir) = &opts.checkpoint_dir {
                if cfg.checkpoint_every > 0 && self.epoch % cfg.checkpoint_every as u64 == 0 {
                    self.checkpoint()?.save(dir.join(format!("epoch-{:04}.ckpt", self.epoch)))?;
                }
            }
        }
        if let Some((path, w)) = log.as_mut() {
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        let ck = self.checkpoint()?;
        if let Some(dir) = &opts.checkpoint_dir {
            ck.save(dir.join("final.ckpt"))?;
        }
        Ok(ck)
    }
}

#[derive(Serialize)]
struct LogLine {
    epoch: u64,
    step: u64,
    bce: f64,
    mse: f64,
    perceptual: f64,
    total: f64,
    bit_accuracy: f64,
}

fn open_log(path: &Path, append: bool) -> Result<(PathBuf, BufWriter<File>)> {
    let file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok((path.to_path_buf(), BufWriter::new(file)))
}

/// Trains a fresh model on `data` for the configured number of epochs.
pub fn fit(config: &RunConfig, data: &dyn DataSource, opts: &FitOptions) -> Result<Checkpoint> {
    Trainer::new(config)?.fit(data, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_textures, InMemory};
    use crate::rng::seeded_rng;

    pub(crate) fn tiny_config() -> RunConfig {
        RunConfig {
            image_size: [32, 32],
            message_length: 8,
            embedder_widths: [4, 4, 8, 8],
            front_channels: 2,
            message_channels: 4,
            extractor_width: 4,
            batch_size: 2,
            epochs: 2,
            dataset_size: 4,
            ..RunConfig::desk()
        }
    }

    fn tiny_data(n: usize) -> InMemory {
        InMemory(synth_textures(&mut seeded_rng(3), n, 32, 32))
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::new(&[3], vec![1.0f32, -2.0, 0.5]));
        let mut st = OptimizerState::zeros_like(&p);
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Tensor::new(&[3], vec![0.3f32, -4.0, 0.0]));
        adam_update(&mut p, &mut st, &g, 0.01);
        let got = p.get("a").unwrap().data();
        assert!((got[0] - 0.99).abs() < 1e-6);
        assert!((got[1] + 1.99).abs() < 1e-6);
        assert_eq!(got[2], 0.5);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn steps_are_deterministic_and_update_state_once() {
        let data = tiny_data(2);
        let mut a = Trainer::new(&tiny_config()).unwrap();
        let mut b = Trainer::new(&tiny_config()).unwrap();
        for _ in 0..2 {
            let ra = a.train_step(&data.0).unwrap();
            let rb = b.train_step(&data.0).unwrap();
            assert_eq!(ra, rb);
        }
        assert_eq!(a.params, b.params);
        assert_eq!(a.cim.step_count, 2);
        assert_eq!(a.cim, b.cim);
    }

    #[test]
    fn identity_init_has_no_image_loss_gradient() {
        let cfg = RunConfig {
            loss_weights: crate::config::LossWeights {
                bce: 0.0,
                mse: 1.0,
                perceptual: 1.0,
            },
            ..tiny_config()
        };
        let t = Trainer::new(&cfg).unwrap();
        let data = tiny_data(2);
        let msgs = vec![BitMessage::random(&mut seeded_rng(1), 8); 2];
        let grads = t.gradients(&data.0, &msgs, &[DistortionSpec::IDENTITY; 2]).unwrap();
        // the structural term is stationary at equality; only rounding remains
        for (name, g) in &grads {
            assert!(g.sum_sq().sqrt() < 1e-6, "{name}: {}", g.sum_sq().sqrt());
        }
        let mse_only = RunConfig {
            loss_weights: crate::config::LossWeights {
                bce: 0.0,
                mse: 1.0,
                perceptual: 0.0,
            },
            ..tiny_config()
        };
        let t = Trainer::new(&mse_only).unwrap();
        let grads = t.gradients(&data.0, &msgs, &[DistortionSpec::IDENTITY; 2]).unwrap();
        assert!(grads.values().all(|g| g.sum_sq() == 0.0));
    }

    #[test]
    fn every_parameter_receives_gradient_after_two_steps() {
        // zero output layers block upstream gradient at step 0, and guidance
        // lags one step behind the all-zero step-0 states, so the projections
        // first see a nonzero input at step 2. At 32x32 the last quarter-scale
        // stage is 1x1 and normalises to zero, hence 64x64.
        for front_end in [crate::config::FrontEnd::Standard, crate::config::FrontEnd::Deformable] {
            let cfg = RunConfig {
                front_end,
                image_size: [64, 64],
                ..tiny_config()
            };
            let mut t = Trainer::new(&cfg).unwrap();
            let batch = synth_textures(&mut seeded_rng(3), 2, 64, 64);
            t.train_step(&batch).unwrap();
            t.train_step(&batch).unwrap();
            let images = synth_textures(&mut seeded_rng(9), 2, 64, 64);
            let mut rng = seeded_rng(10);
            let msgs: Vec<BitMessage> = (0..2).map(|_| BitMessage::random(&mut rng, 8)).collect();
            let specs: Vec<DistortionSpec> = (0..2)
                .map(|_| DistortionSpec::sample(&mut rng, &cfg.distortions))
                .collect();
            let grads = t.gradients(&images, &msgs, &specs).unwrap();
            assert_eq!(grads.len(), t.params.len());
            for (name, g) in &grads {
                assert!(g.sum_sq() > 0.0, "{front_end:?}: no gradient reaches `{name}`");
            }
        }
    }

    #[test]
    fn zero_epochs_returns_the_initialisation() {
        let cfg = RunConfig { epochs: 0, ..tiny_config() };
        let ck = fit(&cfg, &tiny_data(4), &FitOptions::default()).unwrap();
        assert_eq!(ck.params, Model::new(&cfg).unwrap().init_params::<f32>());
        assert!(ck.guidance.is_none());
        assert_eq!(ck.step, 0);
    }

    #[test]
    fn resumed_run_matches_unbroken_run() {
        let cfg = tiny_config();
        let data = tiny_data(4);
        let unbroken = fit(&cfg, &data, &FitOptions::default()).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let first = FitOptions {
            stop_after_epoch: Some(1),
            ..FitOptions::default()
        };
        let half = fit(&cfg, &data, &first).unwrap();
        half.save(dir.path().join("half.ckpt")).unwrap();
        let loaded = Checkpoint::load(dir.path().join("half.ckpt")).unwrap();
        let resumed = Trainer::from_checkpoint(loaded).unwrap().fit(&data, &FitOptions::default()).unwrap();
        assert_eq!(resumed, unbroken);
        assert_eq!(resumed.step, 4);
        assert_eq!(resumed.cim.step_count, resumed.step);
    }

    #[test]
    fn fit_writes_log_and_checkpoints() {
        let cfg = RunConfig {
            checkpoint_every: 1,
            ..tiny_config()
        };
        let dir = tempfile::tempdir().unwrap();
        let opts = FitOptions {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            loss_log: Some(dir.path().join("loss.jsonl")),
            stop_after_epoch: None,
        };
        let ck = fit(&cfg, &tiny_data(4), &opts).unwrap();
        let log = std::fs::read_to_string(dir.path().join("loss.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 4);
        for line in log.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v["total"].as_f64().unwrap().is_finite());
        }
        assert!(dir.path().join("epoch-0001.ckpt").exists());
        assert_eq!(Checkpoint::load(dir.path().join("final.ckpt")).unwrap(), ck);
        assert!(ck.guidance.is_some());
    }

    #[test]
    fn mismatched_data_size_is_rejected() {
        let data = InMemory(synth_textures(&mut seeded_rng(3), 2, 48, 48));
        assert!(fit(&tiny_config(), &data, &FitOptions::default()).is_err());
    }
}
