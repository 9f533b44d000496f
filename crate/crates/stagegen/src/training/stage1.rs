//! Stage-1 (noise → edges) adversarial training.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Batch, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::models::{LatentVector, ModelSpec, Phase, Stage1Discriminator, Stage1Generator};
use crate::ndtensor::{add, bce_with_logits, Adam, Tensor};

use super::checkpoint::Checkpoint;
use super::session::{
    expect_all_consumed, push_buffers, push_optim, push_params, restore_buffers, restore_optim,
    restore_params, Counters, RngState,
};
use super::{LossLog, LossRow, TrainConfig};

#[derive(Serialize, Deserialize)]
struct Stage1Meta {
    role: String,
    spec: ModelSpec,
    config: TrainConfig,
    counters: Counters,
    rng: RngState,
}

pub(crate) const STAGE1_ROLE: &str = "stage1";

/// Live stage-1 training state: both networks, their optimizers, the rng,
/// and step counters. Checkpoints capture all of it, so a resumed session
/// continues bit-for-bit.
pub struct Stage1Session {
    pub spec: ModelSpec,
    pub config: TrainConfig,
    pub gen: Stage1Generator<f32>,
    pub disc: Stage1Discriminator<f32>,
    opt_g: Adam<f32>,
    opt_d: Adam<f32>,
    rng: ChaCha8Rng,
    pub step: u64,
    pub epoch: u64,
    pub d_steps: u64,
    pub g_steps: u64,
    last_checkpoint: Option<PathBuf>,
}

impl Stage1Session {
    pub fn new(spec: ModelSpec, config: TrainConfig) -> Result<Self> {
        spec.validate()?;
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let gen = Stage1Generator::init(&spec, &mut rng)?;
        let disc = Stage1Discriminator::init(&spec, &mut rng)?;
        let g_params: Vec<Tensor<f32>> =
            gen.named_params("gen").into_iter().map(|(_, t)| t).collect();
        let d_params: Vec<Tensor<f32>> =
            disc.named_params("disc").into_iter().map(|(_, t)| t).collect();
        let opt_g = Adam::new(&g_params, config.lr, config.beta1, config.beta2);
        let opt_d = Adam::new(&d_params, config.lr, config.beta1, config.beta2);
        Ok(Stage1Session {
            spec,
            config,
            gen,
            disc,
            opt_g,
            opt_d,
            rng,
            step: 0,
            epoch: 0,
            d_steps: 0,
            g_steps: 0,
            last_checkpoint: None,
        })
    }

    fn g_params(&self) -> Vec<Tensor<f32>> {
        self.gen.named_params("gen").into_iter().map(|(_, t)| t).collect()
    }

    fn d_params(&self) -> Vec<Tensor<f32>> {
        self.disc.named_params("disc").into_iter().map(|(_, t)| t).collect()
    }

    /// One adversarial step: discriminator on real (target 1) and detached
    /// fakes (target 0), then the generator pushed toward logits of 1
    /// through the just-updated discriminator.
    fn train_step(&mut self, batch: &Batch) -> Result<(f32, f32)> {
        let n = batch.edges.shape()[0];
        let ones = Tensor::from_vec(vec![n, 1], vec![1.0f32; n]);
        let zeros = Tensor::from_vec(vec![n, 1], vec![0.0f32; n]);

        let z = LatentVector::sample(n, self.spec.latent_dim, &mut self.rng);
        let fake = {
            let mut phase = Phase::Train { rng: &mut self.rng };
            self.gen.forward(&z, &mut phase)?
        };
        let fake_detached = fake.detach();

        let d_loss = {
            let mut phase = Phase::Train { rng: &mut self.rng };
            let d_real = self.disc.forward(&batch.edges, &mut phase)?;
            let d_fake = self.disc.forward(&fake_detached, &mut phase)?;
            add(&bce_with_logits(&d_real, &ones)?, &bce_with_logits(&d_fake, &zeros)?)?
        };
        let d_val = d_loss.item();
        if !d_val.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step + 1,
                last_checkpoint: self.last_checkpoint.clone(),
            });
        }
        d_loss.backward();
        self.opt_d.step(&self.d_params());
        self.d_steps += 1;

        let g_loss = {
            let mut phase = Phase::Train { rng: &mut self.rng };
            let logits = self.disc.forward(&fake, &mut phase)?;
            bce_with_logits(&logits, &ones)?
        };
        let g_val = g_loss.item();
        if !g_val.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step + 1,
                last_checkpoint: self.last_checkpoint.clone(),
            });
        }
        g_loss.backward();
        self.opt_g.step(&self.g_params());
        // The generator pass deposited stray gradients in the discriminator.
        for p in self.d_params() {
            p.zero_grad();
        }
        self.g_steps += 1;
        self.step += 1;
        Ok((d_val, g_val))
    }

    /// Runs training from the current position to `config.epochs` (or
    /// `config.max_steps`). Checkpoints and the loss CSV are written under
    /// `out_dir` when given.
    pub fn train(&mut self, manifest: &DatasetManifest, out_dir: Option<&Path>) -> Result<LossLog> {
        if manifest.image_side != self.spec.image_side {
            return Err(Error::invalid(
                "train_stage1",
                format!(
                    "manifest side {} != model side {}",
                    manifest.image_side, self.spec.image_side
                ),
            ));
        }
        let mut log = LossLog::default();
        let started = Instant::now();
        let target_epochs = self.config.epochs as u64;

        'epochs: while self.epoch < target_epochs && !self.budget_reached() {
            let mut iter = iterate_train(manifest, &self.config, self.epoch)?;
            let done_in_epoch = (self.step - self.epoch * iter.num_batches() as u64) as usize;
            iter.advance(done_in_epoch);
            for batch in iter {
                if self.budget_reached() {
                    break 'epochs;
                }
                let (d_val, g_val) = self.train_step(&batch?)?;
                if self.step % self.config.log_every == 0 {
                    log.rows.push(LossRow {
                        step: self.step,
                        epoch: self.epoch,
                        d_loss: d_val,
                        g_loss_adv: g_val,
                        g_loss_l1: 0.0,
                        wall_ms: started.elapsed().as_millis() as u64,
                    });
                }
                if let Some(dir) = out_dir {
                    if self.config.checkpoint_every > 0 && self.step % self.config.checkpoint_every == 0
                    {
                        self.save_step_checkpoint(dir)?;
                    }
                }
            }
            if !self.budget_reached() {
                self.epoch += 1;
            }
        }

        if let Some(dir) = out_dir {
            let final_path = dir.join("checkpoints").join("final.sgck");
            self.save(&final_path)?;
            self.last_checkpoint = Some(final_path);
            log.write_csv(&dir.join("losses_stage1.csv"))?;
        }
        Ok(log)
    }

    fn budget_reached(&self) -> bool {
        self.config.max_steps.is_some_and(|m| self.step >= m)
    }

    fn save_step_checkpoint(&mut self, dir: &Path) -> Result<()> {
        let path = dir.join("checkpoints").join(format!("step_{:06}.sgck", self.step));
        self.save(&path)?;
        self.last_checkpoint = Some(path);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = Stage1Meta {
            role: STAGE1_ROLE.into(),
            spec: self.spec.clone(),
            config: self.config.clone(),
            counters: Counters {
                step: self.step,
                epoch: self.epoch,
                d_steps: self.d_steps,
                g_steps: self.g_steps,
            },
            rng: RngState::capture(&self.rng),
        };
        let mut ckpt = Checkpoint::new(&meta)?;
        let g_named = self.gen.named_params("gen");
        let d_named = self.disc.named_params("disc");
        push_params(&mut ckpt, &g_named);
        push_buffers(&mut ckpt, &self.gen.named_buffers("gen"));
        push_params(&mut ckpt, &d_named);
        push_buffers(&mut ckpt, &self.disc.named_buffers("disc"));
        push_optim(&mut ckpt, "opt_g", &g_named, &self.opt_g);
        push_optim(&mut ckpt, "opt_d", &d_named, &self.opt_d);
        Ok(ckpt)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: Stage1Meta = ckpt.meta_as()?;
        if meta.role != STAGE1_ROLE {
            return Err(Error::Checkpoint(format!(
                "expected a {STAGE1_ROLE} checkpoint, found role {:?}",
                meta.role
            )));
        }
        let mut session = Stage1Session::new(meta.spec, meta.config)?;
        let mut consumed = HashSet::new();
        let g_named = session.gen.named_params("gen");
        let d_named = session.disc.named_params("disc");
        restore_params(ckpt, &g_named, &mut consumed)?;
        restore_buffers(ckpt, &session.gen.named_buffers("gen"), &mut consumed)?;
        restore_params(ckpt, &d_named, &mut consumed)?;
        restore_buffers(ckpt, &session.disc.named_buffers("disc"), &mut consumed)?;
        expect_all_consumed(ckpt, &consumed)?;
        restore_optim(ckpt, "opt_g", &g_named, &mut session.opt_g)?;
        restore_optim(ckpt, "opt_d", &d_named, &mut session.opt_d)?;
        session.step = meta.counters.step;
        session.epoch = meta.counters.epoch;
        session.d_steps = meta.counters.d_steps;
        session.g_steps = meta.counters.g_steps;
        session.rng = meta.rng.restore()?;
        Ok(session)
    }

    /// Loads just the generator for inference, discarding training state.
    pub fn load_generator(path: &Path) -> Result<(Stage1Generator<f32>, ModelSpec)> {
        let session = Self::load(path)?;
        Ok((session.gen, session.spec))
    }
}

pub(crate) fn iterate_train<'a>(
    manifest: &'a DatasetManifest,
    config: &TrainConfig,
    epoch: u64,
) -> Result<crate::dataset::BatchIter<'a>> {
    crate::dataset::iterate_batches(manifest, Split::Train, config.batch_size, config.seed, epoch)
}

/// Trains stage 1 from scratch; returns the final session and its log.
pub fn train_stage1(
    spec: ModelSpec,
    config: TrainConfig,
    manifest: &DatasetManifest,
    out_dir: Option<&Path>,
) -> Result<(Stage1Session, LossLog)> {
    let mut session = Stage1Session::new(spec, config)?;
    let log = session.train(manifest, out_dir)?;
    Ok((session, log))
}
