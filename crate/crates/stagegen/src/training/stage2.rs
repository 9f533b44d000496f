//! Stage-2 (edges → grayscale) conditional adversarial training.
//!
//! The generator loss is `bce(D(edge, ŷ), 1) + λ·l1(ŷ, y)`. With
//! `EdgeSource::Checkpoint`, conditional inputs are drawn from a frozen
//! stage-1 generator in eval mode and detached, so no gradient ever reaches
//! stage-1 parameters.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Batch, DatasetManifest};
use crate::error::{Error, Result};
use crate::models::{
    LatentVector, ModelSpec, Phase, Stage1Generator, Stage2Discriminator, Stage2Generator,
};
use crate::ndtensor::{add, bce_with_logits, l1_loss, mul_scalar, Adam, Tensor};

use super::checkpoint::Checkpoint;
use super::session::{
    expect_all_consumed, push_buffers, push_optim, push_params, restore_buffers, restore_optim,
    restore_params, Counters, RngState,
};
use super::stage1::{iterate_train, Stage1Session};
use super::{EdgeSource, LossLog, LossRow, TrainConfig};

#[derive(Serialize, Deserialize)]
struct Stage2Meta {
    role: String,
    spec: ModelSpec,
    config: TrainConfig,
    counters: Counters,
    rng: RngState,
    /// Spec of the embedded frozen stage-1 generator, when edges are drawn
    /// from a checkpoint.
    edge_gen_spec: Option<ModelSpec>,
}

pub(crate) const STAGE2_ROLE: &str = "stage2";

pub struct Stage2Session {
    pub spec: ModelSpec,
    pub config: TrainConfig,
    pub gen: Stage2Generator<f32>,
    pub disc: Stage2Discriminator<f32>,
    /// Frozen stage-1 generator used when `edge_source` is a checkpoint.
    edge_gen: Option<(Stage1Generator<f32>, ModelSpec)>,
    opt_g: Adam<f32>,
    opt_d: Adam<f32>,
    rng: ChaCha8Rng,
    pub step: u64,
    pub epoch: u64,
    pub d_steps: u64,
    pub g_steps: u64,
    last_checkpoint: Option<PathBuf>,
}

impl Stage2Session {
    pub fn new(spec: ModelSpec, config: TrainConfig) -> Result<Self> {
        spec.validate()?;
        config.validate()?;
        let edge_gen = match &config.edge_source {
            EdgeSource::Real => None,
            EdgeSource::Checkpoint(path) => {
                let (gen, s1_spec) = Stage1Session::load_generator(path)?;
                if s1_spec.image_side != spec.image_side {
                    return Err(Error::invalid(
                        "train_stage2",
                        format!(
                            "stage-1 checkpoint side {} != stage-2 side {}",
                            s1_spec.image_side, spec.image_side
                        ),
                    ));
                }
                Some((gen, s1_spec))
            }
        };
        Self::with_edge_gen(spec, config, edge_gen)
    }

    fn with_edge_gen(
        spec: ModelSpec,
        config: TrainConfig,
        edge_gen: Option<(Stage1Generator<f32>, ModelSpec)>,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let gen = Stage2Generator::init(&spec, &mut rng)?;
        let disc = Stage2Discriminator::init(&spec, &mut rng)?;
        let g_params: Vec<Tensor<f32>> =
            gen.named_params("gen").into_iter().map(|(_, t)| t).collect();
        let d_params: Vec<Tensor<f32>> =
            disc.named_params("disc").into_iter().map(|(_, t)| t).collect();
        let opt_g = Adam::new(&g_params, config.lr, config.beta1, config.beta2);
        let opt_d = Adam::new(&d_params, config.lr, config.beta1, config.beta2);
        Ok(Stage2Session {
            spec,
            config,
            gen,
            disc,
            edge_gen,
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

    /// Conditional edges for one step: the manifest batch, or frozen
    /// stage-1 samples (eval mode, detached).
    fn conditional_edges(&mut self, batch: &Batch) -> Result<Tensor<f32>> {
        match &self.edge_gen {
            None => Ok(batch.edges.clone()),
            Some((gen, s1_spec)) => {
                let n = batch.grays.shape()[0];
                let z = LatentVector::sample(n, s1_spec.latent_dim, &mut self.rng);
                Ok(gen.forward(&z, &mut Phase::Eval)?.detach())
            }
        }
    }

    fn train_step(&mut self, batch: &Batch) -> Result<(f32, f32, f32)> {
        let n = batch.grays.shape()[0];
        let ones = Tensor::from_vec(vec![n, 1], vec![1.0f32; n]);
        let zeros = Tensor::from_vec(vec![n, 1], vec![0.0f32; n]);

        let edges = self.conditional_edges(batch)?;
        let z2 = self
            .spec
            .stage2_latent_enabled
            .then(|| LatentVector::sample(n, self.spec.latent_dim, &mut self.rng));

        let pred = {
            let mut phase = Phase::Train { rng: &mut self.rng };
            self.gen.forward(&edges, z2.as_ref(), &mut phase)?
        };
        let pred_detached = pred.detach();

        let d_loss = {
            let mut phase = Phase::Train { rng: &mut self.rng };
            let d_real = self.disc.forward(&edges, &batch.grays, &mut phase)?;
            let d_fake = self.disc.forward(&edges, &pred_detached, &mut phase)?;
            add(&bce_with_logits(&d_real, &ones)?, &bce_with_logits(&d_fake, &zeros)?)?
        };
        let d_val = d_loss.item();
        if !d_val.is_finite() {
            return Err(self.non_finite());
        }
        d_loss.backward();
        self.opt_d.step(&self.d_params());
        self.d_steps += 1;

        let (g_loss, adv_val, l1_val) = {
            let mut phase = Phase::Train { rng: &mut self.rng };
            let logits = self.disc.forward(&edges, &pred, &mut phase)?;
            let adv = bce_with_logits(&logits, &ones)?;
            let adv_val = adv.item();
            if self.config.lambda_l1 == 0.0 {
                (adv, adv_val, 0.0f32)
            } else {
                let weighted = mul_scalar(&l1_loss(&pred, &batch.grays)?, self.config.lambda_l1);
                let l1_val = weighted.item();
                (add(&adv, &weighted)?, adv_val, l1_val)
            }
        };
        if !g_loss.item().is_finite() {
            return Err(self.non_finite());
        }
        g_loss.backward();
        self.opt_g.step(&self.g_params());
        for p in self.d_params() {
            p.zero_grad();
        }
        self.g_steps += 1;
        self.step += 1;
        Ok((d_val, adv_val, l1_val))
    }

    fn non_finite(&self) -> Error {
        Error::NonFiniteLoss {
            step: self.step + 1,
            last_checkpoint: self.last_checkpoint.clone(),
        }
    }

    pub fn train(&mut self, manifest: &DatasetManifest, out_dir: Option<&Path>) -> Result<LossLog> {
        if manifest.image_side != self.spec.image_side {
            return Err(Error::invalid(
                "train_stage2",
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
                let (d_val, adv_val, l1_val) = self.train_step(&batch?)?;
                if self.step % self.config.log_every == 0 {
                    log.rows.push(LossRow {
                        step: self.step,
                        epoch: self.epoch,
                        d_loss: d_val,
                        g_loss_adv: adv_val,
                        g_loss_l1: l1_val,
                        wall_ms: started.elapsed().as_millis() as u64,
                    });
                }
                if let Some(dir) = out_dir {
                    if self.config.checkpoint_every > 0
                        && self.step % self.config.checkpoint_every == 0
                    {
                        let path =
                            dir.join("checkpoints").join(format!("step_{:06}.sgck", self.step));
                        self.save(&path)?;
                        self.last_checkpoint = Some(path);
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
            log.write_csv(&dir.join("losses_stage2.csv"))?;
        }
        Ok(log)
    }

    fn budget_reached(&self) -> bool {
        self.config.max_steps.is_some_and(|m| self.step >= m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = Stage2Meta {
            role: STAGE2_ROLE.into(),
            spec: self.spec.clone(),
            config: self.config.clone(),
            counters: Counters {
                step: self.step,
                epoch: self.epoch,
                d_steps: self.d_steps,
                g_steps: self.g_steps,
            },
            rng: RngState::capture(&self.rng),
            edge_gen_spec: self.edge_gen.as_ref().map(|(_, s)| s.clone()),
        };
        let mut ckpt = Checkpoint::new(&meta)?;
        let g_named = self.gen.named_params("gen");
        let d_named = self.disc.named_params("disc");
        push_params(&mut ckpt, &g_named);
        push_params(&mut ckpt, &d_named);
        push_buffers(&mut ckpt, &self.disc.named_buffers("disc"));
        if let Some((edge_gen, _)) = &self.edge_gen {
            push_params(&mut ckpt, &edge_gen.named_params("edge_gen"));
            push_buffers(&mut ckpt, &edge_gen.named_buffers("edge_gen"));
        }
        push_optim(&mut ckpt, "opt_g", &g_named, &self.opt_g);
        push_optim(&mut ckpt, "opt_d", &d_named, &self.opt_d);
        Ok(ckpt)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: Stage2Meta = ckpt.meta_as()?;
        if meta.role != STAGE2_ROLE {
            return Err(Error::Checkpoint(format!(
                "expected a {STAGE2_ROLE} checkpoint, found role {:?}",
                meta.role
            )));
        }
        // Rebuild the frozen edge generator from the embedded copy rather
        // than the original path, so a moved checkpoint stays loadable.
        let edge_gen = match &meta.edge_gen_spec {
            None => None,
            Some(s1_spec) => {
                let mut throwaway = ChaCha8Rng::seed_from_u64(0);
                let gen = Stage1Generator::init(s1_spec, &mut throwaway)?;
                Some((gen, s1_spec.clone()))
            }
        };
        let mut session = Self::with_edge_gen(meta.spec, meta.config, edge_gen)?;
        let mut consumed = HashSet::new();
        let g_named = session.gen.named_params("gen");
        let d_named = session.disc.named_params("disc");
        restore_params(ckpt, &g_named, &mut consumed)?;
        restore_params(ckpt, &d_named, &mut consumed)?;
        restore_buffers(ckpt, &session.disc.named_buffers("disc"), &mut consumed)?;
        if let Some((edge_gen, _)) = &session.edge_gen {
            restore_params(ckpt, &edge_gen.named_params("edge_gen"), &mut consumed)?;
            restore_buffers(ckpt, &edge_gen.named_buffers("edge_gen"), &mut consumed)?;
        }
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

    /// Loads just the generator for inference.
    pub fn load_generator(path: &Path) -> Result<(Stage2Generator<f32>, ModelSpec)> {
        let session = Self::load(path)?;
        Ok((session.gen, session.spec))
    }

    /// Bytes of the embedded frozen stage-1 parameters, used to verify they
    /// never change during stage-2 training.
    pub fn edge_gen_param_bytes(&self) -> Option<Vec<u8>> {
        self.edge_gen.as_ref().map(|(gen, _)| {
            let mut out = Vec::new();
            for (_, t) in gen.named_params("edge_gen") {
                for v in t.data().iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            out
        })
    }
}

/// Trains stage 2 from scratch; returns the final session and its log.
pub fn train_stage2(
    spec: ModelSpec,
    config: TrainConfig,
    manifest: &DatasetManifest,
    out_dir: Option<&Path>,
) -> Result<(Stage2Session, LossLog)> {
    let mut session = Stage2Session::new(spec, config)?;
    let log = session.train(manifest, out_dir)?;
    Ok((session, log))
}
