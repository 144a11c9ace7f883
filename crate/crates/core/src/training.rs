//! Two-phase optimization: plain cross-entropy pretraining, then the full
//! objective. Runs are seeded and fully deterministic: batch size 1, per-epoch
//! shuffles drawn from the run seed, no wall-clock anywhere in the math.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::captioner::{sequence_nll, teacher_forced_rollout, ModelParams};
use crate::error::{Error, Result};
use crate::prophet::{full_loss, Divergence, LossConfig, Variant};
use crate::synthdata::Instance;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn default_adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub pretrain_epochs: usize,
    pub total_epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub divergence: Divergence,
    pub detach_prophet: bool,
    pub variant: Variant,
    pub seed: u64,
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.1,
            pretrain_epochs: 5,
            total_epochs: 30,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::default_adam(),
            divergence: Divergence::L1,
            detach_prophet: true,
            variant: Variant::Dpa,
            seed: 0,
            grad_clip: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::InvalidConfig("lambda must be nonnegative".into()));
        }
        if self.pretrain_epochs > self.total_epochs {
            return Err(Error::InvalidConfig(
                "pretrain_epochs must not exceed total_epochs".into(),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            divergence: self.divergence,
            detach_prophet: self.detach_prophet,
        }
    }
}

/// Flat-vector optimizer over the model's serialization order.
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    grad_clip: Option<f64>,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: &TrainConfig, num_scalars: usize) -> Self {
        Optimizer {
            kind: config.optimizer,
            learning_rate: config.learning_rate,
            grad_clip: config.grad_clip,
            adam_m: vec![0.0; num_scalars],
            adam_v: vec![0.0; num_scalars],
            steps: 0,
        }
    }

    /// Apply one update in place. `grads` is flat, aligned with
    /// `ModelParams::to_flat`.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[f64]) -> Result<()> {
        // Name the offending tensor, not just an index.
        if grads.iter().any(|g| !g.is_finite()) {
            let names = params.tensor_names();
            let mut offset = 0;
            for (tensor, name) in params.tensors().iter().zip(&names) {
                let seg = &grads[offset..offset + tensor.len()];
                if seg.iter().any(|g| !g.is_finite()) {
                    return Err(Error::NonFiniteGradient { name: name.clone() });
                }
                offset += tensor.len();
            }
        }

        let mut scaled: Vec<f64>;
        let grads = match self.grad_clip {
            Some(clip) => {
                let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > clip {
                    scaled = grads.to_vec();
                    let factor = clip / norm;
                    for g in &mut scaled {
                        *g *= factor;
                    }
                    &scaled[..]
                } else {
                    grads
                }
            }
            None => grads,
        };

        let mut flat = params.to_flat();
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in flat.iter_mut().zip(grads) {
                    *p -= self.learning_rate * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                self.steps += 1;
                let bc1 = 1.0 - beta1.powi(self.steps as i32);
                let bc2 = 1.0 - beta2.powi(self.steps as i32);
                for (i, (p, g)) in flat.iter_mut().zip(grads).enumerate() {
                    self.adam_m[i] = beta1 * self.adam_m[i] + (1.0 - beta1) * g;
                    self.adam_v[i] = beta2 * self.adam_v[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.adam_m[i] / bc1;
                    let v_hat = self.adam_v[i] / bc2;
                    *p -= self.learning_rate * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        *params = params.from_flat(&flat);
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub l_ce: f64,
    pub l_hat_ce: f64,
    pub l_att: f64,
    pub total: f64,
    pub seconds: f64,
}

/// Per-epoch mean losses plus the config snapshot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunLog {
    pub seed: u64,
    pub config: TrainConfig,
    pub rows: Vec<EpochRow>,
}

impl RunLog {
    /// CSV form. Timing is opt-in so that identical runs emit identical bytes.
    pub fn to_csv(&self, include_timing: bool) -> String {
        let mut out = String::from("epoch,l_ce,l_hat_ce,l_att,total,seconds\n");
        for row in &self.rows {
            let seconds = if include_timing {
                format!("{:.3}", row.seconds)
            } else {
                "0.000".to_string()
            };
            out.push_str(&format!(
                "{},{:.12},{:.12},{:.12},{:.12},{}\n",
                row.epoch, row.l_ce, row.l_hat_ce, row.l_att, row.total, seconds
            ));
        }
        out
    }
}

fn shuffled_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x5851_F42D_4C95_7F2D).wrapping_add(epoch as u64));
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// One gradient step on one instance. Returns the component values.
fn train_instance(
    instance: &Instance,
    params: &mut ModelParams,
    optimizer: &mut Optimizer,
    cfg: &TrainConfig,
    prophet_phase: bool,
) -> Result<(f64, f64, f64, f64)> {
    let tape = Tape::new();
    let watched = params.watch(&tape);
    let breakdown = if prophet_phase {
        full_loss(
            &tape,
            &instance.features,
            &instance.caption,
            &watched,
            &cfg.loss_config(),
            cfg.variant,
        )?
    } else {
        let rollout =
            teacher_forced_rollout(&tape, &instance.caption.tokens, &instance.features, &watched)?;
        let l_ce = sequence_nll(&tape, &rollout.logits, &instance.caption.tokens[1..])?;
        let value = l_ce.item();
        crate::prophet::LossBreakdown {
            total: l_ce,
            l_ce: value,
            l_hat_ce: 0.0,
            l_att: 0.0,
        }
    };
    let grads = tape.backward(&breakdown.total)?;
    let mut flat = Vec::with_capacity(params.num_scalars());
    for t in watched.tensors() {
        flat.extend_from_slice(grads.wrt(t)?.data());
    }
    optimizer.step(params, &flat)?;
    let total = breakdown.l_ce + breakdown.l_hat_ce + cfg.lambda * breakdown.l_att;
    Ok((breakdown.l_ce, breakdown.l_hat_ce, breakdown.l_att, total))
}

/// Two-phase fit: epochs 1..=pretrain use cross-entropy only, the rest use the
/// per-variant full objective. Identical inputs give identical logs.
pub fn fit(
    dataset: &[Instance],
    config: &TrainConfig,
    params: ModelParams,
) -> Result<(ModelParams, RunLog)> {
    if dataset.is_empty() {
        return Err(Error::EmptySequence);
    }
    config.validate()?;
    let mut params = params;
    let mut optimizer = Optimizer::new(config, params.num_scalars());
    let mut rows = Vec::with_capacity(config.total_epochs);

    for epoch in 1..=config.total_epochs {
        let start = Instant::now();
        let prophet_phase = epoch > config.pretrain_epochs && config.variant != Variant::Baseline;
        let order = shuffled_order(dataset.len(), config.seed, epoch);
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        for &idx in &order {
            let (ce, hat, att, total) =
                train_instance(&dataset[idx], &mut params, &mut optimizer, config, prophet_phase)?;
            sums.0 += ce;
            sums.1 += hat;
            sums.2 += att;
            sums.3 += total;
        }
        let n = dataset.len() as f64;
        rows.push(EpochRow {
            epoch,
            l_ce: sums.0 / n,
            l_hat_ce: sums.1 / n,
            l_att: sums.2 / n,
            total: sums.3 / n,
            seconds: start.elapsed().as_secs_f64(),
        });
    }

    Ok((
        params,
        RunLog {
            seed: config.seed,
            config: config.clone(),
            rows,
        },
    ))
}
