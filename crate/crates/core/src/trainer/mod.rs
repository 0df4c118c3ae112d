//! Unsupervised training: random paired crops, AdamW with a cosine
//! schedule, deterministic per-step randomness and checkpointing.

mod adam;
mod checkpoint;
mod data;

pub use adam::{cosine_lr, Adam, BETA1, BETA2, EPS};
pub use checkpoint::{
    decode_entries, encode_entries, load_weights, save_weights, Checkpoint, MAGIC, VERSION,
};
pub use data::{
    expose, load_pairs, scan_pairs, synthetic_pair, synthetic_radiance, Augment, ExposurePair,
    PairPaths,
};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::color::Plane;
use crate::config::FusionConfig;
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, LossWeights};
use crate::pipeline::{luma_forward, training_losses};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ModelParams};

/// Randomness for step `step`; independent of how many steps ran before.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Luma planes of one training pair.
#[derive(Clone, Debug)]
pub struct LumaPair<T> {
    pub y1: Plane<T>,
    pub y2: Plane<T>,
}

impl<T: Scalar> From<&ExposurePair<T>> for LumaPair<T> {
    fn from(p: &ExposurePair<T>) -> Self {
        let (y1, y2) = p.lumas();
        Self { y1, y2 }
    }
}

/// Loss value and gradients of one `(y1, y2)` example.
pub fn example_gradients<T: Scalar>(
    params: &ModelParams<T>,
    y1: &Plane<T>,
    y2: &Plane<T>,
    cfg: &FusionConfig,
    weights: &LossWeights,
) -> Result<(LossBreakdown, IndexMap<String, Vec<f64>>)> {
    let g = Graph::new();
    let p = params.bind(&g, true);
    let fwd = luma_forward(
        &p,
        g.constant(y1.to_tensor()),
        g.constant(y2.to_tensor()),
        cfg,
    )?;
    let terms = training_losses(&fwd, cfg)?;
    let total = terms.total(weights)?;
    let values = terms.values(weights)?;
    let grads = g.backward(total)?;
    Ok((values, p.collect_grads(&grads)))
}

/// Loss components of one example without gradients.
pub fn example_losses<T: Scalar>(
    params: &ModelParams<T>,
    y1: &Plane<T>,
    y2: &Plane<T>,
    cfg: &FusionConfig,
) -> Result<LossBreakdown> {
    let g = Graph::new();
    let p = params.bind(&g, false);
    let fwd = luma_forward(
        &p,
        g.constant(y1.to_tensor()),
        g.constant(y2.to_tensor()),
        cfg,
    )?;
    Ok(training_losses(&fwd, cfg)?.values(&cfg.loss_weights)?)
}

/// Record of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub losses: LossBreakdown,
    /// Smallest per-group gradient L1 norm (group = name up to the first dot).
    pub min_group_grad: f64,
}

pub struct Trainer<T: Scalar> {
    pub cfg: FusionConfig,
    pub params: ModelParams<T>,
    pub adam: Adam<T>,
    pub step: u64,
    /// Total steps of the schedule.
    pub total_steps: usize,
}

fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Per-group gradient L1 norms in parameter order.
pub fn group_grad_norms(grads: &IndexMap<String, Vec<f64>>) -> IndexMap<String, f64> {
    let mut out: IndexMap<String, f64> = IndexMap::new();
    for (name, g) in grads {
        *out.entry(group_of(name).to_string()).or_default() +=
            g.iter().map(|v| v.abs()).sum::<f64>();
    }
    out
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: FusionConfig, params: ModelParams<T>, total_steps: usize) -> Self {
        let adam = Adam::new(&params);
        Self {
            cfg,
            params,
            adam,
            step: 0,
            total_steps,
        }
    }

    /// Resumes from a checkpoint; the seed in the file wins over the config.
    pub fn from_checkpoint(
        mut cfg: FusionConfig,
        ckpt: &Checkpoint,
        total_steps: usize,
    ) -> Result<Self> {
        let params: ModelParams<T> = ckpt.params.cast();
        let adam = match &ckpt.adam {
            Some(a) => Adam {
                m: a.m.cast(),
                v: a.v.cast(),
                t: a.t,
            },
            None => Adam::new(&params),
        };
        cfg.seed = ckpt.seed;
        Ok(Self {
            cfg,
            params,
            adam,
            step: ckpt.step,
            total_steps,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            seed: self.cfg.seed,
            params: self.params.cast(),
            adam: Some(Adam {
                m: self.adam.m.cast(),
                v: self.adam.v.cast(),
                t: self.adam.t,
            }),
        }
    }

    fn staged(&self) -> bool {
        (self.step as usize) < self.cfg.train.gcm_first_steps
    }

    /// Draws the batch of augmented crops for the current step.
    pub fn sample_batch(&self, data: &[LumaPair<T>]) -> Result<Vec<LumaPair<T>>> {
        if data.is_empty() {
            return Err(Error::Data("training needs at least one image pair".into()));
        }
        let mut rng = step_rng(self.cfg.seed, self.step);
        let t = &self.cfg.train;
        (0..t.batch_size)
            .map(|_| {
                let pair = &data[rng.gen_range(0..data.len())];
                let (w, h) = pair.y1.dims();
                let aug = Augment::sample(w, h, t.patch, t.augment, &mut rng)?;
                Ok(LumaPair {
                    y1: aug.apply(&pair.y1),
                    y2: aug.apply(&pair.y2),
                })
            })
            .collect()
    }

    /// One optimizer step over a freshly sampled batch.
    pub fn train_step(&mut self, data: &[LumaPair<T>]) -> Result<StepRecord> {
        let batch = self.sample_batch(data)?;
        let staged = self.staged();
        let weights = if staged {
            LossWeights {
                int: 0.0,
                grad: 0.0,
                ssim: 0.0,
                ..self.cfg.loss_weights
            }
        } else {
            self.cfg.loss_weights
        };
        let results: Vec<_> = batch
            .par_iter()
            .map(|b| example_gradients(&self.params, &b.y1, &b.y2, &self.cfg, &weights))
            .collect::<Result<_>>()?;
        let n = results.len() as f64;
        let mut grads: IndexMap<String, Vec<f64>> = IndexMap::new();
        let mut losses = Vec::with_capacity(results.len());
        for (l, g) in results {
            losses.push(l);
            for (name, v) in g {
                let acc = grads.entry(name).or_insert_with(|| vec![0.0; v.len()]);
                for (a, x) in acc.iter_mut().zip(v) {
                    *a += x / n;
                }
            }
        }
        if staged {
            grads.retain(|name, _| name.starts_with("gcm."));
        }
        let min_group_grad = group_grad_norms(&grads)
            .values()
            .copied()
            .fold(f64::INFINITY, f64::min);
        let lr = cosine_lr(self.cfg.train.lr, self.step as usize, self.total_steps);
        self.adam
            .step(&mut self.params, &grads, lr, self.cfg.train.weight_decay)?;
        let record = StepRecord {
            step: self.step,
            lr,
            losses: LossBreakdown::mean(&losses),
            min_group_grad,
        };
        self.step += 1;
        Ok(record)
    }

    /// Runs until `total_steps`, calling `on_step` after every step.
    pub fn run(
        &mut self,
        data: &[LumaPair<T>],
        mut on_step: impl FnMut(&StepRecord, &Self) -> Result<()>,
    ) -> Result<Vec<StepRecord>> {
        let mut trace = Vec::new();
        while (self.step as usize) < self.total_steps {
            let r = self.train_step(data)?;
            on_step(&r, self)?;
            trace.push(r);
        }
        Ok(trace)
    }
}
