use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::detector::{compute_loss, Checkpoint, Detector, LossComponents, ModelConfig};
use crate::error::{Error, Result};
use crate::par::{map_range, Exec};
use crate::tensor::{Graph, Tensor};

/// Optimiser and schedule settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Final learning rate as a fraction of `lr0`; the rate decays linearly.
    pub lrf: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seeds weight initialisation and the per-epoch shuffle.
    pub seed: u64,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.01,
            lrf: 0.01,
            momentum: 0.937,
            batch_size: 6,
            epochs: 30,
            seed: 1,
            exec: Exec::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 {} must be positive", self.lr0)));
        }
        if !(0.0..=1.0).contains(&self.lrf) {
            return Err(Error::Config(format!("lrf {} must lie in [0,1]", self.lrf)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} must lie in [0,1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate used throughout `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.lr0;
        }
        let t = epoch.min(self.epochs - 1) as f64 / (self.epochs - 1) as f64;
        self.lr0 * ((1.0 - t) * (1.0 - self.lrf) + self.lrf)
    }

    /// Seed of the shuffle for `epoch`.
    pub fn shuffle_seed(&self, epoch: usize) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(epoch as u64 + 1)
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub obj: f64,
    pub cls: f64,
    pub bbox: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "epoch,loss,obj,cls,box,lr";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9},{:.9},{:.9},{:.9},{:.9}",
            self.epoch, self.loss, self.obj, self.cls, self.bbox, self.lr
        )
    }
}

fn round_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}

/// SGD with momentum (`v = mu v + g`, `p -= lr v`). Parameters and velocity
/// are kept exactly representable in `f32`, so checkpoints are lossless.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Detector,
    pub velocity: Vec<Tensor>,
    /// Next epoch to run.
    pub epoch: usize,
    pub config: TrainConfig,
}

const VELOCITY_PREFIX: &str = "momentum/";

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut model = Detector::new(model_cfg, config.seed)?;
        model.store.tensors_mut().iter_mut().for_each(round_f32);
        let velocity = model.store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Ok(Trainer {
            model,
            velocity,
            epoch: 0,
            config: config.clone(),
        })
    }

    /// Mean loss and mean gradient over `indices`; each image gets its own tape.
    pub fn batch_gradients(&self, data: &Dataset, indices: &[usize]) -> Result<(Vec<Tensor>, LossComponents)> {
        let model = &self.model;
        let per_image = map_range(self.config.exec, indices.len(), |j| -> Result<_> {
            let i = indices[j];
            let mut g = Graph::new();
            let p = model.store.bind(&mut g, true);
            let img = data.images[i].clone();
            let s = img.shape().to_vec();
            let x = g.constant(img.reshaped(&[1, s[0], s[1], s[2]])?);
            let y = model.forward(&mut g, &p, x)?;
            let l = compute_loss(
                &mut g,
                y,
                std::slice::from_ref(&data.truths[i]),
                model.config.num_classes,
                model.config.box_loss,
            )?;
            let v = l.values(&g);
            if !v.total.is_finite() {
                return Ok((Vec::new(), v));
            }
            g.backward(l.total)?;
            Ok((p.vars().iter().map(|&v| g.grad(v)).collect::<Vec<_>>(), v))
        });
        let n = indices.len() as f64;
        let mut sum: Vec<Tensor> = model.store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut loss = LossComponents::default();
        for r in per_image {
            let (grads, v) = r?;
            loss.total += v.total / n;
            loss.obj += v.obj / n;
            loss.cls += v.cls / n;
            loss.bbox += v.bbox / n;
            for (acc, gr) in sum.iter_mut().zip(&grads) {
                for (a, b) in acc.data_mut().iter_mut().zip(gr.data()) {
                    *a += b / n;
                }
            }
        }
        Ok((sum, loss))
    }

    fn apply(&mut self, grads: &[Tensor], lr: f64) {
        let mu = self.config.momentum;
        for ((p, v), g) in self
            .model
            .store
            .tensors_mut()
            .iter_mut()
            .zip(self.velocity.iter_mut())
            .zip(grads)
        {
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = (mu * *vv + gv) as f32 as f64;
                *pv = (*pv - lr * *vv) as f32 as f64;
            }
        }
    }

    /// One SGD step on `indices`; returns the pre-step loss.
    pub fn step(&mut self, data: &Dataset, indices: &[usize], lr: f64) -> Result<LossComponents> {
        let (grads, loss) = self.batch_gradients(data, indices)?;
        let finite = loss.total.is_finite() && grads.iter().all(Tensor::all_finite);
        if !finite {
            return Err(Error::Numerical(format!(
                "non-finite loss or gradient (loss {}) on images {indices:?}",
                loss.total
            )));
        }
        self.apply(&grads, lr);
        Ok(loss)
    }

    /// Image order of `epoch`.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.config.shuffle_seed(epoch)));
        order
    }

    /// Train one epoch; the logged loss is the mean pre-step batch loss.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochLog> {
        if data.is_empty() {
            return Err(Error::Input("training set is empty".into()));
        }
        let epoch = self.epoch;
        let lr = self.config.lr_at(epoch);
        let order = self.epoch_order(epoch, data.len());
        let mut acc = LossComponents::default();
        let batches: Vec<&[usize]> = order.chunks(self.config.batch_size).collect();
        for (bi, batch) in batches.iter().enumerate() {
            let l = self.step(data, batch, lr).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!(
                    "{m}; epoch {epoch}, batch {bi}, shuffle seed {}, training seed {}",
                    self.config.shuffle_seed(epoch),
                    self.config.seed
                )),
                other => other,
            })?;
            acc.total += l.total;
            acc.obj += l.obj;
            acc.cls += l.cls;
            acc.bbox += l.bbox;
        }
        let n = batches.len() as f64;
        self.epoch += 1;
        Ok(EpochLog {
            epoch,
            loss: acc.total / n,
            obj: acc.obj / n,
            cls: acc.cls / n,
            bbox: acc.bbox / n,
            lr,
        })
    }

    /// Parameters, velocity buffers and the next epoch index.
    pub fn checkpoint(&self) -> Checkpoint {
        let store = &self.model.store;
        let mut tensors: Vec<(String, Tensor)> = store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        tensors.extend(
            store
                .names()
                .iter()
                .zip(&self.velocity)
                .map(|(n, v)| (format!("{VELOCITY_PREFIX}{n}"), v.clone())),
        );
        Checkpoint {
            digest: self.model.config.digest(),
            epoch: self.epoch as u64,
            tensors,
        }
    }

    /// Rebuild a trainer from a checkpoint written for `model_cfg`.
    pub fn from_checkpoint(model_cfg: &ModelConfig, config: &TrainConfig, ck: &Checkpoint) -> Result<Self> {
        if ck.digest != model_cfg.digest() {
            return Err(Error::Checkpoint(
                "checkpoint was written for a different model configuration".into(),
            ));
        }
        let mut t = Trainer::new(model_cfg, config)?;
        load_params(&mut t.model, ck)?;
        let names: Vec<String> = t.model.store.names().to_vec();
        for (v, n) in t.velocity.iter_mut().zip(&names) {
            if let Some(saved) = ck.get(&format!("{VELOCITY_PREFIX}{n}")) {
                check_shape(n, saved, v)?;
                *v = saved.clone();
            }
        }
        t.epoch = ck.epoch as usize;
        Ok(t)
    }
}

fn check_shape(name: &str, saved: &Tensor, expected: &Tensor) -> Result<()> {
    if saved.shape() != expected.shape() {
        return Err(Error::Checkpoint(format!(
            "tensor {name} has shape {:?}, model expects {:?}",
            saved.shape(),
            expected.shape()
        )));
    }
    Ok(())
}

/// Copy every model parameter out of `ck`; all must be present.
pub fn load_params(model: &mut Detector, ck: &Checkpoint) -> Result<()> {
    let names: Vec<String> = model.store.names().to_vec();
    for (t, n) in model.store.tensors_mut().iter_mut().zip(&names) {
        let saved = ck
            .get(n)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks tensor {n}")))?;
        check_shape(n, saved, t)?;
        *t = saved.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SceneSpec;

    fn tiny() -> (ModelConfig, TrainConfig, Dataset) {
        let model = ModelConfig {
            stem_width: 4,
            widths: [8, 16, 16, 32],
            ..Default::default()
        };
        let mut m = model;
        m.fusion.channels = 16;
        let train = TrainConfig {
            batch_size: 2,
            epochs: 2,
            ..Default::default()
        };
        let data = Dataset::synthetic(&SceneSpec::default(), 11, 4, Exec::Sequential).unwrap();
        (m, train, data)
    }

    #[test]
    fn schedule_decays_linearly_to_lrf() {
        let c = TrainConfig {
            epochs: 11,
            ..Default::default()
        };
        assert_eq!(c.lr_at(0), 0.01);
        assert!((c.lr_at(10) - 1e-4).abs() < 1e-15);
        assert!((c.lr_at(5) - 0.01 * (0.5 * 0.99 + 0.01)).abs() < 1e-15);
    }

    #[test]
    fn parameters_stay_f32_exact() {
        let (m, c, d) = tiny();
        let mut t = Trainer::new(&m, &c).unwrap();
        t.run_epoch(&d).unwrap();
        for p in t.model.store.tensors().iter().chain(&t.velocity) {
            assert!(p.data().iter().all(|&v| v == v as f32 as f64));
        }
    }

    #[test]
    fn sequential_and_parallel_steps_agree_bitwise() {
        let (m, c, d) = tiny();
        let mut a = Trainer::new(&m, &c).unwrap();
        let mut b = Trainer::new(
            &m,
            &TrainConfig {
                exec: Exec::Sequential,
                ..c
            },
        )
        .unwrap();
        assert_eq!(a.run_epoch(&d).unwrap(), b.run_epoch(&d).unwrap());
        assert_eq!(a.model.store, b.model.store);
    }
}
