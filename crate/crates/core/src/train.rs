//! Mini-batch training with adaptive-moment updates.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::TrainConfig;
use crate::data::{augment, batch, SegPair};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown};
use crate::network::UtNet;
use crate::nn::{Mode, ParamStore, Session, BN_MOMENTUM};
use crate::pipeline::training_dsc;
use crate::tensor::{Tape, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>, lr: f64) -> Self {
        let zeros = || store.params().map(|(_, p)| vec![0.0; p.len()]).collect();
        Self { lr, t: 0, m: zeros(), v: zeros() }
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Tensor<f32>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Contract(format!("{} gradients for {} params", grads.len(), self.m.len())));
        }
        self.t += 1;
        let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
        let step = (self.lr * (1.0 - ADAM_BETA2.powi(self.t as i32)).sqrt() / (1.0 - ADAM_BETA1.powi(self.t as i32))) as f32;
        let eps = (ADAM_EPS * (1.0 - ADAM_BETA2.powi(self.t as i32)).sqrt()) as f32;
        let ids: Vec<_> = store.param_ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let p = store.param_mut(id).data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grads[k].data()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / (v.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: LossBreakdown,
}

pub const LOG_HEADER: [&str; 10] = [
    "step", "total", "disc_mae", "disc_dice", "disc_iou", "disc_bce", "cup_mae", "cup_dice", "cup_iou", "cup_bce",
];

impl StepLog {
    /// Shortest round-trip formatting, so identical runs give identical bytes.
    pub fn csv_line(&self) -> String {
        let mut s = format!("{},{}", self.step, self.loss.total);
        for c in self.loss.components() {
            s.push_str(&format!(",{c}"));
        }
        s
    }
}

pub fn write_log(path: &Path, log: &[StepLog]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut text = LOG_HEADER.join(",") + "\n";
    for l in log {
        text.push_str(&l.csv_line());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).and_then(|_| f.flush()).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<StepLog>,
    /// Parameters at the lowest logged loss.
    pub best: ParamStore<f32>,
    pub best_step: usize,
    /// Step after which the DSC targets were met, if they were.
    pub stopped_at: Option<usize>,
    /// `(step, disc DSC, cup DSC)` at every evaluation.
    pub evals: Vec<(usize, f64, f64)>,
}

fn abort(step: usize, last: Option<&LossBreakdown>, e: impl std::fmt::Display) -> Error {
    let detail = match last {
        Some(b) => format!("{e}; last loss breakdown {:?}", b.components()),
        None => e.to_string(),
    };
    Error::NumericalAbort { step, detail }
}

/// One optimization step; returns the loss at the pre-update parameters.
pub fn train_step(
    net: &UtNet,
    store: &mut ParamStore<f32>,
    opt: &mut Adam,
    images: Tensor<f32>,
    targets: &Tensor<f32>,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, store, Mode::Train).trainable();
    let x = s.tape.constant(images);
    let probs = net.forward(&mut s, x)?;
    let (loss, breakdown) = total_loss(s.tape, targets, probs, &cfg.weights, cfg.channel_weights)?;
    let grads = s.tape.backward(loss)?;
    let g = s.param_grads(&grads);
    let updates = s.take_updates();
    drop(tape);
    if g.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite { op: "gradient" });
    }
    for u in &updates {
        u.apply(store, BN_MOMENTUM);
    }
    opt.step(store, &g)?;
    Ok(breakdown)
}

/// Trains in place. `on_step` sees every logged step as it happens.
pub fn train(
    net: &UtNet,
    store: &mut ParamStore<f32>,
    samples: &[SegPair],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::Contract("no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut opt = Adam::new(store, cfg.learning_rate);
    let bs = cfg.batch_size.min(samples.len());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let mut out = TrainOutcome {
        log: Vec::with_capacity(cfg.steps),
        best: store.clone(),
        best_step: 0,
        stopped_at: None,
        evals: Vec::new(),
    };
    let mut best_loss = f64::INFINITY;
    for step in 0..cfg.steps {
        let mut picked = Vec::with_capacity(bs);
        while picked.len() < bs {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }
        let augmented: Vec<SegPair>;
        let refs: Vec<&SegPair> = if cfg.augment {
            augmented = picked.iter().map(|&i| augment(&samples[i], &mut rng)).collect();
            augmented.iter().collect()
        } else {
            picked.iter().map(|&i| &samples[i]).collect()
        };
        let (images, targets) = batch(&refs)?;
        let before = store.clone();
        let loss = train_step(net, store, &mut opt, images, &targets, cfg)
            .map_err(|e| abort(step, out.log.last().map(|l| &l.loss), e))?;
        if !loss.total.is_finite() {
            return Err(abort(step, Some(&loss), "non-finite loss"));
        }
        if loss.total < best_loss {
            best_loss = loss.total;
            out.best = before;
            out.best_step = step;
        }
        let entry = StepLog { step, loss };
        on_step(&entry);
        out.log.push(entry);

        if cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps) {
            let (disc, cup) = training_dsc(net, store, samples)?;
            out.evals.push((step + 1, disc, cup));
            log::info!("step {}: train DSC disc {disc:.4} cup {cup:.4}", step + 1);
            let met = |t: Option<f64>, v: f64| t.is_some_and(|t| v >= t);
            if (cfg.target_disc_dsc.is_some() || cfg.target_cup_dsc.is_some())
                && (cfg.target_disc_dsc.is_none() || met(cfg.target_disc_dsc, disc))
                && (cfg.target_cup_dsc.is_none() || met(cfg.target_cup_dsc, cup))
            {
                out.stopped_at = Some(step + 1);
                break;
            }
        }
    }
    Ok(out)
}
