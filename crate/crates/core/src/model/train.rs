use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::{Gradients, SegModel};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{ClassMask, Image};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Seed for fresh weight initialisation; unused when training starts
    /// from existing parameters.
    pub init_seed: u64,
    /// Seed for epoch shuffling and training-time dropout masks.
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 0.05,
            batch_size: 4,
            init_seed: 0,
            shuffle_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Whether each active-learning round retrains from the warm-start weights
/// or continues from the previous round's weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RetrainMode {
    #[default]
    Restart,
    Continue,
}

impl fmt::Display for RetrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RetrainMode::Restart => "restart",
            RetrainMode::Continue => "continue",
        })
    }
}

impl FromStr for RetrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "restart" => Ok(RetrainMode::Restart),
            "continue" => Ok(RetrainMode::Continue),
            other => Err(Error::InvalidArgument(format!(
                "retrain mode must be restart|continue, got {other:?}"
            ))),
        }
    }
}

/// Mean pixel cross-entropy before, during and after training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Dropout disabled, before the first update.
    pub initial_loss: f64,
    /// Running mean over each epoch, dropout active.
    pub epoch_losses: Vec<f64>,
    /// Dropout disabled, after the last update.
    pub final_loss: f64,
}

fn mean_loss(model: &SegModel, data: &[(Image, ClassMask)]) -> Result<f64> {
    let per_image: Vec<(f64, usize)> = data
        .par_iter()
        .map(|(img, mask)| Ok((model.loss(img, mask, None)?, mask.data().len())))
        .collect::<Result<_>>()?;
    let (sum, n) = per_image
        .iter()
        .fold((0.0, 0usize), |(s, n), (l, p)| (s + l, n + p));
    Ok(sum / n as f64)
}

/// Mini-batch SGD on mean pixel cross-entropy.
///
/// Per-image gradients inside a batch are computed in parallel and reduced in
/// batch order, so results do not depend on the thread count.
pub fn train(
    model: &SegModel,
    data: &[(Image, ClassMask)],
    cfg: &TrainConfig,
) -> Result<(SegModel, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for (img, mask) in data {
        model.check_pair(img, mask)?;
    }
    let p = model.arch.dropout_p();
    let mut params = model.clone();
    let initial_loss = mean_loss(&params, data)?;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs as u64 {
        let mut rng = seed::derived_rng(cfg.shuffle_seed, &[seed::stream::TRAIN, epoch]);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut pixel_sum) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(f64, usize, Gradients)> = batch
                .par_iter()
                .map(|&i| {
                    let (img, mask) = &data[i];
                    let pixels = mask.data().len();
                    let drop = (p > 0.0).then(|| {
                        let mut r = seed::derived_rng(
                            cfg.shuffle_seed,
                            &[seed::stream::MC_DROPOUT, epoch, i as u64],
                        );
                        params.dropout_mask(pixels, p, &mut r)
                    });
                    let (loss, g) = params.loss_and_gradient(img, mask, drop.as_deref())?;
                    Ok((loss, pixels, g))
                })
                .collect::<Result<_>>()?;
            let mut total = Gradients::zeros_like(&params);
            let mut batch_pixels = 0;
            for (loss, pixels, g) in &results {
                total.add_assign(g);
                loss_sum += loss;
                batch_pixels += pixels;
            }
            pixel_sum += batch_pixels;
            let step = cfg.learning_rate / batch_pixels as f64;
            for (c, g) in params.convs.iter_mut().zip(&total.convs) {
                c.weight.iter_mut().zip(&g.weight).for_each(|(w, d)| *w -= step * d);
                c.bias.iter_mut().zip(&g.bias).for_each(|(b, d)| *b -= step * d);
            }
        }
        let epoch_loss = loss_sum / pixel_sum as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "training diverged at epoch {epoch} (loss {epoch_loss})"
            )));
        }
        epoch_losses.push(epoch_loss);
    }
    let final_loss = mean_loss(&params, data)?;
    Ok((
        params,
        TrainReport {
            initial_loss,
            epoch_losses,
            final_loss,
        },
    ))
}
