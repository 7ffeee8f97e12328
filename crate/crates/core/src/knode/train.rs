use nalgebra::Vector4;
use serde::{Deserialize, Serialize};

use super::{KnodeModel, MlpParams, Residual};
use crate::dynamics::{
    ControlInput, Dynamics, QuadrotorParams, State, StateVec, QUAT, RATE, VEL,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub x: State,
    pub u: ControlInput,
    pub x_next: State,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingDataset {
    pub records: Vec<Record>,
    /// Time between `x` and `x_next`, shared by every record, s.
    pub h: f64,
    pub source: String,
}

impl TrainingDataset {
    pub fn new(records: Vec<Record>, h: f64, source: impl Into<String>) -> Result<Self> {
        let d = Self { records, h, source: source.into() };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.records.len() < 2 {
            return Err(Error::Precondition(format!(
                "dataset needs at least 2 records, has {}",
                self.records.len()
            )));
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::Precondition(format!("dataset step must be positive, got {}", self.h)));
        }
        Ok(())
    }

    pub fn sample_rate(&self) -> f64 {
        1.0 / self.h
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// 0 means full batch.
    pub batch_size: usize,
    pub seed: u64,
    /// Training stops once the loss drops below this value.
    pub tolerance: f64,
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            epochs: 2000,
            batch_size: 0,
            seed: 0,
            tolerance: 1e-12,
            hidden: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Precondition("learning rate must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Precondition("epochs must be at least 1".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Precondition("hidden width must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss of the accepted parameters after each epoch; entry 0 is the
    /// initial loss.
    pub loss_history: Vec<f64>,
    pub learning_rate_history: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// One-step prediction error of a record, divided by `h` so that it reads
/// as a rate; quaternion sign ambiguity is removed first.
fn prediction_error(pred: &StateVec, target: &State, h: f64) -> StateVec {
    let mut tgt = target.to_vector();
    let pq: Vector4<f64> = pred.fixed_rows::<4>(QUAT).into_owned();
    if pq.dot(&target.q) < 0.0 {
        let flipped = -target.q;
        tgt.fixed_rows_mut::<4>(QUAT).copy_from(&flipped);
    }
    (pred - tgt) / h
}

fn adjoint_residual(model: &KnodeModel, k_bar: &StateVec) -> Residual {
    let raw = Residual::new(
        k_bar[VEL],
        k_bar[VEL + 1],
        k_bar[VEL + 2],
        k_bar[RATE],
        k_bar[RATE + 1],
        k_bar[RATE + 2],
    );
    raw.component_mul(&model.residual_scale)
}

/// Loss and its gradient for a single record, back-propagated through the
/// four RK4 stages and the final quaternion normalization.
fn record_loss_grad(model: &KnodeModel, rec: &Record, h: f64, grad: &mut MlpParams) -> f64 {
    let u = &rec.u;
    let x0 = rec.x.to_vector();
    let f = |y: &StateVec| model.deriv(&State::from_vector(y), u);

    let y1 = x0;
    let k1 = f(&y1);
    let y2 = x0 + k1 * (0.5 * h);
    let k2 = f(&y2);
    let y3 = x0 + k2 * (0.5 * h);
    let k3 = f(&y3);
    let y4 = x0 + k3 * h;
    let k4 = f(&y4);
    let y = x0 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);

    let q: Vector4<f64> = y.fixed_rows::<4>(QUAT).into_owned();
    let qn = q.norm();
    let mut pred = y;
    pred.fixed_rows_mut::<4>(QUAT).copy_from(&(q / qn));

    let err = prediction_error(&pred, &rec.x_next, h);
    let loss = err.norm_squared();

    // d loss / d pred
    let mut y_bar = err * (2.0 / h);
    let unit = q / qn;
    let gq: Vector4<f64> = y_bar.fixed_rows::<4>(QUAT).into_owned();
    let back_q = (gq - unit * unit.dot(&gq)) / qn;
    y_bar.fixed_rows_mut::<4>(QUAT).copy_from(&back_q);

    let stage = |y: &StateVec, k_bar: &StateVec, grad: &mut MlpParams| -> StateVec {
        let s = State::from_vector(y);
        let g = super::residual_grad(&model.theta, &s, u, &adjoint_residual(model, k_bar));
        grad.axpy(1.0, &g);
        let (fx, _) = model.jacobian(&s, u);
        fx.tr_mul(k_bar)
    };

    let k4_bar = y_bar * (h / 6.0);
    let y4_bar = stage(&y4, &k4_bar, grad);
    let k3_bar = y_bar * (h / 3.0) + y4_bar * h;
    let y3_bar = stage(&y3, &k3_bar, grad);
    let k2_bar = y_bar * (h / 3.0) + y3_bar * (0.5 * h);
    let y2_bar = stage(&y2, &k2_bar, grad);
    let k1_bar = y_bar * (h / 6.0) + y2_bar * (0.5 * h);
    stage(&y1, &k1_bar, grad);

    loss
}

fn batch_loss_grad(model: &KnodeModel, records: &[Record], h: f64) -> (f64, MlpParams) {
    let mut grad = model.theta.zeros_like();
    let mut loss = 0.0;
    for rec in records {
        loss += record_loss_grad(model, rec, h, &mut grad);
    }
    let n = records.len().max(1) as f64;
    grad.scale(1.0 / n);
    (loss / n, grad)
}

/// Mean over records of the squared one-step prediction error
/// `|rk4(knode, x_k, u_k, h) - x_{k+1}|^2 / h^2`, and its exact gradient.
pub fn one_step_loss(model: &KnodeModel, dataset: &TrainingDataset) -> Result<(f64, MlpParams)> {
    if dataset.records.is_empty() {
        return Err(Error::Precondition("dataset is empty".into()));
    }
    Ok(batch_loss_grad(model, &dataset.records, dataset.h))
}

#[cfg(test)]
/// Loss only; checks that the forward pass agrees with [`rk4_step`].
pub(crate) fn loss_only(model: &KnodeModel, dataset: &TrainingDataset) -> Result<f64> {
    let mut total = 0.0;
    for rec in &dataset.records {
        let pred = crate::dynamics::rk4_step(|s, c| model.deriv(s, c), &rec.x, &rec.u, dataset.h)?;
        total += prediction_error(&pred.to_vector(), &rec.x_next, dataset.h).norm_squared();
    }
    Ok(total / dataset.records.len() as f64)
}

/// Gradient descent on [`one_step_loss`]. An epoch whose loss would exceed
/// the previous one is rejected and the learning rate halved, so the
/// accepted loss sequence never increases.
pub fn train_knode(
    nominal: QuadrotorParams,
    dataset: &TrainingDataset,
    cfg: &TrainConfig,
) -> Result<(KnodeModel, TrainReport)> {
    cfg.validate()?;
    dataset.validate()?;
    let mut model = KnodeModel::untrained(nominal, cfg.hidden, cfg.seed)?;
    let h = dataset.h;
    let full_batch = cfg.batch_size == 0 || cfg.batch_size >= dataset.len();

    let (mut loss, mut grad) = batch_loss_grad(&model, &dataset.records, h);
    if !loss.is_finite() {
        return Err(Error::Divergence("non-finite loss before training (epoch 0)".into()));
    }
    let initial_loss = loss;
    let mut lr = cfg.learning_rate;
    let mut loss_history = vec![loss];
    let mut lr_history = vec![lr];

    for epoch in 1..=cfg.epochs {
        if loss <= cfg.tolerance || lr < 1e-14 {
            break;
        }
        loop {
            let mut trial = model.clone();
            if full_batch {
                trial.theta.axpy(-lr, &grad);
            } else {
                for chunk in dataset.records.chunks(cfg.batch_size) {
                    let (_, g) = batch_loss_grad(&trial, chunk, h);
                    trial.theta.axpy(-lr, &g);
                }
            }
            let (trial_loss, trial_grad) = batch_loss_grad(&trial, &dataset.records, h);
            if !trial.theta.is_finite() || !trial_loss.is_finite() {
                if lr < 1e-14 {
                    return Err(Error::Divergence(format!("non-finite loss at epoch {epoch}")));
                }
                lr *= 0.5;
                continue;
            }
            if trial_loss > loss {
                lr *= 0.5;
                if lr < 1e-14 {
                    break;
                }
                continue;
            }
            model = trial;
            loss = trial_loss;
            grad = trial_grad;
            break;
        }
        loss_history.push(loss);
        lr_history.push(lr);
    }

    Ok((
        model,
        TrainReport {
            final_loss: loss,
            initial_loss,
            loss_history,
            learning_rate_history: lr_history,
        },
    ))
}
