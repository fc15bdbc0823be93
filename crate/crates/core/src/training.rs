//! Losses, ADAM, the plateau schedule and the minibatch training loop.

use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::batch::{self, LayerTape};
use crate::diffops::{FloatOperator, OperatorMatrix};
use crate::error::{Error, Result};
use crate::fields::{shuffle, Dataset, Domain};
use crate::model::{identity_float, FieldModel};

/// Datasets up to this size train full-batch.
pub const FULL_BATCH_LIMIT: usize = 1000;
const AUTO_BATCH: usize = 256;
/// Relative improvement the plateau schedule counts as progress.
const PLATEAU_THRESHOLD: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Plateau {
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
}

impl Default for Plateau {
    fn default() -> Self {
        Plateau {
            patience: 50,
            factor: 0.5,
            min_lr: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    /// `None`: full batch up to [`FULL_BATCH_LIMIT`] rows, else 256.
    pub batch_size: Option<usize>,
    pub weight_decay: f64,
    pub penalty: f64,
    pub constraint_points: usize,
    /// Penalise `c²` instead of `|c|`.
    pub squared_penalty: bool,
    pub plateau: Plateau,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 2000,
            batch_size: None,
            weight_decay: 0.0,
            penalty: 0.0,
            constraint_points: 0,
            squared_penalty: false,
            plateau: Plateau::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if !(self.weight_decay >= 0.0) || !(self.penalty >= 0.0) {
            return bad("weight_decay and penalty must be non-negative");
        }
        if self.penalty > 0.0 && self.constraint_points == 0 {
            return bad("a positive penalty needs constraint_points > 0");
        }
        if !(self.plateau.factor > 0.0 && self.plateau.factor < 1.0) {
            return bad("plateau.factor must lie in (0, 1)");
        }
        if !(self.plateau.min_lr >= 0.0) {
            return bad("plateau.min_lr must be non-negative");
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be at least 1");
        }
        Ok(())
    }

    pub fn effective_batch(&self, n: usize) -> usize {
        match self.batch_size {
            Some(b) => b.min(n),
            None if n <= FULL_BATCH_LIMIT => n,
            None => AUTO_BATCH,
        }
    }
}

/// Loss and learning-rate trace of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub lr: Vec<f64>,
    pub final_params: Vec<f64>,
    pub seconds: f64,
}

impl TrainReport {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }

    /// `epoch,train_loss,val_loss,lr`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(File::create(path)?);
        writeln!(f, "epoch,train_loss,val_loss,lr")?;
        for e in 0..self.epochs() {
            writeln!(
                f,
                "{},{:e},{:e},{:e}",
                e + 1,
                self.train_loss[e],
                self.val_loss[e],
                self.lr[e]
            )?;
        }
        f.flush()?;
        Ok(())
    }
}

fn check_pair(preds: &Array2<f64>, targets: &Array2<f64>) -> Result<()> {
    if preds.dim() != targets.dim() {
        return Err(Error::shape(format!(
            "predictions {:?} vs targets {:?}",
            preds.dim(),
            targets.dim()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Domain("loss of an empty batch".into()));
    }
    Ok(())
}

/// `(1/N) Σ_i ‖y_i − ŷ_i‖²`.
pub fn mse_loss(preds: &Array2<f64>, targets: &Array2<f64>) -> Result<f64> {
    check_pair(preds, targets)?;
    let n = preds.nrows() as f64;
    Ok((preds - targets).mapv(|v| v * v).sum() / n)
}

/// MSE plus `λ` times the mean over constraint points of `Σ_rows |c|`.
pub fn augmented_loss(
    preds: &Array2<f64>,
    targets: &Array2<f64>,
    residuals: &Array2<f64>,
    lambda: f64,
) -> Result<f64> {
    let base = mse_loss(preds, targets)?;
    if lambda == 0.0 {
        return Ok(base);
    }
    if residuals.nrows() == 0 {
        return Err(Error::Domain("penalty weight set but no constraint residuals".into()));
    }
    let pen = residuals.mapv(f64::abs).sum() / residuals.nrows() as f64;
    Ok(base + lambda * pen)
}

/// `base + γ Σ w²` over the entries where `mask` is set.
pub fn l2_regularized_loss(base: f64, params: &[f64], mask: &[bool], gamma: f64) -> f64 {
    if gamma == 0.0 {
        return base;
    }
    base + gamma
        * params
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(w, _)| w * w)
            .sum::<f64>()
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn from_config(n: usize, cfg: &TrainConfig) -> Self {
        Self::new(n, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Halve (by `factor`) the rate when the monitored loss stalls for `patience` epochs.
#[derive(Clone, Debug)]
pub struct PlateauSchedule {
    cfg: Plateau,
    lr: f64,
    best: f64,
    stalled: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, cfg: Plateau) -> Self {
        PlateauSchedule {
            cfg,
            lr,
            best: f64::INFINITY,
            stalled: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Record one epoch's monitored loss; returns the rate for the next epoch.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best * (1.0 - PLATEAU_THRESHOLD) {
            self.best = loss;
            self.stalled = 0;
        } else {
            self.stalled += 1;
            if self.stalled > self.cfg.patience {
                self.lr = (self.lr * self.cfg.factor).max(self.cfg.min_lr);
                self.stalled = 0;
            }
        }
        self.lr
    }
}

/// Constraint to penalise, with the region its collocation points come from.
#[derive(Clone, Debug)]
pub struct Penalty {
    pub op: OperatorMatrix,
    pub domain: Domain,
}

struct PenaltyState {
    composed: FloatOperator,
    direct: FloatOperator,
    points: Array2<f64>,
}

/// Objective of one minibatch and its gradient with respect to the model parameters.
pub fn batch_objective(
    model: &dyn FieldModel,
    xs: ArrayView2<f64>,
    ys: ArrayView2<f64>,
    penalty: Option<(&OperatorMatrix, ArrayView2<f64>)>,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<f64>)> {
    let state = match penalty {
        Some((op, pts)) => Some(PenaltyState {
            composed: op.compose(model.transform())?.to_float(),
            direct: op.to_float(),
            points: pts.to_owned(),
        }),
        None => None,
    };
    let mut tape = LayerTape::new();
    let head = model.transform().to_float();
    let mut grad = vec![0.0; model.param_count()];
    let loss = objective(model, xs, ys, state.as_ref().map(|s| (s, s.points.view())), cfg, &head, &mut tape, &mut grad)?;
    Ok((loss, grad))
}

#[allow(clippy::too_many_arguments)]
fn objective(
    model: &dyn FieldModel,
    xs: ArrayView2<f64>,
    ys: ArrayView2<f64>,
    penalty: Option<(&PenaltyState, ArrayView2<f64>)>,
    cfg: &TrainConfig,
    head: &FloatOperator,
    tape: &mut LayerTape,
    grad: &mut [f64],
) -> Result<f64> {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let net = model.potential();
    let n_net = net.params.len();
    let b = xs.nrows() as f64;

    let jets = batch::forward(net, xs, head.order(), Some(tape))?;
    let mut pred = batch::apply_operator(head, &jets)?;
    let ident = model.affine_tail().map(|_| identity_float(model.output_dim(), model.input_dim()));
    if let (Some(t), Some(id)) = (model.affine_tail(), &ident) {
        pred += &t.apply(id, xs);
    }
    let resid = &pred - &ys;
    let mut loss = resid.mapv(|v| v * v).sum() / b;
    let dpred = resid.mapv(|v| 2.0 * v / b);
    let adj = batch::apply_operator_adjoint(head, jets.layout, dpred.view())?;
    batch::backward(net, tape, adj, &mut grad[..n_net]);
    if let (Some(t), Some(id)) = (model.affine_tail(), &ident) {
        for (g, v) in grad[n_net..].iter_mut().zip(t.adjoint(id, xs, dpred.view())) {
            *g += v;
        }
    }

    if let Some((st, pts)) = penalty.filter(|_| cfg.penalty > 0.0) {
        if pts.nrows() > 0 {
            let nc = pts.nrows() as f64;
            let jets = batch::forward(net, pts, st.composed.order(), Some(tape))?;
            let mut c = batch::apply_operator(&st.composed, &jets)?;
            if let Some(t) = model.affine_tail() {
                c += &t.apply(&st.direct, pts);
            }
            let (pen, dc) = if cfg.squared_penalty {
                (c.mapv(|v| v * v).sum() / nc, c.mapv(|v| 2.0 * v / nc))
            } else {
                (c.mapv(f64::abs).sum() / nc, c.mapv(|v| sign(v) / nc))
            };
            loss += cfg.penalty * pen;
            let dc = dc * cfg.penalty;
            let adj = batch::apply_operator_adjoint(&st.composed, jets.layout, dc.view())?;
            let mut g_net = vec![0.0; n_net];
            batch::backward(net, tape, adj, &mut g_net);
            for (g, v) in grad.iter_mut().zip(g_net) {
                *g += v;
            }
            if let Some(t) = model.affine_tail() {
                for (g, v) in grad[n_net..].iter_mut().zip(t.adjoint(&st.direct, pts, dc.view())) {
                    *g += v;
                }
            }
        }
    }

    if cfg.weight_decay > 0.0 {
        let params = net.params.as_slice();
        for block in net.spec.layout() {
            for i in block.weights {
                loss += cfg.weight_decay * params[i] * params[i];
                grad[i] += 2.0 * cfg.weight_decay * params[i];
            }
        }
    }
    Ok(loss)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Data-fit MSE of `model` on `data`, in chunks to bound memory.
pub fn evaluate_mse(model: &dyn FieldModel, data: &Dataset) -> Result<f64> {
    let pred = predict_chunked(model, data.inputs.view())?;
    mse_loss(&pred, &data.targets)
}

pub fn predict_chunked(model: &dyn FieldModel, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
    const CHUNK: usize = 2048;
    if xs.nrows() <= CHUNK {
        return model.predict_batch(xs);
    }
    let parts = xs
        .axis_chunks_iter(Axis(0), CHUNK)
        .map(|c| model.predict_batch(c))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("chunks share width"))
}

/// Minibatch ADAM with a plateau schedule on the validation MSE.
///
/// With a positive penalty the run draws `constraint_points` collocation
/// points once, uniformly over the penalty domain, and gives each step an
/// equal slice of them.
pub fn train(
    model: &mut dyn FieldModel,
    data: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    penalty: Option<&Penalty>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.input_dim() != model.input_dim() || data.output_dim() != model.output_dim() {
        return Err(Error::shape(format!(
            "data R^{} -> R^{} for a model R^{} -> R^{}",
            data.input_dim(),
            data.output_dim(),
            model.input_dim(),
            model.output_dim()
        )));
    }
    if val.input_dim() != data.input_dim() || val.output_dim() != data.output_dim() {
        return Err(Error::shape("validation set differs in shape from training set"));
    }
    let penalty = if cfg.penalty > 0.0 {
        let p = penalty.ok_or_else(|| Error::Config("penalty > 0 needs a constraint operator".into()))?;
        if p.domain.dim() != model.input_dim() {
            return Err(Error::shape("penalty domain dimension differs from the model"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc0ffee);
        Some(PenaltyState {
            composed: p.op.compose(model.transform())?.to_float(),
            direct: p.op.to_float(),
            points: p.domain.sample(cfg.constraint_points, &mut rng),
        })
    } else {
        None
    };

    let start = Instant::now();
    let n = data.len();
    let bs = cfg.effective_batch(n);
    let steps = n.div_ceil(bs);
    let head = model.transform().to_float();
    let mut tape = LayerTape::new();
    let mut params = model.params();
    let mut grad = vec![0.0; params.len()];
    let mut adam = Adam::from_config(params.len(), cfg);
    let mut sched = PlateauSchedule::new(cfg.lr, cfg.plateau.clone());
    let mut order: Vec<usize> = (0..n).collect();
    let mut report = TrainReport {
        train_loss: Vec::with_capacity(cfg.epochs),
        val_loss: Vec::with_capacity(cfg.epochs),
        lr: Vec::with_capacity(cfg.epochs),
        final_params: Vec::new(),
        seconds: 0.0,
    };
    let (mut xb, mut yb) = (data.inputs.clone(), data.targets.clone());

    for epoch in 0..cfg.epochs {
        let lr = sched.lr();
        if steps > 1 {
            shuffle(&mut order, cfg.seed.wrapping_add(epoch as u64));
            xb = data.inputs.select(Axis(0), &order);
            yb = data.targets.select(Axis(0), &order);
        }
        let mut epoch_loss = 0.0;
        for s in 0..steps {
            let rows = s * bs..((s + 1) * bs).min(n);
            let pen = penalty.as_ref().map(|st| {
                let nc = st.points.nrows();
                let chunk = (s * nc / steps)..((s + 1) * nc / steps);
                (st, st.points.slice(s![chunk, ..]))
            });
            let loss = objective(
                &*model,
                xb.slice(s![rows.clone(), ..]),
                yb.slice(s![rows, ..]),
                pen,
                cfg,
                &head,
                &mut tape,
                &mut grad,
            )?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite { epoch });
            }
            epoch_loss += loss;
            adam.step(&mut params, &grad, lr);
            model.set_params(&params)?;
        }
        let v = evaluate_mse(&*model, val)?;
        if !v.is_finite() {
            return Err(Error::NonFinite { epoch });
        }
        report.train_loss.push(epoch_loss / steps as f64);
        report.val_loss.push(v);
        report.lr.push(lr);
        sched.observe(v);
    }
    report.final_params = params;
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}
