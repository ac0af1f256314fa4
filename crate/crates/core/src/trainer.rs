//! Residual training of the surrogate.
//!
//! The loss is the ODE residual `dV/dt - (inflow - outflow)` at collocation
//! points, with flows from predicted volumes and smooth valves. Training
//! starts on MAE with a soft valve and switches, once and for all, to MSE
//! with a sharper valve after the plateau schedule has pushed the learning
//! rate below a threshold.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    activations, ode_rhs_with_jacobian, InputParameters, Multipliers, StateVolumes, ValveLaw,
    N_PARAMS,
};
use crate::sampling::{lhs_sample, ParameterSpace};
use crate::seeds;
use crate::surrogate::{BatchEval, SurrogateModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "MAE")]
    Mae,
    #[serde(rename = "MSE")]
    Mse,
}

impl LossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::Mae => "MAE",
            LossKind::Mse => "MSE",
        }
    }

    fn value(&self, r: f64) -> f64 {
        match self {
            LossKind::Mae => r.abs(),
            LossKind::Mse => r * r,
        }
    }

    fn slope(&self, r: f64) -> f64 {
        match self {
            LossKind::Mae => {
                if r > 0.0 {
                    1.0
                } else if r < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            LossKind::Mse => 2.0 * r,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub n_cases: usize,
    pub n_test_cases: usize,
    pub n_timepoints: usize,
    pub batch_cases: usize,
    pub epochs_max: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub lr_factor: f64,
    pub plateau_patience: usize,
    /// Relative improvement of the best train loss that resets the plateau
    /// counter.
    pub plateau_threshold: f64,
    pub alpha_initial: f64,
    pub alpha_final: f64,
    pub switch_lr_threshold: f64,
    pub loss_initial: LossKind,
    pub loss_final: LossKind,
    /// Stop once a plateau is detected with the learning rate already at
    /// `lr_min`.
    pub stop_at_lr_floor: bool,
    /// Collocation points per parallel work unit.
    pub chunk_points: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            n_cases: 512,
            n_test_cases: 64,
            n_timepoints: 100,
            batch_cases: 8,
            epochs_max: 1500,
            lr_init: 1e-3,
            lr_min: 1e-6,
            lr_factor: 0.5,
            plateau_patience: 25,
            plateau_threshold: 1e-3,
            alpha_initial: 0.002,
            alpha_final: 0.01,
            switch_lr_threshold: 1e-4,
            loss_initial: LossKind::Mae,
            loss_final: LossKind::Mse,
            stop_at_lr_floor: true,
            chunk_points: 400,
            seed: 0,
        }
    }

    pub fn full() -> Self {
        Self {
            n_cases: 100_000,
            n_test_cases: 100_000,
            n_timepoints: 400,
            batch_cases: 256,
            epochs_max: 3300,
            plateau_patience: 10,
            stop_at_lr_floor: false,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_cases", self.n_cases),
            ("n_test_cases", self.n_test_cases),
            ("n_timepoints", self.n_timepoints),
            ("batch_cases", self.batch_cases),
            ("epochs_max", self.epochs_max),
            ("plateau_patience", self.plateau_patience),
            ("chunk_points", self.chunk_points),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        if !(self.lr_min > 0.0
            && self.lr_min < self.switch_lr_threshold
            && self.switch_lr_threshold < self.lr_init)
        {
            return Err(Error::InvalidArgument(format!(
                "need 0 < lr_min < switch_lr_threshold < lr_init, got {} / {} / {}",
                self.lr_min, self.switch_lr_threshold, self.lr_init
            )));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "lr_factor {} not in (0, 1)",
                self.lr_factor
            )));
        }
        if !(self.alpha_initial > 0.0 && self.alpha_initial < self.alpha_final) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < alpha_initial < alpha_final, got {} / {}",
                self.alpha_initial, self.alpha_final
            )));
        }
        if !(self.plateau_threshold >= 0.0 && self.plateau_threshold < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "plateau_threshold {} not in [0, 1)",
                self.plateau_threshold
            )));
        }
        Ok(())
    }

    /// Uniform collocation grid over one cycle, `k T_c / n` for `k < n`.
    pub fn time_grid(&self, t_c: f64) -> Vec<f64> {
        (0..self.n_timepoints)
            .map(|k| k as f64 * t_c / self.n_timepoints as f64)
            .collect()
    }
}

/// Training and held-out cases drawn by LHS with seeds split from `cfg.seed`.
pub fn training_cases(
    space: &ParameterSpace,
    cfg: &TrainConfig,
) -> Result<(Vec<Multipliers>, Vec<Multipliers>)> {
    let train = lhs_sample(
        cfg.n_cases,
        space,
        seeds::derive_seed(cfg.seed, seeds::DATASET),
    )?;
    let test = lhs_sample(
        cfg.n_test_cases,
        space,
        seeds::derive_seed(cfg.seed, seeds::TEST_SET),
    )?;
    Ok((train, test))
}

/// Collocation points: times, unit-cube inputs and the physical parameters
/// of each point's case.
#[derive(Debug, Clone, Default)]
pub struct Collocation {
    pub times: Vec<f64>,
    pub inputs: Vec<[f64; N_PARAMS]>,
    pub params: Vec<InputParameters>,
    pub case_ids: Vec<usize>,
}

impl Collocation {
    /// Cross product of `cases` with `times`.
    pub fn grid(model: &SurrogateModel, cases: &[Multipliers], times: &[f64]) -> Result<Self> {
        let mut c = Self::default();
        for (id, m) in cases.iter().enumerate() {
            c.push_case(model, id, m, times)?;
        }
        Ok(c)
    }

    pub fn push_case(
        &mut self,
        model: &SurrogateModel,
        id: usize,
        m: &Multipliers,
        times: &[f64],
    ) -> Result<()> {
        let u = model.space.to_unit(m)?;
        let p = model.space.apply_multipliers(m)?;
        for &t in times {
            self.times.push(t);
            self.inputs.push(u);
            self.params.push(p);
            self.case_ids.push(id);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn slice(&self, lo: usize, hi: usize) -> CollocationRef<'_> {
        CollocationRef {
            times: &self.times[lo..hi],
            inputs: &self.inputs[lo..hi],
            params: &self.params[lo..hi],
            case_ids: &self.case_ids[lo..hi],
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct CollocationRef<'a> {
    times: &'a [f64],
    inputs: &'a [[f64; N_PARAMS]],
    params: &'a [InputParameters],
    case_ids: &'a [usize],
}

/// Loss on a set of points and its adjoints with respect to the predicted
/// volumes and time derivatives.
#[derive(Debug, Clone)]
pub struct ResidualLoss {
    pub loss: f64,
    pub g_vol: Vec<[f64; 5]>,
    pub g_der: Vec<[f64; 5]>,
}

/// ODE residuals `dV/dt - rhs(V)` at one point with the Jacobian of `rhs`.
pub fn point_residual(
    volumes: &[f64; 5],
    derivs: &[f64; 5],
    t: f64,
    p: &InputParameters,
    model: &SurrogateModel,
    law: ValveLaw,
) -> ([f64; 5], [[f64; 5]; 5]) {
    let (e_lv, e_la) = activations(t, p, &model.constants);
    let v = StateVolumes::from_array(*volumes);
    let (rhs, jac) = ode_rhs_with_jacobian(&v, e_lv, e_la, p, &model.constants, law);
    let mut r = [0.0; 5];
    for j in 0..5 {
        r[j] = derivs[j] - rhs[j];
    }
    (r, jac)
}

fn residuals_with_adjoints(
    model: &SurrogateModel,
    eval: &BatchEval,
    pts: CollocationRef<'_>,
    kind: LossKind,
    alpha: f64,
    n_total: usize,
    with_adjoints: bool,
) -> Result<ResidualLoss> {
    let law = ValveLaw::smooth(alpha)?;
    let n = pts.times.len();
    let scale = 1.0 / n_total as f64;
    let m = if with_adjoints { n } else { 0 };
    let mut out = ResidualLoss {
        loss: 0.0,
        g_vol: vec![[0.0; 5]; m],
        g_der: vec![[0.0; 5]; m],
    };
    let mut sum = 0.0;
    for k in 0..n {
        let (r, jac) = point_residual(
            &eval.volumes[k],
            &eval.derivs[k],
            pts.times[k],
            &pts.params[k],
            model,
            law,
        );
        if r.iter().any(|x| !x.is_finite()) {
            return Err(Error::DivergedTraining {
                case: pts.case_ids[k],
                t: pts.times[k],
            });
        }
        sum += r.iter().map(|&x| kind.value(x)).sum::<f64>();
        if with_adjoints {
            let gr = r.map(|x| kind.slope(x) * scale);
            out.g_der[k] = gr;
            for j in 0..5 {
                out.g_vol[k][j] = -(0..5).map(|i| gr[i] * jac[i][j]).sum::<f64>();
            }
        }
    }
    out.loss = sum * scale;
    Ok(out)
}

fn chunk_loss(
    model: &SurrogateModel,
    pts: CollocationRef<'_>,
    kind: LossKind,
    alpha: f64,
    n_total: usize,
    with_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let eval = model.eval_batch(pts.times, pts.inputs)?;
    let res = residuals_with_adjoints(model, &eval, pts, kind, alpha, n_total, with_grad)?;
    let grad = if with_grad {
        model.backward(&eval, &res.g_vol, &res.g_der)?
    } else {
        Vec::new()
    };
    Ok((res.loss, grad))
}

/// Mean over points of the summed per-equation loss, with adjoints.
pub fn residual_loss(
    model: &SurrogateModel,
    pts: &Collocation,
    kind: LossKind,
    alpha: f64,
) -> Result<ResidualLoss> {
    if pts.is_empty() {
        return Err(Error::InvalidArgument("empty collocation batch".into()));
    }
    let eval = model.eval_batch(&pts.times, &pts.inputs)?;
    residuals_with_adjoints(
        model,
        &eval,
        pts.slice(0, pts.len()),
        kind,
        alpha,
        pts.len(),
        true,
    )
}

/// Loss and weight gradient over `pts`, evaluated in fixed-size chunks in
/// parallel and reduced in chunk order.
pub fn loss_and_gradient(
    model: &SurrogateModel,
    pts: &Collocation,
    kind: LossKind,
    alpha: f64,
    chunk_points: usize,
) -> Result<(f64, Vec<f64>)> {
    reduce_chunks(model, pts, kind, alpha, chunk_points, true)
}

/// Loss over `pts` without gradient.
pub fn evaluate_loss(
    model: &SurrogateModel,
    pts: &Collocation,
    kind: LossKind,
    alpha: f64,
    chunk_points: usize,
) -> Result<f64> {
    Ok(reduce_chunks(model, pts, kind, alpha, chunk_points, false)?.0)
}

fn reduce_chunks(
    model: &SurrogateModel,
    pts: &Collocation,
    kind: LossKind,
    alpha: f64,
    chunk_points: usize,
    with_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let n = pts.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty collocation batch".into()));
    }
    let chunk = chunk_points.max(1);
    let bounds: Vec<(usize, usize)> = (0..n)
        .step_by(chunk)
        .map(|lo| (lo, (lo + chunk).min(n)))
        .collect();
    let parts: Vec<Result<(f64, Vec<f64>)>> = bounds
        .par_iter()
        .map(|&(lo, hi)| chunk_loss(model, pts.slice(lo, hi), kind, alpha, n, with_grad))
        .collect();
    let mut loss = 0.0;
    let mut grad = if with_grad {
        vec![0.0; model.n_params()]
    } else {
        Vec::new()
    };
    for part in parts {
        let (l, g) = part?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss, grad))
}

/// Adam moments and step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `theta` in place.
pub fn adam_step(theta: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if theta.len() != grad.len() || theta.len() != state.m.len() || theta.len() != state.v.len() {
        return Err(Error::Contract(format!(
            "adam shapes: theta {}, grad {}, moments {}/{}",
            theta.len(),
            grad.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Reduce-on-plateau learning-rate tracker.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    pub lr: f64,
    best: f64,
    wait: usize,
}

impl PlateauSchedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr_init,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    /// Forgets the best loss, used when the loss definition changes.
    pub fn reset_best(&mut self) {
        self.best = f64::INFINITY;
        self.wait = 0;
    }

    /// Records an epoch loss; returns true when a plateau was detected.
    pub fn observe(&mut self, loss: f64, cfg: &TrainConfig) -> bool {
        if loss < self.best * (1.0 - cfg.plateau_threshold) || !self.best.is_finite() {
            self.best = loss;
            self.wait = 0;
            return false;
        }
        self.best = self.best.min(loss);
        self.wait += 1;
        if self.wait >= cfg.plateau_patience {
            self.lr = (self.lr * cfg.lr_factor).max(cfg.lr_min);
            self.wait = 0;
            true
        } else {
            false
        }
    }
}

/// Learning rate for the epoch following `log`, replaying the plateau rule
/// over all logged training epochs.
pub fn lr_schedule(log: &TrainLog, cfg: &TrainConfig) -> f64 {
    let mut sched = PlateauSchedule::new(cfg);
    let mut kind = None;
    for r in log.rows.iter().filter(|r| r.epoch > 0) {
        if kind.is_some() && kind != Some(r.loss_kind) {
            sched.reset_best();
        }
        kind = Some(r.loss_kind);
        sched.observe(r.train_loss, cfg);
    }
    sched.lr
}

/// Loss kind and valve sharpness for a learning rate, without latching.
pub fn phase_controller(lr: f64, cfg: &TrainConfig) -> (LossKind, f64) {
    if lr < cfg.switch_lr_threshold {
        (cfg.loss_final, cfg.alpha_final)
    } else {
        (cfg.loss_initial, cfg.alpha_initial)
    }
}

/// One-way version of [`phase_controller`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PhaseLatch {
    pub switched: bool,
}

impl PhaseLatch {
    pub fn update(&mut self, lr: f64, cfg: &TrainConfig) -> (LossKind, f64) {
        if lr < cfg.switch_lr_threshold {
            self.switched = true;
        }
        if self.switched {
            (cfg.loss_final, cfg.alpha_final)
        } else {
            (cfg.loss_initial, cfg.alpha_initial)
        }
    }
}

pub const TRAIN_LOG_HEADER: &str = "epoch,train_loss,test_loss,lr,loss_kind,alpha,seconds";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub lr: f64,
    pub loss_kind: LossKind,
    pub alpha: f64,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{},{},{:.3}",
            self.epoch,
            self.train_loss,
            self.test_loss,
            self.lr,
            self.loss_kind.as_str(),
            self.alpha,
            self.seconds
        )
    }
}

/// Per-epoch history. Row 0 holds the untrained model's losses.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<EpochRecord>,
    /// Epoch whose weights were kept as the best checkpoint.
    pub best_epoch: usize,
    /// Untrained and final MSE residual on the held-out set at `alpha_final`.
    pub initial_test_mse: f64,
    pub final_test_mse: f64,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{TRAIN_LOG_HEADER}")?;
        for r in &self.rows {
            writeln!(w, "{}", r.csv_row())?;
        }
        Ok(())
    }

    /// First training epoch whose loss kind differs from row 1.
    pub fn switch_epoch(&self) -> Option<usize> {
        let first = self.rows.iter().find(|r| r.epoch > 0)?.loss_kind;
        self.rows
            .iter()
            .find(|r| r.loss_kind != first)
            .map(|r| r.epoch)
    }
}

/// Trains `model` in place and leaves it at the best checkpoint: the lowest
/// held-out loss under the latest loss definition.
///
/// On a non-finite residual the model is restored to that checkpoint and
/// the divergence error is returned. `on_epoch` sees every logged row.
pub fn train(
    model: &mut SurrogateModel,
    train_cases: &[Multipliers],
    test_cases: &[Multipliers],
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainLog> {
    cfg.validate()?;
    if train_cases.is_empty() || test_cases.is_empty() {
        return Err(Error::InvalidArgument(
            "training and test sets must be nonempty".into(),
        ));
    }
    let clock = Instant::now();
    let times = cfg.time_grid(model.constants.t_c);
    let train_pts = Collocation::grid(model, train_cases, &times)?;
    let test_pts = Collocation::grid(model, test_cases, &times)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive_seed(cfg.seed, seeds::SHUFFLE));

    let mut sched = PlateauSchedule::new(cfg);
    let mut latch = PhaseLatch::default();
    let (mut kind, mut alpha) = latch.update(sched.lr, cfg);
    model.alpha = alpha;
    let mut adam = AdamState::new(model.n_params());
    let mut theta = model.theta();

    let mut log = TrainLog {
        initial_test_mse: evaluate_loss(
            model,
            &test_pts,
            LossKind::Mse,
            cfg.alpha_final,
            cfg.chunk_points,
        )?,
        ..TrainLog::default()
    };
    let row0 = EpochRecord {
        epoch: 0,
        train_loss: evaluate_loss(model, &train_pts, kind, alpha, cfg.chunk_points)?,
        test_loss: evaluate_loss(model, &test_pts, kind, alpha, cfg.chunk_points)?,
        lr: sched.lr,
        loss_kind: kind,
        alpha,
        seconds: clock.elapsed().as_secs_f64(),
    };
    on_epoch(&row0);
    log.rows.push(row0);
    let mut best = (row0.test_loss, model.clone(), 0usize);

    let mut order: Vec<usize> = (0..train_cases.len()).collect();
    let n_t = times.len();
    for epoch in 1..=cfg.epochs_max {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_pts = 0usize;
        for batch in order.chunks(cfg.batch_cases) {
            let mut pts = Collocation::default();
            for &c in batch {
                let lo = c * n_t;
                pts.times.extend_from_slice(&train_pts.times[lo..lo + n_t]);
                pts.inputs
                    .extend_from_slice(&train_pts.inputs[lo..lo + n_t]);
                pts.params
                    .extend_from_slice(&train_pts.params[lo..lo + n_t]);
                pts.case_ids
                    .extend_from_slice(&train_pts.case_ids[lo..lo + n_t]);
            }
            let (loss, grad) = match loss_and_gradient(model, &pts, kind, alpha, cfg.chunk_points) {
                Ok(v) => v,
                Err(e) => {
                    *model = best.1;
                    return Err(e);
                }
            };
            epoch_loss += loss * pts.len() as f64;
            n_pts += pts.len();
            adam_step(&mut theta, &grad, &mut adam, sched.lr)?;
            model.set_theta(&theta)?;
        }
        let train_loss = epoch_loss / n_pts as f64;
        let test_loss = match evaluate_loss(model, &test_pts, kind, alpha, cfg.chunk_points) {
            Ok(v) => v,
            Err(e) => {
                *model = best.1;
                return Err(e);
            }
        };
        let row = EpochRecord {
            epoch,
            train_loss,
            test_loss,
            lr: sched.lr,
            loss_kind: kind,
            alpha,
            seconds: clock.elapsed().as_secs_f64(),
        };
        on_epoch(&row);
        log.rows.push(row);
        if test_loss < best.0 {
            best = (test_loss, model.clone(), epoch);
            if let Some(path) = checkpoint {
                model.save(path)?;
            }
        }

        let lr_before = sched.lr;
        let plateau = sched.observe(train_loss, cfg);
        if plateau && lr_before <= cfg.lr_min && cfg.stop_at_lr_floor {
            break;
        }
        let (next_kind, next_alpha) = latch.update(sched.lr, cfg);
        if next_kind != kind || next_alpha != alpha {
            // The loss definition changed: old losses are not comparable.
            sched.reset_best();
            best = (f64::INFINITY, model.clone(), epoch);
            kind = next_kind;
            alpha = next_alpha;
            model.alpha = alpha;
        }
    }
    *model = best.1;
    model.alpha = alpha;
    log.best_epoch = best.2;
    log.final_test_mse = evaluate_loss(
        model,
        &test_pts,
        LossKind::Mse,
        cfg.alpha_final,
        cfg.chunk_points,
    )?;
    if let Some(path) = checkpoint {
        model.save(path)?;
    }
    Ok(log)
}
