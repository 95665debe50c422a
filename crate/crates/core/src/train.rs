//! Training loop, train-state checkpoints and the finite-difference
//! gradient check.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::config::{ModelConfig, TrainConfig};
use crate::data::{batch, random_crop_pair, synth_scene, Batch, Sample};
use crate::error::{Error, Result};
use crate::losses::{sample_targets, LossBreakdown};
use crate::model::{forward, init_params};
use crate::optim::{one_cycle_lr, AdamW, OptimState};
use crate::params::ParamStore;
use crate::tensor::Scalar;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore<f32>,
    pub optim: OptimState,
    pub step: usize,
    pub seed: u64,
    pub best_metric: f64,
}

impl TrainState {
    pub fn new(model: &ModelConfig, seed: u64) -> Self {
        let params = init_params(model, seed);
        let optim = OptimState::new(&params);
        Self { params, optim, step: 0, seed, best_metric: f64::INFINITY }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::default();
        for (name, t) in self.params.iter() {
            c.tensors.insert(name.clone(), t.clone());
        }
        for (name, t) in self.optim.m.iter() {
            c.tensors.insert(format!("optim.m.{name}"), t.clone());
        }
        for (name, t) in self.optim.v.iter() {
            c.tensors.insert(format!("optim.v.{name}"), t.clone());
        }
        c.values.insert("optim.step".into(), self.optim.step);
        c.values.insert("train.step".into(), self.step as u64);
        c.values.insert("train.seed".into(), self.seed);
        c.values.insert("train.best_metric".into(), self.best_metric.to_bits());
        c
    }

    pub fn from_checkpoint(c: &Checkpoint, model: &ModelConfig) -> Result<Self> {
        let params = load_params(c, model)?;
        let m = c.with_prefix("optim.m.");
        let v = c.with_prefix("optim.v.");
        m.check_layout(&params)?;
        v.check_layout(&params)?;
        let value = |k: &str| c.values.get(k).copied().ok_or_else(|| Error::Format(format!("checkpoint lacks `{k}`")));
        Ok(Self {
            params,
            optim: OptimState { m, v, step: value("optim.step")? },
            step: value("train.step")? as usize,
            seed: value("train.seed")?,
            best_metric: f64::from_bits(value("train.best_metric")?),
        })
    }
}

/// Model parameters of a checkpoint, checked against the layout `model`
/// expects.
pub fn load_params(c: &Checkpoint, model: &ModelConfig) -> Result<ParamStore<f32>> {
    let params = c.without_prefix("optim.");
    params.check_layout(&init_params::<f32>(model, 0))?;
    Ok(params)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    /// 1-based index of the completed step.
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,lr,silog,chamfer,total\n");
    for r in rows {
        let _ = writeln!(s, "{},{:e},{},{},{}", r.step, r.lr, r.loss.silog, r.loss.chamfer, r.loss.total);
    }
    s
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

/// The crops and Chamfer targets used at `step`; a pure function of the
/// training seed, the step and the data.
pub fn step_batch(train: &TrainConfig, data: &[Sample], step: usize) -> Result<(Batch, Vec<Vec<f64>>)> {
    if data.is_empty() {
        return Err(Error::Format("training set is empty".into()));
    }
    let mut rng = step_rng(train.seed, step);
    let picks = index::sample(&mut rng, data.len(), train.batch_size.min(data.len())).into_vec();
    let crops = picks
        .iter()
        .map(|&i| random_crop_pair(&data[i], train.crop_h, train.crop_w, train.hflip, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let b = batch(&crops)?;
    let targets = b
        .depths
        .iter()
        .map(|d| {
            let t = sample_targets(d.data(), d.valid(), train.chamfer_sample_cap, &mut rng);
            if t.is_empty() {
                return Err(Error::EmptyMask);
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((b, targets))
}

/// Returns `(total, silog, chamfer)` handles.
fn loss_graph<T: Scalar>(
    tape: &mut Tape<'_, T>,
    model: &ModelConfig,
    train: &TrainConfig,
    b: &Batch,
    targets: &[Vec<f64>],
) -> Result<(Var, Var, Var)> {
    let x = tape.constant(b.images.cast());
    let out = forward(tape, x, model)?;
    let gt: Vec<T> = b.gt().into_iter().map(T::from_f64).collect();
    let silog = tape.silog(out.depth, &gt, &b.mask(), T::from_f64(train.silog_alpha), T::from_f64(train.silog_lambda))?;
    let tgt: Vec<Vec<T>> = targets.iter().map(|t| t.iter().map(|&v| T::from_f64(v)).collect()).collect();
    let chamfer = tape.chamfer(out.centers, &tgt)?;
    let total = tape.axpy(silog, chamfer, T::from_f64(train.gamma))?;
    Ok((total, silog, chamfer))
}

/// One optimizer step at `state.step`.
pub fn train_step(state: &mut TrainState, model: &ModelConfig, train: &TrainConfig, data: &[Sample]) -> Result<LogRow> {
    let s = state.step;
    let lr = one_cycle_lr(s, train.max_lr, train.total_steps)?;
    let (b, targets) = step_batch(train, data, s)?;
    let (grads, silog, chamfer) = {
        let mut tape = Tape::with_params(&state.params);
        // predicted depth is bounded below by d_min > 0, so a domain error
        // here means the forward pass went non-finite
        let (total, silog, chamfer) = match loss_graph(&mut tape, model, train, &b, &targets) {
            Err(Error::Domain(_)) => return Err(Error::NanAbort { step: s }),
            other => other?,
        };
        let scalar = |v: Var| tape.value(v).data()[0].to_f64();
        let (t, si, ch) = (scalar(total), scalar(silog), scalar(chamfer));
        if !t.is_finite() {
            return Err(Error::NanAbort { step: s });
        }
        (tape.backward(total)?.into_param_grads(&state.params), si, ch)
    };
    AdamW::new(train.weight_decay).step(&mut state.params, &grads, &mut state.optim, lr)?;
    state.step += 1;
    let n_valid = b.mask().iter().filter(|&&m| m).count();
    Ok(LogRow { step: state.step, lr, loss: LossBreakdown::new(silog, chamfer, train.gamma, n_valid) })
}

#[derive(Debug)]
pub struct FitReport {
    pub state: TrainState,
    pub log: Vec<LogRow>,
}

fn persist(dir: &Path, state: &TrainState, log: &[LogRow]) -> Result<()> {
    state.to_checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
    let p = dir.join(LOG_FILE);
    std::fs::write(&p, log_csv(log)).map_err(|e| Error::io(&p, e))
}

/// Runs from `state.step` to `train.total_steps`. With `out_dir`, the
/// checkpoint and log are written every `checkpoint_every` steps and at
/// the end; a non-finite loss aborts without touching the last checkpoint.
pub fn fit(
    mut state: TrainState,
    model: &ModelConfig,
    train: &TrainConfig,
    data: &[Sample],
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&LogRow),
) -> Result<FitReport> {
    let mut problems = model.violations(train.crop_h, train.crop_w);
    problems.extend(train.violations());
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    if state.step > train.total_steps {
        return Err(Error::invalid("fit", format!("state is at step {} past total {}", state.step, train.total_steps)));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = Vec::with_capacity(train.total_steps - state.step);
    while state.step < train.total_steps {
        let row = train_step(&mut state, model, train, data)?;
        on_step(&row);
        log.push(row);
        if let Some(dir) = out_dir {
            if train.checkpoint_every > 0 && state.step % train.checkpoint_every == 0 {
                persist(dir, &state, &log)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        persist(dir, &state, &log)?;
    }
    Ok(FitReport { state, log })
}

pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join(CHECKPOINT_FILE)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `path[index]` of the entry with the largest error.
    pub worst: Option<String>,
    pub n_checked: usize,
    pub n_skipped: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "max_rel_err={:.3e} checked={} skipped={} tol={:e}",
            self.max_rel_err, self.n_checked, self.n_skipped, self.tol
        )?;
        if let Some(w) = &self.worst {
            write!(f, " worst={w}")?;
        }
        Ok(())
    }
}

/// Compares central differences of the scalar built by `loss` against the
/// reverse-mode gradient for `n` distinct randomly chosen parameter entries.
/// Entries whose `±h` perturbation changes any piecewise branch are skipped.
pub fn check_gradients<F>(params: &ParamStore<f64>, n: usize, h: f64, tol: f64, seed: u64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>| -> Result<(f64, Option<u64>)> {
        let mut tape = Tape::with_params(store);
        tape.track_kinks();
        let root = loss(&mut tape)?;
        Ok((tape.value(root).data()[0], tape.kink_signature()))
    };
    let (analytic, sig0) = {
        let mut tape = Tape::with_params(params);
        tape.track_kinks();
        let root = loss(&mut tape)?;
        (tape.backward(root)?.into_param_grads(params), tape.kink_signature())
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    if names.is_empty() {
        return Err(Error::invalid("grad_check", "no parameters"));
    }
    let total: usize = params.num_scalars();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut work = params.clone();
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, n_checked: 0, n_skipped: 0, tol };
    while seen.len() < n.min(total) {
        let name = &names[rng.random_range(0..names.len())];
        let idx = rng.random_range(0..params.require(name)?.len());
        if !seen.insert((name.clone(), idx)) {
            continue;
        }
        let orig = params.require(name)?.data()[idx];
        let entry = |w: &mut ParamStore<f64>, v: f64| w.get_mut(name).expect("known name").data_mut()[idx] = v;
        entry(&mut work, orig + h);
        let (fp, sp) = eval(&work)?;
        entry(&mut work, orig - h);
        let (fm, sm) = eval(&work)?;
        entry(&mut work, orig);
        if sp != sig0 || sm != sig0 {
            report.n_skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.require(name)?.data()[idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        report.n_checked += 1;
        if report.worst.is_none() || rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some(format!("{name}[{idx}]"));
        }
    }
    Ok(report)
}

/// Gradient check of the full training loss in 64-bit arithmetic on one
/// synthetic `side x side` scene.
pub fn grad_check(
    model: &ModelConfig,
    train: &TrainConfig,
    side: usize,
    n: usize,
    h: f64,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let problems = model.violations(side, side);
    if !problems.is_empty() {
        return Err(Error::Shape(problems.join("; ")));
    }
    let params = init_params::<f64>(model, seed);
    let scene = synth_scene(seed, side, side, model.d_min, model.d_max)?;
    let b = batch(&[scene])?;
    let targets: Vec<Vec<f64>> = b
        .depths
        .iter()
        .map(|d| sample_targets(d.data(), d.valid(), train.chamfer_sample_cap, &mut ChaCha8Rng::seed_from_u64(seed)))
        .collect();
    check_gradients(&params, n, h, tol, seed, |tape| Ok(loss_graph(tape, model, train, &b, &targets)?.0))
}
