use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::artifacts::{
    write_atomic, Environment, EpochSummary, LossLog, LossRecord, RunManifest, RunStatus, BEST_CHECKPOINT,
    LAST_CHECKPOINT,
};
use super::config::ExperimentConfig;
use super::{fit_stats, load_splits, window_matrices};
use crate::data::normalize;
use crate::error::{Error, Result};
use crate::nn::{Adam, ExponentialLr, Gradients, Graph};
use crate::objectives::{init_center, window_objective, Center, GammaMode, LossComponents, LossConfig, Phase};
use crate::scorenet::ScoreNet;
use crate::sde::NoiseSchedule;
use crate::solver::draw_noise;

pub struct TrainOutcome {
    pub manifest: RunManifest,
    pub model: ScoreNet,
    pub log: Vec<LossRecord>,
}

/// Per-window randomness for one batch, drawn before any parallel work.
struct Draw {
    t: f64,
    noise: Array2<f64>,
    dropout_seed: u64,
}

fn window_grads(
    model: &ScoreNet,
    x0: &Array2<f64>,
    draw: &Draw,
    center: &Center,
    loss: &LossConfig,
    rec_t_max: f64,
    phase: Phase,
) -> Result<(Gradients, LossComponents)> {
    let batch = model.schedule().perturb(x0, draw.t, &draw.noise)?;
    let mut g = Graph::new(model.store());
    let xt = g.constant(batch.xt.clone());
    let vars = if model.config().dropout > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(draw.dropout_seed);
        model.forward_graph(&mut g, xt, batch.t, Some(&mut rng))?
    } else {
        model.forward_graph::<ChaCha8Rng>(&mut g, xt, batch.t, None)?
    };
    let obj = window_objective(&mut g, vars, &batch, center, loss, rec_t_max, phase)?;
    Ok((g.backward(obj.loss), obj.parts))
}

/// Mean gradient and mean logged parts over a batch. Windows run in
/// parallel; the reduction is in batch order, so results do not depend on
/// the thread count.
fn batch_grads(
    model: &ScoreNet,
    windows: &[&Array2<f64>],
    draws: &[Draw],
    center: &Center,
    loss: &LossConfig,
    rec_t_max: f64,
    phase: Phase,
) -> Result<(Gradients, LossComponents)> {
    let per: Vec<Result<(Gradients, LossComponents)>> = windows
        .par_iter()
        .zip(draws.par_iter())
        .map(|(x0, d)| window_grads(model, x0, d, center, loss, rec_t_max, phase))
        .collect();
    let k = windows.len() as f64;
    let mut grads = Gradients::zeros_like(model.store());
    let mut parts = LossComponents::default();
    for r in per {
        let (g, p) = r?;
        grads.accumulate(&g, 1.0 / k);
        parts.dsm += p.dsm / k;
        parts.rec += p.rec / k;
        parts.vm += p.vm / k;
        parts.gamma += p.gamma / k;
        parts.total += p.total / k;
    }
    Ok((grads, parts))
}

fn record(step: usize, epoch: usize, phase: Phase, p: &LossComponents) -> LossRecord {
    LossRecord { step, epoch, phase, dsm: p.dsm, rec: p.rec, vm: p.vm, gamma: p.gamma, total: p.total }
}

fn center_rows(c: &Center) -> Vec<Vec<f64>> {
    c.c.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Trains one model and writes its run directory.
pub fn train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let splits = load_splits(&cfg.data)?;
    let stats = fit_stats(&cfg.data, &splits.train);
    let train_series = normalize(&splits.train, &stats)?;

    let n = cfg.window.n;
    let (mut windows, _) = window_matrices(&train_series, n, cfg.window.train_stride())?;
    let keep = ((windows.len() as f64 * cfg.train.fraction).round() as usize).clamp(1, windows.len());
    windows.truncate(keep);

    let seed = cfg.train.seed;
    let schedule: NoiseSchedule = cfg.sde;
    let mut model = ScoreNet::new(cfg.scorenet.network(n, train_series.channels(), seed), schedule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = init_center(&model, &windows, &schedule, &mut rng)?;

    let mut adam = Adam::new(model.store(), cfg.optim.lr);
    adam.beta1 = cfg.optim.beta1;
    adam.beta2 = cfg.optim.beta2;
    adam.eps = cfg.optim.eps;
    adam.clip_norm = cfg.optim.clip_norm;
    let sched = ExponentialLr { initial: cfg.optim.lr, gamma: cfg.optim.lr_decay };
    let rec_t_max = cfg.loss.rec_t_max.unwrap_or(cfg.solver.t_rec);
    // Without Γ the two minimax phases optimize the same loss.
    let phases: &[Phase] = match cfg.loss.gamma_mode {
        GammaMode::Minimax if !cfg.loss.enable.gamma => &[Phase::A],
        GammaMode::Minimax => &[Phase::A, Phase::B],
        GammaMode::Literal => &[Phase::Literal],
    };

    let mut manifest = RunManifest {
        format_version: RunManifest::FORMAT_VERSION,
        status: RunStatus::Running,
        config: cfg.clone(),
        network: model.config().clone(),
        normalization: stats,
        center: center_rows(&center),
        param_shapes: model.store().shapes(),
        n_train_windows: windows.len(),
        steps: 0,
        best_epoch: None,
        best_loss: None,
        epochs: Vec::new(),
        environment: Environment::current(),
    };
    manifest.write(out)?;
    let mut log = LossLog::create(out)?;
    let mut history = Vec::new();

    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut step = 0usize;
    let mut bad_epochs = 0usize;
    let max_steps = cfg.train.max_steps.unwrap_or(usize::MAX);
    'epochs: for epoch in 0..cfg.train.epochs {
        adam.lr = sched.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        let mut epoch_batches = 0usize;
        for chunk in order.chunks(cfg.optim.batch_size) {
            if step >= max_steps {
                manifest.status = RunStatus::StepLimit;
                break 'epochs;
            }
            let xs: Vec<&Array2<f64>> = chunk.iter().map(|&i| &windows[i]).collect();
            let draws: Vec<Draw> = xs
                .iter()
                .map(|x| Draw {
                    t: schedule.sample_time(&mut rng),
                    noise: draw_noise(&mut rng, x.dim()),
                    dropout_seed: rand::Rng::random(&mut rng),
                })
                .collect();
            for &phase in phases {
                let (grads, parts) = batch_grads(&model, &xs, &draws, &center, &cfg.loss, rec_t_max, phase)?;
                step += 1;
                if !parts.total.is_finite() || !grads.is_finite() {
                    manifest.status = RunStatus::Diverged;
                    manifest.steps = step;
                    manifest.write(out)?;
                    log::error!("non-finite loss at step {step}; keeping last good checkpoint");
                    return Err(Error::Diverged { step });
                }
                let rec = record(step, epoch, phase, &parts);
                log.push(&rec)?;
                history.push(rec);
                if phase != Phase::B {
                    epoch_total += parts.total;
                    epoch_batches += 1;
                }
                adam.step(model.store_mut(), &grads);
            }
        }
        let mean_total = epoch_total / epoch_batches.max(1) as f64;
        manifest.epochs.push(EpochSummary { epoch, lr: adam.lr, mean_total, steps: step });
        manifest.steps = step;
        let bytes = model.store().to_bytes();
        write_atomic(&out.join(LAST_CHECKPOINT), &bytes)?;
        if manifest.best_loss.is_none_or(|b| mean_total < b) {
            manifest.best_loss = Some(mean_total);
            manifest.best_epoch = Some(epoch);
            write_atomic(&out.join(BEST_CHECKPOINT), &bytes)?;
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
        }
        log::info!("epoch {epoch}: lr {:.3e} mean loss {mean_total:.6} ({step} steps)", adam.lr);
        manifest.write(out)?;
        if bad_epochs >= cfg.train.patience.max(1) {
            manifest.status = RunStatus::EarlyStopped;
            break;
        }
    }
    if manifest.status == RunStatus::StepLimit && manifest.best_epoch.is_none() {
        // Step cap hit inside the first epoch: keep what was learned.
        let bytes = model.store().to_bytes();
        write_atomic(&out.join(LAST_CHECKPOINT), &bytes)?;
        write_atomic(&out.join(BEST_CHECKPOINT), &bytes)?;
        manifest.best_epoch = Some(0);
        manifest.steps = step;
    } else if manifest.status == RunStatus::StepLimit {
        write_atomic(&out.join(LAST_CHECKPOINT), &model.store().to_bytes())?;
        manifest.steps = step;
    }
    if manifest.status == RunStatus::Running {
        manifest.status = RunStatus::Complete;
    }
    manifest.write(out)?;
    Ok(TrainOutcome { manifest, model, log: history })
}
