//! Flow-matching regression on coupled batches, with linear learning-rate
//! warmup, parameter EMA, and best-checkpoint selection on a validation
//! metric.

use ndarray::Array2;
use rand::Rng;

use crate::coupling::{
    independent_batch, markovian_batch, naive_batch, ConditionalSource, FlowView, MediatorBins,
    PairedBatch, PriorConfig, Scheme,
};
use crate::dgp::{DgpConfig, DgpSampler, GraphVariant, Sample};
use crate::error::{Error, Result};
use crate::evalkit::{mu_ape, FlowCf};
use crate::field::{FieldKind, VectorFieldModel};
use crate::inference::OdeConfig;
use crate::nn::{AdamW, EmaParams, Params};
use crate::rng::{substream, Domain};

/// What the best checkpoint is selected on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SelectionSource {
    /// Counterfactual error of the raw parameters on the validation split.
    #[default]
    ValMuApe,
    /// Flow-matching loss of the raw parameters on validation batches
    /// (used for flows whose counterfactual error is not defined in
    /// isolation, e.g. frontdoor component flows).
    ValLoss,
    /// Flow-matching loss of the EMA parameters on validation batches.
    EmaValLoss,
}

/// Training-run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    pub scheme: Scheme,
    pub seed: u64,
    pub eval_every: u64,
    pub nfe_eval: usize,
    pub val_k_angles: usize,
    pub val_max_samples: usize,
    pub selection: SelectionSource,
}

impl TrainConfig {
    /// Desk-scale defaults: 50k steps, batch 256, AdamW at 1e-4 with 2000
    /// warmup steps, validation every 5000 steps at 50 function evaluations.
    pub fn default_desk(scheme: Scheme, seed: u64) -> Self {
        Self {
            steps: 50_000,
            batch: 256,
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 2000,
            scheme,
            seed,
            eval_every: 5000,
            nfe_eval: 50,
            val_k_angles: 16,
            val_max_samples: 256,
            selection: SelectionSource::ValMuApe,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("train.batch must be >= 1".into()));
        }
        if self.steps > 0 && self.steps <= self.warmup_steps {
            return Err(Error::Config(
                "train.steps must exceed train.warmup_steps".into(),
            ));
        }
        if self.lr <= 0.0 || !(self.beta1 < 1.0) || !(self.beta2 < 1.0) {
            return Err(Error::Config("invalid optimizer hyperparameters".into()));
        }
        Ok(())
    }
}

/// Everything a training run reads: the generative process for online
/// conditional draws, dataset rows for the dataset-backed schemes and for
/// validation, and the flow being learned.
pub struct TrainContext<'a> {
    pub dgp_config: &'a DgpConfig,
    pub train_rows: &'a [Sample],
    pub val_rows: &'a [Sample],
    pub view: FlowView,
    pub prior: PriorConfig,
}


/// One log entry; validation metric present on evaluation steps.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub val_metric: Option<f64>,
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub best: Params,
    pub last: Params,
    pub ema: Params,
    pub best_val_metric: f64,
    pub best_step: u64,
    pub log: Vec<LogRow>,
    pub diverged_at: Option<u64>,
}

impl TrainedModel {
    pub fn write_log_csv<W: std::io::Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "step,loss,val_mu_ape")?;
        for row in &self.log {
            match row.val_metric {
                Some(v) => writeln!(out, "{},{:.16e},{:.16e}", row.step, row.loss, v)?,
                None => writeln!(out, "{},{:.16e},", row.step, row.loss)?,
            }
        }
        Ok(())
    }
}

/// Flow-matching loss and gradients on a coupled batch: regress the field
/// at `x_t = (1−t)u + tx` onto the interpolation velocity `x − u`.
pub fn fm_loss(
    model: &VectorFieldModel,
    batch: &PairedBatch,
    t_draws: &[f64],
) -> Result<(f64, Params)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument {
            op: "fm_loss",
            msg: "batch is empty".into(),
        });
    }
    if t_draws.len() != batch.len() {
        return Err(Error::ShapeMismatch {
            op: "fm_loss",
            expected: format!("{} time draws", batch.len()),
            got: format!("{}", t_draws.len()),
        });
    }
    let m = batch.len();
    let d = batch.u.ncols();
    let mut x_t = Array2::zeros((m, d));
    let mut target = Array2::zeros((m, d));
    for i in 0..m {
        let t = t_draws[i];
        for c in 0..d {
            x_t[[i, c]] = (1.0 - t) * batch.u[[i, c]] + t * batch.x[[i, c]];
            target[[i, c]] = batch.x[[i, c]] - batch.u[[i, c]];
        }
    }
    model.regression_grads(&x_t, &batch.pa, t_draws, &target)
}

fn draw_batch<R: Rng>(
    cfg: &TrainConfig,
    ctx: &TrainContext,
    source: &ConditionalSource,
    rng: &mut R,
) -> Result<PairedBatch> {
    let batch = match cfg.scheme {
        Scheme::MarkovianOt => markovian_batch(rng, cfg.batch, source, &ctx.prior)?.0,
        Scheme::NaiveOt => naive_batch(rng, cfg.batch, ctx.train_rows, ctx.view, &ctx.prior)?.0,
        Scheme::Independent => {
            independent_batch(rng, cfg.batch, ctx.train_rows, ctx.view, &ctx.prior)?.0
        }
    };
    Ok(batch)
}

/// Validation flow-matching loss on deterministic independent batches.
fn val_loss(model: &VectorFieldModel, cfg: &TrainConfig, ctx: &TrainContext) -> Result<f64> {
    let mut rng = substream(cfg.seed, Domain::Validation, 0);
    let rows: Vec<Sample> = ctx
        .val_rows
        .iter()
        .take(cfg.val_max_samples.max(cfg.batch))
        .copied()
        .collect();
    let (batch, _) = independent_batch(&mut rng, cfg.batch.min(rows.len()), &rows, ctx.view, &ctx.prior)?;
    let t: Vec<f64> = (0..batch.len()).map(|_| rng.random::<f64>()).collect();
    let (loss, _) = fm_loss(model, &batch, &t)?;
    Ok(loss)
}

fn val_metric(model: &VectorFieldModel, cfg: &TrainConfig, ctx: &TrainContext) -> Result<f64> {
    match cfg.selection {
        SelectionSource::ValMuApe => {
            let subset: Vec<Sample> = ctx
                .val_rows
                .iter()
                .take(cfg.val_max_samples)
                .copied()
                .collect();
            let predictor = FlowCf::new(model, ctx.view, OdeConfig::euler(cfg.nfe_eval));
            mu_ape(&predictor, &subset, cfg.val_k_angles)
        }
        SelectionSource::ValLoss => val_loss(model, cfg, ctx),
        SelectionSource::EmaValLoss => val_loss(model, cfg, ctx),
    }
}

/// Runs the training loop. Deterministic given `(config, seed)`: every
/// random draw comes from a counter-based substream keyed by the step.
pub fn train(cfg: &TrainConfig, ctx: &TrainContext, mut model: VectorFieldModel) -> Result<TrainedModel> {
    cfg.validate()?;
    if matches!(cfg.selection, SelectionSource::ValMuApe)
        && !matches!(ctx.view, FlowView::XGivenPa | FlowView::XGivenPaZ)
    {
        return Err(Error::Config(
            "mu-APE selection needs a single-flow conditioning view".into(),
        ));
    }
    let bins = match (cfg.scheme, ctx.view) {
        (Scheme::MarkovianOt, FlowView::XGivenM) => {
            Some(MediatorBins::build(ctx.train_rows, 64)?)
        }
        _ => None,
    };
    let sampler = DgpSampler::new(ctx.dgp_config);
    let source = match (cfg.scheme, ctx.view) {
        (Scheme::MarkovianOt, FlowView::XGivenM) => ConditionalSource::MediatorBins {
            rows: ctx.train_rows,
            bins: bins.as_ref().expect("bins built above"),
        },
        _ => ConditionalSource::Simulator(&sampler),
    };

    let mut opt = AdamW::with_hyper(model.params.len(), cfg.lr, cfg.weight_decay);
    opt.beta1 = cfg.beta1;
    opt.beta2 = cfg.beta2;
    opt.eps = cfg.eps;
    let mut ema = EmaParams::new(&model.params);
    let mut log = Vec::with_capacity(cfg.steps as usize);
    let mut best = model.params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_step = 0u64;
    let mut diverged_at = None;

    for step in 0..cfg.steps {
        let mut batch_rng = substream(cfg.seed, Domain::TrainBatch, step);
        let batch = draw_batch(cfg, ctx, &source, &mut batch_rng)?;
        let mut t_rng = substream(cfg.seed, Domain::TrainTime, step);
        let t: Vec<f64> = (0..batch.len()).map(|_| t_rng.random::<f64>()).collect();

        let (loss, grads) = match fm_loss(&model, &batch, &t) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => {
                diverged_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            diverged_at = Some(step);
            break;
        }

        let warmup = cfg.warmup_steps.max(1) as f64;
        opt.lr = cfg.lr * (((step + 1) as f64) / warmup).min(1.0);
        if opt.step(&mut model.params, &grads).is_err() {
            diverged_at = Some(step);
            break;
        }
        ema.update(&model.params);

        let mut row = LogRow {
            step: step + 1,
            loss,
            val_metric: None,
        };
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            let candidate = match cfg.selection {
                SelectionSource::EmaValLoss => model.with_params(ema.shadow.clone()),
                _ => model.clone(),
            };
            let metric = val_metric(&candidate, cfg, ctx)?;
            row.val_metric = Some(metric);
            if metric < best_val {
                best_val = metric;
                best = model.params.clone();
                best_step = step + 1;
            }
        }
        log.push(row);
    }

    if best_val == f64::INFINITY {
        // No evaluation happened; the final parameters stand in as best.
        best = model.params.clone();
    }
    Ok(TrainedModel {
        best,
        last: model.params.clone(),
        ema: ema.shadow,
        best_val_metric: best_val,
        best_step,
        log,
        diverged_at,
    })
}

/// View and model dimensions implied by a graph variant for the main
/// outcome flow.
pub fn outcome_view(graph: GraphVariant) -> FlowView {
    match graph {
        GraphVariant::Markovian => FlowView::XGivenPa,
        GraphVariant::Backdoor => FlowView::XGivenPaZ,
        GraphVariant::Frontdoor => FlowView::XGivenM,
    }
}

/// Builds a fresh model for a view with the given architecture.
pub fn init_model(
    kind: FieldKind,
    view: FlowView,
    hidden_dim: usize,
    n_blocks: usize,
    seed: u64,
) -> Result<VectorFieldModel> {
    let mut rng = substream(seed, Domain::Init, 0);
    VectorFieldModel::init(kind, 2, view.pa_dim(), hidden_dim, n_blocks, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{gen_dataset, PriorVariant, Split};

    fn quick_ctx(config: &DgpConfig, ds: &crate::dgp::Dataset) -> (Vec<Sample>, Vec<Sample>) {
        let _ = config;
        (ds.split_vec(Split::Train), ds.split_vec(Split::Val))
    }

    fn small_cfg(steps: u64, scheme: Scheme, seed: u64) -> TrainConfig {
        TrainConfig {
            steps,
            batch: 16,
            warmup_steps: if steps > 10 { steps / 10 } else { 0 },
            eval_every: if steps >= 20 { steps / 2 } else { 0 },
            nfe_eval: 4,
            val_k_angles: 4,
            val_max_samples: 32,
            ..TrainConfig::default_desk(scheme, seed)
        }
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let config =
            DgpConfig::new(GraphVariant::Markovian, PriorVariant::Original, 300, 1).unwrap();
        let ds = gen_dataset(&config);
        let (train_rows, val_rows) = quick_ctx(&config, &ds);
        let ctx = TrainContext {
            dgp_config: &config,
            train_rows: &train_rows,
            val_rows: &val_rows,
            view: FlowView::XGivenPa,
            prior: PriorConfig::uniform(2),
        };
        let model = init_model(FieldKind::Direct, FlowView::XGivenPa, 16, 1, 7).unwrap();
        let init = model.params.clone();
        let cfg = small_cfg(0, Scheme::Independent, 7);
        let out = train(&cfg, &ctx, model).unwrap();
        assert_eq!(out.last, init);
        assert_eq!(out.best, init);
        assert_eq!(out.ema, init);
        assert!(out.log.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let config =
            DgpConfig::new(GraphVariant::Markovian, PriorVariant::Original, 300, 2).unwrap();
        let ds = gen_dataset(&config);
        let (train_rows, val_rows) = quick_ctx(&config, &ds);
        let ctx = TrainContext {
            dgp_config: &config,
            train_rows: &train_rows,
            val_rows: &val_rows,
            view: FlowView::XGivenPa,
            prior: PriorConfig::uniform(2),
        };
        let cfg = small_cfg(40, Scheme::MarkovianOt, 3);
        let run = || {
            let model = init_model(FieldKind::Direct, FlowView::XGivenPa, 16, 1, 3).unwrap();
            train(&cfg, &ctx, model).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.last, b.last);
        assert_eq!(a.ema, b.ema);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn perfect_regression_pair_contributes_zero_loss() {
        // A pair with u = x has target velocity zero; forcing the model
        // output to the target via a zero-field gives zero loss.
        let mut model = init_model(FieldKind::Direct, FlowView::XGivenPa, 8, 1, 5).unwrap();
        let spec = model.params.spec;
        model.params.data[spec.head_w()].fill(0.0);
        model.params.data[spec.head_b()].fill(0.0);
        let m = 4;
        let u = Array2::from_elem((m, 2), 0.7);
        let batch = PairedBatch {
            x: u.clone(),
            pa: Array2::from_elem((m, 1), 1.0),
            u,
        };
        let (loss, grads) = fm_loss(&model, &batch, &vec![0.3; m]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.data.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn smoothed_loss_decreases_over_early_training() {
        // Window-100 means over the first 1k steps of the default schedule
        // (warmup 2000 still ramping), strictly decreasing, across 3 seeds.
        // Independent coupling keeps per-batch loss variance low enough for
        // the strict comparison; OT batches condition on one parent draw
        // per step and their windowed loss is noisier.
        let config =
            DgpConfig::new(GraphVariant::Markovian, PriorVariant::Original, 2000, 5).unwrap();
        let ds = gen_dataset(&config);
        let (train_rows, val_rows) = quick_ctx(&config, &ds);
        let ctx = TrainContext {
            dgp_config: &config,
            train_rows: &train_rows,
            val_rows: &val_rows,
            view: FlowView::XGivenPa,
            prior: PriorConfig::uniform(2),
        };
        for seed in [1u64, 2, 3] {
            let cfg = TrainConfig {
                steps: 2001,
                batch: 256,
                eval_every: 0,
                ..TrainConfig::default_desk(Scheme::Independent, seed)
            };
            let model = init_model(FieldKind::Direct, FlowView::XGivenPa, 256, 3, seed).unwrap();
            let out = train(&cfg, &ctx, model).unwrap();
            let losses: Vec<f64> = out.log.iter().map(|r| r.loss).take(1000).collect();
            assert_eq!(losses.len(), 1000);
            let window_means: Vec<f64> = losses
                .chunks(100)
                .map(|w| w.iter().sum::<f64>() / w.len() as f64)
                .collect();
            for pair in window_means.windows(2) {
                assert!(
                    pair[1] < pair[0],
                    "seed {seed}: smoothed loss not decreasing: {window_means:?}"
                );
            }
        }
    }

    #[test]
    fn best_checkpoint_reproduces_logged_metric() {
        let config =
            DgpConfig::new(GraphVariant::Markovian, PriorVariant::Original, 500, 6).unwrap();
        let ds = gen_dataset(&config);
        let (train_rows, val_rows) = quick_ctx(&config, &ds);
        let ctx = TrainContext {
            dgp_config: &config,
            train_rows: &train_rows,
            val_rows: &val_rows,
            view: FlowView::XGivenPa,
            prior: PriorConfig::uniform(2),
        };
        let cfg = small_cfg(60, Scheme::MarkovianOt, 11);
        let model = init_model(FieldKind::Direct, FlowView::XGivenPa, 16, 1, 11).unwrap();
        let out = train(&cfg, &ctx, model.clone()).unwrap();

        let logged: Vec<f64> = out.log.iter().filter_map(|r| r.val_metric).collect();
        assert!(!logged.is_empty());
        let best_logged = logged.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_val_metric, best_logged);
        // Invariant: best is no worse than every logged validation value.
        assert!(logged.iter().all(|&v| out.best_val_metric <= v));

        // Re-evaluating the stored best parameters reproduces the metric.
        let best_model = model.with_params(out.best.clone());
        let again = val_metric(&best_model, &cfg, &ctx).unwrap();
        assert!((again - out.best_val_metric).abs() < 1e-9);
    }

    #[test]
    fn divergence_aborts_with_last_good_checkpoint() {
        let config =
            DgpConfig::new(GraphVariant::Markovian, PriorVariant::Original, 300, 8).unwrap();
        let ds = gen_dataset(&config);
        let (train_rows, val_rows) = quick_ctx(&config, &ds);
        let ctx = TrainContext {
            dgp_config: &config,
            train_rows: &train_rows,
            val_rows: &val_rows,
            view: FlowView::XGivenPa,
            prior: PriorConfig::uniform(2),
        };
        // An absurd learning rate blows the parameters up within a few
        // steps; the loop must stop with the divergence recorded instead of
        // propagating non-finite values.
        let cfg = TrainConfig {
            steps: 200,
            batch: 8,
            lr: 1e18,
            warmup_steps: 0,
            eval_every: 0,
            ..small_cfg(200, Scheme::Independent, 9)
        };
        let model = init_model(FieldKind::Direct, FlowView::XGivenPa, 16, 1, 9).unwrap();
        let out = train(&cfg, &ctx, model).unwrap();
        assert!(out.diverged_at.is_some());
        assert!(out.last.all_finite());
    }
}
