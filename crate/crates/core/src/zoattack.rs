//! Black-box reprogramming through score queries: the one-sided averaged
//! random-direction gradient estimator, the query-driven training loop with
//! account rotation, and fine-tuning from a surrogate program.

use rand::Rng;
use rand_distr::StandardNormal;
use reprog_kernel::Tensor;

use crate::data::{LabeledDataset, PaddingSpec};
use crate::error::{config_err, CoreError, Result};
use crate::models::{AccountId, QueryChannel, QueryObserver};
use crate::reprogram::{
    epoch_batches, sample_loss, AdversarialProgram, FocalLoss, LabelMapping, LossCurve, ReprogramConfig,
};
use crate::{seeded_rng, streams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZoConfig {
    /// Random directions per estimate.
    pub q: usize,
    /// Smoothing radius.
    pub mu: f64,
    /// Scaling; `None` means the input dimension `d*d*c`.
    pub b: Option<f64>,
    pub seed: u64,
    /// Project directions onto the program frame before normalising.
    pub mask_directions: bool,
}

impl Default for ZoConfig {
    fn default() -> Self {
        Self {
            q: 30,
            mu: 0.1,
            b: None,
            seed: 0,
            mask_directions: false,
        }
    }
}

impl ZoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q == 0 {
            return config_err("q must be >= 1");
        }
        if !(self.mu.is_finite() && self.mu > 0.0) {
            return config_err(format!("smoothing mu = {} must be > 0", self.mu));
        }
        if let Some(b) = self.b {
            if !(b.is_finite() && b > 0.0) {
                return config_err(format!("scaling b = {b} must be > 0"));
            }
        }
        Ok(())
    }

    pub fn scaling(&self, dim: usize) -> f64 {
        self.b.unwrap_or(dim as f64)
    }
}

/// Attacker-side accounting for one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AttackBudget {
    pub accounts_used: usize,
    pub queries: u64,
    pub detections: u64,
}

/// What a query was issued for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryPurpose {
    Baseline,
    Direction,
    Eval,
}

impl QueryPurpose {
    pub fn name(self) -> &'static str {
        match self {
            QueryPurpose::Baseline => "baseline",
            QueryPurpose::Direction => "direction",
            QueryPurpose::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub query_index: u64,
    pub account: AccountId,
    pub epoch: usize,
    /// Batch index within the epoch; `None` for end-of-epoch evaluation.
    pub batch: Option<usize>,
    pub purpose: QueryPurpose,
    pub loss: f64,
}

fn normalized(mut v: Vec<f64>) -> Tensor {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    Tensor::vector(v).expect("finite unit vector")
}

fn draw_direction(dim: usize, mask: Option<&[f64]>, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Some(m) = mask {
            v.iter_mut().zip(m).for_each(|(x, m)| *x *= m);
        }
        if v.iter().any(|&x| x != 0.0) {
            return v;
        }
    }
}

/// `q` i.i.d. directions uniform on the unit sphere of `R^dim`.
pub fn sample_unit_directions(dim: usize, q: usize, seed: u64) -> Result<Vec<Tensor>> {
    if dim == 0 {
        return config_err("direction dimension must be >= 1");
    }
    let mut rng = seeded_rng(seed, streams::DIRECTIONS);
    Ok((0..q)
        .map(|_| normalized(draw_direction(dim, None, &mut rng)))
        .collect())
}

/// `(b / (q mu)) * sum_j (f(x + mu u_j) - f(x)) u_j` from precomputed values.
pub fn zo_combine(
    base: f64,
    perturbed: &[f64],
    directions: &[Tensor],
    mu: f64,
    b: f64,
) -> Result<Tensor> {
    if perturbed.len() != directions.len() || directions.is_empty() {
        return Err(CoreError::InvalidInput(
            "one loss value per direction required".into(),
        ));
    }
    let scale = b / (directions.len() as f64 * mu);
    let mut g = Tensor::zeros(directions[0].dims());
    for (f, u) in perturbed.iter().zip(directions) {
        g.axpy(scale * (f - base), u)?;
    }
    Ok(g)
}

/// Estimator over an arbitrary scalar function, for checks that do not
/// go through a classifier.
pub fn zo_estimate_fn(
    f: impl Fn(&Tensor) -> f64,
    x: &Tensor,
    cfg: &ZoConfig,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    cfg.validate()?;
    let dirs: Vec<Tensor> = (0..cfg.q)
        .map(|_| normalized(draw_direction(x.len(), None, rng)))
        .collect();
    let base = f(x);
    let vals: Vec<f64> = dirs
        .iter()
        .map(|u| {
            let mut p = x.data().to_vec();
            p.iter_mut().zip(u.data()).for_each(|(a, b)| *a += cfg.mu * b);
            f(&Tensor::new(x.dims().to_vec(), p).expect("finite"))
        })
        .collect();
    let g = zo_combine(base, &vals, &dirs, cfg.mu, cfg.scaling(x.len()))?;
    Ok(g.reshape(x.dims().to_vec())?)
}

/// Issues queries through a channel, rotating to a fresh account whenever
/// the current one gets blocked.
struct Querier<'c, 'm, O: QueryObserver> {
    channel: &'c mut QueryChannel<'m, O>,
    accounts: &'c [AccountId],
    current: usize,
    budget: AttackBudget,
    trace: Option<Vec<TraceRow>>,
    /// Account that answered each query of the latest `query` call.
    answered_by: Vec<AccountId>,
}

impl<'c, 'm, O: QueryObserver> Querier<'c, 'm, O> {
    fn new(channel: &'c mut QueryChannel<'m, O>, accounts: &'c [AccountId], trace: bool) -> Result<Self> {
        if accounts.is_empty() {
            return config_err("black-box attack needs at least one account");
        }
        Ok(Self {
            channel,
            accounts,
            current: 0,
            budget: AttackBudget::default(),
            trace: trace.then(Vec::new),
            answered_by: Vec::new(),
        })
    }

    /// Scores for every input, in order; `Err(AccountsExhausted)` once no
    /// usable account remains.
    fn query(&mut self, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(xs.len());
        self.answered_by.clear();
        while out.len() < xs.len() {
            let Some(&account) = self.accounts.get(self.current) else {
                return Err(CoreError::AccountsExhausted(self.accounts.len()));
            };
            if self.channel.is_blocked(account) {
                self.current += 1;
                continue;
            }
            self.budget.accounts_used = self.budget.accounts_used.max(self.current + 1);
            let before = self.channel.counters(account);
            let answer = self.channel.predict_batch(account, &xs[out.len()..])?;
            let after = self.channel.counters(account);
            self.budget.queries += after.queries - before.queries;
            self.budget.detections += after.detections - before.detections;
            if self.trace.is_some() {
                self.answered_by
                    .extend(std::iter::repeat_n(account, answer.scores.len()));
            }
            out.extend(answer.scores);
            if answer.blocked {
                self.current += 1;
            }
        }
        Ok(out)
    }

    fn log(&mut self, rows: impl Iterator<Item = (usize, Option<usize>, QueryPurpose, f64)>) {
        let Some(trace) = self.trace.as_mut() else {
            return;
        };
        for ((epoch, batch, purpose, loss), &account) in rows.zip(&self.answered_by) {
            trace.push(TraceRow {
                query_index: trace.len() as u64,
                account,
                epoch,
                batch,
                purpose,
                loss,
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlackBoxConfig {
    pub reprogram: ReprogramConfig,
    pub zo: ZoConfig,
    /// Keep a per-query trace (memory grows with the query count).
    pub trace: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlackBoxOutcome {
    pub program: AdversarialProgram,
    pub budget: AttackBudget,
    pub curve: LossCurve,
    /// Every account was blocked before the schedule finished; `program`
    /// is the best one found so far.
    pub aborted: bool,
    pub trace: Vec<TraceRow>,
}

fn programmed(x: &Tensor, delta: &Tensor, spec: &PaddingSpec) -> Result<Tensor> {
    Ok(spec.pad(x)?.add(delta)?)
}

/// Query inputs for a set of base points: per base, the base itself first,
/// then its `q` perturbations; also the directions used.
fn estimate_inputs(
    bases: Vec<Tensor>,
    mask: Option<&[f64]>,
    zo: &ZoConfig,
    rng: &mut impl Rng,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let mut inputs = Vec::with_capacity(bases.len() * (zo.q + 1));
    let mut dirs = Vec::with_capacity(bases.len() * zo.q);
    for base in bases {
        let dims = base.dims().to_vec();
        let start = inputs.len();
        inputs.push(base);
        for _ in 0..zo.q {
            let u = normalized(draw_direction(dims.iter().product(), mask, rng));
            let mut p = inputs[start].data().to_vec();
            p.iter_mut().zip(u.data()).for_each(|(a, b)| *a += zo.mu * b);
            inputs.push(Tensor::new(dims.clone(), p)?);
            dirs.push(u);
        }
    }
    Ok((inputs, dirs))
}

/// Estimate of the gradient of the sample loss w.r.t. the programmed input
/// `x + delta`, from exactly `q + 1` queries on `account`.
#[allow(clippy::too_many_arguments)]
pub fn zo_estimate_gradient<O: QueryObserver>(
    channel: &mut QueryChannel<'_, O>,
    account: AccountId,
    x: &Tensor,
    prog: &AdversarialProgram,
    mapping: &LabelMapping,
    y: usize,
    zo: &ZoConfig,
    focal: &FocalLoss,
    spec: &PaddingSpec,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    zo.validate()?;
    let mask = zo.mask_directions.then(|| prog.mask().data());
    let base = programmed(x, &prog.delta(), spec)?;
    let (inputs, dirs) = estimate_inputs(vec![base], mask, zo, rng)?;
    let answer = channel.predict_batch(account, &inputs)?;
    if answer.scores.len() < inputs.len() {
        return Err(CoreError::Blocked(account));
    }
    let losses = answer
        .scores
        .iter()
        .map(|s| sample_loss(s, mapping, y, focal))
        .collect::<Result<Vec<_>>>()?;
    let g = zo_combine(losses[0], &losses[1..], &dirs, zo.mu, zo.scaling(prog.w().len()))?;
    Ok(g.reshape(prog.dims().to_vec())?)
}

/// Estimates for one minibatch with a single channel round trip. Returns
/// the batch-mean estimate.
#[allow(clippy::too_many_arguments)]
fn batch_estimate<O: QueryObserver>(
    querier: &mut Querier<'_, '_, O>,
    prog: &AdversarialProgram,
    samples: &[(&Tensor, usize)],
    mapping: &LabelMapping,
    cfg: &BlackBoxConfig,
    spec: &PaddingSpec,
    rng: &mut impl Rng,
    position: (usize, usize),
) -> Result<Tensor> {
    let zo = &cfg.zo;
    let delta = prog.delta();
    let dim = delta.len();
    let mask = zo.mask_directions.then(|| prog.mask().data());
    let bases = samples
        .iter()
        .map(|(x, _)| programmed(x, &delta, spec))
        .collect::<Result<Vec<_>>>()?;
    let (inputs, dirs) = estimate_inputs(bases, mask, zo, rng)?;
    let scores = querier.query(&inputs)?;
    let mut mean = Tensor::zeros(&[dim]);
    let mut logged = Vec::with_capacity(inputs.len());
    for (i, (_, y)) in samples.iter().enumerate() {
        let group = &scores[i * (zo.q + 1)..(i + 1) * (zo.q + 1)];
        let losses = group
            .iter()
            .map(|s| sample_loss(s, mapping, *y, &cfg.reprogram.focal))
            .collect::<Result<Vec<_>>>()?;
        let g = zo_combine(
            losses[0],
            &losses[1..],
            &dirs[i * zo.q..(i + 1) * zo.q],
            zo.mu,
            zo.scaling(dim),
        )?;
        mean.axpy(1.0 / samples.len() as f64, &g)?;
        logged.push((position.0, Some(position.1), QueryPurpose::Baseline, losses[0]));
        logged.extend(
            losses[1..]
                .iter()
                .map(|&l| (position.0, Some(position.1), QueryPurpose::Direction, l)),
        );
    }
    querier.log(logged.into_iter());
    Ok(mean.reshape(prog.dims().to_vec())?)
}

fn eval_loss<O: QueryObserver>(
    querier: &mut Querier<'_, '_, O>,
    prog: &AdversarialProgram,
    train: &LabeledDataset,
    mapping: &LabelMapping,
    cfg: &BlackBoxConfig,
    spec: &PaddingSpec,
    epoch: usize,
) -> Result<f64> {
    let delta = prog.delta();
    let mut total = 0.0;
    for (xs, ys) in train.samples.chunks(256).zip(train.labels.chunks(256)) {
        let inputs = xs
            .iter()
            .map(|x| programmed(x, &delta, spec))
            .collect::<Result<Vec<_>>>()?;
        let scores = querier.query(&inputs)?;
        let losses = scores
            .iter()
            .zip(ys)
            .map(|(s, &y)| sample_loss(s, mapping, y, &cfg.reprogram.focal))
            .collect::<Result<Vec<_>>>()?;
        total += losses.iter().sum::<f64>();
        querier.log(losses.into_iter().map(|l| (epoch, None, QueryPurpose::Eval, l)));
    }
    Ok(total / train.len() as f64)
}

/// The white-box loop with each exact gradient replaced by the query
/// estimate; end-of-epoch training losses are also obtained by querying.
pub fn blackbox_reprogram<O: QueryObserver>(
    channel: &mut QueryChannel<'_, O>,
    accounts: &[AccountId],
    train: &LabeledDataset,
    mapping: &LabelMapping,
    cfg: &BlackBoxConfig,
    spec: &PaddingSpec,
) -> Result<BlackBoxOutcome> {
    let init = AdversarialProgram::random(spec, cfg.reprogram.seed);
    run_blackbox(channel, accounts, train, mapping, cfg, spec, init)
}

/// Black-box fine-tuning starting from a program computed elsewhere,
/// typically white-box on a surrogate classifier.
pub fn finetune_from_surrogate<O: QueryObserver>(
    surrogate: &AdversarialProgram,
    channel: &mut QueryChannel<'_, O>,
    accounts: &[AccountId],
    train: &LabeledDataset,
    mapping: &LabelMapping,
    cfg: &BlackBoxConfig,
    spec: &PaddingSpec,
) -> Result<BlackBoxOutcome> {
    run_blackbox(channel, accounts, train, mapping, cfg, spec, surrogate.clone())
}

fn run_blackbox<O: QueryObserver>(
    channel: &mut QueryChannel<'_, O>,
    accounts: &[AccountId],
    train: &LabeledDataset,
    mapping: &LabelMapping,
    cfg: &BlackBoxConfig,
    spec: &PaddingSpec,
    init: AdversarialProgram,
) -> Result<BlackBoxOutcome> {
    cfg.zo.validate()?;
    cfg.reprogram.validate(train)?;
    if init.dims() != spec.outer_dims() {
        return Err(CoreError::InvalidInput(format!(
            "program dims {:?} do not match padding {:?}",
            init.dims(),
            spec.outer_dims()
        )));
    }
    let mut querier = Querier::new(channel, accounts, cfg.trace)?;
    let mut prog = init;
    let mut best = prog.clone();
    let mut curve = LossCurve::default();
    let mut shuffle_rng = seeded_rng(cfg.reprogram.seed, streams::SHUFFLE);
    let mut dir_rng = seeded_rng(cfg.zo.seed, streams::DIRECTIONS);
    let mut aborted = false;

    'epochs: for epoch in 0..cfg.reprogram.epochs {
        for (bi, batch) in epoch_batches(train.len(), cfg.reprogram.batch, &mut shuffle_rng)
            .into_iter()
            .enumerate()
        {
            let samples: Vec<(&Tensor, usize)> = batch
                .iter()
                .map(|&i| (&train.samples[i], train.labels[i]))
                .collect();
            let g = match batch_estimate(
                &mut querier,
                &prog,
                &samples,
                mapping,
                cfg,
                spec,
                &mut dir_rng,
                (epoch, bi),
            ) {
                Err(CoreError::AccountsExhausted(_)) => {
                    aborted = true;
                    break 'epochs;
                }
                other => other?,
            };
            let dir = cfg.reprogram.update.direction(&prog, &g)?;
            prog.step(&dir, cfg.reprogram.lr)
                .map_err(|e| CoreError::Numeric(format!("program update: {e}")))?;
        }
        let loss = match eval_loss(&mut querier, &prog, train, mapping, cfg, spec, epoch) {
            Err(CoreError::AccountsExhausted(_)) => {
                aborted = true;
                break;
            }
            other => other?,
        };
        if !loss.is_finite() {
            return Err(CoreError::Numeric(format!(
                "black-box loss {loss} at epoch {epoch}"
            )));
        }
        if curve.record(loss) {
            best = prog.clone();
        }
    }
    // without any completed epoch, the latest iterate is all there is
    if curve.epochs.is_empty() {
        best = prog;
    }
    Ok(BlackBoxOutcome {
        program: best,
        budget: querier.budget,
        curve,
        aborted,
        trace: querier.trace.unwrap_or_default(),
    })
}
