//! Alternating two-phase training of the dual-domain models.
//!
//! Each step draws one timestep and one noise tensor per domain, shared
//! by both phases. Phase one updates the denoisers on the conditional
//! noise-matching loss with the translators frozen; phase two updates the
//! translators on the four-term conditional loss plus the weighted
//! cycle-consistency penalty, against the freshly updated denoisers.
//! Gradients flow *through* frozen networks without touching their
//! parameters, and each network's batch-norm running statistics advance
//! only in the phase that trains it.
//!
//! Loss reductions are per-element means (squared error and absolute
//! error), keeping magnitudes comparable across resolutions and batch
//! sizes.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::checkpoint::{read_container, write_container, ContainerHeader, TensorRecord, FORMAT_VERSION};
use crate::config::RunConfig;
use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::nets::{
    adam_state_for, apply_adam, apply_stat_updates, BoundDenoiser, BoundTranslator, Denoiser,
    Mode, ParamKind, Translator,
};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::Prng;
use crate::schedule::{q_sample, NoiseSchedule};
use crate::tensor::{Array, Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CycleNorm {
    #[default]
    L1,
    L2,
}

impl CycleNorm {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "l1" => Ok(CycleNorm::L1),
            "l2" => Ok(CycleNorm::L2),
            other => Err(Error::config(format!("unknown cycle norm {other:?} (use l1 or l2)"))),
        }
    }
}

impl std::fmt::Display for CycleNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CycleNorm::L1 => write!(f, "l1"),
            CycleNorm::L2 => write!(f, "l2"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda_cyc: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Full passes over the shorter dataset; used when `steps == 0`.
    pub epochs: usize,
    /// Absolute step budget; overrides `epochs` when nonzero.
    pub steps: usize,
    pub chain_len: usize,
    pub seed: u64,
    pub cycle_norm: CycleNorm,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_cyc: 10.0,
            batch_size: 16,
            learning_rate: 1e-5,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 1,
            steps: 0,
            chain_len: 50,
            seed: 0,
            cycle_norm: CycleNorm::L1,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_cyc < 0.0 {
            return Err(Error::config("lambda_cyc must be non-negative".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive".to_string()));
        }
        if self.chain_len == 0 {
            return Err(Error::config("chain length must be positive".to_string()));
        }
        if self.epochs == 0 && self.steps == 0 {
            return Err(Error::config("one of epochs/steps must be positive".to_string()));
        }
        self.adam().validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

// ---------------------------------------------------------------------------
// losses

/// Graph-level conditional noise predictor; implemented by the bound
/// U-Net and by closed-form stand-ins in tests.
pub trait DenoiserFn {
    fn predict_noise(&self, x_self: &Tensor, x_cond: &Tensor, t: usize) -> Result<Tensor>;
}

/// Graph-level clean-image domain map.
pub trait TranslatorFn {
    fn translate(&self, x: &Tensor) -> Result<Tensor>;
}

impl DenoiserFn for BoundDenoiser<'_> {
    fn predict_noise(&self, x_self: &Tensor, x_cond: &Tensor, t: usize) -> Result<Tensor> {
        self.predict(x_self, x_cond, t)
    }
}

impl TranslatorFn for BoundTranslator<'_> {
    fn translate(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x)
    }
}

/// Per-step draws shared by both phases: one timestep and one noise
/// tensor per domain.
#[derive(Debug, Clone)]
pub struct NoiseDraws {
    pub t_a: usize,
    pub t_b: usize,
    pub eps_a: Array,
    pub eps_b: Array,
}

/// Draw order is part of the reproducibility contract:
/// `t_a, t_b, eps_a, eps_b`.
pub fn sample_noise_draws(rng: &mut Prng, t_len: usize, shape: &[usize]) -> NoiseDraws {
    let t_a = rng.uniform_int(1, t_len);
    let t_b = rng.uniform_int(1, t_len);
    let eps_a = rng.normal_array(shape);
    let eps_b = rng.normal_array(shape);
    NoiseDraws { t_a, t_b, eps_a, eps_b }
}

#[derive(Debug, Clone)]
pub struct BoundDraws {
    pub t_a: usize,
    pub t_b: usize,
    pub eps_a: Tensor,
    pub eps_b: Tensor,
}

impl NoiseDraws {
    pub fn bind(&self, graph: &Graph) -> BoundDraws {
        BoundDraws {
            t_a: self.t_a,
            t_b: self.t_b,
            eps_a: graph.constant(self.eps_a.clone()),
            eps_b: graph.constant(self.eps_b.clone()),
        }
    }
}

/// Mean squared difference over all elements.
fn mean_sq_diff(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = a.sub(b)?;
    let n = d.numel() as f64;
    Ok(d.sum_sq().scale(1.0 / n))
}

fn cycle_penalty(norm: CycleNorm, mapped: &Tensor, original: &Tensor) -> Result<Tensor> {
    let d = mapped.sub(original)?;
    let n = d.numel() as f64;
    Ok(match norm {
        CycleNorm::L1 => d.sum_abs().scale(1.0 / n),
        CycleNorm::L2 => d.sum_sq().scale(1.0 / n),
    })
}

/// Noisy variants used by both phases. The translated image of each
/// domain is diffused at the *other* domain's timestep, reusing that
/// translated image's origin-domain noise: the translated-A image takes
/// `eps_a` at `t_b`, the translated-B image takes `eps_b` at `t_a`.
struct NoisyBatch {
    xa_t: Tensor,
    xb_t: Tensor,
    xta_t: Tensor,
    xtb_t: Tensor,
    xta_0: Tensor,
    xtb_0: Tensor,
}

fn noisy_batches<GA: TranslatorFn, GB: TranslatorFn>(
    translator_a: &GA,
    translator_b: &GB,
    batch_a: &Tensor,
    batch_b: &Tensor,
    draws: &BoundDraws,
    sched: &NoiseSchedule,
) -> Result<NoisyBatch> {
    if batch_a.shape() != batch_b.shape() {
        return Err(Error::shape(format!(
            "domain batches differ: {:?} vs {:?}",
            batch_a.shape(),
            batch_b.shape()
        )));
    }
    if draws.eps_a.shape() != batch_a.shape() || draws.eps_b.shape() != batch_b.shape() {
        return Err(Error::shape("noise draws must match batch shape".to_string()));
    }
    let xtb_0 = translator_a.translate(batch_a)?; // g^A(x^A_0)
    let xta_0 = translator_b.translate(batch_b)?; // g^B(x^B_0)
    Ok(NoisyBatch {
        xa_t: q_sample(batch_a, draws.t_a, &draws.eps_a, sched)?,
        xb_t: q_sample(batch_b, draws.t_b, &draws.eps_b, sched)?,
        xta_t: q_sample(&xta_0, draws.t_b, &draws.eps_a, sched)?,
        xtb_t: q_sample(&xtb_0, draws.t_a, &draws.eps_b, sched)?,
        xta_0,
        xtb_0,
    })
}

/// Denoiser-phase objective: each domain's network predicts its own
/// injected noise given the noised translated image of the other domain
/// as conditioning.
#[allow(clippy::too_many_arguments)]
pub fn denoising_loss<DA, DB, GA, GB>(
    denoiser_a: &DA,
    denoiser_b: &DB,
    translator_a: &GA,
    translator_b: &GB,
    batch_a: &Tensor,
    batch_b: &Tensor,
    draws: &BoundDraws,
    sched: &NoiseSchedule,
) -> Result<Tensor>
where
    DA: DenoiserFn,
    DB: DenoiserFn,
    GA: TranslatorFn,
    GB: TranslatorFn,
{
    let nb = noisy_batches(translator_a, translator_b, batch_a, batch_b, draws, sched)?;
    let term_a = mean_sq_diff(
        &draws.eps_a,
        &denoiser_a.predict_noise(&nb.xa_t, &nb.xtb_t, draws.t_a)?,
    )?;
    let term_b = mean_sq_diff(
        &draws.eps_b,
        &denoiser_b.predict_noise(&nb.xb_t, &nb.xta_t, draws.t_b)?,
    )?;
    term_a.add(&term_b)
}

/// Translator-phase objective: the four cross-conditioned noise-matching
/// terms plus the weighted cycle-consistency penalty. Returns the total
/// and the unweighted cycle term.
#[allow(clippy::too_many_arguments)]
pub fn translation_loss<DA, DB, GA, GB>(
    denoiser_a: &DA,
    denoiser_b: &DB,
    translator_a: &GA,
    translator_b: &GB,
    batch_a: &Tensor,
    batch_b: &Tensor,
    draws: &BoundDraws,
    sched: &NoiseSchedule,
    lambda_cyc: f64,
    cycle_norm: CycleNorm,
) -> Result<(Tensor, Tensor)>
where
    DA: DenoiserFn,
    DB: DenoiserFn,
    GA: TranslatorFn,
    GB: TranslatorFn,
{
    if lambda_cyc < 0.0 {
        return Err(Error::config("lambda_cyc must be non-negative".to_string()));
    }
    let nb = noisy_batches(translator_a, translator_b, batch_a, batch_b, draws, sched)?;

    let dsm = mean_sq_diff(
        &draws.eps_a,
        &denoiser_a.predict_noise(&nb.xa_t, &nb.xtb_t, draws.t_a)?,
    )?
    .add(&mean_sq_diff(
        &draws.eps_a,
        &denoiser_a.predict_noise(&nb.xta_t, &nb.xb_t, draws.t_b)?,
    )?)?
    .add(&mean_sq_diff(
        &draws.eps_b,
        &denoiser_b.predict_noise(&nb.xb_t, &nb.xta_t, draws.t_b)?,
    )?)?
    .add(&mean_sq_diff(
        &draws.eps_b,
        &denoiser_b.predict_noise(&nb.xtb_t, &nb.xa_t, draws.t_a)?,
    )?)?;

    let cycle = cycle_penalty(cycle_norm, &translator_b.translate(&nb.xtb_0)?, batch_a)?
        .add(&cycle_penalty(cycle_norm, &translator_a.translate(&nb.xta_0)?, batch_b)?)?;

    let total = dsm.add(&cycle.scale(lambda_cyc))?;
    Ok((total, cycle))
}

// ---------------------------------------------------------------------------
// train state and step

#[derive(Debug, Clone)]
pub struct TrainState {
    pub denoiser_a: Denoiser,
    pub denoiser_b: Denoiser,
    pub translator_a: Translator,
    pub translator_b: Translator,
    pub adam_den_a: AdamState,
    pub adam_den_b: AdamState,
    pub adam_tr_a: AdamState,
    pub adam_tr_b: AdamState,
    pub step: u64,
    pub rng: Prng,
}

#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub theta: f64,
    pub phi: f64,
    pub cycle: f64,
}

impl TrainState {
    /// Fresh state from a run configuration; each network is initialised
    /// from its own fork of the seed stream and the remainder becomes the
    /// per-step draw stream.
    pub fn init(run: &RunConfig) -> Result<Self> {
        run.validate()?;
        let mut root = Prng::seed_from(run.seed);
        let denoiser_a = Denoiser::init(run.denoiser_config(), &mut root.split())?;
        let denoiser_b = Denoiser::init(run.denoiser_config(), &mut root.split())?;
        let translator_a = Translator::init(run.translator_config(), &mut root.split())?;
        let translator_b = Translator::init(run.translator_config(), &mut root.split())?;
        let adam_den_a = adam_state_for(denoiser_a.store());
        let adam_den_b = adam_state_for(denoiser_b.store());
        let adam_tr_a = adam_state_for(translator_a.store());
        let adam_tr_b = adam_state_for(translator_b.store());
        Ok(TrainState {
            denoiser_a,
            denoiser_b,
            translator_a,
            translator_b,
            adam_den_a,
            adam_den_b,
            adam_tr_a,
            adam_tr_b,
            step: 0,
            rng: root,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.denoiser_a.store().all_finite()
            && self.denoiser_b.store().all_finite()
            && self.translator_a.store().all_finite()
            && self.translator_b.store().all_finite()
    }
}

fn check_batch_range(batch: &Array, name: &str) -> Result<()> {
    if batch.shape().len() != 4 {
        return Err(Error::shape(format!("{name} must be [B,C,H,W], got {:?}", batch.shape())));
    }
    const SLACK: f64 = 1e-9;
    if batch.data().iter().any(|v| !v.is_finite() || v.abs() > 1.0 + SLACK) {
        return Err(Error::contract(format!("{name} must be normalised to [-1, 1]")));
    }
    Ok(())
}

/// One full optimisation step: denoiser phase then translator phase, both
/// on the same batch and the same noise draws.
pub fn train_step(
    state: &mut TrainState,
    batch_a: &Array,
    batch_b: &Array,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
) -> Result<StepLosses> {
    cfg.validate()?;
    check_batch_range(batch_a, "batch_a")?;
    check_batch_range(batch_b, "batch_b")?;
    if sched.len() != cfg.chain_len {
        return Err(Error::config(format!(
            "schedule length {} differs from configured chain length {}",
            sched.len(),
            cfg.chain_len
        )));
    }

    let adam_cfg = cfg.adam();
    let draws = sample_noise_draws(&mut state.rng, cfg.chain_len, batch_a.shape());

    // Phase 1: denoisers train, translators frozen.
    let theta;
    {
        let graph = Graph::new();
        let ba = graph.constant(batch_a.clone());
        let bb = graph.constant(batch_b.clone());
        let bound_draws = draws.bind(&graph);
        let den_a = state.denoiser_a.bind(&graph, Mode::Train, true, true);
        let den_b = state.denoiser_b.bind(&graph, Mode::Train, true, true);
        let tr_a = state.translator_a.bind(&graph, Mode::Train, false, false);
        let tr_b = state.translator_b.bind(&graph, Mode::Train, false, false);
        let loss = denoising_loss(&den_a, &den_b, &tr_a, &tr_b, &ba, &bb, &bound_draws, sched)?;
        theta = loss.item()?;
        if !theta.is_finite() {
            return Err(Error::non_finite(format!(
                "denoising loss {theta} at step {}",
                state.step
            )));
        }
        loss.backward()?;
        let (grads_a, stats_a) = (den_a.grads(), den_a.take_stat_updates());
        let (grads_b, stats_b) = (den_b.grads(), den_b.take_stat_updates());
        drop((den_a, den_b, tr_a, tr_b));
        let momentum = state.denoiser_a.config().bn_momentum;
        apply_adam(state.denoiser_a.store_mut(), &grads_a, &mut state.adam_den_a, &adam_cfg)?;
        apply_adam(state.denoiser_b.store_mut(), &grads_b, &mut state.adam_den_b, &adam_cfg)?;
        apply_stat_updates(state.denoiser_a.store_mut(), &stats_a, momentum);
        apply_stat_updates(state.denoiser_b.store_mut(), &stats_b, momentum);
    }

    // Phase 2: translators train against the updated, frozen denoisers.
    let (phi, cycle);
    {
        let graph = Graph::new();
        let ba = graph.constant(batch_a.clone());
        let bb = graph.constant(batch_b.clone());
        let bound_draws = draws.bind(&graph);
        let den_a = state.denoiser_a.bind(&graph, Mode::Train, false, false);
        let den_b = state.denoiser_b.bind(&graph, Mode::Train, false, false);
        let tr_a = state.translator_a.bind(&graph, Mode::Train, true, true);
        let tr_b = state.translator_b.bind(&graph, Mode::Train, true, true);
        let (total, cyc) = translation_loss(
            &den_a,
            &den_b,
            &tr_a,
            &tr_b,
            &ba,
            &bb,
            &bound_draws,
            sched,
            cfg.lambda_cyc,
            cfg.cycle_norm,
        )?;
        phi = total.item()?;
        cycle = cyc.item()?;
        if !phi.is_finite() {
            return Err(Error::non_finite(format!(
                "translation loss {phi} at step {}",
                state.step
            )));
        }
        total.backward()?;
        let (grads_a, stats_a) = (tr_a.grads(), tr_a.take_stat_updates());
        let (grads_b, stats_b) = (tr_b.grads(), tr_b.take_stat_updates());
        drop((den_a, den_b, tr_a, tr_b));
        let momentum = state.translator_a.config().bn_momentum;
        apply_adam(state.translator_a.store_mut(), &grads_a, &mut state.adam_tr_a, &adam_cfg)?;
        apply_adam(state.translator_b.store_mut(), &grads_b, &mut state.adam_tr_b, &adam_cfg)?;
        apply_stat_updates(state.translator_a.store_mut(), &stats_a, momentum);
        apply_stat_updates(state.translator_b.store_mut(), &stats_b, momentum);
    }

    state.step += 1;
    Ok(StepLosses { theta, phi, cycle })
}

// ---------------------------------------------------------------------------
// epoch loop

/// Deterministic permutation of `{0..n}` for `(seed, domain, epoch)`,
/// reconstructible after a resume without replaying the draw stream.
fn epoch_permutation(seed: u64, domain: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = Prng::derive(seed, &[0x5fe1, domain, epoch]);
    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);
    perm
}

pub fn steps_per_epoch(n_a: usize, n_b: usize, batch_size: usize) -> usize {
    let n = n_a.min(n_b);
    n.div_ceil(batch_size)
}

/// Run the step loop until the configured budget, appending one metrics
/// line per step and checkpointing on the configured cadence plus a final
/// checkpoint. The state carries its own position, so calling this on a
/// loaded checkpoint resumes exactly.
pub fn train_loop(
    state: &mut TrainState,
    run: &RunConfig,
    ds_a: &ImageDataset,
    ds_b: &ImageDataset,
    sched: &NoiseSchedule,
    out_dir: Option<&Path>,
    metrics: &mut dyn Write,
) -> Result<Vec<PathBuf>> {
    let cfg = run.train_config();
    cfg.validate()?;
    if ds_a.is_empty() || ds_b.is_empty() {
        return Err(Error::config("datasets must be non-empty".to_string()));
    }
    let spe = steps_per_epoch(ds_a.len(), ds_b.len(), cfg.batch_size);
    let total_steps = if cfg.steps > 0 { cfg.steps as u64 } else { (cfg.epochs * spe) as u64 };
    let n_min = ds_a.len().min(ds_b.len());

    if state.step == 0 {
        writeln!(metrics, "step, loss_theta, loss_phi, loss_cyc")?;
    }

    let mut written = Vec::new();
    let mut cached_epoch = u64::MAX;
    let mut perm_a = Vec::new();
    let mut perm_b = Vec::new();

    while state.step < total_steps {
        let epoch = state.step / spe as u64;
        let pos = (state.step % spe as u64) as usize;
        if epoch != cached_epoch {
            perm_a = epoch_permutation(cfg.seed, 1, epoch, ds_a.len());
            perm_b = epoch_permutation(cfg.seed, 2, epoch, ds_b.len());
            cached_epoch = epoch;
        }
        let start = pos * cfg.batch_size;
        let end = (start + cfg.batch_size).min(n_min);
        let batch_a = ds_a.batch(&perm_a[start..end])?;
        let batch_b = ds_b.batch(&perm_b[start..end])?;

        let losses = train_step(state, &batch_a, &batch_b, &cfg, sched)?;
        writeln!(
            metrics,
            "{}, {:.12e}, {:.12e}, {:.12e}",
            state.step, losses.theta, losses.phi, losses.cycle
        )?;

        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every as u64 == 0 {
                let path = dir.join(format!("ckpt-{:08}.bin", state.step));
                state.save(&path, run)?;
                written.push(path);
            }
        }
    }

    if let Some(dir) = out_dir {
        let path = dir.join("ckpt-final.bin");
        state.save(&path, run)?;
        written.push(path);
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// checkpointing

const NET_PREFIXES: [&str; 4] = ["den_a", "den_b", "tr_a", "tr_b"];

impl TrainState {
    fn stores(&self) -> [&crate::nets::ParamStore; 4] {
        [
            self.denoiser_a.store(),
            self.denoiser_b.store(),
            self.translator_a.store(),
            self.translator_b.store(),
        ]
    }

    fn adams(&self) -> [&AdamState; 4] {
        [&self.adam_den_a, &self.adam_den_b, &self.adam_tr_a, &self.adam_tr_b]
    }

    /// Write all parameters, buffers, optimiser moments and the draw
    /// stream into one container, with the effective config echoed in the
    /// header.
    pub fn save(&self, path: &Path, run: &RunConfig) -> Result<()> {
        let mut records = Vec::new();
        for (prefix, store) in NET_PREFIXES.iter().zip(self.stores()) {
            for entry in store.entries() {
                records.push(TensorRecord {
                    name: format!("{prefix}/{}", entry.name),
                    value: entry.value.clone(),
                });
            }
        }
        for (prefix, (store, adam)) in
            NET_PREFIXES.iter().zip(self.stores().into_iter().zip(self.adams()))
        {
            let weights: Vec<&crate::nets::ParamEntry> = store
                .entries()
                .iter()
                .filter(|e| e.kind == ParamKind::Weight)
                .collect();
            for (entry, (m, v)) in weights
                .iter()
                .zip(adam.first_moment.iter().zip(adam.second_moment.iter()))
            {
                records.push(TensorRecord {
                    name: format!("adam/{prefix}/m/{}", entry.name),
                    value: m.clone(),
                });
                records.push(TensorRecord {
                    name: format!("adam/{prefix}/v/{}", entry.name),
                    value: v.clone(),
                });
            }
            records.push(TensorRecord {
                name: format!("adam/{prefix}/step_count"),
                value: Array::scalar(adam.step_count as f64),
            });
        }
        let header = ContainerHeader {
            version: FORMAT_VERSION,
            step: self.step,
            config_echo: run.echo(),
            rng_state: self.rng.state(),
        };
        write_container(path, &header, &records)
    }

    /// Rebuild a state from a checkpoint; the embedded config echo fully
    /// determines the architecture.
    pub fn load(path: &Path) -> Result<(TrainState, RunConfig)> {
        let (header, records) = read_container(path)?;
        let run = RunConfig::parse_str(&header.config_echo)?;
        let mut state = TrainState::init(&run)?;
        state.step = header.step;
        state.rng = Prng::from_state(&header.rng_state);

        let lookup: std::collections::HashMap<&str, &TensorRecord> =
            records.iter().map(|r| (r.name.as_str(), r)).collect();
        let mut consumed = 0usize;

        for (i, prefix) in NET_PREFIXES.iter().enumerate() {
            let store = match i {
                0 => state.denoiser_a.store_mut(),
                1 => state.denoiser_b.store_mut(),
                2 => state.translator_a.store_mut(),
                _ => state.translator_b.store_mut(),
            };
            for entry in store.entries_mut() {
                let key = format!("{prefix}/{}", entry.name);
                let rec = lookup
                    .get(key.as_str())
                    .ok_or_else(|| Error::Format(format!("checkpoint missing record {key}")))?;
                rec.value.check_same_shape(&entry.value, &key)?;
                entry.value = rec.value.clone();
                consumed += 1;
            }
        }

        for (i, prefix) in NET_PREFIXES.iter().enumerate() {
            let weight_names: Vec<String> = state.stores()[i]
                .entries()
                .iter()
                .filter(|e| e.kind == ParamKind::Weight)
                .map(|e| e.name.clone())
                .collect();
            let adam = match i {
                0 => &mut state.adam_den_a,
                1 => &mut state.adam_den_b,
                2 => &mut state.adam_tr_a,
                _ => &mut state.adam_tr_b,
            };
            for (slot, name) in weight_names.iter().enumerate() {
                for (tag, target) in [("m", &mut adam.first_moment), ("v", &mut adam.second_moment)]
                {
                    let key = format!("adam/{prefix}/{tag}/{name}");
                    let rec = lookup
                        .get(key.as_str())
                        .ok_or_else(|| Error::Format(format!("checkpoint missing record {key}")))?;
                    rec.value.check_same_shape(&target[slot], &key)?;
                    target[slot] = rec.value.clone();
                    consumed += 1;
                }
            }
            let key = format!("adam/{prefix}/step_count");
            let rec = lookup
                .get(key.as_str())
                .ok_or_else(|| Error::Format(format!("checkpoint missing record {key}")))?;
            adam.step_count = rec.value.item()? as u64;
            consumed += 1;
        }

        if consumed != records.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} unexpected records",
                records.len() - consumed
            )));
        }
        Ok((state, run))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_linear_schedule;

    /// Fixed linear denoiser `eps_hat = c_self x + c_cond cond`.
    struct ToyDenoiser {
        c_self: f64,
        c_cond: f64,
    }

    impl DenoiserFn for ToyDenoiser {
        fn predict_noise(&self, x_self: &Tensor, x_cond: &Tensor, _t: usize) -> Result<Tensor> {
            x_self.scale(self.c_self).add(&x_cond.scale(self.c_cond))
        }
    }

    /// Fixed linear translator `g(x) = k x`.
    struct ToyTranslator {
        k: f64,
    }

    impl TranslatorFn for ToyTranslator {
        fn translate(&self, x: &Tensor) -> Result<Tensor> {
            Ok(x.scale(self.k))
        }
    }

    /// Denoiser that answers with a fixed tensor (the drawn noise).
    struct EchoDenoiser {
        value: Array,
    }

    impl DenoiserFn for EchoDenoiser {
        fn predict_noise(&self, x_self: &Tensor, _x_cond: &Tensor, _t: usize) -> Result<Tensor> {
            Ok(x_self.graph().constant(self.value.clone()))
        }
    }

    struct IdentityTranslator;

    impl TranslatorFn for IdentityTranslator {
        fn translate(&self, x: &Tensor) -> Result<Tensor> {
            Ok(x.clone())
        }
    }

    fn scalar_draws(g: &Graph, t_a: usize, t_b: usize, ea: f64, eb: f64) -> BoundDraws {
        BoundDraws {
            t_a,
            t_b,
            eps_a: g.constant(Array::from_vec(vec![ea])),
            eps_b: g.constant(Array::from_vec(vec![eb])),
        }
    }

    fn sched10() -> NoiseSchedule {
        make_linear_schedule(10, 0.9999, 0.9).unwrap()
    }

    #[test]
    fn denoising_loss_zero_for_perfect_denoisers() {
        let sched = sched10();
        let g = Graph::new();
        let ba = g.constant(Array::from_vec(vec![0.4]));
        let bb = g.constant(Array::from_vec(vec![-0.7]));
        let draws = scalar_draws(&g, 3, 8, 0.9, -1.2);
        let da = EchoDenoiser { value: Array::from_vec(vec![0.9]) };
        let db = EchoDenoiser { value: Array::from_vec(vec![-1.2]) };
        let loss = denoising_loss(
            &da,
            &db,
            &ToyTranslator { k: 0.5 },
            &ToyTranslator { k: -0.25 },
            &ba,
            &bb,
            &draws,
            &sched,
        )
        .unwrap();
        assert!(loss.item().unwrap().abs() < 1e-15);
    }

    #[test]
    fn denoising_loss_is_nonnegative() {
        let sched = sched10();
        for seed in 0..5u64 {
            let mut rng = Prng::seed_from(seed);
            let g = Graph::new();
            let ba = g.constant(rng.normal_array(&[3]).map(|v| v.clamp(-1.0, 1.0)));
            let bb = g.constant(rng.normal_array(&[3]).map(|v| v.clamp(-1.0, 1.0)));
            let draws = BoundDraws {
                t_a: rng.uniform_int(1, 10),
                t_b: rng.uniform_int(1, 10),
                eps_a: g.constant(rng.normal_array(&[3])),
                eps_b: g.constant(rng.normal_array(&[3])),
            };
            let loss = denoising_loss(
                &ToyDenoiser { c_self: rng.uniform(-1.0, 1.0), c_cond: rng.uniform(-1.0, 1.0) },
                &ToyDenoiser { c_self: rng.uniform(-1.0, 1.0), c_cond: rng.uniform(-1.0, 1.0) },
                &ToyTranslator { k: 0.8 },
                &ToyTranslator { k: -0.3 },
                &ba,
                &bb,
                &draws,
                &sched,
            )
            .unwrap();
            assert!(loss.item().unwrap() >= 0.0);
        }
    }

    #[test]
    fn denoising_loss_matches_scalar_closed_form() {
        let sched = sched10();
        let (a0, b0) = (0.4, -0.6);
        let (p, q) = (0.7, -0.5); // translator slopes g^A, g^B
        let (u1, u2) = (0.3, -0.2); // denoiser A
        let (v1, v2) = (-0.4, 0.6); // denoiser B
        let (t_a, t_b) = (2usize, 7usize);
        let (ea, eb) = (1.1, -0.8);

        let g = Graph::new();
        let ba = g.constant(Array::from_vec(vec![a0]));
        let bb = g.constant(Array::from_vec(vec![b0]));
        let draws = scalar_draws(&g, t_a, t_b, ea, eb);
        let loss = denoising_loss(
            &ToyDenoiser { c_self: u1, c_cond: u2 },
            &ToyDenoiser { c_self: v1, c_cond: v2 },
            &ToyTranslator { k: p },
            &ToyTranslator { k: q },
            &ba,
            &bb,
            &draws,
            &sched,
        )
        .unwrap()
        .item()
        .unwrap();

        // independent scalar evaluation
        let sa = sched.alpha_bar(t_a).unwrap().sqrt();
        let sa1 = (1.0 - sched.alpha_bar(t_a).unwrap()).sqrt();
        let sb = sched.alpha_bar(t_b).unwrap().sqrt();
        let sb1 = (1.0 - sched.alpha_bar(t_b).unwrap()).sqrt();
        let xa_t = sa * a0 + sa1 * ea;
        let xb_t = sb * b0 + sb1 * eb;
        let xtb_t = sa * (p * a0) + sa1 * eb; // translated-B at t_a with eps_b
        let xta_t = sb * (q * b0) + sb1 * ea; // translated-A at t_b with eps_a
        let term_a = (ea - (u1 * xa_t + u2 * xtb_t)).powi(2);
        let term_b = (eb - (v1 * xb_t + v2 * xta_t)).powi(2);
        let want = term_a + term_b;
        assert!((loss - want).abs() < 1e-12, "{loss} vs {want}");
    }

    #[test]
    fn translation_loss_matches_scalar_closed_form() {
        let sched = sched10();
        let (a0, b0) = (0.3, 0.9);
        let (p, q) = (-0.8, 0.45);
        let (u1, u2) = (0.25, 0.5);
        let (v1, v2) = (0.1, -0.35);
        let (t_a, t_b) = (5usize, 1usize);
        let (ea, eb) = (-0.4, 1.3);
        let lambda = 2.5;

        let g = Graph::new();
        let ba = g.constant(Array::from_vec(vec![a0]));
        let bb = g.constant(Array::from_vec(vec![b0]));
        let draws = scalar_draws(&g, t_a, t_b, ea, eb);
        let (total, cyc) = translation_loss(
            &ToyDenoiser { c_self: u1, c_cond: u2 },
            &ToyDenoiser { c_self: v1, c_cond: v2 },
            &ToyTranslator { k: p },
            &ToyTranslator { k: q },
            &ba,
            &bb,
            &draws,
            &sched,
            lambda,
            CycleNorm::L1,
        )
        .unwrap();

        let sa = sched.alpha_bar(t_a).unwrap().sqrt();
        let sa1 = (1.0 - sched.alpha_bar(t_a).unwrap()).sqrt();
        let sb = sched.alpha_bar(t_b).unwrap().sqrt();
        let sb1 = (1.0 - sched.alpha_bar(t_b).unwrap()).sqrt();
        let xa_t = sa * a0 + sa1 * ea;
        let xb_t = sb * b0 + sb1 * eb;
        let xtb_t = sa * (p * a0) + sa1 * eb;
        let xta_t = sb * (q * b0) + sb1 * ea;
        let dsm = (ea - (u1 * xa_t + u2 * xtb_t)).powi(2)
            + (ea - (u1 * xta_t + u2 * xb_t)).powi(2)
            + (eb - (v1 * xb_t + v2 * xta_t)).powi(2)
            + (eb - (v1 * xtb_t + v2 * xa_t)).powi(2);
        let cycle = (q * (p * a0) - a0).abs() + (p * (q * b0) - b0).abs();
        let want = dsm + lambda * cycle;

        assert!((total.item().unwrap() - want).abs() < 1e-12);
        assert!((cyc.item().unwrap() - cycle).abs() < 1e-12);
    }

    #[test]
    fn translation_loss_zero_cases() {
        let sched = sched10();
        let g = Graph::new();
        let same = Array::from_vec(vec![0.25, -0.5]);
        let ba = g.constant(same.clone());
        let bb = g.constant(same);
        let draws = BoundDraws {
            t_a: 4,
            t_b: 4,
            eps_a: g.constant(Array::from_vec(vec![0.3, 0.3])),
            eps_b: g.constant(Array::from_vec(vec![0.3, 0.3])),
        };
        // identical batches, identical noises, identity translators and
        // denoisers that echo the true noise: everything vanishes
        let echo = EchoDenoiser { value: Array::from_vec(vec![0.3, 0.3]) };
        let (total, cyc) = translation_loss(
            &echo,
            &EchoDenoiser { value: Array::from_vec(vec![0.3, 0.3]) },
            &IdentityTranslator,
            &IdentityTranslator,
            &ba,
            &bb,
            &draws,
            &sched,
            0.0,
            CycleNorm::L1,
        )
        .unwrap();
        assert!(total.item().unwrap().abs() < 1e-15);
        assert!(cyc.item().unwrap().abs() < 1e-15);
    }

    /// Trainable scalar translator slope bound per graph.
    struct SlopeLeaf {
        k: Tensor,
    }

    impl TranslatorFn for SlopeLeaf {
        fn translate(&self, x: &Tensor) -> Result<Tensor> {
            x.mul(&self.k)
        }
    }

    #[test]
    fn translation_loss_descends_on_convex_scalar_toy() {
        // Optimise one translator slope against fixed linear denoisers;
        // all terms are quadratic in the slope, so this is convex.
        let sched = sched10();
        let mut k = Array::from_vec(vec![2.5]);
        let mut adam = crate::optim::AdamState::for_params(&[k.clone()]);
        let adam_cfg = crate::optim::AdamConfig {
            learning_rate: 0.15,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut initial = None;
        let mut last = 0.0;
        for _ in 0..100 {
            let g = Graph::new();
            let ba = g.constant(Array::from_vec(vec![0.6]));
            let bb = g.constant(Array::from_vec(vec![-0.8]));
            let draws = scalar_draws(&g, 3, 7, 0.5, -0.9);
            let k_leaf = g.leaf(k.clone(), true);
            let (total, _) = translation_loss(
                &ToyDenoiser { c_self: 0.4, c_cond: 0.3 },
                &ToyDenoiser { c_self: -0.2, c_cond: 0.5 },
                &ToyTranslator { k: 1.0 },
                &SlopeLeaf { k: k_leaf.clone() },
                &ba,
                &bb,
                &draws,
                &sched,
                50.0,
                CycleNorm::L2,
            )
            .unwrap();
            last = total.item().unwrap();
            initial.get_or_insert(last);
            total.backward().unwrap();
            let grad = k_leaf.grad().unwrap();
            let mut params = vec![k.clone()];
            crate::optim::adam_step(&mut params, &[grad], &mut adam, &adam_cfg).unwrap();
            k = params.pop().unwrap();
        }
        let initial = initial.unwrap();
        assert!(
            last < 0.1 * initial,
            "loss {last} did not drop below 0.1 x initial {initial}"
        );
    }

    #[test]
    fn timestep_draws_are_uniform() {
        let mut rng = Prng::seed_from(1234);
        let t_len = 50usize;
        let n = 100_000usize;
        let mut counts = vec![0usize; t_len];
        for _ in 0..n {
            let draws = sample_noise_draws(&mut rng, t_len, &[1]);
            counts[draws.t_a - 1] += 1;
            assert!((1..=t_len).contains(&draws.t_a));
            assert!((1..=t_len).contains(&draws.t_b));
        }
        let expected = n as f64 / t_len as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // chi-square critical value for df = 49 at significance 0.01
        assert!(chi2 < 74.9195, "chi2 {chi2}");
    }

    fn tiny_run_config(seed: u64, steps: usize) -> RunConfig {
        let mut run = RunConfig::desk();
        run.image_size = 8;
        run.unet_widths = vec![4, 6];
        run.emb_dim = 8;
        run.translator_width = 4;
        run.translator_blocks = 2;
        run.batch_size = 2;
        run.chain_len = 10;
        run.steps = steps;
        run.seed = seed;
        run.learning_rate = 1e-3;
        run.checkpoint_every = 0;
        run
    }

    fn tiny_batches(seed: u64) -> (Array, Array) {
        let mut rng = Prng::seed_from(seed);
        let a = rng.normal_array(&[2, 1, 8, 8]).map(|v| (0.5 * v).clamp(-1.0, 1.0));
        let b = rng.normal_array(&[2, 1, 8, 8]).map(|v| (0.5 * v).clamp(-1.0, 1.0));
        (a, b)
    }

    fn weight_snapshot(state: &TrainState) -> Vec<Vec<u64>> {
        state
            .stores()
            .iter()
            .flat_map(|s| {
                s.entries()
                    .iter()
                    .filter(|e| e.kind == ParamKind::Weight)
                    .map(|e| e.value.data().iter().map(|v| v.to_bits()).collect::<Vec<u64>>())
            })
            .collect()
    }

    #[test]
    fn zero_learning_rate_step_changes_no_weights() {
        let run = tiny_run_config(5, 1);
        let sched = run.schedule().unwrap();
        let mut cfg = run.train_config();
        cfg.learning_rate = 0.0;
        let mut state = TrainState::init(&run).unwrap();
        let before = weight_snapshot(&state);
        let (ba, bb) = tiny_batches(6);
        train_step(&mut state, &ba, &bb, &cfg, &sched).unwrap();
        assert_eq!(before, weight_snapshot(&state));
        assert_eq!(state.step, 1);
        assert_eq!(state.adam_den_a.step_count, 1);
    }

    #[test]
    fn identical_seeds_give_identical_trajectories() {
        let run = tiny_run_config(9, 3);
        let sched = run.schedule().unwrap();
        let cfg = run.train_config();
        let (ba, bb) = tiny_batches(10);

        let mut s1 = TrainState::init(&run).unwrap();
        let mut s2 = TrainState::init(&run).unwrap();
        for _ in 0..3 {
            train_step(&mut s1, &ba, &bb, &cfg, &sched).unwrap();
            train_step(&mut s2, &ba, &bb, &cfg, &sched).unwrap();
        }
        assert_eq!(weight_snapshot(&s1), weight_snapshot(&s2));
        assert_eq!(s1.rng.state(), s2.rng.state());
    }

    #[test]
    fn nan_parameter_aborts_with_diagnostic() {
        let run = tiny_run_config(11, 1);
        let sched = run.schedule().unwrap();
        let cfg = run.train_config();
        let mut state = TrainState::init(&run).unwrap();
        let entries = state.denoiser_a.store_mut().entries_mut();
        let conv = entries
            .iter_mut()
            .find(|e| e.name == "stem.conv.weight")
            .unwrap();
        conv.value = Array::full(conv.value.shape(), f64::NAN);
        let (ba, bb) = tiny_batches(12);
        let err = train_step(&mut state, &ba, &bb, &cfg, &sched).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn rejects_unnormalised_batches() {
        let run = tiny_run_config(13, 1);
        let sched = run.schedule().unwrap();
        let cfg = run.train_config();
        let mut state = TrainState::init(&run).unwrap();
        let bad = Array::full(&[2, 1, 8, 8], 1.5);
        let (_, ok) = tiny_batches(14);
        assert!(matches!(
            train_step(&mut state, &bad, &ok, &cfg, &sched),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn frozen_phase_produces_no_gradients_for_the_other_side() {
        // exactly the denoiser-phase wiring: translators bound frozen;
        // after backward they carry no gradients and recorded no
        // batch-norm updates, so nothing exists to apply to them
        let run = tiny_run_config(23, 1);
        let sched = run.schedule().unwrap();
        let state = TrainState::init(&run).unwrap();
        let (ba_arr, bb_arr) = tiny_batches(24);

        let graph = Graph::new();
        let ba = graph.constant(ba_arr);
        let bb = graph.constant(bb_arr);
        let draws = sample_noise_draws(&mut Prng::seed_from(25), 10, &[2, 1, 8, 8]);
        let bound_draws = draws.bind(&graph);
        let den_a = state.denoiser_a.bind(&graph, Mode::Train, true, true);
        let den_b = state.denoiser_b.bind(&graph, Mode::Train, true, true);
        let tr_a = state.translator_a.bind(&graph, Mode::Train, false, false);
        let tr_b = state.translator_b.bind(&graph, Mode::Train, false, false);
        let loss =
            denoising_loss(&den_a, &den_b, &tr_a, &tr_b, &ba, &bb, &bound_draws, &sched).unwrap();
        loss.backward().unwrap();

        assert!(tr_a.grads().iter().all(|g| g.is_none()));
        assert!(tr_b.grads().iter().all(|g| g.is_none()));
        assert!(tr_a.take_stat_updates().is_empty());
        // while the training side received gradients
        assert!(den_a.grads().iter().any(|g| g.is_some()));

        // and the mirror image for the translator phase
        let graph = Graph::new();
        let ba = graph.constant(tiny_batches(24).0);
        let bb = graph.constant(tiny_batches(24).1);
        let bound_draws = draws.bind(&graph);
        let den_a = state.denoiser_a.bind(&graph, Mode::Train, false, false);
        let den_b = state.denoiser_b.bind(&graph, Mode::Train, false, false);
        let tr_a = state.translator_a.bind(&graph, Mode::Train, true, true);
        let tr_b = state.translator_b.bind(&graph, Mode::Train, true, true);
        let (total, _) = translation_loss(
            &den_a,
            &den_b,
            &tr_a,
            &tr_b,
            &ba,
            &bb,
            &bound_draws,
            &sched,
            10.0,
            CycleNorm::L1,
        )
        .unwrap();
        total.backward().unwrap();
        assert!(den_a.grads().iter().all(|g| g.is_none()));
        assert!(den_b.grads().iter().all(|g| g.is_none()));
        assert!(tr_a.grads().iter().any(|g| g.is_some()));
        assert!(tr_b.grads().iter().any(|g| g.is_some()));
    }

    #[test]
    fn train_loop_runs_expected_steps_and_writes_metrics() {
        let mut run = tiny_run_config(15, 0);
        run.epochs = 1;
        run.batch_size = 4;
        let sched = run.schedule().unwrap();
        let mut state = TrainState::init(&run).unwrap();

        // datasets of 4 items, batch 4 -> exactly 1 step per epoch
        let (a, b) = crate::data::make_synthetic_domains(
            crate::data::SyntheticKind::Invert,
            4,
            8,
            16,
        )
        .unwrap();
        let mut metrics = Vec::new();
        train_loop(&mut state, &run, &a, &b, &sched, None, &mut metrics).unwrap();
        assert_eq!(state.step, 1);
        let text = String::from_utf8(metrics).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], "step, loss_theta, loss_phi, loss_cyc");
        assert!(lines[1].starts_with("1, "));
    }

    #[test]
    fn train_loop_rejects_empty_datasets() {
        let run = tiny_run_config(17, 1);
        let sched = run.schedule().unwrap();
        let mut state = TrainState::init(&run).unwrap();
        let (a, _) =
            crate::data::make_synthetic_domains(crate::data::SyntheticKind::Invert, 2, 8, 18)
                .unwrap();
        let empty = ImageDataset {
            items: vec![],
            names: vec![],
            domain: crate::data::DomainTag::B,
        };
        let mut sink = Vec::new();
        assert!(train_loop(&mut state, &run, &a, &empty, &sched, None, &mut sink).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_resume_are_bit_exact() {
        let dir = std::env::temp_dir().join("dualdiff-train-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("resume.bin");

        let mut run = tiny_run_config(19, 6);
        run.batch_size = 2;
        let sched = run.schedule().unwrap();
        let (a, b) =
            crate::data::make_synthetic_domains(crate::data::SyntheticKind::Invert, 4, 8, 20)
                .unwrap();

        // uninterrupted run to step 6
        let mut full = TrainState::init(&run).unwrap();
        let mut sink = Vec::new();
        train_loop(&mut full, &run, &a, &b, &sched, None, &mut sink).unwrap();

        // run to step 3, save, load, resume to 6
        let mut run_half = run.clone();
        run_half.steps = 3;
        let mut half = TrainState::init(&run_half).unwrap();
        let mut sink2 = Vec::new();
        train_loop(&mut half, &run_half, &a, &b, &sched, None, &mut sink2).unwrap();
        half.save(&path, &run).unwrap();

        let (mut resumed, loaded_run) = TrainState::load(&path).unwrap();
        assert_eq!(loaded_run, run);
        assert_eq!(resumed.step, 3);
        let mut sink3 = Vec::new();
        train_loop(&mut resumed, &loaded_run, &a, &b, &sched, None, &mut sink3).unwrap();

        assert_eq!(weight_snapshot(&full), weight_snapshot(&resumed));
        assert_eq!(full.rng.state(), resumed.rng.state());
        assert_eq!(full.adam_den_a.step_count, resumed.adam_den_a.step_count);
    }
}
