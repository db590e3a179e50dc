//! Release-time-conditioned translation sampling.
//!
//! A translation runs the target-domain reverse chain from white noise
//! conditioned on the source image. Above the release time the source
//! side is freshly re-noised from the clean input at every step (with a
//! newly drawn noise each time); at and below the release time both sides
//! evolve by conditioned reverse steps, each reading the other side's
//! value from the previous iteration, with deterministic final steps
//! (`z = 0` at `t = 1`).
//!
//! Draw order per chain, fixed for reproducibility: the initial target
//! noise, the initial source noise (level `T`), then per iteration of
//! phase one `eps_src, z_tgt`, and per iteration of phase two
//! `z_src, z_tgt`.

use std::path::Path;

use crate::checkpoint::{write_container, ContainerHeader, TensorRecord, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::nets::Denoiser;
use crate::rng::{mix_seed, Prng};
use crate::schedule::{q_sample, reverse_step_with, MeanVariant, NoiseSchedule};
use crate::tensor::{Array, Graph};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    /// Release time `t_r` in `[1, T]`.
    pub release_time: usize,
    pub chain_len: usize,
    pub seed: u64,
    pub record_trajectory: bool,
    pub mean_variant: MeanVariant,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            release_time: 1,
            chain_len: 50,
            seed: 0,
            record_trajectory: false,
            mean_variant: MeanVariant::Standard,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.chain_len != sched.len() {
            return Err(Error::config(format!(
                "sampler chain length {} differs from schedule length {}",
                self.chain_len,
                sched.len()
            )));
        }
        if self.release_time == 0 || self.release_time > self.chain_len {
            return Err(Error::config(format!(
                "release time {} outside 1..={}",
                self.release_time, self.chain_len
            )));
        }
        Ok(())
    }
}

/// Eval-time conditional noise prediction on plain arrays. Implemented by
/// the trained U-Net and by closed-form predictors in tests.
pub trait NoisePredictor {
    fn predict(&self, x_self: &Array, x_cond: &Array, t: usize) -> Result<Array>;
}

impl NoisePredictor for Denoiser {
    fn predict(&self, x_self: &Array, x_cond: &Array, t: usize) -> Result<Array> {
        self.predict_arrays(x_self, x_cond, t)
    }
}

#[derive(Debug, Clone)]
pub enum Transition {
    /// Phase-one source refresh: `state[t-1] = q_sample(x0, t, eps)`.
    SourceRenoise { t: usize, eps: Array },
    SourceReverse { t: usize, eps_hat: Array, z: Array },
    TargetReverse { t: usize, eps_hat: Array, z: Array },
}

/// Full record of one chain: `source[t]` / `target[t]` are the side
/// states at time `t` (length `T + 1`), plus per-step transitions
/// sufficient to replay every update exactly.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub source: Vec<Array>,
    pub target: Vec<Array>,
    pub transitions: Vec<Transition>,
}

#[derive(Debug, Clone)]
pub struct Translation {
    /// The translated image, `target[0]`.
    pub output: Array,
    pub trajectory: Option<Trajectory>,
}

fn q_sample_arrays(x0: &Array, t: usize, eps: &Array, sched: &NoiseSchedule) -> Result<Array> {
    let g = Graph::new();
    Ok(q_sample(&g.constant(x0.clone()), t, &g.constant(eps.clone()), sched)?.array())
}

fn reverse_step_arrays(
    variant: MeanVariant,
    x: &Array,
    eps_hat: &Array,
    z: &Array,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Array> {
    let g = Graph::new();
    Ok(reverse_step_with(
        variant,
        &g.constant(x.clone()),
        &g.constant(eps_hat.clone()),
        &g.constant(z.clone()),
        t,
        sched,
    )?
    .array())
}

struct ChainRecorder {
    keep_transitions: bool,
    source: Vec<Option<Array>>,
    target: Vec<Option<Array>>,
    transitions: Vec<Transition>,
}

impl ChainRecorder {
    fn new(t_len: usize, keep_transitions: bool) -> Self {
        ChainRecorder {
            keep_transitions,
            source: vec![None; t_len + 1],
            target: vec![None; t_len + 1],
            transitions: Vec::new(),
        }
    }

    fn state(&mut self, t: usize, src: &Array, tgt: &Array) {
        self.source[t] = Some(src.clone());
        self.target[t] = Some(tgt.clone());
    }

    fn transition(&mut self, tr: Transition) {
        if self.keep_transitions {
            self.transitions.push(tr);
        }
    }

    fn dump_records(&self) -> Vec<(String, Array)> {
        let mut out = Vec::new();
        for (side, states) in [("src", &self.source), ("tgt", &self.target)] {
            for (t, state) in states.iter().enumerate() {
                if let Some(s) = state {
                    out.push((format!("{side}/t{t:04}"), s.clone()));
                }
            }
        }
        out
    }

    fn into_trajectory(self) -> Trajectory {
        Trajectory {
            source: self.source.into_iter().flatten().collect(),
            target: self.target.into_iter().flatten().collect(),
            transitions: self.transitions,
        }
    }
}

/// Translate `x_src0` into the other domain with an arbitrary predictor
/// pair; `translate` instantiates this with trained denoisers.
pub fn translate_with<S: NoisePredictor, T: NoisePredictor>(
    src_model: &S,
    tgt_model: &T,
    x_src0: &Array,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Translation> {
    cfg.validate(sched)?;
    const SLACK: f64 = 1e-9;
    if x_src0.data().iter().any(|v| !v.is_finite() || v.abs() > 1.0 + SLACK) {
        return Err(Error::contract("source image must lie in [-1, 1]".to_string()));
    }
    let t_len = cfg.chain_len;
    let t_r = cfg.release_time;
    let shape = x_src0.shape().to_vec();
    let mut rng = Prng::seed_from(cfg.seed);
    let mut rec = ChainRecorder::new(t_len, cfg.record_trajectory);

    let mut tgt = rng.normal_array(&shape);
    let mut src = q_sample_arrays(x_src0, t_len, &rng.normal_array(&shape), sched)?;
    rec.state(t_len, &src, &tgt);

    let check = |side: &str, t: usize, value: &Array, rec: &ChainRecorder| -> Result<()> {
        if value.all_finite() {
            Ok(())
        } else {
            Err(Error::SamplerAbort {
                message: format!("non-finite {side} state at t={t}"),
                dump: rec.dump_records(),
            })
        }
    };

    // Phase 1: t = T .. t_r + 1. The source is re-noised from the clean
    // input with a fresh draw each step; the target takes a conditioned
    // reverse step. Runs only when t_r < T.
    for t in ((t_r + 1)..=t_len).rev() {
        let eps_src = rng.normal_array(&shape);
        src = q_sample_arrays(x_src0, t, &eps_src, sched)?;
        let eps_hat = tgt_model.predict(&tgt, &src, t)?;
        // t >= t_r + 1 >= 2 here, so the step noise is always drawn
        let z = rng.normal_array(&shape);
        tgt = reverse_step_arrays(cfg.mean_variant, &tgt, &eps_hat, &z, t, sched)?;
        rec.transition(Transition::SourceRenoise { t, eps: eps_src });
        rec.transition(Transition::TargetReverse { t, eps_hat, z });
        rec.state(t - 1, &src, &tgt);
        check("src", t - 1, &src, &rec)?;
        check("tgt", t - 1, &tgt, &rec)?;
    }

    // Phase 2: t = t_r .. 1. Both sides take conditioned reverse steps;
    // each reads the other's pre-update value; z = 0 at t = 1.
    for t in (1..=t_r).rev() {
        let (z_src, z_tgt) = if t > 1 {
            (rng.normal_array(&shape), rng.normal_array(&shape))
        } else {
            (Array::zeros(&shape), Array::zeros(&shape))
        };
        let eps_hat_src = src_model.predict(&src, &tgt, t)?;
        let new_src = reverse_step_arrays(cfg.mean_variant, &src, &eps_hat_src, &z_src, t, sched)?;
        let eps_hat_tgt = tgt_model.predict(&tgt, &src, t)?;
        let new_tgt = reverse_step_arrays(cfg.mean_variant, &tgt, &eps_hat_tgt, &z_tgt, t, sched)?;
        src = new_src;
        tgt = new_tgt;
        rec.transition(Transition::SourceReverse { t, eps_hat: eps_hat_src, z: z_src });
        rec.transition(Transition::TargetReverse { t, eps_hat: eps_hat_tgt, z: z_tgt });
        rec.state(t - 1, &src, &tgt);
        check("src", t - 1, &src, &rec)?;
        check("tgt", t - 1, &tgt, &rec)?;
    }

    Ok(Translation {
        output: tgt,
        trajectory: cfg.record_trajectory.then(|| rec.into_trajectory()),
    })
}

/// Source-to-target translation with trained denoisers: the source
/// domain's denoiser drives the source side below the release time, the
/// target domain's denoiser drives the synthesis.
pub fn translate(
    denoiser_src: &Denoiser,
    denoiser_tgt: &Denoiser,
    x_src0: &Array,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Translation> {
    translate_with(denoiser_src, denoiser_tgt, x_src0, cfg, sched)
}

/// The mirror-image direction: same contract with the domain roles
/// swapped, so a domain-B image lands in domain A.
pub fn translate_reverse_direction(
    denoiser_a: &Denoiser,
    denoiser_b: &Denoiser,
    x_tgt0: &Array,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Translation> {
    translate_with(denoiser_b, denoiser_a, x_tgt0, cfg, sched)
}

/// Translate every `[C,H,W]` item with a per-image seed derived from
/// `(cfg.seed, index)`, so results do not depend on processing order.
pub fn translate_items<S: NoisePredictor, T: NoisePredictor>(
    src_model: &S,
    tgt_model: &T,
    items: &[Array],
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Vec<Array>> {
    let mut out = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let shape = item.shape();
        if shape.len() != 3 {
            return Err(Error::shape(format!("items must be [C,H,W], got {shape:?}")));
        }
        let batched = Array::new(
            vec![1, shape[0], shape[1], shape[2]],
            item.data().to_vec(),
        )?;
        let per_image = SamplerConfig { seed: mix_seed(cfg.seed, i as u64), ..*cfg };
        let result = translate_with(src_model, tgt_model, &batched, &per_image, sched)?;
        let data = result.output.into_data();
        out.push(Array::new(vec![shape[0], shape[1], shape[2]], data)?);
    }
    Ok(out)
}

/// Write a recorded trajectory in the shared tensor-record container,
/// one record per `(side, t)`.
pub fn write_trajectory(
    path: &Path,
    trajectory: &Trajectory,
    cfg: &SamplerConfig,
    config_echo: &str,
) -> Result<()> {
    let t_len = trajectory.source.len() - 1;
    let mut records = Vec::new();
    for (side, states) in [("src", &trajectory.source), ("tgt", &trajectory.target)] {
        for (t, state) in states.iter().enumerate() {
            records.push(TensorRecord { name: format!("{side}/t{t:04}"), value: state.clone() });
        }
    }
    let header = ContainerHeader {
        version: FORMAT_VERSION,
        step: t_len as u64,
        config_echo: config_echo.to_string(),
        rng_state: Prng::seed_from(cfg.seed).state(),
    };
    write_container(path, &header, &records)
}

// ---------------------------------------------------------------------------
// release-time ablation

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationRow {
    pub release_time: usize,
    pub metric: f64,
}

/// Run `translate` across the dataset once per release time and score
/// each output set; rows come back sorted ascending by release time.
pub fn ablate_release_time<S, T, F>(
    src_model: &S,
    tgt_model: &T,
    items: &[Array],
    release_times: &[usize],
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    mut eval_fn: F,
) -> Result<Vec<AblationRow>>
where
    S: NoisePredictor,
    T: NoisePredictor,
    F: FnMut(&[Array]) -> Result<f64>,
{
    if release_times.is_empty() {
        return Err(Error::config("release-time list must be non-empty".to_string()));
    }
    let mut rows = Vec::with_capacity(release_times.len());
    for &t_r in release_times {
        let run_cfg = SamplerConfig { release_time: t_r, ..*cfg };
        run_cfg.validate(sched)?;
        let outputs = translate_items(src_model, tgt_model, items, &run_cfg, sched)?;
        let metric = eval_fn(&outputs)?;
        rows.push(AblationRow { release_time: t_r, metric });
    }
    rows.sort_by_key(|r| r.release_time);
    Ok(rows)
}

/// Plain-text table plus plot-ready CSV for an ablation sweep.
pub fn format_ablation_table(rows: &[AblationRow]) -> (String, String) {
    let mut table = String::from("release_time  metric\n");
    let mut csv = String::from("release_time,metric\n");
    for row in rows {
        table.push_str(&format!("{:>12}  {:.6}\n", row.release_time, row.metric));
        csv.push_str(&format!("{},{:.12e}\n", row.release_time, row.metric));
    }
    (table, csv)
}
