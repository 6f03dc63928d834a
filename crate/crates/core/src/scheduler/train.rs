//! Alternating two-phase training.
//!
//! A round runs a segmentation phase (fusion frozen, step on `L_s`) and then a
//! fusion phase (segmentation frozen, step on `λ1·L_f + λ2·L_s`). Every random
//! draw is derived from `(seed, round, phase, position)`, so a run resumed at
//! a round boundary replays exactly what an uninterrupted run would do.

use std::io::Write;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::plan::{RoundPlan, WeightingConfig};
use super::weights::{convergence_rate, RateHistory, FUSION_TASK, SEG_TASK, TASKS};
use crate::data::{augment, AlignedPair, AugConfig, LabelMap, Sample};
use crate::error::{Error, Result};
use crate::losses::{loss_fusion, loss_seg, FusionLossConfig, LossBreakdown};
use crate::model::{Batch, Model};
use crate::nn::ops::scalar;
use crate::nn::{Adam, StepInfo};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Seg,
    Fusion,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Seg => "seg",
            Phase::Fusion => "fusion",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Phase::Seg => 1,
            Phase::Fusion => 2,
        }
    }
}

/// Everything the loop needs besides the model and data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub plan: RoundPlan,
    pub weighting: WeightingConfig,
    pub loss: FusionLossConfig,
    pub augment: AugConfig,
    pub ignore_index: u16,
    pub seed: u64,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        self.weighting.validate()?;
        self.loss.validate()?;
        if self.augment.enabled {
            self.augment.validate()?;
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: u64,
    pub phase: Phase,
    pub l_ssim: f64,
    pub l_mse: f64,
    pub l_grad: f64,
    pub l_seg: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr: f64,
    pub clipped: bool,
}

/// One λ update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRecord {
    pub round: usize,
    pub epoch: usize,
    pub fusion_step: u64,
    pub mean_l_fusion: f64,
    pub mean_l_seg: f64,
    pub r_fusion: f64,
    pub r_seg: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Counters and weighting state carried across rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed rounds.
    pub round: usize,
    pub iteration: u64,
    pub seg_steps: u64,
    pub fusion_steps: u64,
    pub history: RateHistory,
    pub lambdas: Vec<f64>,
    pub weight_log: Vec<WeightRecord>,
}

/// Parameter checksums around one phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreezeCheck {
    pub round: usize,
    pub phase: Phase,
    pub frozen_before: u64,
    pub frozen_after: u64,
}

impl FreezeCheck {
    pub fn held(&self) -> bool {
        self.frozen_before == self.frozen_after
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    /// Zero-based index of the round that ran.
    pub round: usize,
    pub freeze: Vec<FreezeCheck>,
    /// Epoch-mean fusion loss of each weighting epoch in this round.
    pub fusion_epoch_means: Vec<f64>,
}

/// Sink for log rows.
pub trait LogSink {
    fn row(&mut self, row: &LogRow) -> Result<()>;
}

impl LogSink for Vec<LogRow> {
    fn row(&mut self, row: &LogRow) -> Result<()> {
        self.push(row.clone());
        Ok(())
    }
}

/// CSV training log with the fixed column set of [`LogRow`].
pub struct CsvLog<W: Write> {
    writer: csv::Writer<W>,
}

impl<W: Write> CsvLog<W> {
    /// `header` is false when appending to an existing log.
    pub fn new(inner: W, header: bool) -> Self {
        Self {
            writer: csv::WriterBuilder::new().has_headers(header).from_writer(inner),
        }
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer
            .flush()
            .map_err(|e| Error::io(std::path::Path::new("<training log>"), e))
    }
}

impl<W: Write> LogSink for CsvLog<W> {
    fn row(&mut self, row: &LogRow) -> Result<()> {
        self.writer
            .serialize(row)
            .map_err(|e| Error::io("<training log>", e.into()))
    }
}

/// Mixes identifiers into one RNG seed (SplitMix64 finalizer per part).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// A labelled training scene.
#[derive(Debug, Clone)]
pub struct Scene {
    pub pair: AlignedPair,
    pub label: LabelMap,
}

pub struct Trainer {
    pub model: Model,
    pub adam_seg: Adam,
    pub adam_fusion: Adam,
    pub state: TrainState,
    settings: TrainSettings,
}

impl Trainer {
    pub fn new(model: Model, settings: TrainSettings) -> Result<Self> {
        settings.validate()?;
        let history = RateHistory::new(TASKS);
        let lambdas = settings.weighting.strategy.lambdas(
            &history,
            &settings.weighting.eta_pref,
            settings.weighting.temperature,
        )?;
        Ok(Self {
            adam_seg: Adam::new(&model.seg_params)?,
            adam_fusion: Adam::new(&model.fusion_params)?,
            model,
            state: TrainState {
                round: 0,
                iteration: 0,
                seg_steps: 0,
                fusion_steps: 0,
                history,
                lambdas,
                weight_log: Vec::new(),
            },
            settings,
        })
    }

    pub fn settings(&self) -> &TrainSettings {
        &self.settings
    }

    pub fn finished(&self) -> bool {
        self.state.round >= self.settings.plan.rounds
    }

    /// Scene indices for `count` consecutive draws starting at `position`.
    fn draw_indices(&self, phase: Phase, position: u64, count: usize, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        let mut pass = u64::MAX;
        let mut perm: Vec<usize> = Vec::new();
        for k in position..position + count as u64 {
            let p = k / n as u64;
            if p != pass {
                pass = p;
                perm = (0..n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
                    self.settings.seed,
                    self.state.round as u64,
                    phase.tag(),
                    p,
                ]));
                perm.shuffle(&mut rng);
            }
            out.push(perm[(k % n as u64) as usize]);
        }
        out
    }

    fn sample(&self, scene: &Scene, phase: Phase, position: u64) -> Result<Sample> {
        if !self.settings.augment.enabled {
            return Sample::new(&scene.pair, Some(&scene.label));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
            self.settings.seed,
            self.state.round as u64,
            phase.tag(),
            position,
            0xA0,
        ]));
        let (pair, label) = augment(&scene.pair, &scene.label, &self.settings.augment, &mut rng)?;
        Sample::new(&pair, Some(&label))
    }

    fn batch(
        &self,
        scenes: &[Scene],
        fixed: Option<&[Sample]>,
        phase: Phase,
        iter: usize,
    ) -> Result<(Vec<usize>, Batch)> {
        let bs = self.settings.plan.batch_size;
        let position = (iter * bs) as u64;
        let idx = self.draw_indices(phase, position, bs, scenes.len());
        let owned: Vec<Sample>;
        let refs: Vec<&Sample> = match fixed {
            Some(f) => idx.iter().map(|&i| &f[i]).collect(),
            None => {
                owned = idx
                    .iter()
                    .enumerate()
                    .map(|(j, &i)| self.sample(&scenes[i], phase, position + j as u64))
                    .collect::<Result<_>>()?;
                owned.iter().collect()
            }
        };
        Ok((idx, Batch::new(&refs, self.model.dtype())?))
    }

    fn labels(batch: &Batch) -> Result<&[u16]> {
        batch
            .labels
            .as_deref()
            .ok_or_else(|| Error::config("training scenes need labels"))
    }

    fn check_finite(what: &str, v: f64) -> Result<()> {
        if v.is_finite() {
            Ok(())
        } else {
            Err(Error::Numerical(format!("{what} became {v}")))
        }
    }

    /// Runs the next round over `scenes`, appending one log row per iteration.
    pub fn train_round(&mut self, scenes: &[Scene], log: &mut dyn LogSink) -> Result<RoundReport> {
        if scenes.is_empty() {
            return Err(Error::config("training needs at least one scene"));
        }
        if self.finished() {
            return Err(Error::config("every planned round has already run"));
        }
        let fixed: Option<Vec<Sample>> = if self.settings.augment.enabled {
            None
        } else {
            Some(
                scenes
                    .iter()
                    .map(|s| Sample::new(&s.pair, Some(&s.label)))
                    .collect::<Result<_>>()?,
            )
        };
        let mut freeze = Vec::with_capacity(2);
        freeze.push(self.seg_phase(scenes, fixed.as_deref(), log)?);
        let (check, fusion_epoch_means) = self.fusion_phase(scenes, fixed.as_deref(), log)?;
        freeze.push(check);
        let report = RoundReport {
            round: self.state.round,
            freeze,
            fusion_epoch_means,
        };
        self.state.round += 1;
        Ok(report)
    }

    fn seg_phase(&mut self, scenes: &[Scene], fixed: Option<&[Sample]>, log: &mut dyn LogSink) -> Result<FreezeCheck> {
        let m = &self.model;
        m.fusion_params.set_frozen(true);
        m.seg_params.set_frozen(false);
        let before = m.fusion_params.checksum()?;

        // the frozen fusion network maps each fixed scene to a fixed image
        let cached: Option<Vec<Tensor>> = match fixed {
            Some(samples) => Some(
                samples
                    .iter()
                    .map(|s| {
                        let b = Batch::new(&[s], m.dtype())?;
                        Ok(m.fuse(&b.visible, &b.infrared)?.fused.detach())
                    })
                    .collect::<Result<_>>()?,
            ),
            None => None,
        };

        for it in 0..self.settings.plan.seg_iters {
            let (idx, batch) = self.batch(scenes, fixed, Phase::Seg, it)?;
            let labels = Self::labels(&batch)?;
            let u = match &cached {
                Some(c) => Tensor::cat(&idx.iter().map(|&i| &c[i]).collect::<Vec<_>>(), 0)?,
                None => self.model.fuse(&batch.visible, &batch.infrared)?.fused.detach(),
            };
            let lf = loss_fusion(&u, &batch.visible, &batch.infrared, &self.settings.loss)?.breakdown;
            let ls = loss_seg(&self.model.segment(&u)?, labels, self.settings.ignore_index)?;
            let l_seg = scalar(&ls)?;
            Self::check_finite("segmentation loss", l_seg)?;
            let lr = self.settings.plan.seg_lr_at(self.state.seg_steps)?;
            let info = self.adam_seg.step(&ls.backward()?, lr, self.settings.plan.clip())?;
            self.state.seg_steps += 1;
            self.emit(log, Phase::Seg, lf, l_seg, lr, info)?;
        }
        let after = self.model.fusion_params.checksum()?;
        self.model.fusion_params.set_frozen(false);
        Ok(FreezeCheck {
            round: self.state.round,
            phase: Phase::Seg,
            frozen_before: before,
            frozen_after: after,
        })
    }

    fn fusion_phase(
        &mut self,
        scenes: &[Scene],
        fixed: Option<&[Sample]>,
        log: &mut dyn LogSink,
    ) -> Result<(FreezeCheck, Vec<f64>)> {
        self.model.seg_params.set_frozen(true);
        self.model.fusion_params.set_frozen(false);
        let before = self.model.seg_params.checksum()?;
        let iters = self.settings.plan.fusion_iters;
        let epoch_len = match self.settings.weighting.epoch_iters {
            0 => iters.max(1),
            n => n,
        };
        let (mut sum_f, mut sum_s, mut count) = (0.0, 0.0, 0usize);
        let mut epoch_means = Vec::new();

        for it in 0..iters {
            let (_, batch) = self.batch(scenes, fixed, Phase::Fusion, it)?;
            let labels = Self::labels(&batch)?;
            let out = self.model.fuse(&batch.visible, &batch.infrared)?;
            let lf = loss_fusion(&out.fused, &batch.visible, &batch.infrared, &self.settings.loss)?;
            let ls = loss_seg(&self.model.segment(&out.fused)?, labels, self.settings.ignore_index)?;
            let l_seg = scalar(&ls)?;
            Self::check_finite("fusion loss", lf.breakdown.l_fusion)?;
            Self::check_finite("segmentation loss", l_seg)?;
            let (l1, l2) = (self.state.lambdas[FUSION_TASK], self.state.lambdas[SEG_TASK]);
            let total = ((&lf.total * l1)? + (ls * l2)?)?;
            let lr = self.settings.plan.fusion_lr_at(self.state.fusion_steps)?;
            let info = self
                .adam_fusion
                .step(&total.backward()?, lr, self.settings.plan.clip())?;
            self.state.fusion_steps += 1;
            self.emit(log, Phase::Fusion, lf.breakdown, l_seg, lr, info)?;

            sum_f += lf.breakdown.l_fusion;
            sum_s += l_seg;
            count += 1;
            if count == epoch_len || it + 1 == iters {
                let (mf, ms) = (sum_f / count as f64, sum_s / count as f64);
                epoch_means.push(mf);
                self.close_epoch(epoch_means.len() - 1, mf, ms)?;
                (sum_f, sum_s, count) = (0.0, 0.0, 0);
            }
        }
        let after = self.model.seg_params.checksum()?;
        self.model.seg_params.set_frozen(false);
        Ok((
            FreezeCheck {
                round: self.state.round,
                phase: Phase::Fusion,
                frozen_before: before,
                frozen_after: after,
            },
            epoch_means,
        ))
    }

    fn close_epoch(&mut self, epoch: usize, mean_f: f64, mean_s: f64) -> Result<()> {
        let st = &mut self.state;
        st.history.record(FUSION_TASK, mean_f)?;
        st.history.record(SEG_TASK, mean_s)?;
        let w = &self.settings.weighting;
        st.lambdas = w.strategy.lambdas(&st.history, &w.eta_pref, w.temperature)?;
        st.weight_log.push(WeightRecord {
            round: st.round,
            epoch,
            fusion_step: st.fusion_steps,
            mean_l_fusion: mean_f,
            mean_l_seg: mean_s,
            r_fusion: convergence_rate(&st.history, FUSION_TASK)?,
            r_seg: convergence_rate(&st.history, SEG_TASK)?,
            lambda1: st.lambdas[FUSION_TASK],
            lambda2: st.lambdas[SEG_TASK],
        });
        log::debug!("round {} epoch {epoch}: lambdas {:?}", st.round, st.lambdas);
        Ok(())
    }

    fn emit(
        &mut self,
        log: &mut dyn LogSink,
        phase: Phase,
        lf: LossBreakdown,
        l_seg: f64,
        lr: f64,
        info: StepInfo,
    ) -> Result<()> {
        if info.clipped {
            log::debug!(
                "iteration {}: gradient norm {} clipped",
                self.state.iteration,
                info.grad_norm
            );
        }
        let row = LogRow {
            iteration: self.state.iteration,
            phase,
            l_ssim: lf.l_ssim,
            l_mse: lf.l_mse,
            l_grad: lf.l_grad,
            l_seg,
            lambda1: self.state.lambdas[FUSION_TASK],
            lambda2: self.state.lambdas[SEG_TASK],
            lr,
            clipped: info.clipped,
        };
        self.state.iteration += 1;
        log.row(&row)
    }
}
