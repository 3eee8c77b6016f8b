use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{loss_graph, LossBreakdown, LossWeights};
use super::targets::{GtTargets, DEFAULT_SIGMA_PX};
use crate::data::Episode;
use crate::error::{invalid, Result};
use crate::geom::{augment, crop_to_workspace, WorkspaceBox, DEFAULT_AUG_TRANSLATION, DEFAULT_AUG_YAW_DEG};
use crate::model::language::{embed_language, LanguageSource, LanguageTokens};
use crate::model::{GripperState, Rvt};
use crate::nnet::{lamb_step, lr_at, Graph, LambConfig, Real, Tensor, Weights};
use crate::render::{render_views, ViewImage, ViewSet, DEFAULT_SPLAT_RADIUS};
use crate::seed;

/// Augmentation draws tried before falling back to the unaugmented sample.
pub const AUG_ATTEMPTS: u64 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub base_lr: f64,
    pub warmup: u64,
    pub seed: u64,
    pub aug_translation: f64,
    pub aug_yaw_deg: f64,
    pub splat_radius: usize,
    pub sigma_px: f64,
    pub lamb: LambConfig,
    pub loss: LossWeights,
    pub bounds: WorkspaceBox,
    pub language: LanguageSource,
    pub language_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 100_000,
            batch: 24,
            base_lr: 2.4e-4,
            warmup: 2000,
            seed: 0,
            aug_translation: DEFAULT_AUG_TRANSLATION,
            aug_yaw_deg: DEFAULT_AUG_YAW_DEG,
            splat_radius: DEFAULT_SPLAT_RADIUS,
            sigma_px: DEFAULT_SIGMA_PX,
            lamb: LambConfig::default(),
            loss: LossWeights::default(),
            bounds: WorkspaceBox::default(),
            language: LanguageSource::Stub,
            language_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(invalid("batch must be positive"));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(invalid("base_lr must be finite and nonnegative"));
        }
        if !(self.sigma_px > 0.0) {
            return Err(invalid("sigma_px must be positive"));
        }
        if self.aug_translation < 0.0 || self.aug_yaw_deg < 0.0 {
            return Err(invalid("augmentation ranges must be nonnegative"));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub lr: f64,
    pub trans: f64,
    pub rot: f64,
    pub grip: f64,
    pub coll: f64,
    pub total: f64,
}

impl LogEntry {
    pub fn new(step: u64, lr: f64, l: &LossBreakdown) -> Self {
        LogEntry {
            step,
            lr,
            trans: l.trans,
            rot: l.rot,
            grip: l.grip,
            coll: l.coll,
            total: l.total,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log entry serializes")
    }
}

/// A fully prepared training example.
#[derive(Debug, Clone)]
pub struct Sample {
    pub views: Vec<ViewImage>,
    pub gripper: GripperState,
    pub language: usize,
    pub targets: GtTargets,
}

/// Builds the training example for keyframe `k` of `ep`.
///
/// Augmentations that move the target out of the workspace or out of every
/// view are redrawn; after [`AUG_ATTEMPTS`] draws the sample is used as is.
/// Returns `None` when the target is invisible even without augmentation.
pub fn make_sample(
    ep: &Episode,
    k: usize,
    views: &ViewSet,
    res: usize,
    cfg: &TrainConfig,
    aug_seed: u64,
    language: usize,
) -> Result<Option<Sample>> {
    let obs = ep.observation(k);
    let act = ep.actions[k];
    let build = |cloud: &crate::geom::PointCloud, t, e| -> Result<Option<Sample>> {
        let targets = GtTargets::build(views, res, t, e, act.gripper_open, act.collision_allowed, cfg.sigma_px);
        if !targets.any_visible() {
            return Ok(None);
        }
        let cloud = crop_to_workspace(cloud, &cfg.bounds);
        Ok(Some(Sample {
            views: render_views(&cloud, views, res, cfg.splat_radius)?,
            gripper: obs.gripper,
            language,
            targets,
        }))
    };
    if cfg.aug_translation > 0.0 || cfg.aug_yaw_deg > 0.0 {
        for attempt in 0..AUG_ATTEMPTS {
            let a = augment(
                &obs.cloud,
                act.translation,
                act.euler,
                seed::derive(aug_seed, &[attempt]),
                cfg.aug_translation,
                cfg.aug_yaw_deg,
            );
            if !cfg.bounds.contains(a.translation) {
                continue;
            }
            if let Some(s) = build(&a.cloud, a.translation, a.euler)? {
                return Ok(Some(s));
            }
        }
    }
    build(&obs.cloud, act.translation, act.euler)
}

/// Loss and parameter gradients of one sample.
pub fn sample_gradients<T: Real>(
    model: &Rvt,
    weights: &Weights<T>,
    sample: &Sample,
    lang: &LanguageTokens,
    lw: &LossWeights,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor<T>>)> {
    let mut g = Graph::new();
    g.bind(weights)?;
    let fv = model.forward(&mut g, &sample.views, lang, sample.gripper)?;
    let lv = loss_graph(&mut g, &fv, &sample.targets, lw)?;
    let grads = g.backward(lv.total)?;
    Ok((lv.values(&g), g.param_grads(&grads)))
}

/// Mean loss and mean gradients over a batch, summed in batch order.
pub fn batch_gradients<T: Real>(
    model: &Rvt,
    weights: &Weights<T>,
    samples: &[Sample],
    langs: &[LanguageTokens],
    lw: &LossWeights,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor<T>>)> {
    if samples.is_empty() {
        return Err(invalid("empty batch"));
    }
    let per: Vec<_> = samples
        .par_iter()
        .map(|s| sample_gradients(model, weights, s, &langs[s.language], lw))
        .collect::<Result<_>>()?;
    let scale = 1.0 / samples.len() as f64;
    let mut loss = LossBreakdown::default();
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (l, grads) in &per {
        loss.add_scaled(l, scale);
        for (name, t) in grads {
            let a = acc.entry(name.clone()).or_insert_with(|| vec![0.0; t.len()]);
            for (x, v) in a.iter_mut().zip(t.data()) {
                *x += v.as_f64();
            }
        }
    }
    let grads = acc
        .into_iter()
        .map(|(name, a)| {
            let shape = weights.get(&name).expect("gradient of a bound parameter").shape();
            let data = a.into_iter().map(|x| T::c(x * scale)).collect();
            Ok((name, Tensor::new(shape, data)?))
        })
        .collect::<Result<_>>()?;
    Ok((loss, grads))
}

/// Passed to the observer after every optimizer step.
pub struct StepEvent<'a, T> {
    pub entry: LogEntry,
    pub weights: &'a Weights<T>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub weights: Weights<T>,
    pub log: Vec<LogEntry>,
}

/// Embeds each episode's instruction once.
pub fn embed_episodes(episodes: &[Episode], model: &Rvt, cfg: &TrainConfig) -> Result<Vec<LanguageTokens>> {
    episodes
        .iter()
        .map(|ep| embed_language(&ep.language, cfg.language, model.cfg.d_lang, cfg.language_dir.as_deref()))
        .collect()
}

/// Draws the samples of optimizer step `step` (0-based).
pub fn sample_batch(
    episodes: &[Episode],
    views: &ViewSet,
    res: usize,
    cfg: &TrainConfig,
    step: u64,
) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &[step]));
    let picks: Vec<(usize, usize)> = (0..cfg.batch)
        .map(|_| {
            let e = rng.random_range(0..episodes.len());
            (e, rng.random_range(0..episodes[e].actions.len()))
        })
        .collect();
    let samples: Vec<Option<Sample>> = picks
        .par_iter()
        .enumerate()
        .map(|(b, &(e, k))| {
            make_sample(&episodes[e], k, views, res, cfg, seed::derive(cfg.seed, &[step, b as u64]), e)
        })
        .collect::<Result<_>>()?;
    Ok(samples.into_iter().flatten().collect())
}

/// Runs `cfg.steps` LAMB steps starting from `init`.
pub fn train_loop<T: Real, F>(
    model: &Rvt,
    views: &ViewSet,
    episodes: &[Episode],
    init: Weights<T>,
    cfg: &TrainConfig,
    mut observer: F,
) -> Result<TrainOutcome<T>>
where
    F: FnMut(&StepEvent<T>) -> Result<()>,
{
    cfg.validate()?;
    if episodes.is_empty() {
        return Err(invalid("training needs at least one episode"));
    }
    if views.len() != model.cfg.views {
        return Err(invalid(format!(
            "model expects {} views, view set has {}",
            model.cfg.views,
            views.len()
        )));
    }
    for ep in episodes {
        ep.validate()?;
    }
    let langs = embed_episodes(episodes, model, cfg)?;
    let res = model.cfg.image_res;
    let mut weights = init;
    let mut log = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let samples = sample_batch(episodes, views, res, cfg, step)?;
        if samples.is_empty() {
            return Err(invalid(format!("no usable sample in the batch of step {step}")));
        }
        let (loss, grads) = batch_gradients(model, &weights, &samples, &langs, &cfg.loss)?;
        let lr = lr_at(step + 1, cfg.base_lr, cfg.warmup, cfg.steps);
        lamb_step(&mut weights, &grads, lr, &cfg.lamb)?;
        let entry = LogEntry::new(step + 1, lr, &loss);
        log.push(entry);
        observer(&StepEvent {
            entry,
            weights: &weights,
        })?;
    }
    Ok(TrainOutcome { weights, log })
}
