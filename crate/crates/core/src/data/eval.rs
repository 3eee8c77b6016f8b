use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::episode::Episode;
use crate::decode::{assemble_action, ActionPrediction, TranslationGrid};
use crate::error::Result;
use crate::geom::{crop_to_workspace, WorkspaceBox};
use crate::model::language::{embed_language, LanguageSource};
use crate::model::{Rvt, ROT_BIN_DEG};
use crate::nnet::{Real, Weights};
use crate::render::{render_views, ViewSet};
use crate::train::targets::rot_to_bins;

pub const DEFAULT_TOL_TRANS: f64 = 0.03;
pub const DEFAULT_TOL_ROT_BINS: usize = 1;

/// Predicts the action for keyframe `k` of an episode from its observation.
pub trait Policy: Sync {
    fn act(&self, ep: &Episode, k: usize) -> Result<ActionPrediction>;
}

impl<F> Policy for F
where
    F: Fn(&Episode, usize) -> Result<ActionPrediction> + Sync,
{
    fn act(&self, ep: &Episode, k: usize) -> Result<ActionPrediction> {
        self(ep, k)
    }
}

/// Replays the demonstrated actions.
pub struct GtPolicy;

impl Policy for GtPolicy {
    fn act(&self, ep: &Episode, k: usize) -> Result<ActionPrediction> {
        let a = ep.actions[k];
        Ok(ActionPrediction {
            translation: a.translation,
            euler: a.euler,
            gripper_open: a.gripper_open,
            collision_allowed: a.collision_allowed,
            score: 1.0,
        })
    }
}

/// Full pipeline: crop, render, run the network, back-project.
pub struct ModelPolicy<'a, T: Real> {
    pub model: &'a Rvt,
    pub weights: &'a Weights<T>,
    pub views: ViewSet,
    pub bounds: WorkspaceBox,
    pub grid: TranslationGrid,
    pub splat_radius: usize,
    pub language: LanguageSource,
    pub language_dir: Option<PathBuf>,
}

impl<T: Real> Policy for ModelPolicy<'_, T> {
    fn act(&self, ep: &Episode, k: usize) -> Result<ActionPrediction> {
        let obs = ep.observation(k);
        let cloud = crop_to_workspace(&obs.cloud, &self.bounds);
        let res = self.model.cfg.image_res;
        let imgs = render_views(&cloud, &self.views, res, self.splat_radius)?;
        let lang = embed_language(
            &ep.language,
            self.language,
            self.model.cfg.d_lang,
            self.language_dir.as_deref(),
        )?;
        let out = self.model.predict(self.weights, &imgs, &lang, obs.gripper)?;
        assemble_action(&out, &self.views, res, &self.grid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub tol_trans: f64,
    pub tol_rot_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tol_trans: DEFAULT_TOL_TRANS,
            tol_rot_bins: DEFAULT_TOL_ROT_BINS,
        }
    }
}

/// Success rates in [0, 1]; per-criterion rates are over keyframes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub episodes: usize,
    pub keyframes: usize,
    pub translation: f64,
    pub rotation: f64,
    pub gripper: f64,
    pub collision: f64,
    /// keyframes correct on every criterion
    pub keyframe: f64,
    pub episode: f64,
    pub mean_trans_error: f64,
}

impl EvalMetrics {
    pub const TSV_HEADER: &'static str =
        "episodes\tkeyframes\ttranslation\trotation\tgripper\tcollision\tkeyframe\tepisode\tmean_trans_err_m";

    /// Rates as percentages with one decimal.
    pub fn tsv_row(&self) -> String {
        let pct = |x: f64| format!("{:.1}", 100.0 * x);
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.5}",
            self.episodes,
            self.keyframes,
            pct(self.translation),
            pct(self.rotation),
            pct(self.gripper),
            pct(self.collision),
            pct(self.keyframe),
            pct(self.episode),
            self.mean_trans_error
        )
    }
}

/// Circular distance between two rotation bins.
pub fn bin_distance(a: usize, b: usize) -> usize {
    let n = (360.0 / ROT_BIN_DEG) as usize;
    let d = a.abs_diff(b) % n;
    d.min(n - d)
}

#[derive(Default, Clone, Copy)]
struct Tally {
    keyframes: usize,
    trans: usize,
    rot: usize,
    grip: usize,
    coll: usize,
    all: usize,
    episodes_ok: usize,
    err_sum: f64,
}

fn score_episode(policy: &dyn Policy, ep: &Episode, cfg: &EvalConfig) -> Result<Tally> {
    let mut t = Tally::default();
    let mut ep_ok = true;
    for (k, gt) in ep.actions.iter().enumerate() {
        let p = policy.act(ep, k)?;
        let err = p.translation.distance(gt.translation);
        let trans = err <= cfg.tol_trans;
        let (pb, gb) = (rot_to_bins(p.euler), rot_to_bins(gt.euler));
        let rot = (0..3).all(|i| bin_distance(pb[i], gb[i]) <= cfg.tol_rot_bins);
        let grip = p.gripper_open == gt.gripper_open;
        let coll = p.collision_allowed == gt.collision_allowed;
        let all = trans && rot && grip && coll;
        t.keyframes += 1;
        t.trans += trans as usize;
        t.rot += rot as usize;
        t.grip += grip as usize;
        t.coll += coll as usize;
        t.all += all as usize;
        t.err_sum += err;
        ep_ok &= all;
    }
    t.episodes_ok = ep_ok as usize;
    Ok(t)
}

pub fn evaluate<P: Policy>(policy: &P, episodes: &[Episode], cfg: &EvalConfig) -> Result<EvalMetrics> {
    let tallies = episodes
        .par_iter()
        .map(|ep| score_episode(policy, ep, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut s = Tally::default();
    for t in &tallies {
        s.keyframes += t.keyframes;
        s.trans += t.trans;
        s.rot += t.rot;
        s.grip += t.grip;
        s.coll += t.coll;
        s.all += t.all;
        s.episodes_ok += t.episodes_ok;
        s.err_sum += t.err_sum;
    }
    let rate = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    Ok(EvalMetrics {
        episodes: episodes.len(),
        keyframes: s.keyframes,
        translation: rate(s.trans, s.keyframes),
        rotation: rate(s.rot, s.keyframes),
        gripper: rate(s.grip, s.keyframes),
        collision: rate(s.coll, s.keyframes),
        keyframe: rate(s.all, s.keyframes),
        episode: rate(s.episodes_ok, episodes.len()),
        mean_trans_error: if s.keyframes == 0 { 0.0 } else { s.err_sum / s.keyframes as f64 },
    })
}
