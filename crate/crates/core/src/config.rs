//! Flat JSON run configuration covering model, views, training and paths.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::EvalConfig;
use crate::decode::{TranslationGrid, DEFAULT_GRID_V};
use crate::error::{bad_config, Result};
use crate::geom::{Vec3, WorkspaceBox, DEFAULT_AUG_TRANSLATION, DEFAULT_AUG_YAW_DEG};
use crate::model::language::LanguageSource;
use crate::model::RvtConfig;
use crate::nnet::LambConfig;
use crate::render::{cube_views, workspace_camera, ProjectionKind, ViewPreset, ViewSet, DEFAULT_SPLAT_RADIUS};
use crate::train::{LossWeights, TrainConfig};
use crate::train::targets::DEFAULT_SIGMA_PX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,

    pub image_res: usize,
    pub patch_px: usize,
    pub d_model: usize,
    pub heads: usize,
    pub depth_local: usize,
    pub depth_joint: usize,
    pub rot_bins: usize,
    pub use_xyz: bool,
    pub use_depth: bool,
    pub max_lang_tokens: usize,
    pub d_gripper: usize,
    pub d_lang: usize,
    pub mlp_hidden: usize,
    pub head_hidden: usize,

    pub view_preset: ViewPreset,
    pub projection: ProjectionKind,
    /// camera positions for the custom preset, each aimed at the box center
    pub custom_eyes: Vec<[f64; 3]>,
    pub workspace_min: [f64; 3],
    pub workspace_max: [f64; 3],
    pub splat_radius: usize,
    pub grid_v: usize,

    pub rot_aug: bool,
    pub aug_translation: f64,
    pub aug_yaw_deg: f64,

    pub steps: u64,
    pub batch: usize,
    pub base_lr: f64,
    pub warmup: u64,
    pub lamb_beta1: f64,
    pub lamb_beta2: f64,
    pub lamb_eps: f64,
    pub weight_decay: f64,
    pub sigma_px: f64,
    pub w_trans: f64,
    pub w_rot: f64,
    pub w_grip: f64,
    pub w_coll: f64,

    pub seed: u64,
    pub init_seed: u64,

    pub tol_trans: f64,
    pub tol_rot_bins: usize,
    pub eval_every: u64,
    pub checkpoint_every: u64,

    pub language: LanguageSource,
    pub language_dir: Option<PathBuf>,
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = RvtConfig::default();
        let ws = WorkspaceBox::default();
        let lamb = LambConfig::default();
        let t = TrainConfig::default();
        let e = EvalConfig::default();
        RunConfig {
            name: "best".into(),
            image_res: m.image_res,
            patch_px: m.patch_px,
            d_model: m.d_model,
            heads: m.heads,
            depth_local: m.depth_local,
            depth_joint: m.depth_joint,
            rot_bins: m.rot_bins,
            use_xyz: m.use_xyz,
            use_depth: m.use_depth,
            max_lang_tokens: m.max_lang_tokens,
            d_gripper: m.d_gripper,
            d_lang: m.d_lang,
            mlp_hidden: m.mlp_hidden,
            head_hidden: m.head_hidden,
            view_preset: ViewPreset::Cube5,
            projection: ProjectionKind::Orthographic,
            custom_eyes: Vec::new(),
            workspace_min: ws.min.to_array(),
            workspace_max: ws.max.to_array(),
            splat_radius: DEFAULT_SPLAT_RADIUS,
            grid_v: DEFAULT_GRID_V,
            rot_aug: true,
            aug_translation: DEFAULT_AUG_TRANSLATION,
            aug_yaw_deg: DEFAULT_AUG_YAW_DEG,
            steps: t.steps,
            batch: t.batch,
            base_lr: t.base_lr,
            warmup: t.warmup,
            lamb_beta1: lamb.beta1,
            lamb_beta2: lamb.beta2,
            lamb_eps: lamb.eps,
            weight_decay: lamb.weight_decay,
            sigma_px: DEFAULT_SIGMA_PX,
            w_trans: 1.0,
            w_rot: 1.0,
            w_grip: 1.0,
            w_coll: 1.0,
            seed: 0,
            init_seed: 0,
            tol_trans: e.tol_trans,
            tol_rot_bins: e.tol_rot_bins,
            eval_every: 0,
            checkpoint_every: 0,
            language: LanguageSource::Stub,
            language_dir: None,
            train_data: None,
            eval_data: None,
            out_dir: None,
        }
    }
}

/// Sensor-like camera positions: two over the shoulders, one in front, one
/// above and slightly behind the table edge.
pub const SENSOR_EYES: [[f64; 3]; 4] = [
    [-0.9, 0.9, 0.9],
    [-0.9, -0.9, 0.9],
    [1.4, 0.0, 0.5],
    [0.3, 0.1, 1.5],
];

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| bad_config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn n_views(&self) -> usize {
        match self.view_preset {
            ViewPreset::Custom => self.custom_eyes.len(),
            p => p.faces().len(),
        }
    }

    pub fn model_config(&self) -> RvtConfig {
        RvtConfig {
            views: self.n_views(),
            image_res: self.image_res,
            patch_px: self.patch_px,
            d_model: self.d_model,
            heads: self.heads,
            depth_local: self.depth_local,
            depth_joint: self.depth_joint,
            rot_bins: self.rot_bins,
            use_xyz: self.use_xyz,
            use_depth: self.use_depth,
            max_lang_tokens: self.max_lang_tokens,
            d_gripper: self.d_gripper,
            d_lang: self.d_lang,
            mlp_hidden: self.mlp_hidden,
            head_hidden: self.head_hidden,
        }
    }

    pub fn workspace(&self) -> Result<WorkspaceBox> {
        WorkspaceBox::new(Vec3::from_array(self.workspace_min), Vec3::from_array(self.workspace_max))
            .map_err(|e| bad_config(e.to_string()))
    }

    pub fn view_set(&self) -> Result<ViewSet> {
        let bounds = self.workspace()?;
        match self.view_preset {
            ViewPreset::Custom => {
                let cams = self
                    .custom_eyes
                    .iter()
                    .map(|&e| workspace_camera(&bounds, Vec3::from_array(e), Vec3::Z, self.projection))
                    .collect::<Result<Vec<_>>>()?;
                ViewSet::custom(cams)
            }
            p => cube_views(&bounds, p, self.projection),
        }
    }

    pub fn grid(&self) -> Result<TranslationGrid> {
        TranslationGrid::new(self.workspace()?, self.grid_v)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            steps: self.steps,
            batch: self.batch,
            base_lr: self.base_lr,
            warmup: self.warmup,
            seed: self.seed,
            aug_translation: self.aug_translation,
            aug_yaw_deg: if self.rot_aug { self.aug_yaw_deg } else { 0.0 },
            splat_radius: self.splat_radius,
            sigma_px: self.sigma_px,
            lamb: LambConfig {
                beta1: self.lamb_beta1,
                beta2: self.lamb_beta2,
                eps: self.lamb_eps,
                weight_decay: self.weight_decay,
            },
            loss: LossWeights {
                trans: self.w_trans,
                rot: self.w_rot,
                grip: self.w_grip,
                coll: self.w_coll,
            },
            bounds: self.workspace()?,
            language: self.language,
            language_dir: self.language_dir.clone(),
        })
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            tol_trans: self.tol_trans,
            tol_rot_bins: self.tol_rot_bins,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.view_preset == ViewPreset::Custom && self.custom_eyes.is_empty() {
            return Err(bad_config("custom view preset needs custom_eyes"));
        }
        if self.view_preset != ViewPreset::Custom && !self.custom_eyes.is_empty() {
            return Err(bad_config("custom_eyes is only used with the custom view preset"));
        }
        self.model_config().validate()?;
        self.view_set().map_err(|e| bad_config(e.to_string()))?;
        self.grid().map_err(|e| bad_config(e.to_string()))?;
        self.train_config()?.validate().map_err(|e| bad_config(e.to_string()))?;
        if !(self.tol_trans >= 0.0) {
            return Err(bad_config("tol_trans must be nonnegative"));
        }
        if self.language == LanguageSource::File && self.language_dir.is_none() {
            return Err(bad_config("file language source needs language_dir"));
        }
        Ok(())
    }

    /// Small configuration for CPU-scale end-to-end runs.
    pub fn desk() -> Self {
        RunConfig {
            name: "desk".into(),
            image_res: 60,
            patch_px: 20,
            d_model: 64,
            heads: 4,
            d_gripper: 16,
            d_lang: 32,
            mlp_hidden: 128,
            head_hidden: 128,
            view_preset: ViewPreset::Cube3,
            workspace_min: [-0.4; 3],
            workspace_max: [0.4; 3],
            grid_v: 40,
            steps: 2000,
            batch: 8,
            base_lr: 4e-3,
            warmup: 100,
            ..RunConfig::default()
        }
    }
}

/// One configuration per row of the rendering/architecture ablation, best
/// row first.
pub fn ablation_rows() -> Vec<RunConfig> {
    let base = RunConfig::default();
    let row = |name: &str, f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        c.name = name.into();
        f(&mut c);
        c
    };
    let real = |c: &mut RunConfig| {
        c.view_preset = ViewPreset::Custom;
        c.custom_eyes = SENSOR_EYES.to_vec();
        c.rot_aug = false;
    };
    vec![
        base.clone(),
        row("res100", &|c| c.image_res = 100),
        row("no_view_corr", &|c| c.use_xyz = false),
        row("no_depth", &|c| c.use_depth = false),
        row("no_sep_proc", &|c| {
            c.depth_local = 0;
            c.depth_joint = 8;
        }),
        row("perspective", &|c| c.projection = ProjectionKind::Perspective),
        row("no_rot_aug", &|c| c.rot_aug = false),
        row("cube3", &|c| c.view_preset = ViewPreset::Cube3),
        row("front1", &|c| c.view_preset = ViewPreset::Front1),
        row("rot15", &|c| c.view_preset = ViewPreset::Cube5Rot15),
        row("real_perspective", &|c| {
            real(c);
            c.projection = ProjectionKind::Perspective;
        }),
        row("real_orthographic", &|c| real(c)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_the_best_row() {
        let c = RunConfig::default();
        assert_eq!(c.image_res, 220);
        assert!(c.use_xyz && c.use_depth && c.rot_aug);
        assert!(c.depth_local > 0);
        assert_eq!(c.projection, ProjectionKind::Orthographic);
        assert_eq!(c.view_preset, ViewPreset::Cube5);
        assert_eq!((c.steps, c.batch, c.base_lr, c.warmup), (100_000, 24, 2.4e-4, 2000));
    }

    #[test]
    fn rows_are_valid_and_distinct() {
        let rows = ablation_rows();
        assert_eq!(rows.len(), 12);
        for (i, r) in rows.iter().enumerate() {
            r.validate().unwrap_or_else(|e| panic!("{}: {e}", r.name));
            let back = RunConfig::from_json(&r.to_json()).unwrap();
            assert_eq!(&back, r);
            for o in &rows[..i] {
                assert_ne!(o, r);
            }
        }
        assert_eq!(rows[8].n_views(), 1);
        assert_eq!(rows[11].n_views(), 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"image_res": 100, "colour": 1}"#).unwrap_err();
        assert!(err.to_string().contains("colour"));
        assert_eq!(RunConfig::from_json(r#"{"image_res": 100}"#).unwrap().image_res, 100);
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(RunConfig::from_json(r#"{"image_res": 101}"#).is_err());
        assert!(RunConfig::from_json(r#"{"view_preset": "custom"}"#).is_err());
        assert!(RunConfig::from_json(r#"{"grid_v": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"depth_local": 3}"#).is_err());
    }

    #[test]
    fn rot_aug_off_keeps_translation_jitter() {
        let c = RunConfig {
            rot_aug: false,
            ..RunConfig::default()
        };
        let t = c.train_config().unwrap();
        assert_eq!(t.aug_yaw_deg, 0.0);
        assert_eq!(t.aug_translation, DEFAULT_AUG_TRANSLATION);
    }
}
