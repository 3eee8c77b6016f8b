//! The multi-view transformer: patch tokens from every virtual view,
//! gripper-state and language fusion, per-view then joint attention, and the
//! heatmap / rotation / gripper / collision heads.

pub mod language;
pub mod patches;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bad_config, invalid, Result};
use crate::nnet::weights::normal;
use crate::nnet::{AttentionMask, Graph, LayerNorm, Linear, Mlp, Real, Tensor, TransformerBlock, Var, Weights};
use crate::render::ViewImage;

pub use language::{embed_language, embed_stub, LanguageSource, LanguageTokens};
pub use patches::{global_feature, pool_heatmap, scatter_tokens, PatchGrid};

/// Angular width of one rotation bin.
pub const ROT_BIN_DEG: f64 = 5.0;
pub const TOTAL_DEPTH: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RvtConfig {
    pub views: usize,
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
    /// width of the gripper-state embedding; 0 disables it
    pub d_gripper: usize,
    pub d_lang: usize,
    pub mlp_hidden: usize,
    pub head_hidden: usize,
}

impl Default for RvtConfig {
    fn default() -> Self {
        RvtConfig {
            views: 5,
            image_res: 220,
            patch_px: 20,
            d_model: 128,
            heads: 4,
            depth_local: 4,
            depth_joint: 4,
            rot_bins: 72,
            use_xyz: true,
            use_depth: true,
            max_lang_tokens: 77,
            d_gripper: 32,
            d_lang: 64,
            mlp_hidden: 512,
            head_hidden: 256,
        }
    }
}

impl RvtConfig {
    pub fn validate(&self) -> Result<()> {
        PatchGrid::new(self.image_res, self.patch_px)?;
        if self.views == 0 {
            return Err(bad_config("at least one view is required"));
        }
        if self.depth_local + self.depth_joint != TOTAL_DEPTH {
            return Err(bad_config(format!(
                "depth_local + depth_joint must be {TOTAL_DEPTH}, got {} + {}",
                self.depth_local, self.depth_joint
            )));
        }
        if self.rot_bins as f64 * ROT_BIN_DEG != 360.0 {
            return Err(bad_config(format!("{} rotation bins do not cover 360 degrees", self.rot_bins)));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(bad_config(format!("d_model {} not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.d_model == 0 || self.d_lang == 0 || self.mlp_hidden == 0 || self.head_hidden == 0 {
            return Err(bad_config("layer widths must be positive"));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        3 + self.use_depth as usize + 3 * self.use_xyz as usize
    }

    pub fn patch_grid(&self) -> PatchGrid {
        PatchGrid {
            res: self.image_res,
            patch: self.patch_px,
        }
    }

    pub fn tokens_per_view(&self) -> usize {
        self.patch_grid().tokens()
    }

    /// Logits produced by the global-feature head.
    pub fn head_outputs(&self) -> usize {
        3 * self.rot_bins + 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GripperState {
    pub open: bool,
    pub time_fraction: f64,
}

/// Per-view patch features, `[K * P^2, p^2 * C]`: pixels row-major inside a
/// patch, channels `rgb, depth?, xyz?` per pixel.
pub fn patch_features(views: &[ViewImage], cfg: &RvtConfig) -> Result<Vec<f64>> {
    let grid = cfg.patch_grid();
    let pp = grid.patch * grid.patch;
    let c = cfg.channels();
    let mut out = Vec::with_capacity(views.len() * grid.pixels() * c);
    for (k, view) in views.iter().enumerate() {
        if view.height != cfg.image_res || view.width != cfg.image_res {
            return Err(invalid(format!(
                "view {k} is {}x{}, model expects {}x{}",
                view.height, view.width, cfg.image_res, cfg.image_res
            )));
        }
        for t in 0..grid.tokens() {
            for s in 0..pp {
                let px = grid.pixel_of(t, s);
                out.extend_from_slice(&view.rgb[3 * px..3 * px + 3]);
                if cfg.use_depth {
                    out.push(view.depth[px]);
                }
                if cfg.use_xyz {
                    out.extend_from_slice(&view.xyz[3 * px..3 * px + 3]);
                }
            }
        }
    }
    Ok(out)
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// per view, `[1, H * W]`
    pub heatmap_logits: Vec<Var>,
    pub heatmap_probs: Vec<Var>,
    /// per view, `[P^2, d_model]`
    pub features: Vec<Var>,
    /// `[1, 2 * K * d_model]`
    pub global: Var,
    /// `[3, rot_bins]`
    pub rot_logits: Var,
    pub gripper_logit: Var,
    pub collision_logit: Var,
}

/// Plain values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub heatmap_logits: Vec<Vec<f64>>,
    pub features: Vec<Vec<f64>>,
    pub rot_logits: Vec<f64>,
    pub gripper_logit: f64,
    pub collision_logit: f64,
}

impl ModelOutput {
    pub fn views(&self) -> usize {
        self.heatmap_logits.len()
    }

    pub fn rot_row(&self, axis: usize) -> &[f64] {
        let bins = self.rot_logits.len() / 3;
        &self.rot_logits[axis * bins..(axis + 1) * bins]
    }
}

#[derive(Debug, Clone)]
pub struct Rvt {
    pub cfg: RvtConfig,
    patch: Linear,
    gripper: Option<Mlp>,
    lang: Linear,
    local: Vec<TransformerBlock>,
    joint: Vec<TransformerBlock>,
    final_ln: LayerNorm,
    heat: Linear,
    head: Mlp,
}

impl Rvt {
    pub fn new(cfg: RvtConfig) -> Result<Self> {
        cfg.validate()?;
        let pp = cfg.patch_px * cfg.patch_px;
        let d = cfg.d_model;
        let block = |name: String| TransformerBlock::new(&name, d, cfg.heads, cfg.mlp_hidden);
        Ok(Rvt {
            patch: Linear::new("patch", pp * cfg.channels() + cfg.d_gripper, d),
            gripper: (cfg.d_gripper > 0).then(|| Mlp::new("gripper", 2, cfg.d_gripper, cfg.d_gripper)),
            lang: Linear::new("lang", cfg.d_lang, d),
            local: (0..cfg.depth_local).map(|i| block(format!("local.{i}"))).collect(),
            joint: (0..cfg.depth_joint).map(|i| block(format!("joint.{i}"))).collect(),
            final_ln: LayerNorm::new("final_ln", d),
            heat: Linear::new("heat", d, pp),
            head: Mlp::new("head", 2 * cfg.views * d, cfg.head_hidden, cfg.head_outputs()),
            cfg,
        })
    }

    pub fn init_weights<T: Real>(&self, seed: u64) -> Result<Weights<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Weights::new();
        let cfg = &self.cfg;
        self.patch.init(&mut w, &mut rng)?;
        if let Some(m) = &self.gripper {
            m.init(&mut w, &mut rng)?;
        }
        self.lang.init(&mut w, &mut rng)?;
        w.insert("pos.image", normal(&mut rng, &[cfg.views * cfg.tokens_per_view(), cfg.d_model], 0.02))?;
        w.insert("pos.lang", normal(&mut rng, &[cfg.max_lang_tokens.max(1), cfg.d_model], 0.02))?;
        for b in self.local.iter().chain(&self.joint) {
            b.init(&mut w, &mut rng)?;
        }
        self.final_ln.init(&mut w)?;
        self.heat.init(&mut w, &mut rng)?;
        self.head.init(&mut w, &mut rng)?;
        Ok(w)
    }

    /// Stage-1 input: projected patches plus positional embeddings,
    /// `[K * P^2, d_model]`.
    pub fn image_tokens<T: Real>(&self, g: &mut Graph<T>, views: &[ViewImage], gripper: GripperState) -> Result<Var> {
        let cfg = &self.cfg;
        if views.len() != cfg.views {
            return Err(invalid(format!("model expects {} views, got {}", cfg.views, views.len())));
        }
        let n = cfg.views * cfg.tokens_per_view();
        let feats = patch_features(views, cfg)?;
        let cols = feats.len() / n;
        let x = g.constant(Tensor::from_f64(&[n, cols], &feats)?);
        let x = match &self.gripper {
            Some(mlp) => {
                let state = [if gripper.open { 1.0 } else { 0.0 }, gripper.time_fraction];
                let s = g.constant(Tensor::from_f64(&[1, 2], &state)?);
                let emb = mlp.forward(g, s)?;
                let emb = g.repeat_rows(emb, n)?;
                g.concat_cols(&[x, emb])?
            }
            None => x,
        };
        let tokens = self.patch.forward(g, x)?;
        let pos = g.p("pos.image")?;
        g.add(tokens, pos)
    }

    /// Projected language tokens plus positional embeddings, `[L, d_model]`.
    pub fn language_tokens<T: Real>(&self, g: &mut Graph<T>, lang: &LanguageTokens) -> Result<Option<Var>> {
        if lang.len == 0 {
            return Ok(None);
        }
        if lang.len > self.cfg.max_lang_tokens {
            return Err(invalid(format!(
                "{} language tokens exceed the limit of {}",
                lang.len, self.cfg.max_lang_tokens
            )));
        }
        if lang.dim != self.cfg.d_lang {
            return Err(invalid(format!("language dim {} but model expects {}", lang.dim, self.cfg.d_lang)));
        }
        let x = g.constant(Tensor::from_f64(&[lang.len, lang.dim], &lang.embeddings)?);
        let x = self.lang.forward(g, x)?;
        let pos = g.p("pos.lang")?;
        let pos = g.slice_rows(pos, 0, lang.len)?;
        Ok(Some(g.add(x, pos)?))
    }

    /// Per-view attention blocks.
    pub fn stage1<T: Real>(&self, g: &mut Graph<T>, tokens: Var) -> Result<Var> {
        let mask = AttentionMask::block_diagonal(&vec![self.cfg.tokens_per_view(); self.cfg.views])?;
        let mut x = tokens;
        for b in &self.local {
            x = b.forward(g, x, Some(&mask))?;
        }
        Ok(x)
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        views: &[ViewImage],
        lang: &LanguageTokens,
        gripper: GripperState,
    ) -> Result<ForwardVars> {
        let cfg = &self.cfg;
        let grid = cfg.patch_grid();
        let (per_view, n_img) = (grid.tokens(), cfg.views * grid.tokens());

        let img = self.image_tokens(g, views, gripper)?;
        let img = self.stage1(g, img)?;
        let mut x = match self.language_tokens(g, lang)? {
            Some(l) => g.concat_rows(&[img, l])?,
            None => img,
        };
        for b in &self.joint {
            x = b.forward(g, x, None)?;
        }
        let x = if g.shape(x)[0] == n_img { x } else { g.slice_rows(x, 0, n_img)? };
        let x = self.final_ln.forward(g, x)?;

        let dec = self.heat.forward(g, x)?;
        let (scatter, pool) = (grid.scatter_index(), grid.patchify_index());
        let pp = grid.patch * grid.patch;
        let mut heatmap_logits = Vec::with_capacity(cfg.views);
        let mut heatmap_probs = Vec::with_capacity(cfg.views);
        let mut features = Vec::with_capacity(cfg.views);
        let mut phi = Vec::with_capacity(cfg.views);
        let mut psi = Vec::with_capacity(cfg.views);
        for k in 0..cfg.views {
            let f = g.slice_rows(x, k * per_view, per_view)?;
            let d = g.slice_rows(dec, k * per_view, per_view)?;
            let logits = g.gather(d, scatter.clone(), &[1, grid.pixels()])?;
            let probs = g.softmax(logits, None)?;
            let pooled = g.gather(probs, pool.clone(), &[per_view, pp])?;
            let w = g.sum_last(pooled)?;
            let w = g.reshape(w, &[1, per_view])?;
            phi.push(g.matmul(w, f)?);
            psi.push(g.max_rows(f)?);
            heatmap_logits.push(logits);
            heatmap_probs.push(probs);
            features.push(f);
        }
        phi.extend(psi);
        let global = g.concat_cols(&phi)?;
        let out = self.head.forward(g, global)?;
        let bins = cfg.rot_bins;
        let rot = g.slice_cols(out, 0, 3 * bins)?;
        let rot_logits = g.reshape(rot, &[3, bins])?;
        let gripper_logit = g.slice_cols(out, 3 * bins, 1)?;
        let collision_logit = g.slice_cols(out, 3 * bins + 1, 1)?;
        Ok(ForwardVars {
            heatmap_logits,
            heatmap_probs,
            features,
            global,
            rot_logits,
            gripper_logit,
            collision_logit,
        })
    }

    /// Runs a forward pass and copies every output out of the graph.
    pub fn predict<T: Real>(
        &self,
        weights: &Weights<T>,
        views: &[ViewImage],
        lang: &LanguageTokens,
        gripper: GripperState,
    ) -> Result<ModelOutput> {
        let mut g = Graph::new();
        g.bind(weights)?;
        let fv = self.forward(&mut g, views, lang, gripper)?;
        Ok(self.output_values(&g, &fv))
    }

    pub fn output_values<T: Real>(&self, g: &Graph<T>, fv: &ForwardVars) -> ModelOutput {
        let vals = |v: Var| g.value(v).to_f64();
        ModelOutput {
            heatmap_logits: fv.heatmap_logits.iter().map(|&v| vals(v)).collect(),
            features: fv.features.iter().map(|&v| vals(v)).collect(),
            rot_logits: vals(fv.rot_logits),
            gripper_logit: vals(fv.gripper_logit)[0],
            collision_logit: vals(fv.collision_logit)[0],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{PointCloud, Vec3, WorkspaceBox};
    use crate::render::{cube_views, render_views, ProjectionKind, ViewPreset};

    pub(crate) fn toy_config() -> RvtConfig {
        RvtConfig {
            views: 3,
            image_res: 8,
            patch_px: 4,
            d_model: 8,
            heads: 2,
            depth_local: 4,
            depth_joint: 4,
            rot_bins: 72,
            use_xyz: true,
            use_depth: true,
            max_lang_tokens: 8,
            d_gripper: 4,
            d_lang: 6,
            mlp_hidden: 16,
            head_hidden: 8,
        }
    }

    fn scene() -> PointCloud {
        let mut pos = Vec::new();
        let mut col = Vec::new();
        for i in 0..200 {
            let t = i as f64;
            pos.push(Vec3::new((t * 0.37).sin() * 0.4, (t * 0.61).cos() * 0.4, (t * 0.13).sin() * 0.3));
            col.push([(t * 0.1).sin().abs(), (t * 0.2).cos().abs(), 0.5]);
        }
        PointCloud::new(pos, col).unwrap()
    }

    fn views(cfg: &RvtConfig) -> Vec<ViewImage> {
        let vs = cube_views(&WorkspaceBox::default(), ViewPreset::Cube3, ProjectionKind::Orthographic).unwrap();
        render_views(&scene(), &vs, cfg.image_res, 1).unwrap()
    }

    const OPEN: GripperState = GripperState {
        open: true,
        time_fraction: 0.25,
    };

    #[test]
    fn config_rules() {
        assert!(RvtConfig::default().validate().is_ok());
        let bad = |f: fn(&mut RvtConfig)| {
            let mut c = RvtConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.patch_px = 30));
        assert!(bad(|c| c.depth_joint = 5));
        assert!(bad(|c| c.rot_bins = 36));
        assert!(bad(|c| c.heads = 3));
        let c = RvtConfig {
            depth_local: 0,
            depth_joint: 8,
            ..RvtConfig::default()
        };
        assert!(c.validate().is_ok());
    }

    #[test]
    fn output_shapes_follow_config() {
        let cfg = toy_config();
        let m = Rvt::new(cfg.clone()).unwrap();
        let w = m.init_weights::<f64>(1).unwrap();
        let out = m.predict(&w, &views(&cfg), &embed_stub("reach the red block", 6), OPEN).unwrap();
        assert_eq!(out.views(), 3);
        assert!(out.heatmap_logits.iter().all(|h| h.len() == 64));
        assert!(out.features.iter().all(|f| f.len() == 4 * 8));
        assert_eq!(out.rot_logits.len(), 3 * 72);
    }

    #[test]
    fn global_feature_width_is_2kd() {
        let cfg = toy_config();
        let m = Rvt::new(cfg.clone()).unwrap();
        let w = m.init_weights::<f64>(1).unwrap();
        let mut g = Graph::new();
        g.bind(&w).unwrap();
        let fv = m.forward(&mut g, &views(&cfg), &LanguageTokens::empty(6), OPEN).unwrap();
        assert_eq!(g.shape(fv.global), &[1, 2 * 3 * 8]);
    }

    #[test]
    fn graph_global_feature_matches_plain() {
        let cfg = toy_config();
        let m = Rvt::new(cfg.clone()).unwrap();
        let w = m.init_weights::<f64>(3).unwrap();
        let mut g = Graph::new();
        g.bind(&w).unwrap();
        let fv = m.forward(&mut g, &views(&cfg), &embed_stub("pick it", 6), OPEN).unwrap();
        let feats: Vec<Vec<f64>> = fv.features.iter().map(|&v| g.value(v).to_f64()).collect();
        let heats: Vec<Vec<f64>> = fv.heatmap_probs.iter().map(|&v| g.value(v).to_f64()).collect();
        let plain = global_feature(&cfg.patch_grid(), &feats, &heats, cfg.d_model).unwrap();
        for (a, b) in g.value(fv.global).data().iter().zip(&plain) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_view_count_is_rejected() {
        let cfg = toy_config();
        let m = Rvt::new(cfg.clone()).unwrap();
        let w = m.init_weights::<f64>(1).unwrap();
        let v = views(&cfg);
        assert!(m.predict(&w, &v[..2], &LanguageTokens::empty(6), OPEN).is_err());
    }

    #[test]
    fn identical_views_differ_only_by_position() {
        let cfg = toy_config();
        let m = Rvt::new(cfg.clone()).unwrap();
        let mut w = m.init_weights::<f64>(2).unwrap();
        let one = views(&cfg)[0].clone();
        let vs = vec![one.clone(), one.clone(), one];
        let tokens = |w: &Weights<f64>| {
            let mut g = Graph::new();
            g.bind(w).unwrap();
            let t = m.image_tokens(&mut g, &vs, OPEN).unwrap();
            g.value(t).data().to_vec()
        };
        let with_pos = tokens(&w);
        assert_ne!(with_pos[..32], with_pos[32..64]);
        w.get_mut("pos.image").unwrap().data_mut().fill(0.0);
        let without = tokens(&w);
        assert_eq!(without[..32], without[32..64]);
        assert_eq!(without[..32], without[64..96]);
    }

    #[test]
    fn gripper_state_changes_tokens_unless_disabled() {
        let cfg = toy_config();
        let vs = views(&cfg);
        let closed = GripperState {
            open: false,
            ..OPEN
        };
        let run = |cfg: &RvtConfig, s: GripperState| {
            let m = Rvt::new(cfg.clone()).unwrap();
            let w = m.init_weights::<f64>(4).unwrap();
            let mut g = Graph::new();
            g.bind(&w).unwrap();
            let t = m.image_tokens(&mut g, &vs, s).unwrap();
            g.value(t).data().to_vec()
        };
        assert_ne!(run(&cfg, OPEN), run(&cfg, closed));
        let off = RvtConfig {
            d_gripper: 0,
            ..cfg
        };
        assert_eq!(run(&off, OPEN), run(&off, closed));
    }

    #[test]
    fn stage1_views_are_isolated() {
        let cfg = toy_config();
        let m = Rvt::new(cfg.clone()).unwrap();
        let w = m.init_weights::<f64>(5).unwrap();
        let mut g = Graph::new();
        g.bind(&w).unwrap();
        let t = m.image_tokens(&mut g, &views(&cfg), OPEN).unwrap();
        let base = m.stage1(&mut g, t).unwrap();
        let mut alt = g.value(t).clone();
        for (i, v) in alt.data_mut()[32..64].iter_mut().enumerate() {
            *v = (i as f64 * 2.7).cos() * 50.0;
        }
        let t2 = g.constant(alt);
        let other = m.stage1(&mut g, t2).unwrap();
        let (a, b) = (g.value(base).data(), g.value(other).data());
        assert_eq!(a[..32], b[..32]);
        assert_eq!(a[64..], b[64..]);
        assert_ne!(a[32..64], b[32..64]);
    }

    #[test]
    fn language_order_is_irrelevant_without_positions() {
        let cfg = toy_config();
        let m = Rvt::new(cfg.clone()).unwrap();
        let mut w = m.init_weights::<f64>(6).unwrap();
        w.get_mut("pos.lang").unwrap().data_mut().fill(0.0);
        let lang = embed_stub("pick the blue block now", 6);
        let vs = views(&cfg);
        let a = m.predict(&w, &vs, &lang, OPEN).unwrap();
        let b = m.predict(&w, &vs, &lang.permuted(&[3, 0, 4, 2, 1]), OPEN).unwrap();
        let close = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-9);
        assert!(close(&a.rot_logits, &b.rot_logits));
        for k in 0..3 {
            assert!(close(&a.heatmap_logits[k], &b.heatmap_logits[k]));
        }
        assert!((a.gripper_logit - b.gripper_logit).abs() < 1e-9);
    }

    #[test]
    fn empty_language_runs_and_limit_is_enforced() {
        let cfg = toy_config();
        let m = Rvt::new(cfg.clone()).unwrap();
        let w = m.init_weights::<f64>(7).unwrap();
        let vs = views(&cfg);
        assert!(m.predict(&w, &vs, &embed_stub("", 6), OPEN).is_ok());
        let long = embed_stub("a b c d e f g h i", 6);
        assert!(m.predict(&w, &vs, &long, OPEN).is_err());
    }

    #[test]
    fn zero_heat_decoder_gives_zero_logits() {
        let cfg = toy_config();
        let m = Rvt::new(cfg.clone()).unwrap();
        let mut w = m.init_weights::<f64>(8).unwrap();
        w.get_mut("heat.weight").unwrap().data_mut().fill(0.0);
        let out = m.predict(&w, &views(&cfg), &LanguageTokens::empty(6), OPEN).unwrap();
        assert!(out.heatmap_logits.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn paper_scale_token_count() {
        let cfg = RvtConfig::default();
        assert_eq!(cfg.views * cfg.tokens_per_view(), 605);
        assert_eq!(cfg.head_outputs(), 3 * 72 + 2);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = toy_config();
        let m = Rvt::new(cfg.clone()).unwrap();
        let w = m.init_weights::<f32>(9).unwrap();
        let vs = views(&cfg);
        let lang = embed_stub("reach", 6);
        assert_eq!(m.predict(&w, &vs, &lang, OPEN).unwrap(), m.predict(&w, &vs, &lang, OPEN).unwrap());
    }
}
