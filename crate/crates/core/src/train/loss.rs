use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::targets::GtTargets;
use crate::error::{invalid, Error, Result};
use crate::model::{ForwardVars, ModelOutput};
use crate::nnet::{Graph, Real, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub trans: f64,
    pub rot: f64,
    pub grip: f64,
    pub coll: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            trans: 1.0,
            rot: 1.0,
            grip: 1.0,
            coll: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub trans: f64,
    pub rot: f64,
    pub grip: f64,
    pub coll: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn add_scaled(&mut self, o: &LossBreakdown, s: f64) {
        self.trans += s * o.trans;
        self.rot += s * o.rot;
        self.grip += s * o.grip;
        self.coll += s * o.coll;
        self.total += s * o.total;
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub trans: Var,
    pub rot: Var,
    pub grip: Var,
    pub coll: Var,
    pub total: Var,
}

impl LossVars {
    pub fn values<T: Real>(&self, g: &Graph<T>) -> LossBreakdown {
        let v = |x: Var| g.value(x).data()[0].as_f64();
        LossBreakdown {
            trans: v(self.trans),
            rot: v(self.rot),
            grip: v(self.grip),
            coll: v(self.coll),
            total: v(self.total),
        }
    }
}

/// Soft cross-entropy per visible view (mean), one-hot cross-entropy per
/// Euler angle (mean), and binary cross-entropy for gripper and collision.
pub fn loss_terms<T: Real>(
    g: &mut Graph<T>,
    heatmap_logits: &[Var],
    rot_logits: Var,
    gripper_logit: Var,
    collision_logit: Var,
    gt: &GtTargets,
    w: &LossWeights,
) -> Result<LossVars> {
    if heatmap_logits.len() != gt.heatmaps.len() {
        return Err(Error::shape("loss", &[heatmap_logits.len()], &[gt.heatmaps.len()]));
    }
    if !gt.any_visible() {
        return Err(invalid("target point is invisible in every view"));
    }
    let mut per_view = Vec::new();
    for ((&logits, target), &vis) in heatmap_logits.iter().zip(&gt.heatmaps).zip(&gt.visible) {
        if !vis {
            continue;
        }
        let ls = g.log_softmax(logits)?;
        let t = g.constant(Tensor::from_f64(g.shape(ls), target)?);
        let prod = g.mul(ls, t)?;
        per_view.push(g.sum(prod)?);
    }
    let n_vis = per_view.len() as f64;
    let mut trans = per_view[0];
    for &v in &per_view[1..] {
        trans = g.add(trans, v)?;
    }
    let trans = g.scale(trans, -1.0 / n_vis)?;

    let bins = g.shape(rot_logits)[1];
    if gt.rot_bins.iter().any(|&b| b >= bins) {
        return Err(invalid("rotation bin out of range"));
    }
    let ls = g.log_softmax(rot_logits)?;
    let picked: Arc<[usize]> = (0..3).map(|i| i * bins + gt.rot_bins[i]).collect();
    let picked = g.gather(ls, picked, &[3])?;
    let rot = g.sum(picked)?;
    let rot = g.scale(rot, -1.0 / 3.0)?;

    let grip = g.bce_with_logits(gripper_logit, &[gt.gripper])?;
    let grip = g.sum(grip)?;
    let coll = g.bce_with_logits(collision_logit, &[gt.collision])?;
    let coll = g.sum(coll)?;

    let mut total = g.scale(trans, w.trans)?;
    for (v, s) in [(rot, w.rot), (grip, w.grip), (coll, w.coll)] {
        let sv = g.scale(v, s)?;
        total = g.add(total, sv)?;
    }
    Ok(LossVars {
        trans,
        rot,
        grip,
        coll,
        total,
    })
}

pub fn loss_graph<T: Real>(g: &mut Graph<T>, fv: &ForwardVars, gt: &GtTargets, w: &LossWeights) -> Result<LossVars> {
    loss_terms(
        g,
        &fv.heatmap_logits,
        fv.rot_logits,
        fv.gripper_logit,
        fv.collision_logit,
        gt,
        w,
    )
}

/// Loss of plain model outputs, with unit weights.
pub fn loss(out: &ModelOutput, gt: &GtTargets) -> Result<LossBreakdown> {
    let mut g = Graph::<f64>::new();
    let heat: Vec<Var> = out
        .heatmap_logits
        .iter()
        .map(|h| Ok(g.constant(Tensor::new(&[1, h.len()], h.clone())?)))
        .collect::<Result<_>>()?;
    let bins = out.rot_logits.len() / 3;
    let rot = g.constant(Tensor::new(&[3, bins], out.rot_logits.clone())?);
    let grip = g.constant(Tensor::new(&[1, 1], vec![out.gripper_logit])?);
    let coll = g.constant(Tensor::new(&[1, 1], vec![out.collision_logit])?);
    let lv = loss_terms(&mut g, &heat, rot, grip, coll, gt, &LossWeights::default())?;
    Ok(lv.values(&g))
}

/// Entropy of a distribution, `0 log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(maps: Vec<Vec<f64>>, visible: Vec<bool>) -> GtTargets {
        GtTargets {
            heatmaps: maps,
            visible,
            rot_bins: [0, 10, 71],
            gripper: 1.0,
            collision: 0.0,
        }
    }

    fn out(heat: Vec<Vec<f64>>) -> ModelOutput {
        ModelOutput {
            heatmap_logits: heat,
            features: vec![],
            rot_logits: vec![0.0; 216],
            gripper_logit: 0.0,
            collision_logit: 0.0,
        }
    }

    #[test]
    fn uniform_prediction_costs_log_pixels() {
        let mut t = vec![0.0; 400];
        t[17] = 0.5;
        t[18] = 0.5;
        let l = loss(&out(vec![vec![0.0; 400]; 2]), &gt(vec![t.clone(), t], vec![true, true])).unwrap();
        assert!((l.trans - 400f64.ln()).abs() < 1e-9);
        assert!((l.rot - 72f64.ln()).abs() < 1e-12);
        assert!((l.grip - 2f64.ln()).abs() < 1e-12);
        assert!((l.total - (l.trans + l.rot + l.grip + l.coll)).abs() < 1e-12);
    }

    #[test]
    fn exact_prediction_costs_entropy() {
        let t = vec![0.1, 0.2, 0.3, 0.4];
        let logits: Vec<f64> = t.iter().map(|x: &f64| x.ln() + 3.0).collect();
        let l = loss(&out(vec![logits]), &gt(vec![t.clone()], vec![true])).unwrap();
        assert!((l.trans - entropy(&t)).abs() < 1e-12);
    }

    #[test]
    fn invisible_views_are_skipped() {
        let t = vec![0.25; 4];
        let bad = vec![9.0, -9.0, 0.0, 0.0];
        let l = loss(&out(vec![vec![0.0; 4], bad]), &gt(vec![t.clone(), vec![0.0; 4]], vec![true, false])).unwrap();
        assert!((l.trans - 4f64.ln()).abs() < 1e-12);
        assert!(loss(&out(vec![vec![0.0; 4]]), &gt(vec![vec![0.0; 4]], vec![false])).is_err());
    }
}
