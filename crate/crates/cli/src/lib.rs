//! Subcommands of the `rvt` binary.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rvt::bench::{run_bench, BENCH_HEADER};
use rvt::config::{ablation_rows, RunConfig};
use rvt::data::{
    evaluate, gen_synthetic, load_dataset, save_dataset, EvalMetrics, GtPolicy, ModelPolicy, SyntheticTaskSpec, Task,
};
use rvt::decode::{backproject_scores, export_score_volume, softmax};
use rvt::geom::crop_to_workspace;
use rvt::model::language::embed_language;
use rvt::model::Rvt;
use rvt::nnet::{checkpoint, Weights};
use rvt::render::{cube_views, export_view, render_views, write_ppm, ProjectionKind, ViewPreset};
use rvt::train::{gt_heatmap, train_loop};
use rvt::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "rvt", version, about = "Multi-view transformer policy: data, rendering, training, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset
    Gen(GenArgs),
    /// Render one observation's views to image files
    Render(RenderArgs),
    /// Train from a run config
    Train(TrainArgs),
    /// Evaluate a checkpoint and print a TSV table
    Eval(EvalArgs),
    /// Overlay predicted and target heatmaps on the rendered views
    Viz(VizArgs),
    /// Time view rendering against voxelization
    Bench(BenchArgs),
    /// Print a run config as JSON
    Config(ConfigArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TaskArg {
    Reach,
    Pick,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_enum, default_value = "reach")]
    pub task: TaskArg,
    #[arg(long, default_value_t = 100)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub distractors: usize,
    /// pick only: return to the hover pose after grasping
    #[arg(long)]
    pub lift: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigSel {
    /// run config JSON; defaults to the best ablation row
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl ConfigSel {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    pub cfg: ConfigSel,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub episode: usize,
    #[arg(long, default_value_t = 0)]
    pub keyframe: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigSel,
    /// overrides `train_data`
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// overrides `eval_data`
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// overrides `out_dir`
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// overrides `steps`
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub cfg: ConfigSel,
    #[arg(long, required_unless_present = "gt")]
    pub checkpoint: Option<PathBuf>,
    /// overrides `eval_data`
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// score the demonstrated actions instead of a model
    #[arg(long)]
    pub gt: bool,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    #[command(flatten)]
    pub cfg: ConfigSel,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub episode: usize,
    #[arg(long, default_value_t = 0)]
    pub keyframe: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PresetArg {
    Cube5,
    Cube3,
    Front1,
    Cube5Rot15,
}

impl From<PresetArg> for ViewPreset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Cube5 => ViewPreset::Cube5,
            PresetArg::Cube3 => ViewPreset::Cube3,
            PresetArg::Front1 => ViewPreset::Front1,
            PresetArg::Cube5Rot15 => ViewPreset::Cube5Rot15,
        }
    }
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// point counts
    #[arg(long, value_delimiter = ',', default_values_t = [10_000usize, 100_000])]
    pub sizes: Vec<usize>,
    #[arg(long, value_enum, default_value = "cube5")]
    pub preset: PresetArg,
    #[arg(long, default_value_t = 220)]
    pub res: usize,
    /// voxel grid side
    #[arg(long, default_value_t = 100)]
    pub voxels: usize,
    #[arg(long, default_value_t = 1)]
    pub splat: usize,
    /// skip the model forward row
    #[arg(long)]
    pub no_forward: bool,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// `desk` or an ablation row name; `list` prints the names
    #[arg(long, default_value = "best")]
    pub row: String,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a, out),
        Command::Render(a) => cmd_render(&a, out),
        Command::Train(a) => cmd_train(&a, out).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a, out).map(|_| ()),
        Command::Viz(a) => cmd_viz(&a, out),
        Command::Bench(a) => cmd_bench(&a, out),
        Command::Config(a) => cmd_config(&a, out),
    }
}

pub fn cmd_gen(a: &GenArgs, out: &mut dyn Write) -> Result<()> {
    let spec = SyntheticTaskSpec {
        task: match a.task {
            TaskArg::Reach => Task::Reach,
            TaskArg::Pick => Task::Pick,
        },
        n_distractors: a.distractors,
        lift: a.lift,
        seed: a.seed,
        ..SyntheticTaskSpec::default()
    };
    let eps = gen_synthetic(&spec, a.episodes)?;
    let m = save_dataset(&eps, &a.out)?;
    writeln!(out, "wrote {} episodes ({} bytes) to {}", m.episode_count, m.blob_bytes, a.out.display())?;
    Ok(())
}

fn episode_at(eps: &[rvt::data::Episode], e: usize, k: usize) -> Result<&rvt::data::Episode> {
    let ep = eps
        .get(e)
        .ok_or_else(|| Error::InvalidInput(format!("episode {e} out of range ({} episodes)", eps.len())))?;
    if k >= ep.actions.len() {
        return Err(Error::InvalidInput(format!(
            "keyframe {k} out of range ({} keyframes)",
            ep.actions.len()
        )));
    }
    Ok(ep)
}

pub fn cmd_render(a: &RenderArgs, out: &mut dyn Write) -> Result<()> {
    let rc = a.cfg.load()?;
    let eps = load_dataset(&a.data)?;
    let ep = episode_at(&eps, a.episode, a.keyframe)?;
    let obs = ep.observation(a.keyframe);
    let cloud = crop_to_workspace(&obs.cloud, &rc.workspace()?);
    let views = rc.view_set()?;
    let imgs = render_views(&cloud, &views, rc.image_res, rc.splat_radius)?;
    for (k, img) in imgs.iter().enumerate() {
        let files = export_view(img, &a.out, &format!("view{k}"))?;
        writeln!(out, "view {k}: {} files", files.len())?;
    }
    Ok(())
}

fn write_line(path: &Path, line: &str) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<Weights<f32>> {
    checkpoint::load(path)
}

fn eval_with(rc: &RunConfig, model: &Rvt, w: &Weights<f32>, eps: &[rvt::data::Episode]) -> Result<EvalMetrics> {
    let policy = ModelPolicy {
        model,
        weights: w,
        views: rc.view_set()?,
        bounds: rc.workspace()?,
        grid: rc.grid()?,
        splat_radius: rc.splat_radius,
        language: rc.language,
        language_dir: rc.language_dir.clone(),
    };
    evaluate(&policy, eps, &rc.eval_config())
}

/// Writes into the output directory: `config.json`, `log.jsonl`,
/// `eval.tsv` (when evaluation data is set), `step_NNNNNN.ckpt` every
/// `checkpoint_every` steps and `final.ckpt`. Returns the last evaluation.
pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<Option<EvalMetrics>> {
    let mut rc = a.cfg.load()?;
    if let Some(d) = &a.data {
        rc.train_data = Some(d.clone());
    }
    if let Some(d) = &a.eval_data {
        rc.eval_data = Some(d.clone());
    }
    if let Some(o) = &a.out {
        rc.out_dir = Some(o.clone());
    }
    if let Some(s) = a.steps {
        rc.steps = s;
    }
    rc.validate()?;
    let data = rc.train_data.clone().ok_or_else(|| Error::InvalidConfig("no training data given".into()))?;
    let dir = rc.out_dir.clone().ok_or_else(|| Error::InvalidConfig("no output directory given".into()))?;
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.json"), rc.to_json())?;

    let train = load_dataset(&data)?;
    let held = match &rc.eval_data {
        Some(p) => Some(load_dataset(p)?),
        None => None,
    };
    let model = Rvt::new(rc.model_config())?;
    let views = rc.view_set()?;
    let tc = rc.train_config()?;
    let init = model.init_weights::<f32>(rc.init_seed)?;

    let log_path = dir.join("log.jsonl");
    let eval_path = dir.join("eval.tsv");
    std::fs::write(&log_path, "")?;
    if held.is_some() {
        std::fs::write(&eval_path, format!("step\t{}\n", EvalMetrics::TSV_HEADER))?;
    }
    let mut log = BufWriter::new(File::create(&log_path)?);
    let mut last_eval = None;
    let outcome = train_loop(&model, &views, &train, init, &tc, |ev| {
        writeln!(log, "{}", ev.entry.to_json_line())?;
        let step = ev.entry.step;
        let last = step == rc.steps;
        if rc.checkpoint_every > 0 && step % rc.checkpoint_every == 0 {
            checkpoint::save(ev.weights, &dir.join(format!("step_{step:06}.ckpt")))?;
        }
        if let Some(h) = &held {
            if last || (rc.eval_every > 0 && step % rc.eval_every == 0) {
                let m = eval_with(&rc, &model, ev.weights, h)?;
                write_line(&eval_path, &format!("{step}\t{}", m.tsv_row()))?;
                last_eval = Some(m);
            }
        }
        Ok(())
    })?;
    log.flush()?;
    checkpoint::save(&outcome.weights, &dir.join("final.ckpt"))?;
    if let Some(l) = outcome.log.last() {
        writeln!(out, "trained {} steps, final loss {:.4}", l.step, l.total)?;
    } else {
        writeln!(out, "trained 0 steps")?;
    }
    if let Some(m) = &last_eval {
        writeln!(out, "{}", EvalMetrics::TSV_HEADER)?;
        writeln!(out, "{}", m.tsv_row())?;
    }
    Ok(last_eval)
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<EvalMetrics> {
    let rc = a.cfg.load()?;
    let data = a
        .data
        .clone()
        .or_else(|| rc.eval_data.clone())
        .ok_or_else(|| Error::InvalidConfig("no evaluation data given".into()))?;
    let eps = load_dataset(&data)?;
    let m = if a.gt {
        evaluate(&GtPolicy, &eps, &rc.eval_config())?
    } else {
        let path = a.checkpoint.as_ref().expect("clap enforces checkpoint without --gt");
        let model = Rvt::new(rc.model_config())?;
        eval_with(&rc, &model, &load_weights(path)?, &eps)?
    };
    writeln!(out, "{}", EvalMetrics::TSV_HEADER)?;
    writeln!(out, "{}", m.tsv_row())?;
    Ok(m)
}

/// Per view: `view{k}_overlay.ppm` with the dimmed rgb image, the predicted
/// heatmap in red and the target heatmap in green; plus the score volume.
pub fn cmd_viz(a: &VizArgs, out: &mut dyn Write) -> Result<()> {
    let rc = a.cfg.load()?;
    let eps = load_dataset(&a.data)?;
    let ep = episode_at(&eps, a.episode, a.keyframe)?;
    let model = Rvt::new(rc.model_config())?;
    let w = load_weights(&a.checkpoint)?;
    let views = rc.view_set()?;
    let res = rc.image_res;
    let obs = ep.observation(a.keyframe);
    let cloud = crop_to_workspace(&obs.cloud, &rc.workspace()?);
    let imgs = render_views(&cloud, &views, res, rc.splat_radius)?;
    let lang = embed_language(&ep.language, rc.language, rc.d_lang, rc.language_dir.as_deref())?;
    let pred = model.predict(&w, &imgs, &lang, obs.gripper)?;
    let probs: Vec<Vec<f64>> = pred.heatmap_logits.iter().map(|l| softmax(l)).collect();
    let target = ep.actions[a.keyframe].translation;
    std::fs::create_dir_all(&a.out)?;
    for (k, (img, cam)) in imgs.iter().zip(&views.cameras).enumerate() {
        let gt = gt_heatmap(cam, target, res, res, rc.sigma_px).data;
        let norm = |h: &[f64]| {
            let m = h.iter().cloned().fold(0.0, f64::max);
            h.iter().map(|x| if m > 0.0 { x / m } else { 0.0 }).collect::<Vec<_>>()
        };
        let (p, g) = (norm(&probs[k]), norm(&gt));
        let mut rgb = Vec::with_capacity(img.rgb.len());
        for px in 0..res * res {
            let base = img.rgb_at(px);
            rgb.push((0.4 * base[0] + p[px]).min(1.0));
            rgb.push((0.4 * base[1] + g[px]).min(1.0));
            rgb.push(0.4 * base[2]);
        }
        write_ppm(&a.out.join(format!("view{k}_overlay.ppm")), &rgb, res, res)?;
    }
    let vol = backproject_scores(&probs, &views, res, res, &rc.grid()?)?;
    export_score_volume(&vol, &rc.grid()?, &a.out, "scores")?;
    let err = vol.point.distance(target);
    writeln!(
        out,
        "predicted {:.4} {:.4} {:.4}\ttarget {:.4} {:.4} {:.4}\terror {:.4} m",
        vol.point.x, vol.point.y, vol.point.z, target.x, target.y, target.z, err
    )?;
    Ok(())
}

pub fn cmd_bench(a: &BenchArgs, out: &mut dyn Write) -> Result<()> {
    let rc = RunConfig::default();
    let bounds = rc.workspace()?;
    let views = cube_views(&bounds, a.preset.into(), ProjectionKind::Orthographic)?;
    let mut mc = rc.model_config();
    mc.views = views.len();
    mc.image_res = a.res;
    mc.validate()?;
    let rows = run_bench(&a.sizes, &views, a.res, a.voxels, &bounds, a.splat, (!a.no_forward).then_some(&mc))?;
    writeln!(out, "{BENCH_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.tsv())?;
    }
    Ok(())
}

pub fn cmd_config(a: &ConfigArgs, out: &mut dyn Write) -> Result<()> {
    let mut rows = ablation_rows();
    rows.push(RunConfig::desk());
    if a.row == "list" {
        for r in &rows {
            writeln!(out, "{}", r.name)?;
        }
        return Ok(());
    }
    let r = rows
        .into_iter()
        .find(|r| r.name == a.row)
        .ok_or_else(|| Error::InvalidInput(format!("unknown config row {}", a.row)))?;
    writeln!(out, "{}", r.to_json())?;
    Ok(())
}
