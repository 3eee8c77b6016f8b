//! Timing of view rendering against dense voxelization.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geom::{PointCloud, Vec3, WorkspaceBox};
use crate::model::language::embed_stub;
use crate::model::{GripperState, Rvt, RvtConfig};
use crate::render::{render_views, ViewSet};

pub const BENCH_REPEATS: usize = 5;

/// Occupancy grid of `v^3` cells, x fastest.
pub fn voxelize(cloud: &PointCloud, bounds: &WorkspaceBox, v: usize) -> Vec<bool> {
    let mut grid = vec![false; v * v * v];
    let size = bounds.max - bounds.min;
    for p in &cloud.positions {
        if !bounds.contains(*p) {
            continue;
        }
        let r = *p - bounds.min;
        let cell = |x: f64, s: f64| (((x / s) * v as f64) as usize).min(v - 1);
        let (ix, iy, iz) = (cell(r.x, size.x), cell(r.y, size.y), cell(r.z, size.z));
        grid[(iz * v + iy) * v + ix] = true;
    }
    grid
}

/// Uniform random colored points inside the box.
pub fn random_cloud(n: usize, bounds: &WorkspaceBox, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (bounds.min, bounds.max);
    let mut positions = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    for _ in 0..n {
        positions.push(Vec3::new(
            rng.random_range(lo.x..hi.x),
            rng.random_range(lo.y..hi.y),
            rng.random_range(lo.z..hi.z),
        ));
        colors.push([rng.random(), rng.random(), rng.random()]);
    }
    PointCloud { positions, colors }
}

/// Median wall-clock milliseconds of `BENCH_REPEATS` runs.
pub fn median_ms<F: FnMut() -> Result<()>>(mut f: F) -> Result<f64> {
    let mut times = Vec::with_capacity(BENCH_REPEATS);
    for _ in 0..BENCH_REPEATS {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[BENCH_REPEATS / 2])
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub op: &'static str,
    pub n: usize,
    pub k: usize,
    pub res: usize,
    pub v: usize,
    pub median_ms: f64,
}

pub const BENCH_HEADER: &str = "op\tN\tK\tres\tV\tmedian_ms";

impl BenchRow {
    pub fn tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{:.3}",
            self.op, self.n, self.k, self.res, self.v, self.median_ms
        )
    }
}

/// Render and voxelize timings per cloud size, then one model forward.
pub fn run_bench(
    sizes: &[usize],
    views: &ViewSet,
    res: usize,
    v: usize,
    bounds: &WorkspaceBox,
    splat: usize,
    model: Option<&RvtConfig>,
) -> Result<Vec<BenchRow>> {
    let k = views.len();
    let mut rows = Vec::new();
    for &n in sizes {
        let cloud = random_cloud(n, bounds, n as u64);
        let render_ms = median_ms(|| render_views(&cloud, views, res, splat).map(|_| ()))?;
        rows.push(BenchRow {
            op: "render",
            n,
            k,
            res,
            v: 0,
            median_ms: render_ms,
        });
        let vox_ms = median_ms(|| {
            std::hint::black_box(voxelize(&cloud, bounds, v));
            Ok(())
        })?;
        rows.push(BenchRow {
            op: "voxelize",
            n,
            k: 0,
            res: 0,
            v,
            median_ms: vox_ms,
        });
    }
    if let Some(cfg) = model {
        let rvt = Rvt::new(cfg.clone())?;
        let w = rvt.init_weights::<f32>(0)?;
        let cloud = random_cloud(sizes.first().copied().unwrap_or(0), bounds, 0);
        let imgs = render_views(&cloud, views, cfg.image_res, splat)?;
        let lang = embed_stub("reach the red block", cfg.d_lang);
        let g = GripperState {
            open: true,
            time_fraction: 0.0,
        };
        let ms = median_ms(|| rvt.predict(&w, &imgs, &lang, g).map(|_| ()))?;
        rows.push(BenchRow {
            op: "forward",
            n: cloud.len(),
            k: cfg.views,
            res: cfg.image_res,
            v: 0,
            median_ms: ms,
        });
    }
    Ok(rows)
}
