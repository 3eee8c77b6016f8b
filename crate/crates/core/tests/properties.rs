use std::sync::Arc;

use proptest::prelude::*;
use rvt::bench::random_cloud;
use rvt::data::io::{decode_episode, encode_episode, load_dataset, save_dataset, BLOB_FILE};
use rvt::data::synthetic::{gen_synthetic, SyntheticTaskSpec, Task};
use rvt::data::{extract_keyframes, Episode};
use rvt::decode::{argmax, backproject_scores, TranslationGrid};
use rvt::geom::{
    augment, crop_to_workspace, unproject_rgbd, Augmentation, Mat3, PinholeCamera, PointCloud, RigidTransform, Vec3,
    WorkspaceBox,
};
use rvt::model::patches::PatchGrid;
use rvt::model::{embed_stub, GripperState, Rvt, RvtConfig};
use rvt::nnet::{lamb_step, Graph, LambConfig, Tensor, Weights};
use rvt::render::{cube_views, render, render_indexed, render_views, ProjectionKind, ViewPreset, ViewSet};
use rvt::train::{entropy, gt_heatmap, loss, GtTargets};
use rvt::Error;

fn bounds() -> WorkspaceBox {
    WorkspaceBox::default()
}

fn cube5() -> ViewSet {
    cube_views(&bounds(), ViewPreset::Cube5, ProjectionKind::Orthographic).unwrap()
}

fn inner_box() -> WorkspaceBox {
    WorkspaceBox::new(Vec3::splat(-0.4), Vec3::splat(0.4)).unwrap()
}

fn small_model(views: usize) -> RvtConfig {
    RvtConfig {
        views,
        image_res: 12,
        patch_px: 4,
        d_model: 8,
        heads: 2,
        d_gripper: 4,
        d_lang: 6,
        mlp_hidden: 16,
        head_hidden: 16,
        max_lang_tokens: 8,
        ..RvtConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn zero_range_augmentation_is_identity(seed in any::<u64>()) {
        let cloud = random_cloud(50, &bounds(), seed);
        let t = Vec3::new(0.1, -0.2, 0.05);
        let e = Vec3::new(3.0, -7.0, 120.0);
        let a = augment(&cloud, t, e, seed, 0.0, 0.0);
        prop_assert_eq!(a.cloud, cloud);
        prop_assert_eq!(a.translation, t);
        prop_assert_eq!(a.euler, e);
    }

    #[test]
    fn augmentation_moves_cloud_and_target_together(seed in any::<u64>()) {
        let cloud = random_cloud(30, &inner_box(), seed);
        let target = Vec3::new(0.05, -0.1, 0.2);
        let a = augment(&cloud, target, Vec3::ZERO, seed, 0.125, 45.0);
        for (p, q) in cloud.positions.iter().zip(&a.cloud.positions) {
            prop_assert!((p.distance(target) - q.distance(a.translation)).abs() < 1e-12);
        }
        // the moved target lands on the pixel that renders it
        let marker = PointCloud { positions: vec![a.translation], colors: vec![[1.0, 0.0, 0.0]] };
        for cam in &cube5().cameras {
            let img = render(&marker, cam, 40, 40, 0).unwrap();
            let p = cam.project(a.translation, 40, 40);
            let lit: Vec<usize> = (0..1600).filter(|&px| img.is_foreground(px)).collect();
            if p.in_bounds {
                prop_assert_eq!(lit, vec![p.v.floor() as usize * 40 + p.u.floor() as usize]);
            }
        }
    }

    #[test]
    fn correspondence_channels_reproject(seed in any::<u64>()) {
        let cloud = random_cloud(400, &bounds(), seed);
        for cam in &cube5().cameras {
            let img = render(&cloud, cam, 48, 48, 0).unwrap();
            for px in (0..48 * 48).filter(|&p| img.is_foreground(p)) {
                let q = cam.project(img.xyz_at(px), 48, 48);
                let (col, row) = ((px % 48) as f64 + 0.5, (px / 48) as f64 + 0.5);
                prop_assert!((q.u - col).abs() <= 0.5 && (q.v - row).abs() <= 0.5);
                prop_assert!((cam.normalized_depth(q.depth) - img.depth[px]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn equal_xyz_across_views_means_same_point(seed in any::<u64>()) {
        let cloud = random_cloud(300, &bounds(), seed);
        let views = cube5();
        let rendered: Vec<_> = views
            .cameras
            .iter()
            .map(|c| render_indexed(&cloud, c, 32, 32, 1).unwrap())
            .collect();
        let mut owner = std::collections::HashMap::new();
        for (img, winners) in &rendered {
            for (px, w) in winners.iter().enumerate() {
                if let Some(i) = w {
                    let key = img.xyz_at(px).to_array().map(f64::to_bits);
                    let prev = owner.insert(key, *i);
                    prop_assert!(prev.is_none() || prev == Some(*i));
                }
            }
        }
    }

    #[test]
    fn axis_shift_moves_depth_and_xyz(seed in any::<u64>(), delta in -0.09f64..0.09) {
        let cloud = random_cloud(300, &inner_box(), seed);
        for cam in &cube5().cameras {
            let axis = cam.viewing_axis();
            let moved = PointCloud {
                positions: cloud.positions.iter().map(|&p| p + axis * delta).collect(),
                colors: cloud.colors.clone(),
            };
            let a = render(&cloud, cam, 40, 40, 1).unwrap();
            let b = render(&moved, cam, 40, 40, 1).unwrap();
            prop_assert_eq!(&a.rgb, &b.rgb);
            for px in (0..1600).filter(|&p| a.is_foreground(p)) {
                let shift = delta / (cam.far - cam.near);
                prop_assert!((b.depth[px] - a.depth[px] - shift).abs() < 1e-9);
                prop_assert!(b.xyz_at(px).distance(a.xyz_at(px) + axis * delta) < 1e-12);
            }
        }
    }

    #[test]
    fn gt_heatmaps_are_distributions(x in -0.5f64..0.5, y in -0.5f64..0.5, z in -0.5f64..0.5) {
        let t = GtTargets::build(&cube5(), 60, Vec3::new(x, y, z), Vec3::ZERO, true, false, 1.5);
        for (h, &vis) in t.heatmaps.iter().zip(&t.visible) {
            prop_assert!(h.iter().all(|&v| v >= 0.0));
            let s: f64 = h.iter().sum();
            let ok = if vis { (s - 1.0).abs() < 1e-9 } else { s == 0.0 };
            prop_assert!(ok);
        }
    }

    #[test]
    fn soft_cross_entropy_is_bounded_by_entropy(seed in any::<u64>()) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let target = gt_heatmap(&cube5().cameras[0], Vec3::new(0.1, 0.2, 0.0), 20, 20, 1.5);
        let logits: Vec<f64> = (0..400).map(|_| rand::Rng::random_range(&mut rng, -3.0..3.0)).collect();
        let out = rvt::model::ModelOutput {
            heatmap_logits: vec![logits],
            features: vec![],
            rot_logits: vec![0.0; 216],
            gripper_logit: 0.0,
            collision_logit: 0.0,
        };
        let gt = GtTargets {
            heatmaps: vec![target.data.clone()],
            visible: vec![true],
            rot_bins: [0, 0, 0],
            gripper: 1.0,
            collision: 0.0,
        };
        prop_assert!(loss(&out, &gt).unwrap().trans > entropy(&target.data));
    }

    #[test]
    fn raising_a_pixel_never_lowers_its_points(seed in any::<u64>(), px in 0usize..400, bump in 0.0f64..1.0) {
        let views = cube5();
        let grid = TranslationGrid::new(bounds(), 8).unwrap();
        let heat: Vec<Vec<f64>> = (0..5)
            .map(|k| {
                let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed ^ k);
                (0..400).map(|_| rand::Rng::random::<f64>(&mut rng)).collect()
            })
            .collect();
        let before = backproject_scores(&heat, &views, 20, 20, &grid).unwrap();
        let mut raised = heat.clone();
        raised[2][px] += bump;
        let after = backproject_scores(&raised, &views, 20, 20, &grid).unwrap();
        for i in 0..grid.len() {
            prop_assert!(after.scores[i] >= before.scores[i]);
        }
    }

    #[test]
    fn uniform_extra_view_keeps_argmax(seed in any::<u64>()) {
        // the top view sees every grid point, so a uniform top heatmap adds a constant
        let views = cube5();
        let grid = TranslationGrid::new(bounds(), 6).unwrap();
        let side = ViewSet { cameras: views.cameras[1..].to_vec(), preset: ViewPreset::Custom };
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let heat: Vec<Vec<f64>> = (0..4).map(|_| (0..400).map(|_| rand::Rng::random::<f64>(&mut rng)).collect()).collect();
        let base = backproject_scores(&heat, &side, 20, 20, &grid).unwrap();
        let mut with_top = vec![vec![1.0 / 400.0; 400]];
        with_top.extend(heat.iter().cloned());
        let more = backproject_scores(&with_top, &views, 20, 20, &grid).unwrap();
        prop_assert_eq!(base.best, more.best);
    }

    #[test]
    fn view_order_does_not_change_the_winner(seed in any::<u64>()) {
        let views = cube5();
        let grid = TranslationGrid::new(bounds(), 6).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        // coarse values make exact ties likely
        let heat: Vec<Vec<f64>> = (0..5).map(|_| (0..400).map(|_| rand::Rng::random_range(&mut rng, 0..3) as f64).collect()).collect();
        let a = backproject_scores(&heat, &views, 20, 20, &grid).unwrap();
        let order = [4, 2, 0, 3, 1];
        let perm = ViewSet { cameras: order.iter().map(|&i| views.cameras[i]).collect(), preset: ViewPreset::Custom };
        let heat_p: Vec<Vec<f64>> = order.iter().map(|&i| heat[i].clone()).collect();
        let b = backproject_scores(&heat_p, &perm, 20, 20, &grid).unwrap();
        prop_assert_eq!(a.best, argmax(&a.scores));
        prop_assert_eq!(a.best, b.best);
    }

    #[test]
    fn keyframes_survive_temporal_resampling(n in 2usize..8, factor in 2usize..4, close_at in 1usize..6) {
        // constant velocity, one gripper close, then a pause
        let mut coarse: Vec<(Vec3, bool)> = (0..n).map(|i| (Vec3::new(0.02 * i as f64, 0.0, 0.0), i < close_at.min(n - 1))).collect();
        let last = coarse.last().unwrap().0;
        coarse.push((last, false));
        coarse.push((last, false));
        let mut fine = Vec::new();
        for w in coarse.windows(2) {
            for s in 0..factor {
                let t = s as f64 / factor as f64;
                fine.push((w[0].0 + (w[1].0 - w[0].0) * t, w[0].1));
            }
        }
        fine.push(*coarse.last().unwrap());
        let poses = |traj: &[(Vec3, bool)], keys: Vec<usize>| keys.into_iter().map(|k| traj[k]).collect::<Vec<_>>();
        prop_assert_eq!(poses(&coarse, extract_keyframes(&coarse)), poses(&fine, extract_keyframes(&fine)));
    }

    #[test]
    fn generated_scenes_are_inside_the_workspace(seed in any::<u64>(), pick in any::<bool>()) {
        let spec = SyntheticTaskSpec {
            task: if pick { Task::Pick } else { Task::Reach },
            table_density: 100.0,
            block_points: 30,
            seed,
            ..SyntheticTaskSpec::default()
        };
        for ep in gen_synthetic(&spec, 2).unwrap() {
            let c = &ep.steps[0].cloud;
            prop_assert_eq!(&crop_to_workspace(c, &spec.bounds), c.as_ref());
            prop_assert!(ep.actions.iter().all(|a| spec.bounds.contains(a.translation)));
        }
    }

    #[test]
    fn episode_bytes_round_trip(seed in any::<u64>()) {
        let spec = SyntheticTaskSpec { task: Task::Pick, table_density: 30.0, block_points: 10, seed, ..SyntheticTaskSpec::default() };
        let ep = gen_synthetic(&spec, 1).unwrap().remove(0);
        let bytes = encode_episode(&ep);
        let back = decode_episode(&bytes, ep.language.clone()).unwrap();
        prop_assert_eq!(&back, &ep);
        prop_assert_eq!(encode_episode(&back), bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampled_augmentation_stays_in_range(seed in any::<u64>(), t in 0.0f64..0.3, yaw in 0.0f64..90.0) {
        let a = Augmentation::sample(seed, t, yaw);
        prop_assert!(a.yaw_deg.abs() <= yaw);
        for c in a.translation.to_array() {
            prop_assert!(c.abs() <= t);
        }
    }

    #[test]
    fn unproject_then_project_returns_pixel(
        yaw in -180.0f64..180.0, depth in 0.2f64..3.0, u in 0usize..16, v in 0usize..12,
    ) {
        let pose = RigidTransform::new(Mat3::from_euler_zyx(Vec3::new(10.0, -20.0, yaw)), Vec3::new(0.3, -0.1, 1.0)).unwrap();
        let cam = PinholeCamera::new(20.0, 21.0, 7.5, 5.5, pose).unwrap();
        let mut d = vec![0.0; 16 * 12];
        d[v * 16 + u] = depth;
        let cloud = unproject_rgbd(&vec![[0.5; 3]; 16 * 12], &d, 16, &cam).unwrap();
        prop_assert_eq!(cloud.len(), 1);
        let (pu, pv, pd) = cam.project(cloud.positions[0]).unwrap();
        prop_assert!((pu - u as f64).abs() < 1e-6 && (pv - v as f64).abs() < 1e-6);
        prop_assert!((pd - depth).abs() < 1e-9);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let data: Vec<f64> = (0..24).map(|_| rand::Rng::random_range(&mut rng, -10.0..10.0)).collect();
        let mask: Vec<bool> = (0..24).map(|i| i % 6 != 5 || i == 5).collect();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[4, 6], data.clone()).unwrap());
        let y = g.softmax(x, Some(&mask)).unwrap();
        let shifted: Vec<f64> = data.iter().map(|v| v + shift).collect();
        let xs = g.constant(Tensor::new(&[4, 6], shifted).unwrap());
        let ys = g.softmax(xs, Some(&mask)).unwrap();
        for r in 0..4 {
            let row = &g.value(y).data()[6 * r..6 * r + 6];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for c in 0..6 {
                prop_assert!((row[c] - g.value(ys).data()[6 * r + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn patch_index_maps_invert(side in 1usize..6, patch in 1usize..6) {
        let grid = PatchGrid::new(side * patch, patch).unwrap();
        let (fwd, back) = (grid.patchify_index(), grid.scatter_index());
        for i in 0..grid.pixels() {
            prop_assert_eq!(back[fwd[i]], i);
            prop_assert_eq!(fwd[back[i]], i);
        }
    }
}

#[test]
fn lamb_ignores_insertion_order() {
    let a_first = {
        let mut w = Weights::<f64>::new();
        w.insert("a", Tensor::new(&[2], vec![1.0, -2.0]).unwrap()).unwrap();
        w.insert("b", Tensor::new(&[3], vec![0.5, 0.1, 0.0]).unwrap()).unwrap();
        w
    };
    let b_first = {
        let mut w = Weights::<f64>::new();
        w.insert("b", Tensor::new(&[3], vec![0.5, 0.1, 0.0]).unwrap()).unwrap();
        w.insert("a", Tensor::new(&[2], vec![1.0, -2.0]).unwrap()).unwrap();
        w
    };
    let grads = std::collections::BTreeMap::from([
        ("a".to_string(), Tensor::new(&[2], vec![0.3, 0.1]).unwrap()),
        ("b".to_string(), Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap()),
    ]);
    let (mut x, mut y) = (a_first, b_first);
    for _ in 0..3 {
        lamb_step(&mut x, &grads, 0.01, &LambConfig::default()).unwrap();
        lamb_step(&mut y, &grads, 0.01, &LambConfig::default()).unwrap();
    }
    assert_eq!(x, y);
}

#[test]
fn rendering_ignores_thread_count() {
    let cloud = random_cloud(5000, &bounds(), 9);
    let views = cube5();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| render_views(&cloud, &views, 64, 1).unwrap())
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn forward_is_deterministic_and_shaped() {
    for (views, preset) in [(5, ViewPreset::Cube5), (3, ViewPreset::Cube3), (1, ViewPreset::Front1)] {
        let cfg = small_model(views);
        let model = Rvt::new(cfg.clone()).unwrap();
        let w = model.init_weights::<f64>(5).unwrap();
        let vs = cube_views(&bounds(), preset, ProjectionKind::Orthographic).unwrap();
        let imgs = render_views(&random_cloud(500, &bounds(), 1), &vs, 12, 1).unwrap();
        let lang = embed_stub("reach the red block", 6);
        let g = GripperState { open: true, time_fraction: 0.5 };
        let a = model.predict(&w, &imgs, &lang, g).unwrap();
        let b = model.predict(&w, &imgs, &lang, g).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.heatmap_logits.len(), views);
        assert!(a.heatmap_logits.iter().all(|h| h.len() == 144));
        assert_eq!(a.rot_logits.len(), 3 * 72);

        let mut graph = Graph::new();
        graph.bind(&w).unwrap();
        let fv = model.forward(&mut graph, &imgs, &lang, g).unwrap();
        assert_eq!(graph.shape(fv.global), &[1, 2 * views * cfg.d_model]);
    }
}

#[test]
fn corrupted_dataset_byte_is_a_checksum_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticTaskSpec { table_density: 30.0, block_points: 10, ..SyntheticTaskSpec::default() };
    let eps = gen_synthetic(&spec, 10).unwrap();
    save_dataset(&eps, dir.path()).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), eps);

    let path = dir.path().join(BLOB_FILE);
    let mut blob = std::fs::read(&path).unwrap();
    let mid = blob.len() / 2;
    blob[mid] ^= 0x40;
    std::fs::write(&path, &blob).unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Checksum { .. }), "{err}");

    blob.truncate(mid);
    std::fs::write(&path, &blob).unwrap();
    assert!(matches!(load_dataset(dir.path()).unwrap_err(), Error::Truncated { .. }));
}

#[test]
fn manifest_version_is_checked() {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&[], dir.path()).unwrap();
    let p = dir.path().join("manifest.json");
    let text = std::fs::read_to_string(&p).unwrap().replace("\"version\": 1", "\"version\": 7");
    std::fs::write(&p, text).unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, Error::VersionMismatch { found: 7, .. }), "{err}");
    let codes = [
        err.code(),
        Error::Truncated { needed: 1, available: 0 }.code(),
        Error::Checksum { episode: 0, stored: 0, computed: 1 }.code(),
    ];
    assert!(codes[0] != codes[1] && codes[1] != codes[2] && codes[0] != codes[2]);
}

#[test]
fn shared_clouds_survive_the_round_trip() {
    let spec = SyntheticTaskSpec { task: Task::Pick, table_density: 30.0, block_points: 10, ..SyntheticTaskSpec::default() };
    let ep: Episode = gen_synthetic(&spec, 1).unwrap().remove(0);
    let back = decode_episode(&encode_episode(&ep), ep.language.clone()).unwrap();
    let last = back.steps.len() - 1;
    assert!(Arc::ptr_eq(&back.steps[0].cloud, &back.steps[last].cloud));
}
