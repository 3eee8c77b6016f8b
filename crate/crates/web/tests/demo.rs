use rvt_web::{lr_samples, parse_preset, Scene};

#[test]
fn strip_has_one_tile_per_view() {
    let s = Scene::new(3, "cube3", 40, false).unwrap();
    let rgba = s.rgba_strip(None);
    assert_eq!(rgba.len(), 4 * 40 * 40 * 3);
    assert!(rgba.chunks(4).all(|p| p[3] == 255));
    assert!(rgba.chunks(4).any(|p| p[..3] != [0, 0, 0]));
}

#[test]
fn heat_overlay_marks_the_target() {
    let s = Scene::new(5, "cube5", 60, false).unwrap();
    let maps = s.heatmaps();
    let rgba = s.rgba_strip(Some(&maps));
    let reds = rgba.chunks(4).filter(|p| p[0] == 255).count();
    assert!(reds >= 5, "{reds}");
}

#[test]
fn recovered_target_is_within_a_cell() {
    for seed in 0..5 {
        let s = Scene::new(seed, "cube5", 100, false).unwrap();
        let r = s.recover(40).unwrap();
        let cell_diag = (3.0f64).sqrt() * 0.025;
        assert!(r[6] <= cell_diag / 2.0 + 1e-9, "seed {seed}: {r:?}");
    }
}

#[test]
fn language_names_a_block() {
    let s = Scene::new(1, "front1", 20, true).unwrap();
    assert!(s.language.starts_with("reach the ") && s.language.ends_with(" block"));
    assert_eq!(s.images.len(), 1);
}

#[test]
fn unknown_preset_is_rejected() {
    assert!(parse_preset("cube7").is_err());
    assert!(Scene::new(0, "", 20, false).is_err());
}

#[test]
fn lr_curve_warms_up_then_decays() {
    let c = lr_samples(1e-3, 100, 1000, 11);
    assert_eq!(c.len(), 11);
    assert_eq!(c[0], 0.0);
    assert!((c[1] - 1e-3).abs() < 1e-12);
    assert!(c.windows(2).skip(1).all(|w| w[1] <= w[0]));
    assert!(c[10].abs() < 1e-15);
}
