mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{analytic, sphere_trace, unit};
use trend_core::lidarsim::{generate_sequence, transform_to_frame, BeamPattern, EgoAction, RandomSceneParams, SceneSpec};

fn random_dir(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let az: f64 = rng.random_range(-1.2..1.2);
    let el: f64 = rng.random_range(-0.5..0.25);
    unit([az.cos() * el.cos(), az.sin() * el.cos(), el.sin()])
}

#[test]
fn analytic_casts_agree_with_sphere_tracing() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let scene = SceneSpec::random(3, &RandomSceneParams::default()).unwrap();
    let o = [0.0, 0.0, scene.sensor_height];
    for _ in 0..1000 {
        let d = random_dir(&mut rng);
        let t = rng.random_range(0.0..2.0);
        match (analytic(&scene, t, o, d), sphere_trace(&scene, t, o, d)) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-6, "{a} vs {b}"),
            (None, None) => {}
            other => panic!("hit/miss disagree: {other:?}"),
        }
    }
}

#[test]
fn returned_ranges_lie_on_the_surface() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for seed in 0..5 {
        let scene = SceneSpec::random(seed, &RandomSceneParams::default()).unwrap();
        let o = [0.0, 0.0, scene.sensor_height];
        for _ in 0..200 {
            let d = random_dir(&mut rng);
            if let Some((r, _)) = scene.cast_ray(0.7, o, d) {
                let p = [o[0] + r * d[0], o[1] + r * d[1], o[2] + r * d[2]];
                assert!(scene.sdf(0.7, p).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn pure_rotation_of_a_static_scene_aligns() {
    let params = RandomSceneParams { max_speed: 0.0, ..RandomSceneParams::default() };
    let scene = SceneSpec::random(4, &params).unwrap();
    let beams = BeamPattern { horizontal_fov: std::f64::consts::TAU * (1.0 - 1.0 / 64.0), azimuth_count: 64, ..BeamPattern::default() };
    let turn = EgoAction::new(0.0, 0.0, std::f64::consts::FRAC_PI_2).unwrap();
    let seq = generate_sequence(&scene, 2, &beams, &[turn], 0.0, 0.5).unwrap();
    let a = transform_to_frame(&seq.clouds[0], seq.clouds[0].frame_pose);
    let b = transform_to_frame(&seq.clouds[1], seq.clouds[0].frame_pose);
    // a quarter turn maps the 64 evenly spaced azimuths onto themselves
    assert_eq!(a.len(), b.len());
    for p in &b.points {
        let nearest = a
            .points
            .iter()
            .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min);
        assert!(nearest < 1e-9, "{nearest}");
    }
    assert!(!a.is_empty() && !b.is_empty());
}
