use trend_core::lidarsim::SceneSpec;

/// Rays longer than this count as misses, for both tracers.
pub const TRACE_LIMIT: f64 = 1000.0;

/// Sphere tracing over the scene's exact signed distance: step by the
/// distance to the nearest surface until it drops below `1e-10`.
pub fn sphere_trace(scene: &SceneSpec, t: f64, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
    let mut r = 0.0;
    for _ in 0..2_000_000 {
        let p = [o[0] + r * d[0], o[1] + r * d[1], o[2] + r * d[2]];
        let s = scene.sdf(t, p);
        if s < 1e-10 {
            return Some(r);
        }
        r += s;
        if r > TRACE_LIMIT {
            return None;
        }
    }
    None
}

pub fn analytic(scene: &SceneSpec, t: f64, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
    scene.cast_ray(t, o, d).map(|(r, _)| r).filter(|r| *r <= TRACE_LIMIT)
}

pub fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}
