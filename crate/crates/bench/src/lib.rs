//! Shared fixtures for the criterion benches. All scenes are noise-free VGA
//! renders at the default intrinsics.

use std::f64::consts::TAU;

use nalgebra::Vector3;
use primex_core::scene::{render_scene, NoiseModel, ScenePrimitive};
use primex_core::{backproject, Intrinsics, OrganizedCloud};

pub fn render(prims: &[ScenePrimitive]) -> OrganizedCloud {
    let intr = Intrinsics::vga();
    let scene = render_scene(prims, &intr, (640, 480), NoiseModel::None, 0).expect("valid scene");
    backproject(&scene.depth, &intr).expect("valid depth")
}

/// Fronto-parallel wall at 2 m.
pub fn wall() -> OrganizedCloud {
    render(&[ScenePrimitive::plane(Vector3::new(0.0, 0.0, -1.0), 2.0)])
}

/// Vertical pipe of radius `r` whose axis sits at depth `z`.
pub fn pipe(r: f64, z: f64) -> OrganizedCloud {
    render(&[ScenePrimitive::cylinder(Vector3::y(), Vector3::new(0.0, 0.0, z), r)])
}

/// Pipe in front of a back wall.
pub fn pipe_and_wall() -> OrganizedCloud {
    render(&[
        ScenePrimitive::cylinder(Vector3::y(), Vector3::new(0.1, 0.0, 2.0), 0.5),
        ScenePrimitive::plane(Vector3::new(0.0, 0.0, -1.0), 3.0),
    ])
}

/// Room corner: back wall, floor and side wall.
pub fn corner() -> Vec<ScenePrimitive> {
    vec![
        ScenePrimitive::plane(Vector3::new(0.0, 0.0, -1.0), 3.0),
        ScenePrimitive::plane(Vector3::new(0.0, -1.0, 0.0), 0.8),
        ScenePrimitive::plane(Vector3::new(-1.0, 0.0, 0.0), 1.2),
    ]
}

/// `k` points with outward normals on an arc of the circle `(c, r)` in the
/// z = 0 plane.
pub fn arc(r: f64, c: Vector3<f64>, k: usize) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    (0..k)
        .map(|i| {
            let a = 0.6 * TAU * i as f64 / k as f64;
            let d = Vector3::new(a.cos(), a.sin(), 0.0);
            (c + d * r, d)
        })
        .unzip()
}
