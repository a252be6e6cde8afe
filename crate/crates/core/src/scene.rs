//! Procedural seven-cube assemblies and a flat-shaded z-buffer rasterizer.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::pose::{dot3, norm3, sub3, CameraPose, Quat, Vec3};
use crate::rng::{seeded, DetRng};

pub const CUBES_PER_SCENE: usize = 7;
/// Vertical and horizontal field of view.
pub const FIELD_OF_VIEW_DEG: f64 = 45.0;
pub const CAMERA_DISTANCE_FACTOR: f64 = 3.0;
pub const ELEVATION_RANGE_DEG: (f64, f64) = (-30.0, 60.0);
pub const BACKGROUND: [u8; 3] = [255, 255, 255];

pub const PALETTE: [[u8; 3]; 12] = [
    [220, 40, 40],
    [40, 160, 60],
    [40, 80, 220],
    [240, 200, 30],
    [160, 60, 200],
    [30, 190, 200],
    [240, 130, 30],
    [120, 70, 30],
    [240, 110, 180],
    [90, 90, 90],
    [150, 210, 60],
    [20, 30, 90],
];

/// Lattice directions; the face index doubles as its tint index.
const DIRS: [[i32; 3]; 6] = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];
const FACE_TINT: [f32; 6] = [1.0, 0.72, 0.9, 0.62, 0.96, 0.8];

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    /// Integer lattice offsets of the unit cubes.
    pub cubes: Vec<[i32; 3]>,
    pub colors: Vec<[u8; 3]>,
    pub orientation: Quat,
}

/// One quad with a flat colour, corners in world space.
#[derive(Clone, Debug, PartialEq)]
pub struct Face {
    pub corners: [Vec3; 4],
    pub color: [u8; 3],
}

pub fn face_color(base: [u8; 3], face: usize) -> [u8; 3] {
    base.map(|c| libm::roundf(f32::from(c) * FACE_TINT[face]) as u8)
}

/// Deterministic connected polycube of seven cubes with distinct colours.
pub fn generate_scene(seed: u64) -> SceneSpec {
    let mut rng = seeded(seed);
    let mut cubes = vec![[0i32, 0, 0]];
    while cubes.len() < CUBES_PER_SCENE {
        let base = cubes[rng.random_range(0..cubes.len())];
        let d = DIRS[rng.random_range(0..6)];
        let cand = [base[0] + d[0], base[1] + d[1], base[2] + d[2]];
        if !cubes.contains(&cand) {
            cubes.push(cand);
        }
    }
    let order = crate::rng::permutation(PALETTE.len(), &mut rng);
    let colors = order[..CUBES_PER_SCENE].iter().map(|&i| PALETTE[i]).collect();
    let orientation = loop {
        let q = Quat::new(
            sample_normal(&mut rng),
            sample_normal(&mut rng),
            sample_normal(&mut rng),
            sample_normal(&mut rng),
        );
        if q.norm() > 1e-3 {
            break q.normalized().sign_fixed();
        }
    };
    SceneSpec {
        seed,
        cubes,
        colors,
        orientation,
    }
}

fn sample_normal(rng: &mut DetRng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

impl SceneSpec {
    fn centroid(&self) -> Vec3 {
        let n = self.cubes.len() as f64;
        let mut c = [0.0; 3];
        for cube in &self.cubes {
            for i in 0..3 {
                c[i] += f64::from(cube[i]) / n;
            }
        }
        c
    }

    /// Radius of the smallest centroid-centred sphere containing every cube.
    pub fn bounding_radius(&self) -> f64 {
        let c = self.centroid();
        let mut r: f64 = 0.0;
        for cube in &self.cubes {
            for corner in 0..8 {
                let p = [
                    f64::from(cube[0]) + if corner & 1 == 0 { -0.5 } else { 0.5 },
                    f64::from(cube[1]) + if corner & 2 == 0 { -0.5 } else { 0.5 },
                    f64::from(cube[2]) + if corner & 4 == 0 { -0.5 } else { 0.5 },
                ];
                r = r.max(norm3(sub3(p, c)));
            }
        }
        r
    }

    /// Exterior faces in world space; the object is centred on the origin.
    pub fn faces(&self) -> Vec<Face> {
        let c = self.centroid();
        let mut faces = Vec::new();
        for (cube, &color) in self.cubes.iter().zip(&self.colors) {
            let center = [
                f64::from(cube[0]) - c[0],
                f64::from(cube[1]) - c[1],
                f64::from(cube[2]) - c[2],
            ];
            for (fi, d) in DIRS.iter().enumerate() {
                let neighbour = [cube[0] + d[0], cube[1] + d[1], cube[2] + d[2]];
                if self.cubes.contains(&neighbour) {
                    continue;
                }
                let mut face = cube_face(center, fi, face_color(color, fi));
                for corner in face.corners.iter_mut() {
                    *corner = self.orientation.rotate(*corner);
                }
                faces.push(face);
            }
        }
        faces
    }
}

/// Face `face` (index into the ±x, ±y, ±z directions) of the unit cube at `center`.
pub fn cube_face(center: Vec3, face: usize, color: [u8; 3]) -> Face {
    let axis = face / 2;
    let sign = if face.is_multiple_of(2) { 0.5 } else { -0.5 };
    let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
    let mut corners = [[0.0; 3]; 4];
    for (i, (su, sv)) in [(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)].iter().enumerate() {
        let mut p = center;
        p[axis] += sign;
        p[u] += su;
        p[v] += sv;
        corners[i] = p;
    }
    Face { corners, color }
}

/// Pinhole focal length in pixels for a square image.
pub fn focal_length(size: usize) -> f64 {
    (size as f64 / 2.0) / (FIELD_OF_VIEW_DEG.to_radians() / 2.0).tan()
}

/// Flat-shaded z-buffer rasterization onto a white background.
pub fn rasterize(faces: &[Face], pose: &CameraPose, size: usize) -> Image {
    let f = focal_length(size);
    let half = size as f64 / 2.0;
    let mut depth = vec![0.0f64; size * size]; // stores 1/z, 0 = empty
    let mut rgb = Vec::with_capacity(size * size * 3);
    for _ in 0..size * size {
        rgb.extend_from_slice(&BACKGROUND);
    }
    for face in faces {
        let proj: Vec<(f64, f64, f64)> = face
            .corners
            .iter()
            .map(|&p| {
                let c = pose.world_to_camera(p);
                (f * c[0] / c[2] + half, f * c[1] / c[2] + half, c[2])
            })
            .collect();
        if proj.iter().any(|p| p.2 <= 1e-6) {
            continue;
        }
        for tri in [[0, 1, 2], [0, 2, 3]] {
            let [a, b, c] = tri.map(|i| proj[i]);
            fill_triangle(a, b, c, face.color, size, &mut depth, &mut rgb);
        }
    }
    Image::from_rgb8(size, &rgb).expect("buffer sized for image")
}

fn edge(a: (f64, f64, f64), b: (f64, f64, f64), x: f64, y: f64) -> f64 {
    (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0)
}

fn fill_triangle(
    a: (f64, f64, f64),
    b: (f64, f64, f64),
    c: (f64, f64, f64),
    color: [u8; 3],
    size: usize,
    depth: &mut [f64],
    rgb: &mut [u8],
) {
    let area = edge(a, b, c.0, c.1);
    if area.abs() < 1e-12 {
        return;
    }
    let lo = |v: f64| (v.floor().max(0.0) as usize).min(size);
    let hi = |v: f64| (v.ceil().max(0.0) as usize).min(size);
    let (x0, x1) = (lo(a.0.min(b.0).min(c.0)), hi(a.0.max(b.0).max(c.0)));
    let (y0, y1) = (lo(a.1.min(b.1).min(c.1)), hi(a.1.max(b.1).max(c.1)));
    for py in y0..y1 {
        for px in x0..x1 {
            let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
            let w0 = edge(b, c, x, y) / area;
            let w1 = edge(c, a, x, y) / area;
            let w2 = edge(a, b, x, y) / area;
            if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                continue;
            }
            let inv_z = w0 / a.2 + w1 / b.2 + w2 / c.2;
            let i = py * size + px;
            if inv_z > depth[i] {
                depth[i] = inv_z;
                rgb[i * 3..i * 3 + 3].copy_from_slice(&color);
            }
        }
    }
}

/// Renders `spec` from `pose`; the camera must sit outside the bounding sphere.
pub fn render_view(spec: &SceneSpec, pose: &CameraPose, size: usize) -> Result<Image> {
    let r = spec.bounding_radius();
    let d = norm3(pose.position);
    if d <= r {
        return Err(Error::Validation(format!(
            "camera at distance {d:.3} is inside the bounding sphere of radius {r:.3}"
        )));
    }
    Ok(rasterize(&spec.faces(), pose, size))
}

/// Camera on the viewing band at `CAMERA_DISTANCE_FACTOR × radius`, looking at
/// the centroid with world +z as up. Area-uniform over the band; rounded to
/// `f32` so that stored poses re-render identically.
pub fn sample_camera(spec: &SceneSpec, rng: &mut DetRng) -> CameraPose {
    let dist = CAMERA_DISTANCE_FACTOR * spec.bounding_radius();
    let (lo, hi) = ELEVATION_RANGE_DEG;
    let z = rng.random_range(lo.to_radians().sin()..hi.to_radians().sin());
    let phi = rng.random_range(0.0..core::f64::consts::TAU);
    let rho = (1.0 - z * z).sqrt();
    let eye = [dist * rho * phi.cos(), dist * rho * phi.sin(), dist * z];
    CameraPose::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0])
        .expect("elevation band excludes the poles")
        .to_f32_precision()
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub image: Image,
    pub pose: CameraPose,
}

/// A scene with `n` rendered views.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub spec: SceneSpec,
    pub views: Vec<View>,
}

pub fn generate_episode(seed: u64, n: usize, image_size: usize) -> Result<Episode> {
    let spec = generate_scene(seed);
    let mut rng = crate::rng::stream(seed, 1, 0);
    let views = (0..n)
        .map(|_| {
            let pose = sample_camera(&spec, &mut rng);
            render_view(&spec, &pose, image_size).map(|image| View { image, pose })
        })
        .collect::<Result<_>>()?;
    Ok(Episode { spec, views })
}

/// Angular distance between two camera viewing directions, in radians.
pub fn view_angle(a: &CameraPose, b: &CameraPose) -> f64 {
    let (na, nb) = (norm3(a.position), norm3(b.position));
    (dot3(a.position, b.position) / (na * nb)).clamp(-1.0, 1.0).acos()
}
