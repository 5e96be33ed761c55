//! Rasterize a scene spec into an image with mutually consistent dense maps:
//! the topmost object covering a pixel supplies its class, disparity, and
//! normal. Object faces are shaded by their normal so orientation is visible
//! in RGB, and disparity gradients follow the same plane.

use super::scene::SceneSpec;
use super::text::caption_for;
use super::{
    Sample, ShapeKind, BACKGROUND_DISPARITY, COLOR_RGB, DISPARITY_TILT_SCALE, MIN_CAPTION_PIXELS,
};
use crate::math;
use crate::rng::Rng;
use alloc::vec;
use alloc::vec::Vec;

const LIGHT: [f64; 3] = [0.345, -0.492, 0.797]; // unit

pub fn render_scene(spec: &SceneSpec, image_size: usize) -> Sample {
    let (sample, _) = render_scene_with_owners(spec, image_size);
    sample
}

/// As [`render_scene`], additionally returning the per-pixel owner object
/// index (-1 for background); used by consistency checks.
pub fn render_scene_with_owners(spec: &SceneSpec, image_size: usize) -> (Sample, Vec<i32>) {
    let s = image_size;
    let px = s * s;
    let mut image = vec![0u8; 3 * px];
    let mut mask = vec![0u8; px];
    let mut disparity = vec![0f32; px];
    let mut normals = vec![0f32; 3 * px];
    let mut owners = vec![-1i32; px];
    let mut visible = vec![0usize; spec.objects.len()];

    for y in 0..s {
        for x in 0..s {
            let xn = (x as f64 + 0.5) / s as f64;
            let yn = (y as f64 + 0.5) / s as f64;
            let p = y * s + x;
            // nearest object drawn last wins
            let owner = spec
                .objects
                .iter()
                .rposition(|o| shape_contains(o.shape, (xn - o.cx) / o.size, (yn - o.cy) / o.size));
            let (rgb, class, disp, normal) = match owner {
                Some(i) => {
                    owners[p] = i as i32;
                    visible[i] += 1;
                    let o = &spec.objects[i];
                    let d = plane_disparity(o, xn, yn);
                    let shade = 0.55
                        + 0.45
                            * (o.normal[0] * LIGHT[0]
                                + o.normal[1] * LIGHT[1]
                                + o.normal[2] * LIGHT[2])
                                .max(0.0);
                    let base = COLOR_RGB[o.color];
                    (
                        [base[0] * shade, base[1] * shade, base[2] * shade],
                        o.shape.class_id(),
                        d,
                        o.normal,
                    )
                }
                None => (
                    background_color(spec, xn, yn, s),
                    0,
                    BACKGROUND_DISPARITY,
                    [0.0, 0.0, 1.0],
                ),
            };
            for c in 0..3 {
                image[c * px + p] = quantize_u8(rgb[c]);
                normals[c * px + p] = normal[c] as f32;
            }
            mask[p] = class;
            disparity[p] = disp as f32;
        }
    }

    // Re-unit normals after f32 quantization drift (kept within 1e-6).
    for p in 0..px {
        let (nx, ny, nz) = (
            normals[p] as f64,
            normals[px + p] as f64,
            normals[2 * px + p] as f64,
        );
        let n = math::sqrt(nx * nx + ny * ny + nz * nz);
        if (n - 1.0).abs() > 1e-9 {
            normals[p] = (nx / n) as f32;
            normals[px + p] = (ny / n) as f32;
            normals[2 * px + p] = (nz / n) as f32;
        }
    }

    let mut caption_rng = Rng::derive(spec.seed, "caption");
    let caption = caption_for(spec, &visible, MIN_CAPTION_PIXELS, &mut caption_rng);
    let dominant_class = visible
        .iter()
        .enumerate()
        .max_by_key(|(_, &v)| v)
        .filter(|(_, &v)| v > 0)
        .map(|(i, _)| spec.objects[i].shape.class_id())
        .unwrap_or(0);

    (
        Sample {
            image_size: s,
            image,
            caption,
            gt_mask: mask,
            gt_disparity: disparity,
            gt_normals: normals,
            dominant_class,
            scene_seed: spec.seed,
        },
        owners,
    )
}

fn quantize_u8(v: f64) -> u8 {
    math::round(v.clamp(0.0, 1.0) * 255.0) as u8
}

/// Disparity of the object's tilted plane at normalized canvas coordinates,
/// consistent with its surface normal: grad d = -k * (nx/nz, ny/nz).
pub fn plane_disparity(o: &super::scene::ObjectSpec, xn: f64, yn: f64) -> f64 {
    let gx = -DISPARITY_TILT_SCALE * o.normal[0] / o.normal[2];
    let gy = -DISPARITY_TILT_SCALE * o.normal[1] / o.normal[2];
    (o.base_disparity + gx * (xn - o.cx) + gy * (yn - o.cy)).clamp(0.0, 1.0)
}

fn background_color(spec: &SceneSpec, xn: f64, yn: f64, s: usize) -> [f64; 3] {
    let a = spec.background_base;
    let b = spec.background_accent;
    let mix = |t: f64| {
        [
            a[0] + (b[0] - a[0]) * t,
            a[1] + (b[1] - a[1]) * t,
            a[2] + (b[2] - a[2]) * t,
        ]
    };
    match spec.background_pattern % 4 {
        0 => mix(xn),
        1 => mix(yn),
        2 => {
            let cell = 8.0 / s as f64;
            let cx = math::floor(xn / cell) as i64;
            let cy = math::floor(yn / cell) as i64;
            if (cx + cy) % 2 == 0 {
                mix(0.0)
            } else {
                mix(1.0)
            }
        }
        _ => {
            let stripe = math::floor((xn + yn) * s as f64 / 8.0) as i64;
            if stripe % 2 == 0 {
                mix(0.0)
            } else {
                mix(1.0)
            }
        }
    }
}

/// Membership test in unit shape coordinates (object spans roughly
/// [-1, 1] x [-1, 1]).
pub fn shape_contains(shape: ShapeKind, dx: f64, dy: f64) -> bool {
    if dx.abs() > 1.0 || dy.abs() > 1.0 {
        return false;
    }
    match shape {
        ShapeKind::Circle => dx * dx + dy * dy <= 1.0,
        ShapeKind::Square => dx.abs() <= 0.82 && dy.abs() <= 0.82,
        ShapeKind::Triangle => point_in_polygon(dx, dy, &TRIANGLE),
        ShapeKind::Diamond => dx.abs() + dy.abs() <= 1.0,
        ShapeKind::Plus => {
            (dx.abs() <= 0.34 && dy.abs() <= 1.0) || (dy.abs() <= 0.34 && dx.abs() <= 1.0)
        }
        ShapeKind::Ring => {
            let r2 = dx * dx + dy * dy;
            (0.55 * 0.55..=1.0).contains(&r2)
        }
        ShapeKind::Hexagon => point_in_polygon(dx, dy, &HEXAGON),
        ShapeKind::Star => point_in_polygon(dx, dy, &STAR),
    }
}

const TRIANGLE: [(f64, f64); 3] = [(0.0, -1.0), (0.95, 0.78), (-0.95, 0.78)];

const HEXAGON: [(f64, f64); 6] = [
    (0.866, -0.5),
    (0.866, 0.5),
    (0.0, 1.0),
    (-0.866, 0.5),
    (-0.866, -0.5),
    (0.0, -1.0),
];

// Five-point star: alternating outer radius 1.0 and inner radius 0.45,
// starting at the top.
const STAR: [(f64, f64); 10] = [
    (0.0, -1.0),
    (0.2645, -0.364),
    (0.9511, -0.309),
    (0.428, 0.139),
    (0.5878, 0.809),
    (0.0, 0.45),
    (-0.5878, 0.809),
    (-0.428, 0.139),
    (-0.9511, -0.309),
    (-0.2645, -0.364),
];

/// Even-odd crossing rule; handles concave polygons.
fn point_in_polygon(px: f64, py: f64, verts: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = verts.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = verts[i];
        let (xj, yj) = verts[j];
        if ((yi > py) != (yj > py)) && (px < (xj - xi) * (py - yi) / (yj - yi) + xi) {
            inside = !inside;
        }
        j = i;
    }
    inside
}
