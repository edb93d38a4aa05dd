//! Anti-aliased rasterization of the sprite scenes.
//!
//! Factor names carry the rendering semantics: `shape`, `scale`,
//! `orientation`, `pos_x`, `pos_y` control the sprite; `floor_hue`,
//! `wall_hue`, `object_hue` switch on the colored-patch scene. Factors with
//! other names have no visual effect (they still act as label sources).
//! Rendering is a pure function of (spec, latent_index).

use ndarray::Array3;

use super::LatentFactorSpec;

/// Supersampling grid per pixel axis (3x3 coverage samples).
const SS: usize = 3;

/// Fraction of the image the sprite center can travel on each axis.
const POS_MARGIN: f64 = 0.2;

/// Sprite radius at scale value 1.0, as a fraction of min(h, w).
const BASE_RADIUS: f64 = 0.25;

#[derive(Debug, Clone, Copy)]
struct SceneParams {
    /// A sprite is drawn only when the spec declares at least one
    /// sprite-controlling factor.
    has_sprite: bool,
    shape: usize,
    scale: f64,
    orientation: f64,
    pos_x: f64,
    pos_y: f64,
    floor_hue: Option<f64>,
    wall_hue: Option<f64>,
    object_hue: Option<f64>,
}

impl SceneParams {
    fn from_spec(spec: &LatentFactorSpec, latent_index: &[usize]) -> Self {
        let mut p = SceneParams {
            has_sprite: false,
            shape: 0,
            scale: 1.0,
            orientation: 0.0,
            pos_x: 0.5,
            pos_y: 0.5,
            floor_hue: None,
            wall_hue: None,
            object_hue: None,
        };
        for (f, &i) in spec.factors.iter().zip(latent_index) {
            let v = f.values[i];
            match f.name.as_str() {
                "shape" => (p.shape, p.has_sprite) = (v.max(0.0).round() as usize, true),
                "scale" => (p.scale, p.has_sprite) = (v, true),
                "orientation" => (p.orientation, p.has_sprite) = (v, true),
                "pos_x" => (p.pos_x, p.has_sprite) = (v, true),
                "pos_y" => (p.pos_y, p.has_sprite) = (v, true),
                "object_hue" => (p.object_hue, p.has_sprite) = (Some(v), true),
                "floor_hue" => p.floor_hue = Some(v),
                "wall_hue" => p.wall_hue = Some(v),
                _ => {}
            }
        }
        p
    }
}

/// Signed inside-test in the sprite's local frame; the sprite occupies
/// roughly the unit disk.
fn inside_shape(shape: usize, u: f64, v: f64) -> bool {
    match shape % 4 {
        // square
        0 => u.abs() <= 0.9 && v.abs() <= 0.9,
        // ellipse, wider than tall
        1 => (u / 1.0).powi(2) + (v / 0.55).powi(2) <= 1.0,
        // heart: (x^2 + y^2 - 1)^3 - x^2 y^3 <= 0, y up, scaled to fit
        2 => {
            let x = u * 1.35;
            let y = -v * 1.35 - 0.15;
            let a = x * x + y * y - 1.0;
            a * a * a - x * x * y * y * y <= 0.0
        }
        // triangle pointing up
        _ => v <= 0.9 && v >= 2.2 * u.abs() - 0.9,
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor() as usize % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Rasterize one grid cell into a (channels, h, w) image with values in
/// [0, 1].
pub fn render_image(spec: &LatentFactorSpec, latent_index: &[usize]) -> Array3<f64> {
    let (h, w) = spec.image_size;
    let params = SceneParams::from_spec(spec, latent_index);
    let mut img = Array3::zeros((spec.channels, h, w));

    // Background: plain black, or floor/wall hue bands.
    let floor_rgb = params.floor_hue.map(|hue| hsv_to_rgb(hue, 0.85, 0.65));
    let wall_rgb = params.wall_hue.map(|hue| hsv_to_rgb(hue, 0.85, 0.8));
    if floor_rgb.is_some() || wall_rgb.is_some() {
        let horizon = (h as f64 * 0.5) as usize;
        for y in 0..h {
            let rgb = if y < horizon {
                wall_rgb.unwrap_or([0.0; 3])
            } else {
                floor_rgb.unwrap_or([0.0; 3])
            };
            for x in 0..w {
                for c in 0..spec.channels {
                    img[[c, y, x]] = rgb[c.min(2)];
                }
            }
        }
    }

    if !params.has_sprite {
        return img;
    }
    let sprite_rgb = match params.object_hue {
        Some(hue) => hsv_to_rgb(hue, 0.9, 0.95),
        None => [1.0, 1.0, 1.0],
    };

    let min_dim = h.min(w) as f64;
    let radius = BASE_RADIUS * min_dim * params.scale;
    if radius <= 0.0 {
        return img;
    }
    let cx = (POS_MARGIN + (1.0 - 2.0 * POS_MARGIN) * params.pos_x) * (w as f64 - 1.0);
    let cy = (POS_MARGIN + (1.0 - 2.0 * POS_MARGIN) * params.pos_y) * (h as f64 - 1.0);
    let (sin, cos) = params.orientation.sin_cos();

    // Bounding box with slack for rotation.
    let reach = radius * 1.6;
    let y0 = ((cy - reach).floor().max(0.0)) as usize;
    let y1 = ((cy + reach).ceil().min(h as f64 - 1.0)) as usize;
    let x0 = ((cx - reach).floor().max(0.0)) as usize;
    let x1 = ((cx + reach).ceil().min(w as f64 - 1.0)) as usize;

    let ss_step = 1.0 / SS as f64;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let mut hits = 0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let px = x as f64 - 0.5 + ss_step * (sx as f64 + 0.5);
                    let py = y as f64 - 0.5 + ss_step * (sy as f64 + 0.5);
                    let dx = px - cx;
                    let dy = py - cy;
                    // rotate into the sprite frame and normalize by radius
                    let u = (cos * dx + sin * dy) / radius;
                    let v = (-sin * dx + cos * dy) / radius;
                    if inside_shape(params.shape, u, v) {
                        hits += 1;
                    }
                }
            }
            if hits > 0 {
                let cov = hits as f64 / (SS * SS) as f64;
                for c in 0..spec.channels {
                    let bg = img[[c, y, x]];
                    img[[c, y, x]] = bg * (1.0 - cov) + sprite_rgb[c.min(2)] * cov;
                }
            }
        }
    }
    img
}
