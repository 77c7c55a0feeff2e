//! Shape families and the per-class rendering signature.

use serde::{Deserialize, Serialize};

use crate::numcore::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Bar,
    Ellipse,
    LShape,
    Diamond,
    Semicircle,
    Frame,
    Hexagon,
}

pub const FAMILIES: [Family; 12] = [
    Family::Circle,
    Family::Square,
    Family::Triangle,
    Family::Cross,
    Family::Ring,
    Family::Bar,
    Family::Ellipse,
    Family::LShape,
    Family::Diamond,
    Family::Semicircle,
    Family::Frame,
    Family::Hexagon,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Flat,
    Stripes,
    Checker,
}

/// Everything that makes one class look like itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassParams {
    pub family: Family,
    pub texture: Texture,
    /// Mean object intensity.
    pub intensity: f64,
    /// Nominal object radius in pixels before the random scale.
    pub radius: f64,
    pub scale_range: (f64, f64),
    pub intensity_jitter: f64,
    pub texture_period: usize,
    pub texture_amplitude: f64,
}

impl ClassParams {
    /// Deterministic signature of class `id` among `num_classes`. Families
    /// cycle through [`FAMILIES`]; intensities are spread so neighbouring ids
    /// differ.
    pub fn for_class(id: usize, num_classes: usize, image_size: usize) -> Self {
        let family = FAMILIES[id % FAMILIES.len()];
        let texture = match id % 3 {
            0 => Texture::Flat,
            1 => Texture::Stripes,
            _ => Texture::Checker,
        };
        let n = num_classes.max(2);
        let rank = (id * 5) % n;
        let intensity = 0.45 + 0.5 * rank as f64 / (n - 1) as f64;
        Self {
            family,
            texture,
            intensity,
            radius: image_size as f64 * 0.16,
            scale_range: (0.5, 1.5),
            intensity_jitter: 0.05,
            texture_period: 4 + id % 2 * 2,
            texture_amplitude: 0.12,
        }
    }
}

/// Random placement of one object instance.
#[derive(Debug, Clone, Copy)]
pub struct Placement {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub angle: f64,
    pub intensity: f64,
    /// Aspect ratio of elongated families.
    pub aspect: f64,
}

impl Placement {
    pub fn sample(p: &ClassParams, size: usize, rng: &mut Rng) -> Self {
        let scale = rng.uniform_range(p.scale_range.0, p.scale_range.1);
        let radius = p.radius * scale;
        let margin = (radius * 0.6).min(size as f64 / 2.0);
        let cx = rng.uniform_range(margin, size as f64 - margin);
        let cy = rng.uniform_range(margin, size as f64 - margin);
        let angle = rng.uniform_range(0.0, std::f64::consts::TAU);
        let intensity = p.intensity + p.intensity_jitter * (2.0 * rng.uniform() - 1.0);
        let aspect = rng.uniform_range(0.45, 0.65);
        Self {
            cx,
            cy,
            radius,
            angle,
            intensity,
            aspect,
        }
    }

    /// Whether pixel centre `(x, y)` lies inside the shape.
    pub fn contains(&self, family: Family, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (c * dx + s * dy) / self.radius;
        let v = (-s * dx + c * dy) / self.radius;
        inside(family, u, v, self.aspect)
    }
}

/// Membership test in the unit-radius frame of the shape.
fn inside(family: Family, u: f64, v: f64, aspect: f64) -> bool {
    let r2 = u * u + v * v;
    match family {
        Family::Circle => r2 <= 1.0,
        Family::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
        // apex at v = -0.9, base at v = 0.6
        Family::Triangle => (-0.9..=0.6).contains(&v) && u.abs() <= (v + 0.9) / 1.5 * 0.95,
        Family::Cross => (u.abs() <= 0.3 && v.abs() <= 0.95) || (v.abs() <= 0.3 && u.abs() <= 0.95),
        Family::Ring => (0.55..=1.0).contains(&r2.sqrt()),
        Family::Bar => u.abs() <= 1.0 && v.abs() <= 0.3,
        Family::Ellipse => (u / 1.0).powi(2) + (v / aspect).powi(2) <= 1.0,
        Family::LShape => {
            let in_box = u.abs() <= 0.85 && v.abs() <= 0.85;
            in_box && (u <= -0.2 || v >= 0.2)
        }
        Family::Diamond => u.abs() + v.abs() <= 1.0,
        Family::Semicircle => r2 <= 1.0 && v >= -0.1,
        Family::Frame => {
            let m = u.abs().max(v.abs());
            (0.5..=0.85).contains(&m)
        }
        Family::Hexagon => {
            let (a, b) = (u.abs(), v.abs());
            b <= 0.82 && 0.5 * b + 0.866 * a <= 0.82
        }
    }
}

/// Object intensity at `(x, y)` after the class texture is applied.
pub fn textured(p: &ClassParams, base: f64, x: usize, y: usize) -> f64 {
    let t = p.texture_period;
    let phase = match p.texture {
        Texture::Flat => 0.0,
        Texture::Stripes => {
            if (y / (t / 2).max(1)) % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        }
        Texture::Checker => {
            let half = (t / 2).max(1);
            if ((x / half) + (y / half)) % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        }
    };
    base + p.texture_amplitude * phase
}
