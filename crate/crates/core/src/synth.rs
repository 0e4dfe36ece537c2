//! Deterministic synthetic scenes with known panoptic ground truth.
//!
//! A flat ground plane (stuff) carries three kinds of objects (things):
//! ellipsoidal tree crowns, yawed boxes for cars and vertical cylinders for
//! poles. Objects are placed by rejection sampling on their horizontal
//! footprint circles so that footprint gaps are at least `min_gap`; a
//! negative gap lets footprints overlap.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{ClassId, ClassKind, InstanceId, Labeling, PointCloud, SemanticTaxonomy, UNASSIGNED};
use crate::pcio::{format_sig9, parse_entries, parse_value};
use crate::rng::{derived_rng, STREAM_SCENE};

pub const GROUND_CLASS: ClassId = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Tree,
    Car,
    Pole,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Tree, Shape::Car, Shape::Pole];

    pub fn class_id(self) -> ClassId {
        match self {
            Shape::Tree => 1,
            Shape::Car => 2,
            Shape::Pole => 3,
        }
    }

    fn key(self) -> &'static str {
        match self {
            Shape::Tree => "tree",
            Shape::Car => "car",
            Shape::Pole => "pole",
        }
    }
}

/// Ground, tree, car, pole.
pub fn synthetic_taxonomy() -> SemanticTaxonomy {
    SemanticTaxonomy::from_kinds([
        ("ground", ClassKind::Stuff),
        ("tree", ClassKind::Thing),
        ("car", ClassKind::Thing),
        ("pole", ClassKind::Thing),
    ])
    .expect("static taxonomy is valid")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub count: usize,
    /// Characteristic size in metres: crown diameter, car length, pole height.
    pub size_min: f64,
    pub size_max: f64,
    /// Surface sampling density, points per m².
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    /// Side length of the square scene, metres.
    pub extent: f64,
    /// Ground points per m².
    pub ground_density: f64,
    pub ground_noise: f64,
    pub surface_noise: f64,
    /// Height of every object's lowest point above the ground plane.
    pub clearance: f64,
    /// Minimum gap between object footprints; negative allows overlap.
    pub min_gap: f64,
    pub seed: u64,
    pub tree: Prototype,
    pub car: Prototype,
    pub pole: Prototype,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            extent: 40.0,
            ground_density: 20.0,
            ground_noise: 0.01,
            surface_noise: 0.0,
            clearance: 0.5,
            min_gap: 1.0,
            seed: 0,
            tree: Prototype {
                count: 10,
                size_min: 3.0,
                size_max: 6.0,
                density: 40.0,
            },
            car: Prototype {
                count: 6,
                size_min: 4.0,
                size_max: 5.0,
                density: 40.0,
            },
            pole: Prototype {
                count: 6,
                size_min: 4.0,
                size_max: 8.0,
                density: 60.0,
            },
        }
    }
}

impl SceneSpec {
    pub fn prototype(&self, shape: Shape) -> &Prototype {
        match shape {
            Shape::Tree => &self.tree,
            Shape::Car => &self.car,
            Shape::Pole => &self.pole,
        }
    }

    fn prototype_mut(&mut self, shape: Shape) -> &mut Prototype {
        match shape {
            Shape::Tree => &mut self.tree,
            Shape::Car => &mut self.car,
            Shape::Pole => &mut self.pole,
        }
    }

    pub fn object_count(&self) -> usize {
        Shape::ALL.iter().map(|&s| self.prototype(s).count).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("extent", self.extent), ("ground_density", self.ground_density)];
        for (k, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(k, format!("must be > 0, got {v}")));
            }
        }
        for (k, v) in [
            ("ground_noise", self.ground_noise),
            ("surface_noise", self.surface_noise),
            ("clearance", self.clearance),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(k, format!("must be >= 0, got {v}")));
            }
        }
        if !self.min_gap.is_finite() {
            return Err(Error::config("min_gap", "must be finite"));
        }
        for shape in Shape::ALL {
            let p = self.prototype(shape);
            let k = shape.key();
            if !(p.density.is_finite() && p.density > 0.0) {
                return Err(Error::config(format!("{k}_density"), "must be > 0"));
            }
            if !(p.size_min > 0.0 && p.size_max >= p.size_min && p.size_max.is_finite()) {
                return Err(Error::config(
                    format!("{k}_size_max"),
                    "sizes must satisfy 0 < size_min <= size_max",
                ));
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "extent" => self.extent = parse_value(key, value)?,
            "ground_density" => self.ground_density = parse_value(key, value)?,
            "ground_noise" => self.ground_noise = parse_value(key, value)?,
            "surface_noise" => self.surface_noise = parse_value(key, value)?,
            "clearance" => self.clearance = parse_value(key, value)?,
            "min_gap" => self.min_gap = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => {
                let shape = Shape::ALL
                    .into_iter()
                    .find(|s| key.starts_with(s.key()) && key[s.key().len()..].starts_with('_'))
                    .ok_or_else(|| Error::config(key, "unknown key"))?;
                let field = &key[shape.key().len() + 1..];
                let p = self.prototype_mut(shape);
                match field {
                    "count" => p.count = parse_value(key, value)?,
                    "size_min" => p.size_min = parse_value(key, value)?,
                    "size_max" => p.size_max = parse_value(key, value)?,
                    "density" => p.density = parse_value(key, value)?,
                    _ => return Err(Error::config(key, "unknown key")),
                }
            }
        }
        Ok(())
    }

    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("extent", format_sig9(self.extent)),
            ("ground_density", format_sig9(self.ground_density)),
            ("ground_noise", format_sig9(self.ground_noise)),
            ("surface_noise", format_sig9(self.surface_noise)),
            ("clearance", format_sig9(self.clearance)),
            ("min_gap", format_sig9(self.min_gap)),
            ("seed", self.seed.to_string()),
        ] {
            s.push_str(&format!("{k} = {v}\n"));
        }
        for shape in Shape::ALL {
            let p = self.prototype(shape);
            let k = shape.key();
            s.push_str(&format!("{k}_count = {}\n", p.count));
            s.push_str(&format!("{k}_size_min = {}\n", format_sig9(p.size_min)));
            s.push_str(&format!("{k}_size_max = {}\n", format_sig9(p.size_max)));
            s.push_str(&format!("{k}_density = {}\n", format_sig9(p.density)));
        }
        s
    }
}

pub fn parse_scene_spec(text: &str) -> Result<SceneSpec> {
    let mut spec = SceneSpec::default();
    for e in parse_entries(text)? {
        spec.set(&e.key, &e.value)?;
    }
    spec.validate()?;
    Ok(spec)
}

pub fn read_scene_spec(path: impl AsRef<Path>) -> Result<SceneSpec> {
    parse_scene_spec(&fs::read_to_string(path)?)
}

/// A placed object and the parameters of its surface.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacedObject {
    pub shape: Shape,
    pub instance: InstanceId,
    pub center_xy: [f64; 2],
    /// Radius of the horizontal footprint circle.
    pub footprint: f64,
    pub size: f64,
    pub yaw: f64,
    pub base_z: f64,
}

impl PlacedObject {
    /// Semi-axes (horizontal, horizontal, vertical) of a tree crown.
    fn crown_axes(&self) -> [f64; 3] {
        [self.size / 2.0, self.size / 2.0, 0.6 * self.size]
    }

    /// Length, width, height of a car box.
    fn box_dims(&self) -> [f64; 3] {
        [self.size, 0.45 * self.size, 0.35 * self.size]
    }

    fn pole_radius(&self) -> f64 {
        0.04 * self.size
    }

    fn footprint_for(shape: Shape, size: f64) -> f64 {
        match shape {
            Shape::Tree => size / 2.0,
            Shape::Car => (size / 2.0).hypot(0.225 * size),
            Shape::Pole => 0.04 * size,
        }
    }

    pub fn surface_area(&self) -> f64 {
        match self.shape {
            Shape::Tree => {
                let [a, b, c] = self.crown_axes();
                let p = 1.6075;
                let m = ((a * b).powf(p) + (a * c).powf(p) + (b * c).powf(p)) / 3.0;
                4.0 * PI * m.powf(1.0 / p)
            }
            Shape::Car => {
                let [l, w, h] = self.box_dims();
                2.0 * (l * w + l * h + w * h)
            }
            Shape::Pole => {
                let r = self.pole_radius();
                2.0 * PI * r * self.size + PI * r * r
            }
        }
    }

    /// Distance-like residual of a point from the object's surface: 0 on
    /// the surface, in metres for box and cylinder, in normalized units for
    /// the ellipsoid.
    pub fn surface_residual(&self, p: &[f64; 3]) -> f64 {
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        let dx = p[0] - self.center_xy[0];
        let dy = p[1] - self.center_xy[1];
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        let lz = p[2] - self.base_z;
        match self.shape {
            Shape::Tree => {
                let [a, b, cz] = self.crown_axes();
                let z = lz - cz;
                ((lx / a).powi(2) + (ly / b).powi(2) + (z / cz).powi(2)).sqrt() - 1.0
            }
            Shape::Car => {
                let [l, w, h] = self.box_dims();
                let q = [lx.abs() - l / 2.0, ly.abs() - w / 2.0, (lz - h / 2.0).abs() - h / 2.0];
                // signed distance to the box surface
                let outside = q.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
                let inside = q[0].max(q[1]).max(q[2]).min(0.0);
                (outside + inside).abs()
            }
            Shape::Pole => {
                let r = self.pole_radius();
                let radial = lx.hypot(ly);
                let lateral = if (0.0..=self.size).contains(&lz) {
                    (radial - r).abs()
                } else {
                    f64::INFINITY
                };
                let cap = if radial <= r {
                    (lz - self.size).abs()
                } else {
                    f64::INFINITY
                };
                lateral.min(cap)
            }
        }
    }

    fn sample_surface(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        let local = match self.shape {
            Shape::Tree => {
                let [a, b, c] = self.crown_axes();
                let gmax = (b * c).max(a * c).max(a * b);
                loop {
                    let u = unit_vector(rng);
                    let g = ((b * c * u[0]).powi(2) + (a * c * u[1]).powi(2) + (a * b * u[2]).powi(2)).sqrt();
                    if rng.random::<f64>() * gmax <= g {
                        break [a * u[0], b * u[1], c + c * u[2]];
                    }
                }
            }
            Shape::Car => {
                let [l, w, h] = self.box_dims();
                let faces = [w * h, w * h, l * h, l * h, l * w, l * w];
                let total: f64 = faces.iter().sum();
                let mut pick = rng.random::<f64>() * total;
                let mut face = 5;
                for (k, a) in faces.iter().enumerate() {
                    if pick < *a {
                        face = k;
                        break;
                    }
                    pick -= a;
                }
                let (u, v) = (rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
                match face {
                    0 => [-l / 2.0, u * w, (v + 0.5) * h],
                    1 => [l / 2.0, u * w, (v + 0.5) * h],
                    2 => [u * l, -w / 2.0, (v + 0.5) * h],
                    3 => [u * l, w / 2.0, (v + 0.5) * h],
                    4 => [u * l, v * w, 0.0],
                    _ => [u * l, v * w, h],
                }
            }
            Shape::Pole => {
                let r = self.pole_radius();
                let lateral = 2.0 * PI * r * self.size;
                let cap = PI * r * r;
                if rng.random::<f64>() * (lateral + cap) < lateral {
                    let t = rng.random::<f64>() * 2.0 * PI;
                    [r * t.cos(), r * t.sin(), rng.random::<f64>() * self.size]
                } else {
                    let t = rng.random::<f64>() * 2.0 * PI;
                    let rr = r * rng.random::<f64>().sqrt();
                    [rr * t.cos(), rr * t.sin(), self.size]
                }
            }
        };
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        [
            self.center_xy[0] + c * local[0] - s * local[1],
            self.center_xy[1] + s * local[0] + c * local[1],
            self.base_z + local[2],
        ]
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Generated cloud, its ground truth and the placed objects.
#[derive(Debug, Clone)]
pub struct Scene {
    pub cloud: PointCloud,
    pub labels: Labeling,
    pub taxonomy: SemanticTaxonomy,
    pub objects: Vec<PlacedObject>,
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = derived_rng(spec.seed, &[STREAM_SCENE]);

    let total = spec.object_count();
    let budget = 10 * total;
    let mut rejections = 0usize;
    let mut objects: Vec<PlacedObject> = Vec::with_capacity(total);
    for shape in Shape::ALL {
        let proto = spec.prototype(shape);
        for _ in 0..proto.count {
            loop {
                let size = if proto.size_max > proto.size_min {
                    rng.random_range(proto.size_min..=proto.size_max)
                } else {
                    proto.size_min
                };
                let footprint = PlacedObject::footprint_for(shape, size);
                let yaw = rng.random::<f64>() * PI;
                let fits_extent = spec.extent >= 2.0 * footprint;
                let center = if fits_extent {
                    [
                        rng.random_range(footprint..=spec.extent - footprint),
                        rng.random_range(footprint..=spec.extent - footprint),
                    ]
                } else {
                    [spec.extent / 2.0; 2]
                };
                let clear = fits_extent
                    && objects.iter().all(|o| {
                        let d = (o.center_xy[0] - center[0]).hypot(o.center_xy[1] - center[1]);
                        d - o.footprint - footprint >= spec.min_gap
                    });
                if clear {
                    objects.push(PlacedObject {
                        shape,
                        instance: objects.len() as InstanceId,
                        center_xy: center,
                        footprint,
                        size,
                        yaw,
                        base_z: spec.clearance,
                    });
                    break;
                }
                rejections += 1;
                if rejections > budget {
                    return Err(Error::Capacity(format!(
                        "placed {} of {total} objects before exhausting {budget} rejections",
                        objects.len()
                    )));
                }
            }
        }
    }

    let n_ground = (spec.extent * spec.extent * spec.ground_density).round() as usize;
    let ground_noise = Normal::new(0.0, spec.ground_noise).expect("validated sigma");
    let surface_noise = Normal::new(0.0, spec.surface_noise).expect("validated sigma");
    let mut positions = Vec::with_capacity(n_ground);
    let mut semantic = Vec::with_capacity(n_ground);
    let mut instance = Vec::with_capacity(n_ground);
    for _ in 0..n_ground {
        let x = rng.random::<f64>() * spec.extent;
        let y = rng.random::<f64>() * spec.extent;
        positions.push([x, y, ground_noise.sample(&mut rng)]);
        semantic.push(GROUND_CLASS);
        instance.push(UNASSIGNED);
    }
    for o in &objects {
        let n = ((o.surface_area() * spec.prototype(o.shape).density).round() as usize).max(1);
        for _ in 0..n {
            let mut p = o.sample_surface(&mut rng);
            if spec.surface_noise > 0.0 {
                for c in &mut p {
                    *c += surface_noise.sample(&mut rng);
                }
            }
            positions.push(p);
            semantic.push(o.shape.class_id());
            instance.push(o.instance);
        }
    }

    Ok(Scene {
        cloud: PointCloud::new(positions)?,
        labels: Labeling::new(semantic, instance)?,
        taxonomy: synthetic_taxonomy(),
        objects,
    })
}
