use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;

use super::PointCloud;
use crate::error::{Error, Result};
use crate::knn::Point3;

/// Room description for the synthetic scene generator, read from TOML.
#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    /// Room extent in meters (x, y, z).
    pub size: [f64; 3],
    /// Points per square meter of surface.
    pub density: f64,
    /// Standard deviation of the Gaussian position noise.
    #[serde(default)]
    pub noise: f64,
    pub classes: Vec<String>,
    /// Scenes written by the `synth` command and how many go to `test/`.
    #[serde(default = "default_scenes")]
    pub scenes: usize,
    #[serde(default)]
    pub test_scenes: usize,
    #[serde(default)]
    pub shell: Option<Shell>,
    #[serde(default)]
    pub color: Vec<ClassColor>,
    #[serde(default)]
    pub object: Vec<Object>,
    #[serde(default)]
    pub scatter: Vec<Scatter>,
}

fn default_scenes() -> usize {
    1
}

/// Class names for the floor, ceiling and four walls of the room box;
/// omitted parts are not generated.
#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Shell {
    pub floor: Option<String>,
    pub ceiling: Option<String>,
    pub walls: Option<String>,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ClassColor {
    pub class: String,
    pub mean: [f64; 3],
    #[serde(default)]
    pub sigma: f64,
}

/// Fixed primitive at a given position.
#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Object {
    /// Axis-aligned rectangle; exactly one axis of `max − min` is zero.
    Plane { class: String, min: [f64; 3], max: [f64; 3] },
    /// Axis-aligned box; all faces except the bottom are sampled.
    Box { class: String, min: [f64; 3], max: [f64; 3] },
    /// Vertical cylinder: side and top cap.
    Cylinder {
        class: String,
        center: [f64; 2],
        radius: f64,
        z: [f64; 2],
    },
}

/// Randomly placed furniture: `count` instances (inclusive range) with
/// footprint and height drawn uniformly from the given ranges.
#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Scatter {
    pub kind: ScatterKind,
    pub class: String,
    pub count: [usize; 2],
    /// Box footprint side lengths (min, max), or cylinder radius range.
    pub size: [f64; 2],
    pub height: [f64; 2],
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum ScatterKind {
    Box,
    Cylinder,
}

impl SceneSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let spec: SceneSpec = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].lines().count().max(1))
                .unwrap_or(0);
            Error::Parse {
                line,
                message: e.message().to_string(),
            }
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn class_index(&self, name: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::contract(format!("class {name:?} is not listed in classes")))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0 && self.density.is_finite()) {
            return Err(Error::contract("scene density must be positive"));
        }
        if self.size.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::contract("room size must be positive"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::contract("noise must be non-negative"));
        }
        if self.classes.is_empty() {
            return Err(Error::contract("scene needs at least one class"));
        }
        if self.test_scenes > self.scenes {
            return Err(Error::contract("test_scenes exceeds scenes"));
        }
        for c in &self.color {
            self.class_index(&c.class)?;
        }
        if let Some(shell) = &self.shell {
            for name in [&shell.floor, &shell.ceiling, &shell.walls].into_iter().flatten() {
                self.class_index(name)?;
            }
        }
        for o in &self.object {
            let (Object::Plane { class, .. } | Object::Box { class, .. } | Object::Cylinder { class, .. }) = o;
            self.class_index(class)?;
            if let Object::Plane { min, max, .. } = o {
                let flat = (0..3).filter(|&a| max[a] == min[a]).count();
                if flat != 1 {
                    return Err(Error::contract("a plane must be flat along exactly one axis"));
                }
            }
        }
        for s in &self.scatter {
            self.class_index(&s.class)?;
            if s.count[0] > s.count[1] || s.size[0] > s.size[1] || s.height[0] > s.height[1] {
                return Err(Error::contract(format!("scatter {} has an inverted range", s.class)));
            }
        }
        Ok(())
    }

    /// Concrete primitives of one scene: shell, fixed objects, then the
    /// scattered furniture placed with `rng`.
    pub fn layout(&self, rng: &mut ChaCha8Rng) -> Vec<Object> {
        let [w, d, h] = self.size;
        let mut out = Vec::new();
        if let Some(shell) = &self.shell {
            if let Some(c) = &shell.floor {
                out.push(Object::Plane { class: c.clone(), min: [0.0; 3], max: [w, d, 0.0] });
            }
            if let Some(c) = &shell.ceiling {
                out.push(Object::Plane { class: c.clone(), min: [0.0, 0.0, h], max: [w, d, h] });
            }
            if let Some(c) = &shell.walls {
                for (min, max) in [
                    ([0.0, 0.0, 0.0], [w, 0.0, h]),
                    ([0.0, d, 0.0], [w, d, h]),
                    ([0.0, 0.0, 0.0], [0.0, d, h]),
                    ([w, 0.0, 0.0], [w, d, h]),
                ] {
                    out.push(Object::Plane { class: c.clone(), min, max });
                }
            }
        }
        out.extend(self.object.iter().cloned());
        for s in &self.scatter {
            let count = rng.gen_range(s.count[0]..=s.count[1]);
            for _ in 0..count {
                let height = uniform(rng, s.height);
                match s.kind {
                    ScatterKind::Box => {
                        let sx = uniform(rng, s.size).min(w);
                        let sy = uniform(rng, s.size).min(d);
                        let x = uniform(rng, [0.0, w - sx]);
                        let y = uniform(rng, [0.0, d - sy]);
                        out.push(Object::Box {
                            class: s.class.clone(),
                            min: [x, y, 0.0],
                            max: [x + sx, y + sy, height],
                        });
                    }
                    ScatterKind::Cylinder => {
                        let r = uniform(rng, s.size).min(w / 2.0).min(d / 2.0);
                        out.push(Object::Cylinder {
                            class: s.class.clone(),
                            center: [uniform(rng, [r, w - r]), uniform(rng, [r, d - r])],
                            radius: r,
                            z: [0.0, height],
                        });
                    }
                }
            }
        }
        out
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.gen_range(range[0]..range[1])
    } else {
        range[0]
    }
}

/// Sampled surface patch: a parallelogram `origin + u·a + v·b` or a
/// cylinder side or cap.
enum Patch {
    Rect { origin: Point3, a: Point3, b: Point3 },
    Side { center: [f64; 2], radius: f64, z: [f64; 2] },
    Disk { center: [f64; 2], radius: f64, z: f64 },
}

impl Patch {
    fn area(&self) -> f64 {
        match self {
            Patch::Rect { a, b, .. } => {
                let cross = [
                    a[1] * b[2] - a[2] * b[1],
                    a[2] * b[0] - a[0] * b[2],
                    a[0] * b[1] - a[1] * b[0],
                ];
                cross.iter().map(|c| c * c).sum::<f64>().sqrt()
            }
            Patch::Side { radius, z, .. } => 2.0 * PI * radius * (z[1] - z[0]),
            Patch::Disk { radius, .. } => PI * radius * radius,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Point3 {
        match self {
            Patch::Rect { origin, a, b } => {
                let (u, v): (f64, f64) = (rng.gen(), rng.gen());
                [0, 1, 2].map(|k| origin[k] + u * a[k] + v * b[k])
            }
            Patch::Side { center, radius, z } => {
                let t = rng.gen_range(0.0..2.0 * PI);
                [center[0] + radius * t.cos(), center[1] + radius * t.sin(), rng.gen_range(z[0]..=z[1])]
            }
            Patch::Disk { center, radius, z } => {
                let t = rng.gen_range(0.0..2.0 * PI);
                let r = radius * rng.gen::<f64>().sqrt();
                [center[0] + r * t.cos(), center[1] + r * t.sin(), *z]
            }
        }
    }
}

fn rect(min: Point3, max: Point3, flat: usize) -> Patch {
    let (i, j) = match flat {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let mut a = [0.0; 3];
    let mut b = [0.0; 3];
    a[i] = max[i] - min[i];
    b[j] = max[j] - min[j];
    Patch::Rect { origin: min, a, b }
}

fn patches(object: &Object) -> Vec<Patch> {
    match object {
        Object::Plane { min, max, .. } => {
            let flat = (0..3).find(|&a| max[a] == min[a]).unwrap_or(2);
            vec![rect(*min, *max, flat)]
        }
        Object::Box { min, max, .. } => {
            let mut top = *min;
            top[2] = max[2];
            let mut v = vec![rect(top, *max, 2)];
            for (axis, at) in [(0, min[0]), (0, max[0]), (1, min[1]), (1, max[1])] {
                let mut lo = *min;
                let mut hi = *max;
                lo[axis] = at;
                hi[axis] = at;
                v.push(rect(lo, hi, axis));
            }
            v
        }
        Object::Cylinder { center, radius, z, .. } => vec![
            Patch::Side { center: *center, radius: *radius, z: *z },
            Patch::Disk { center: *center, radius: *radius, z: z[1] },
        ],
    }
}

/// Expected share of points per class: surface area of its primitives over
/// the total.
pub fn area_fractions(spec: &SceneSpec, layout: &[Object]) -> Result<Vec<f64>> {
    let mut area = vec![0.0; spec.classes.len()];
    for o in layout {
        let (Object::Plane { class, .. } | Object::Box { class, .. } | Object::Cylinder { class, .. }) = o;
        area[spec.class_index(class)?] += patches(o).iter().map(Patch::area).sum::<f64>();
    }
    let total: f64 = area.iter().sum();
    Ok(area.iter().map(|a| a / total.max(f64::MIN_POSITIVE)).collect())
}

/// Labeled cloud with rgb features: each patch gets `round(area·density)`
/// uniformly placed points, then Gaussian position noise and
/// class-conditioned colors.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<PointCloud> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = spec.layout(&mut rng);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::contract(e.to_string()))?;
    let mut xyz = Vec::new();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for o in &layout {
        let (Object::Plane { class, .. } | Object::Box { class, .. } | Object::Cylinder { class, .. }) = o;
        let label = spec.class_index(class)?;
        let color = spec.color.iter().find(|c| &c.class == class);
        for patch in patches(o) {
            let n = (patch.area() * spec.density).round() as usize;
            for _ in 0..n {
                let mut p = patch.sample(&mut rng);
                if spec.noise > 0.0 {
                    for c in &mut p {
                        *c += noise.sample(&mut rng);
                    }
                }
                xyz.push(p);
                let rgb = match color {
                    Some(c) => c.mean.map(|m| (m + c.sigma * rng.sample::<f64, _>(rand_distr::StandardNormal)).clamp(0.0, 1.0)),
                    None => [0.5; 3],
                };
                features.extend_from_slice(&rgb);
                labels.push(label);
            }
        }
    }
    if xyz.is_empty() {
        return Err(Error::contract("scene spec produced no points"));
    }
    let cloud = PointCloud {
        xyz,
        features,
        f0: 3,
        labels: Some(labels),
        num_classes: spec.classes.len(),
        class_names: Some(spec.classes.clone()),
    };
    cloud.validate()?;
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FLOOR_ONLY: &str = r#"
size = [2.0, 3.0, 2.5]
density = 50.0
classes = ["floor", "wall"]
[shell]
floor = "floor"
"#;

    const FURNISHED: &str = r#"
size = [5.0, 4.0, 3.0]
density = 1000.0
noise = 0.01
classes = ["floor", "ceiling", "wall", "table", "column"]
[shell]
floor = "floor"
ceiling = "ceiling"
walls = "wall"
[[color]]
class = "table"
mean = [0.6, 0.3, 0.1]
sigma = 0.05
[[scatter]]
kind = "box"
class = "table"
count = [1, 2]
size = [0.6, 1.2]
height = [0.7, 0.8]
[[scatter]]
kind = "cylinder"
class = "column"
count = [1, 1]
size = [0.15, 0.25]
height = [3.0, 3.0]
"#;

    #[test]
    fn floor_only_without_noise_is_flat() {
        let spec = SceneSpec::parse(FLOOR_ONLY).unwrap();
        let cloud = generate_scene(&spec, 1).unwrap();
        assert_eq!(cloud.len(), 300);
        assert!(cloud.xyz.iter().all(|p| p[2] == 0.0));
        assert!(cloud.labels.unwrap().iter().all(|&l| l == 0));
    }

    #[test]
    fn seeds_control_output() {
        let spec = SceneSpec::parse(FURNISHED).unwrap();
        let a = generate_scene(&spec, 5).unwrap();
        assert_eq!(a, generate_scene(&spec, 5).unwrap());
        assert_ne!(a, generate_scene(&spec, 6).unwrap());
    }

    #[test]
    fn class_histogram_follows_area() {
        let spec = SceneSpec::parse(FURNISHED).unwrap();
        let cloud = generate_scene(&spec, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let expected = area_fractions(&spec, &spec.layout(&mut rng)).unwrap();
        let labels = cloud.labels.unwrap();
        for (c, &want) in expected.iter().enumerate() {
            let got = labels.iter().filter(|&&l| l == c).count() as f64 / labels.len() as f64;
            assert!((got - want).abs() <= 0.05 * want.max(1e-3), "class {c}: {got} vs {want}");
        }
    }

    #[test]
    fn zero_density_rejected() {
        let text = FLOOR_ONLY.replace("density = 50.0", "density = 0.0");
        assert!(matches!(SceneSpec::parse(&text), Err(Error::Contract(_))));
    }

    #[test]
    fn unknown_class_and_keys_rejected() {
        let text = FLOOR_ONLY.replace("floor = \"floor\"", "floor = \"carpet\"");
        assert!(matches!(SceneSpec::parse(&text), Err(Error::Contract(_))));
        assert!(matches!(SceneSpec::parse("bogus = 1\n"), Err(Error::Parse { .. })));
    }
}
