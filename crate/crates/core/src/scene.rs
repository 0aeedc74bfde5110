//! Deterministic synthetic indoor scenes built from labeled primitives.
//!
//! A scene is a set of surfaces (floor, walls, boxes, cylinders) sampled
//! uniformly by area. Points falling strictly inside another solid are
//! rejected, so a box standing on the floor leaves a hole in the floor and
//! the two classes meet along a contour.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    /// Horizontal rectangle `size[0] x size[1]` centered at the pose position.
    FloorPlane,
    /// Vertical rectangle `size[0]` wide and `size[2]` tall; the pose position
    /// is the bottom-center of the wall.
    WallPlane,
    /// Axis-aligned (before yaw) box; the pose position is the bottom-center.
    Box,
    /// Upright cylinder of radius `size[0]` and height `size[2]`; the pose
    /// position is the bottom-center.
    Cylinder,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: [f64; 3],
    /// Rotation about +z, radians.
    pub yaw: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub pose: Pose,
    pub size: [f64; 3],
    pub class: usize,
    /// Base color before per-point noise.
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub extent: [f64; 3],
    pub num_classes: usize,
    pub primitives: Vec<Primitive>,
    /// Points per square meter of surface.
    pub density: f64,
    pub color_noise: f64,
}

/// Base colors per class id, used by [`SceneSpec::random`].
pub const CLASS_COLORS: [[f64; 3]; 5] = [
    [0.55, 0.42, 0.30],
    [0.82, 0.80, 0.74],
    [0.35, 0.45, 0.70],
    [0.70, 0.35, 0.30],
    [0.40, 0.62, 0.40],
];

pub const MAX_RANDOM_CLASSES: usize = CLASS_COLORS.len();

impl Primitive {
    fn area(&self) -> f64 {
        let [a, b, c] = self.size;
        match self.shape {
            Shape::FloorPlane => a * b,
            Shape::WallPlane => a * c,
            Shape::Box => a * b + 2.0 * (a * c + b * c),
            Shape::Cylinder => 2.0 * PI * a * c + PI * a * a,
        }
    }

    fn is_solid(&self) -> bool {
        matches!(self.shape, Shape::Box | Shape::Cylinder)
    }

    fn to_world(&self, local: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.pose.yaw.sin_cos();
        let p = self.pose.position;
        [
            p[0] + c * local[0] - s * local[1],
            p[1] + s * local[0] + c * local[1],
            p[2] + local[2],
        ]
    }

    fn to_local(&self, world: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.pose.yaw.sin_cos();
        let p = self.pose.position;
        let dx = world[0] - p[0];
        let dy = world[1] - p[1];
        [c * dx + s * dy, -s * dx + c * dy, world[2] - p[2]]
    }

    /// Strict interior test for solids; surfaces have no interior.
    fn strictly_contains(&self, world: [f64; 3]) -> bool {
        const TOL: f64 = 1e-9;
        let l = self.to_local(world);
        let [a, b, h] = self.size;
        match self.shape {
            Shape::Box => l[0].abs() < a / 2.0 - TOL && l[1].abs() < b / 2.0 - TOL && l[2] > -TOL && l[2] < h - TOL,
            Shape::Cylinder => (l[0] * l[0] + l[1] * l[1]).sqrt() < a - TOL && l[2] > -TOL && l[2] < h - TOL,
            _ => false,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        let [a, b, h] = self.size;
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..=hi);
        let local = match self.shape {
            Shape::FloorPlane => [u(-a / 2.0, a / 2.0), u(-b / 2.0, b / 2.0), 0.0],
            Shape::WallPlane => [u(-a / 2.0, a / 2.0), 0.0, u(0.0, h)],
            Shape::Box => {
                let faces = [a * b, b * h, b * h, a * h, a * h];
                let total: f64 = faces.iter().sum();
                let mut pick = u(0.0, total);
                let mut face = faces.len() - 1;
                for (i, f) in faces.iter().enumerate() {
                    if pick < *f {
                        face = i;
                        break;
                    }
                    pick -= f;
                }
                match face {
                    0 => [u(-a / 2.0, a / 2.0), u(-b / 2.0, b / 2.0), h],
                    1 => [a / 2.0, u(-b / 2.0, b / 2.0), u(0.0, h)],
                    2 => [-a / 2.0, u(-b / 2.0, b / 2.0), u(0.0, h)],
                    3 => [u(-a / 2.0, a / 2.0), b / 2.0, u(0.0, h)],
                    _ => [u(-a / 2.0, a / 2.0), -b / 2.0, u(0.0, h)],
                }
            }
            Shape::Cylinder => {
                let lateral = 2.0 * PI * a * h;
                let top = PI * a * a;
                if u(0.0, lateral + top) < lateral {
                    let t = u(0.0, 2.0 * PI);
                    [a * t.cos(), a * t.sin(), u(0.0, h)]
                } else {
                    let r = a * u(0.0, 1.0).sqrt();
                    let t = u(0.0, 2.0 * PI);
                    [r * t.cos(), r * t.sin(), h]
                }
            }
        };
        self.to_world(local)
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0 && self.density.is_finite()) {
            return Err(Error::Argument(format!(
                "density must be positive, got {}",
                self.density
            )));
        }
        if !(self.color_noise >= 0.0 && self.color_noise.is_finite()) {
            return Err(Error::Argument(
                "color noise must be a finite non-negative value".into(),
            ));
        }
        if self.primitives.is_empty() {
            return Err(Error::Argument("scene has no primitives".into()));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            let needed: &[usize] = match p.shape {
                Shape::FloorPlane => &[0, 1],
                Shape::WallPlane => &[0, 2],
                Shape::Box => &[0, 1, 2],
                Shape::Cylinder => &[0, 2],
            };
            if needed.iter().any(|&d| !(p.size[d] > 0.0)) {
                return Err(Error::Argument(format!(
                    "primitive {i} has a degenerate size {:?}",
                    p.size
                )));
            }
            if p.class >= self.num_classes {
                return Err(Error::Argument(format!(
                    "primitive {i} has class {} but the scene declares {} classes",
                    p.class, self.num_classes
                )));
            }
            if !p.color.iter().all(|c| (0.0..=1.0).contains(c)) {
                return Err(Error::Argument(format!("primitive {i} color outside [0, 1]")));
            }
        }
        let mut classes: Vec<usize> = self.primitives.iter().map(|p| p.class).collect();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(Error::Argument(
                "scene needs at least two distinct classes for boundaries to exist".into(),
            ));
        }
        Ok(())
    }

    /// A randomized room of `extent` (x, y, height) holding a floor, up to two
    /// walls and a few boxes and cylinders, with roughly `num_points` points.
    pub fn random(seed: u64, num_classes: usize, num_points: usize, extent: [f64; 3]) -> Result<Self> {
        if !(2..=MAX_RANDOM_CLASSES).contains(&num_classes) {
            return Err(Error::Argument(format!(
                "random scenes support 2..={MAX_RANDOM_CLASSES} classes, got {num_classes}"
            )));
        }
        if num_points == 0 || extent.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::Argument("point count and extent must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5ce4e);
        let [ex, ey, ez] = extent;
        let (wall_class, box_class, cyl_class, panel_class) = match num_classes {
            2 => (None, 1, 1, None),
            3 => (Some(1), 2, 2, None),
            4 => (Some(1), 2, 3, None),
            _ => (Some(1), 2, 3, Some(4)),
        };
        let jitter = |rng: &mut ChaCha8Rng, class: usize, amount: f64| -> [f64; 3] {
            let base = CLASS_COLORS[class];
            [0, 1, 2].map(|c| (base[c] + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
        };
        let mut prims = vec![Primitive {
            shape: Shape::FloorPlane,
            pose: Pose {
                position: [ex / 2.0, ey / 2.0, 0.0],
                yaw: 0.0,
            },
            size: [ex, ey, 0.0],
            class: 0,
            color: jitter(&mut rng, 0, 0.05),
        }];
        if let Some(wc) = wall_class {
            prims.push(Primitive {
                shape: Shape::WallPlane,
                pose: Pose {
                    position: [ex / 2.0, 0.0, 0.0],
                    yaw: 0.0,
                },
                size: [ex, 0.0, ez],
                class: wc,
                color: jitter(&mut rng, wc, 0.05),
            });
            if rng.random_bool(0.5) {
                prims.push(Primitive {
                    shape: Shape::WallPlane,
                    pose: Pose {
                        position: [0.0, ey / 2.0, 0.0],
                        yaw: PI / 2.0,
                    },
                    size: [ey, 0.0, ez],
                    class: wc,
                    color: jitter(&mut rng, wc, 0.05),
                });
            }
        }
        let span = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| rng.random_range(lo..=hi);
        // Solids keep disjoint footprint circles so none can bury another.
        let mut footprints: Vec<([f64; 2], f64)> = Vec::new();
        if let Some(pc) = panel_class {
            let w = span(&mut rng, 0.4, 0.9).min(ex * 0.5);
            let h = span(&mut rng, 0.6, 1.2).min(ez * 0.9);
            let cx = span(&mut rng, w / 2.0, ex - w / 2.0);
            footprints.push(([cx, 0.05], (w / 2.0).hypot(0.05)));
            prims.push(Primitive {
                shape: Shape::Box,
                pose: Pose {
                    position: [cx, 0.05, 0.0],
                    yaw: 0.0,
                },
                size: [w, 0.1, h],
                class: pc,
                color: jitter(&mut rng, pc, 0.12),
            });
        }
        let mut place = |rng: &mut ChaCha8Rng, half: [f64; 2], radius: f64| -> Option<[f64; 2]> {
            for _ in 0..200 {
                let c = [span(rng, half[0], ex - half[0]), span(rng, half[1], ey - half[1])];
                let free = footprints
                    .iter()
                    .all(|(o, r)| (c[0] - o[0]).hypot(c[1] - o[1]) > radius + r + 0.05);
                if free {
                    footprints.push((c, radius));
                    return Some(c);
                }
            }
            None
        };
        let boxes = rng.random_range(1..=3);
        for _ in 0..boxes {
            let sx = span(&mut rng, 0.25, 0.7).min(ex * 0.5);
            let sy = span(&mut rng, 0.25, 0.6).min(ey * 0.5);
            let sz = span(&mut rng, 0.25, 0.9).min(ez * 0.8);
            let yaw = span(&mut rng, -0.3, 0.3);
            let color = jitter(&mut rng, box_class, 0.12);
            let Some([cx, cy]) = place(&mut rng, [sx / 2.0, sy / 2.0], (sx / 2.0).hypot(sy / 2.0)) else {
                continue;
            };
            prims.push(Primitive {
                shape: Shape::Box,
                pose: Pose {
                    position: [cx, cy, 0.0],
                    yaw,
                },
                size: [sx, sy, sz],
                class: box_class,
                color,
            });
        }
        let cylinders = rng.random_range(1..=2);
        for _ in 0..cylinders {
            let r = span(&mut rng, 0.08, 0.22).min(ey * 0.25);
            let h = span(&mut rng, 0.3, 1.0).min(ez * 0.9);
            let color = jitter(&mut rng, cyl_class, 0.12);
            let Some([cx, cy]) = place(&mut rng, [r, r], r) else {
                continue;
            };
            prims.push(Primitive {
                shape: Shape::Cylinder,
                pose: Pose {
                    position: [cx, cy, 0.0],
                    yaw: 0.0,
                },
                size: [r, 0.0, h],
                class: cyl_class,
                color,
            });
        }
        let area: f64 = prims.iter().map(Primitive::area).sum();
        Ok(Self {
            seed,
            extent,
            num_classes,
            primitives: prims,
            density: num_points as f64 / area,
            color_noise: 0.03,
        })
    }

    /// Points allotted to each primitive: area-proportional, largest remainder.
    fn allocation(&self) -> Vec<usize> {
        let areas: Vec<f64> = self.primitives.iter().map(Primitive::area).collect();
        let total_area: f64 = areas.iter().sum();
        let total = (self.density * total_area).round().max(1.0) as usize;
        let exact: Vec<f64> = areas.iter().map(|a| total as f64 * a / total_area).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut rest = total - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..exact.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - exact[a].floor();
            let rb = exact[b] - exact[b].floor();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for i in order {
            if rest == 0 {
                break;
            }
            counts[i] += 1;
            rest -= 1;
        }
        counts
    }
}

/// Sample the scene described by `spec`. Deterministic in `spec.seed`.
pub fn generate_scene(spec: &SceneSpec) -> Result<PointCloud> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.color_noise.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Argument(format!("color noise: {e}")))?;
    let counts = spec.allocation();
    let total: usize = counts.iter().sum();
    let mut positions = Array2::zeros((total, 3));
    let mut colors = Array2::zeros((total, 3));
    let mut labels = Vec::with_capacity(total);
    let mut row = 0;
    for (pi, (prim, &count)) in spec.primitives.iter().zip(&counts).enumerate() {
        let mut made = 0;
        let mut attempts = 0usize;
        while made < count {
            attempts += 1;
            if attempts > 1000 * (count + 10) {
                return Err(Error::Argument(format!(
                    "primitive {pi} is almost entirely buried inside other solids"
                )));
            }
            let p = prim.sample(&mut rng);
            let buried = spec
                .primitives
                .iter()
                .enumerate()
                .any(|(oi, other)| oi != pi && other.is_solid() && other.strictly_contains(p));
            if buried {
                continue;
            }
            for c in 0..3 {
                positions[[row, c]] = p[c];
                let jittered = prim.color[c]
                    + if spec.color_noise > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                colors[[row, c]] = jittered.clamp(0.0, 1.0);
            }
            labels.push(prim.class);
            row += 1;
            made += 1;
        }
    }
    PointCloud::new(positions, colors, Some(labels), spec.num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knn::knn_index;

    pub(crate) fn floor_and_box(seed: u64) -> SceneSpec {
        SceneSpec {
            seed,
            extent: [2.0, 2.0, 1.0],
            num_classes: 2,
            primitives: vec![
                Primitive {
                    shape: Shape::FloorPlane,
                    pose: Pose {
                        position: [1.0, 1.0, 0.0],
                        yaw: 0.0,
                    },
                    size: [2.0, 2.0, 0.0],
                    class: 0,
                    color: CLASS_COLORS[0],
                },
                Primitive {
                    shape: Shape::Box,
                    pose: Pose {
                        position: [1.0, 1.0, 0.0],
                        yaw: 0.2,
                    },
                    size: [0.6, 0.5, 0.4],
                    class: 1,
                    color: CLASS_COLORS[2],
                },
            ],
            density: 400.0,
            color_noise: 0.03,
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = generate_scene(&floor_and_box(7)).unwrap();
        let b = generate_scene(&floor_and_box(7)).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&floor_and_box(8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_class_rejected() {
        let mut spec = floor_and_box(1);
        spec.primitives[1].class = 0;
        assert!(matches!(generate_scene(&spec), Err(Error::Argument(_))));
    }

    #[test]
    fn degenerate_size_rejected() {
        let mut spec = floor_and_box(1);
        spec.primitives[1].size[2] = 0.0;
        assert!(generate_scene(&spec).is_err());
        let mut spec = floor_and_box(1);
        spec.density = 0.0;
        assert!(generate_scene(&spec).is_err());
    }

    #[test]
    fn floor_has_box_neighbors() {
        let cloud = generate_scene(&floor_and_box(7)).unwrap();
        let labels = cloud.labels().unwrap();
        let idx = knn_index(&cloud, 32).unwrap();
        let mixed = (0..cloud.len())
            .filter(|&i| labels[i] == 0)
            .filter(|&i| idx.neighbors(i).iter().any(|&j| labels[j] == 1))
            .count();
        assert!(mixed > 0);
    }

    #[test]
    fn floor_hole_under_box() {
        let spec = floor_and_box(3);
        let cloud = generate_scene(&spec).unwrap();
        let labels = cloud.labels().unwrap();
        let bx = &spec.primitives[1];
        for i in 0..cloud.len() {
            let p = cloud.position(i);
            if labels[i] == 0 {
                assert!(!bx.strictly_contains([p[0], p[1], p[2] + 1e-3]));
            }
        }
    }

    #[test]
    fn random_specs_generate() {
        for classes in 2..=MAX_RANDOM_CLASSES {
            let spec = SceneSpec::random(11, classes, 1500, [3.0, 1.5, 1.5]).unwrap();
            let cloud = generate_scene(&spec).unwrap();
            assert!((cloud.len() as i64 - 1500).abs() <= 2, "{}", cloud.len());
            assert!(cloud.colors().iter().all(|c| (0.0..=1.0).contains(c)));
        }
        assert!(SceneSpec::random(1, 1, 100, [1.0; 3]).is_err());
    }

    #[test]
    fn random_rooms_never_bury_objects() {
        for seed in 0..60 {
            for classes in 2..=MAX_RANDOM_CLASSES {
                let spec = SceneSpec::random(seed, classes, 300, [4.0, 4.0, 2.5]).unwrap();
                let cloud = generate_scene(&spec).unwrap_or_else(|e| panic!("seed {seed}, {classes} classes: {e}"));
                assert_eq!(cloud.len(), 300);
            }
        }
    }
}
