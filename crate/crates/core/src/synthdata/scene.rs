//! Object layouts, ray casting and conservative BEV rasterisation.

use crate::geometry::{BevGrid, Vec3};

pub const CLASS_NAMES: [&str; 4] = ["road_patch", "marking", "vehicle", "barrier"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ObjectClass {
    RoadPatch,
    Marking,
    Vehicle,
    Barrier,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 4] = [Self::RoadPatch, Self::Marking, Self::Vehicle, Self::Barrier];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Flat classes are painted on the ground plane.
    pub fn is_flat(self) -> bool {
        matches!(self, Self::RoadPatch | Self::Marking)
    }

    pub fn lidar_intensity(self) -> f64 {
        match self {
            Self::RoadPatch => GROUND_INTENSITY,
            Self::Marking => 0.35,
            Self::Vehicle | Self::Barrier => 0.6,
        }
    }
}

pub const GROUND_INTENSITY: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub class: ObjectClass,
    pub center: [f64; 2],
    pub length: f64,
    pub width: f64,
    /// Zero for flat classes.
    pub height: f64,
    pub yaw: f64,
    pub color: [f64; 3],
}

impl SceneObject {
    fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        let (lx, ly) = self.to_local(x, y);
        lx.abs() <= self.length / 2.0 + 1e-9 && ly.abs() <= self.width / 2.0 + 1e-9
    }

    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        [(hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw)].map(|(a, b)| [self.center[0] + c * a - s * b, self.center[1] + s * a + c * b])
    }

    /// Separating-axis test against the axis-aligned square `[x0,x1] x [y0,y1]`;
    /// touching counts as overlap.
    pub fn overlaps_rect(&self, x0: f64, x1: f64, y0: f64, y1: f64) -> bool {
        let corners = self.corners();
        let (s, c) = self.yaw.sin_cos();
        let rect = [[x0, y0], [x0, y1], [x1, y0], [x1, y1]];
        let axes = [[1.0, 0.0], [0.0, 1.0], [c, s], [-s, c]];
        axes.iter().all(|a| {
            let proj = |p: &[f64; 2]| p[0] * a[0] + p[1] * a[1];
            let (amin, amax) = corners.iter().map(proj).fold((f64::MAX, f64::MIN), |(l, h), v| (l.min(v), h.max(v)));
            let (bmin, bmax) = rect.iter().map(proj).fold((f64::MAX, f64::MIN), |(l, h), v| (l.min(v), h.max(v)));
            amin <= bmax + 1e-9 && bmin <= amax + 1e-9
        })
    }

    /// Ray/box slab intersection; returns entry distance and outward normal.
    fn intersect_box(&self, origin: Vec3, dir: Vec3) -> Option<(f64, Vec3)> {
        let (s, c) = self.yaw.sin_cos();
        let (ox, oy) = self.to_local(origin[0], origin[1]);
        let (dx, dy) = (c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1]);
        let o = [ox, oy, origin[2]];
        let d = [dx, dy, dir[2]];
        let lo = [-self.length / 2.0, -self.width / 2.0, 0.0];
        let hi = [self.length / 2.0, self.width / 2.0, self.height];
        let (mut t_in, mut t_out, mut axis, mut sign) = (f64::MIN, f64::MAX, 0, 0.0);
        for k in 0..3 {
            if d[k].abs() < 1e-12 {
                if o[k] < lo[k] || o[k] > hi[k] {
                    return None;
                }
                continue;
            }
            let (mut t0, mut t1) = ((lo[k] - o[k]) / d[k], (hi[k] - o[k]) / d[k]);
            let mut sg = -1.0;
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
                sg = 1.0;
            }
            if t0 > t_in {
                t_in = t0;
                axis = k;
                sign = sg;
            }
            t_out = t_out.min(t1);
        }
        if t_in > t_out || t_in <= 1e-9 {
            return None;
        }
        let local = match axis {
            0 => [sign, 0.0],
            1 => [0.0, sign],
            _ => return Some((t_in, [0.0, 0.0, sign])),
        };
        Some((t_in, [c * local[0] - s * local[1], s * local[0] + c * local[1], 0.0]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Surface {
    Ground,
    Object(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vec3,
    pub normal: Vec3,
    pub surface: Surface,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct SceneLayout {
    pub objects: Vec<SceneObject>,
}

impl SceneLayout {
    /// Nearest intersection along a unit ray; `None` means sky.
    pub fn cast(&self, origin: Vec3, dir: Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        if dir[2] < -1e-9 {
            let t = -origin[2] / dir[2];
            let point = [origin[0] + t * dir[0], origin[1] + t * dir[1], 0.0];
            // Later flat objects are painted over earlier ones; markings over patches.
            let surface = self
                .objects
                .iter()
                .enumerate()
                .filter(|(_, o)| o.class.is_flat() && o.contains_xy(point[0], point[1]))
                .max_by_key(|(i, o)| (o.class, *i))
                .map_or(Surface::Ground, |(i, _)| Surface::Object(i));
            best = Some(Hit {
                t,
                point,
                normal: [0.0, 0.0, 1.0],
                surface,
            });
        }
        for (i, o) in self.objects.iter().enumerate().filter(|(_, o)| !o.class.is_flat()) {
            if let Some((t, normal)) = o.intersect_box(origin, dir) {
                if best.is_none_or(|b| t < b.t) {
                    let point = [origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]];
                    best = Some(Hit {
                        t,
                        point,
                        normal,
                        surface: Surface::Object(i),
                    });
                }
            }
        }
        best
    }

    pub fn class_of(&self, surface: Surface) -> Option<ObjectClass> {
        match surface {
            Surface::Ground => None,
            Surface::Object(i) => Some(self.objects[i].class),
        }
    }

    /// Multi-label `[n_classes, rows, cols]` mask marking every cell that the
    /// footprint of an object of that class touches.
    pub fn rasterize(&self, grid: &BevGrid) -> Vec<u8> {
        let n = ObjectClass::ALL.len();
        let mut gt = vec![0u8; n * grid.cells()];
        let res = grid.resolution;
        for o in &self.objects {
            let corners = o.corners();
            let (xmin, xmax) = corners.iter().fold((f64::MAX, f64::MIN), |(l, h), c| (l.min(c[0]), h.max(c[0])));
            let (ymin, ymax) = corners.iter().fold((f64::MAX, f64::MIN), |(l, h), c| (l.min(c[1]), h.max(c[1])));
            let r0 = ((grid.x_max - xmax) / res).floor().max(0.0) as usize;
            let r1 = (((grid.x_max - xmin) / res).floor() as i64).min(grid.rows as i64 - 1);
            let c0 = ((grid.y_max - ymax) / res).floor().max(0.0) as usize;
            let c1 = (((grid.y_max - ymin) / res).floor() as i64).min(grid.cols as i64 - 1);
            if r1 < 0 || c1 < 0 {
                continue;
            }
            let plane = &mut gt[o.class.index() * grid.cells()..(o.class.index() + 1) * grid.cells()];
            for r in r0..=r1 as usize {
                for c in c0..=c1 as usize {
                    let x1 = grid.x_max - r as f64 * res;
                    let y1 = grid.y_max - c as f64 * res;
                    if o.overlaps_rect(x1 - res, x1, y1 - res, y1) {
                        plane[r * grid.cols + c] = 1;
                    }
                }
            }
        }
        gt
    }
}
