//! Structured generators for the meshes used by tests, examples and the CLI:
//! rectangles, circle-in-circle annuli and the channel-with-cylinder case.
//!
//! The channel mesh is an O-grid: rays from the cylinder center to the outer
//! rectangle, radial layers geometrically graded toward the cylinder, each
//! quad split into two triangles with a mirror-symmetric diagonal rule so a
//! top-bottom symmetric configuration yields an exactly symmetric mesh.

use crate::mesh::{Mesh, PatchKind};
use crate::scalar::{num, Scalar, Vec2};

/// Two-triangle unit square with inlet left, outlet right, walls top/bottom.
pub fn unit_square<S: Scalar>() -> Mesh<S> {
    let vertices = vec![
        Vec2::new(num(0.0), num(0.0)),
        Vec2::new(num(1.0), num(0.0)),
        Vec2::new(num(1.0), num(1.0)),
        Vec2::new(num(0.0), num(1.0)),
    ];
    let cells = vec![[0, 1, 2], [0, 2, 3]];
    let boundary = [
        (0usize, 1usize, PatchKind::Wall),
        (1, 2, PatchKind::Outlet),
        (2, 3, PatchKind::Wall),
        (3, 0, PatchKind::Inlet),
    ];
    Mesh::build(vertices, cells, &boundary).expect("unit square mesh")
}

/// Patch assignment for the four sides of a rectangle.
#[derive(Clone, Copy, Debug)]
pub struct RectSides {
    pub left: PatchKind,
    pub right: PatchKind,
    pub bottom: PatchKind,
    pub top: PatchKind,
}

impl RectSides {
    /// Channel flow convention: inlet left, outlet right, walls top/bottom.
    pub fn channel() -> Self {
        Self {
            left: PatchKind::Inlet,
            right: PatchKind::Outlet,
            bottom: PatchKind::Wall,
            top: PatchKind::Wall,
        }
    }

    /// Dirichlet velocity on every side except the right outflow; makes a
    /// uniform stream an exact solution.
    pub fn open_channel() -> Self {
        Self {
            left: PatchKind::Inlet,
            right: PatchKind::Outlet,
            bottom: PatchKind::Inlet,
            top: PatchKind::Inlet,
        }
    }
}

/// Structured triangulated rectangle, `nx` by `ny` quads. Even `ny` gives a
/// mesh that is mirror symmetric about the horizontal midline.
pub fn rect_grid<S: Scalar>(
    nx: usize,
    ny: usize,
    x_range: (f64, f64),
    y_range: (f64, f64),
    sides: RectSides,
) -> Mesh<S> {
    assert!(nx >= 1 && ny >= 1);
    let idx = |i: usize, j: usize| j * (nx + 1) + i;
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            let x = x_range.0 + (x_range.1 - x_range.0) * i as f64 / nx as f64;
            let y = y_range.0 + (y_range.1 - y_range.0) * j as f64 / ny as f64;
            vertices.push(Vec2::new(num(x), num(y)));
        }
    }
    let mut cells = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (a, b, c, d) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
            if (i + j) % 2 == 0 {
                cells.push([a, b, c]);
                cells.push([a, c, d]);
            } else {
                cells.push([a, b, d]);
                cells.push([b, c, d]);
            }
        }
    }
    let mut boundary = Vec::with_capacity(2 * (nx + ny));
    for i in 0..nx {
        boundary.push((idx(i, 0), idx(i + 1, 0), sides.bottom));
        boundary.push((idx(i, ny), idx(i + 1, ny), sides.top));
    }
    for j in 0..ny {
        boundary.push((idx(0, j), idx(0, j + 1), sides.left));
        boundary.push((idx(nx, j), idx(nx, j + 1), sides.right));
    }
    Mesh::build(vertices, cells, &boundary).expect("rect grid mesh")
}

/// Channel-with-cylinder O-grid configuration.
#[derive(Clone, Copy, Debug)]
pub struct CylinderChannel {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub center: (f64, f64),
    pub radius: f64,
    /// Angular samples around the cylinder; four of them are snapped to the
    /// rectangle corner directions.
    pub n_theta: usize,
    /// Radial layers between cylinder and outer boundary.
    pub n_r: usize,
    /// Geometric growth of the layer thickness away from the cylinder (> 1).
    pub grading: f64,
    /// Waterline height: obstacle faces with midpoint below become `obsN`
    /// (deformable), the rest `obsD`. `None` marks the whole hull deformable.
    pub waterline: Option<f64>,
}

impl CylinderChannel {
    /// Baseline cylinder-in-channel benchmark layout (Re set by fluid
    /// properties elsewhere): unit diameter, 8 x 4 box, slight downstream bias.
    pub fn coarse() -> Self {
        Self {
            x_min: -3.0,
            x_max: 5.0,
            y_min: -2.0,
            y_max: 2.0,
            center: (0.0, 0.0),
            radius: 0.5,
            n_theta: 96,
            n_r: 26,
            grading: 1.16,
            waterline: None,
        }
    }

    /// Intermediate resolution used for force cross-checks.
    pub fn medium() -> Self {
        Self {
            n_theta: 136,
            n_r: 37,
            grading: 1.11,
            ..Self::coarse()
        }
    }

    /// Halve the spacing in both directions `factor` times.
    pub fn refined(&self, factor: u32) -> Self {
        let f = 2usize.pow(factor);
        Self {
            n_theta: self.n_theta * f,
            n_r: self.n_r * f,
            grading: self.grading.powf(1.0 / f as f64),
            ..*self
        }
    }

    pub fn build<S: Scalar>(&self) -> Mesh<S> {
        let (cx, cy) = self.center;
        assert!(self.n_theta >= 8 && self.n_r >= 2);
        assert!(self.grading > 1.0);
        assert!(
            cx - self.radius > self.x_min
                && cx + self.radius < self.x_max
                && cy - self.radius > self.y_min
                && cy + self.radius < self.y_max,
            "cylinder must lie strictly inside the box"
        );

        // Ray directions: uniform angles with the nearest sample replaced by
        // each exact corner direction, keeping the count. The lower half is
        // the bitwise reflection of the upper half, so a configuration that
        // is symmetric about y = cy meshes exactly mirror symmetric.
        let nt = self.n_theta;
        let tau = std::f64::consts::TAU;
        let mut dir = vec![(0.0f64, 0.0f64); nt];
        for (k, d) in dir.iter_mut().enumerate().take(nt / 2 + 1) {
            let t = tau * k as f64 / nt as f64;
            *d = (t.cos(), t.sin());
        }
        dir[0] = (1.0, 0.0);
        dir[nt / 2] = (-1.0, 0.0);
        for k in nt / 2 + 1..nt {
            let (x, y) = dir[nt - k];
            dir[k] = (x, -y);
        }
        let corners = [
            (self.x_max, self.y_max),
            (self.x_min, self.y_max),
            (self.x_min, self.y_min),
            (self.x_max, self.y_min),
        ];
        let mut snapped = vec![false; nt];
        for &(px, py) in &corners {
            let (dx, dy) = (px - cx, py - cy);
            let len = (dx * dx + dy * dy).sqrt();
            let c = (dx / len, dy / len);
            let nearest = (0..nt)
                .filter(|&k| !snapped[k])
                .max_by(|&a, &b| {
                    let da = dir[a].0 * c.0 + dir[a].1 * c.1;
                    let db = dir[b].0 * c.0 + dir[b].1 * c.1;
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            dir[nearest] = c;
            snapped[nearest] = true;
        }

        // Distance from the center to the rectangle along each ray.
        let ray_len: Vec<f64> = dir
            .iter()
            .map(|&(c, s)| {
                let tx = if c > 0.0 {
                    (self.x_max - cx) / c
                } else if c < 0.0 {
                    (self.x_min - cx) / c
                } else {
                    f64::INFINITY
                };
                let ty = if s > 0.0 {
                    (self.y_max - cy) / s
                } else if s < 0.0 {
                    (self.y_min - cy) / s
                } else {
                    f64::INFINITY
                };
                tx.min(ty)
            })
            .collect();

        // Radial blending weights with geometric grading toward the cylinder.
        let nr = self.n_r;
        let g = self.grading;
        let denom = g.powi(nr as i32) - 1.0;
        let w: Vec<f64> = (0..=nr).map(|j| (g.powi(j as i32) - 1.0) / denom).collect();

        let idx = |k: usize, j: usize| j * nt + k % nt;
        let mut pos = Vec::with_capacity(nt * (nr + 1));
        for j in 0..=nr {
            for k in 0..nt {
                let r = self.radius + (ray_len[k] - self.radius) * w[j];
                let (mut x, mut y) = (cx + r * dir[k].0, cy + r * dir[k].1);
                if j == nr {
                    // Snap the outer ring exactly onto the box so boundary
                    // classification is robust.
                    let tol = 1e-9 * (self.x_max - self.x_min).max(self.y_max - self.y_min);
                    if (x - self.x_min).abs() < tol {
                        x = self.x_min;
                    }
                    if (x - self.x_max).abs() < tol {
                        x = self.x_max;
                    }
                    if (y - self.y_min).abs() < tol {
                        y = self.y_min;
                    }
                    if (y - self.y_max).abs() < tol {
                        y = self.y_max;
                    }
                }
                pos.push((x, y));
            }
        }

        // Quad corners run clockwise in the plane (angle, then radius), so
        // triangles are emitted with reversed winding to come out CCW. The
        // diagonal switches at nt/2, which makes the triangulation of a
        // symmetric configuration exactly mirror symmetric.
        let mut cells = Vec::with_capacity(2 * nt * nr);
        for j in 0..nr {
            for k in 0..nt {
                let (a, b, c, d) = (idx(k, j), idx(k + 1, j), idx(k + 1, j + 1), idx(k, j + 1));
                if k < nt / 2 {
                    cells.push([a, c, b]);
                    cells.push([a, d, c]);
                } else {
                    cells.push([a, d, b]);
                    cells.push([b, d, c]);
                }
            }
        }

        let mut boundary = Vec::new();
        for k in 0..nt {
            let (a, b) = (idx(k, 0), idx(k + 1, 0));
            let kind = match self.waterline {
                None => PatchKind::ObsN,
                Some(wl) => {
                    let ym = 0.5 * (pos[a].1 + pos[b].1);
                    if ym < wl {
                        PatchKind::ObsN
                    } else {
                        PatchKind::ObsD
                    }
                }
            };
            boundary.push((a, b, kind));
        }
        for k in 0..nt {
            let (a, b) = (idx(k, nr), idx(k + 1, nr));
            let (pa, pb) = (pos[a], pos[b]);
            let kind = if pa.0 == self.x_min && pb.0 == self.x_min {
                PatchKind::Inlet
            } else if pa.0 == self.x_max && pb.0 == self.x_max {
                PatchKind::Outlet
            } else if (pa.1 == self.y_min && pb.1 == self.y_min)
                || (pa.1 == self.y_max && pb.1 == self.y_max)
            {
                PatchKind::Wall
            } else {
                panic!("outer boundary edge not on a box side: {pa:?} {pb:?}");
            };
            boundary.push((a, b, kind));
        }

        let vertices = pos
            .into_iter()
            .map(|(x, y)| Vec2::new(num(x), num(y)))
            .collect();
        Mesh::build(vertices, cells, &boundary).expect("cylinder channel mesh")
    }
}

/// Circle-in-circle annulus: inner circle is the obstacle, outer circle takes
/// `outer` as patch kind.
pub fn annulus<S: Scalar>(
    r_in: f64,
    r_out: f64,
    n_theta: usize,
    n_r: usize,
    outer: PatchKind,
    waterline: Option<f64>,
) -> Mesh<S> {
    assert!(r_out > r_in && r_in > 0.0);
    assert!(n_theta >= 8 && n_r >= 1);
    let tau = std::f64::consts::TAU;
    let idx = |k: usize, j: usize| j * n_theta + k % n_theta;
    let mut dir = vec![(0.0f64, 0.0f64); n_theta];
    for (k, d) in dir.iter_mut().enumerate().take(n_theta / 2 + 1) {
        let t = tau * k as f64 / n_theta as f64;
        *d = (t.cos(), t.sin());
    }
    dir[0] = (1.0, 0.0);
    dir[n_theta / 2] = (-1.0, 0.0);
    for k in n_theta / 2 + 1..n_theta {
        let (x, y) = dir[n_theta - k];
        dir[k] = (x, -y);
    }
    let mut pos = Vec::with_capacity(n_theta * (n_r + 1));
    for j in 0..=n_r {
        let r = r_in + (r_out - r_in) * j as f64 / n_r as f64;
        for k in 0..n_theta {
            pos.push(Vec2::new(num(r * dir[k].0), num(r * dir[k].1)));
        }
    }
    let mut cells = Vec::with_capacity(2 * n_theta * n_r);
    for j in 0..n_r {
        for k in 0..n_theta {
            let (a, b, c, d) = (idx(k, j), idx(k + 1, j), idx(k + 1, j + 1), idx(k, j + 1));
            if k < n_theta / 2 {
                cells.push([a, c, b]);
                cells.push([a, d, c]);
            } else {
                cells.push([a, d, b]);
                cells.push([b, d, c]);
            }
        }
    }
    let mut boundary = Vec::new();
    for k in 0..n_theta {
        let (a, b) = (idx(k, 0), idx(k + 1, 0));
        let kind = match waterline {
            None => PatchKind::ObsN,
            Some(wl) => {
                let ym = 0.5 * r_in * (dir[k].1 + dir[(k + 1) % n_theta].1);
                if ym < wl {
                    PatchKind::ObsN
                } else {
                    PatchKind::ObsD
                }
            }
        };
        boundary.push((a, b, kind));
    }
    for k in 0..n_theta {
        boundary.push((idx(k, n_r), idx(k + 1, n_r), outer));
    }
    Mesh::build(pos, cells, &boundary).expect("annulus mesh")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rect_grid_area_and_patches() {
        let m: Mesh<f64> = rect_grid(8, 4, (0.0, 2.0), (0.0, 1.0), RectSides::channel());
        assert_eq!(m.n_cells(), 64);
        assert!((m.total_volume() - 2.0).abs() < 1e-12);
        assert_eq!(m.patch_faces(PatchKind::Inlet).len(), 4);
        assert_eq!(m.patch_faces(PatchKind::Outlet).len(), 4);
        assert_eq!(m.patch_faces(PatchKind::Wall).len(), 16);
        assert!(m.quality_check().valid);
    }

    #[test]
    fn cylinder_channel_counts_and_validity() {
        let cfg = CylinderChannel {
            n_theta: 32,
            n_r: 8,
            ..CylinderChannel::coarse()
        };
        let m: Mesh<f64> = cfg.build();
        assert_eq!(m.n_cells(), 2 * 32 * 8);
        let q = m.quality_check();
        assert!(q.valid, "invalid cylinder mesh: {q:?}");
        // Divergence theorem: sum of cell areas equals the boundary integral
        // of x . n / 2, which catches gaps, overlaps and winding mistakes.
        let geom = m.geometry();
        let by_boundary: f64 = m
            .boundary_faces()
            .map(|f| 0.5 * geom.face_centroid[f].dot(geom.face_normal[f]) * geom.face_area[f])
            .sum();
        assert!(
            (m.total_volume() - by_boundary).abs() < 1e-10 * m.total_volume(),
            "area {} vs boundary integral {by_boundary}",
            m.total_volume()
        );
        // Close to box minus inscribed polygon (corner snapping shifts the
        // polygon slightly off the regular one).
        let n = 32u32;
        let poly =
            0.5 * n as f64 * cfg.radius * cfg.radius * (std::f64::consts::TAU / n as f64).sin();
        let expect = (cfg.x_max - cfg.x_min) * (cfg.y_max - cfg.y_min) - poly;
        assert!((m.total_volume() - expect).abs() < 1e-3 * expect);
        assert_eq!(m.obstacle_faces().len(), 32);
    }

    #[test]
    fn cylinder_channel_coarse_cell_count() {
        let m: Mesh<f64> = CylinderChannel::coarse().build();
        assert_eq!(m.n_cells(), 4992);
        assert!(m.quality_check().valid);
    }

    #[test]
    fn cylinder_channel_is_mirror_symmetric() {
        let m: Mesh<f64> = CylinderChannel {
            n_theta: 48,
            n_r: 10,
            waterline: Some(0.0),
            ..CylinderChannel::coarse()
        }
        .build();
        // Every vertex must have an exact mirror partner.
        use std::collections::HashSet;
        let mut set: HashSet<(u64, u64)> = HashSet::new();
        for p in &m.vertices {
            set.insert((p.x.to_bits(), p.y.to_bits()));
        }
        for p in &m.vertices {
            let mirrored = (p.x.to_bits(), (-p.y).to_bits());
            let self_mirror = p.y == 0.0;
            assert!(
                set.contains(&mirrored) || self_mirror,
                "vertex ({}, {}) has no mirror partner",
                p.x,
                p.y
            );
        }
        // Waterline splits the obstacle into equal halves.
        let n_d = m.patch_faces(PatchKind::ObsD).len();
        let n_n = m.patch_faces(PatchKind::ObsN).len();
        assert_eq!(n_d + n_n, 48);
        assert_eq!(n_d, n_n);
    }

    #[test]
    fn annulus_area() {
        let m: Mesh<f64> = annulus(0.5, 1.5, 64, 12, PatchKind::Wall, None);
        let poly = |r: f64| {
            0.5 * 64.0 * r * r * (std::f64::consts::TAU / 64.0).sin()
        };
        let expect = poly(1.5) - poly(0.5);
        assert!((m.total_volume() - expect).abs() < 1e-12 * expect);
        assert!(m.quality_check().valid);
    }

    #[test]
    fn refinement_scales_counts() {
        let base = CylinderChannel {
            n_theta: 16,
            n_r: 4,
            ..CylinderChannel::coarse()
        };
        let fine = base.refined(1);
        assert_eq!(fine.n_theta, 32);
        assert_eq!(fine.n_r, 8);
        let m: Mesh<f64> = fine.build();
        assert!(m.quality_check().valid);
    }
}
