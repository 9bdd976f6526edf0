//! Unstructured 2D simplicial meshes: topology, geometry, boundary patches,
//! deformation and quality checks, plus the plain-text mesh file format.
//!
//! File format (whitespace separated, `#` starts a comment):
//!
//! ```text
//! # header: dim npoints ncells nbfaces
//! 2 4 2 4
//! 0.0 0.0            <- npoints lines of coordinates
//! ...
//! 0 1 2              <- ncells lines of vertex indices (0-based, CCW)
//! ...
//! 0 1 inlet          <- nbfaces lines: two vertex indices and a patch token
//! ```
//!
//! Boundary face normals point out of the flow domain, which on obstacle
//! patches means into the obstacle.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::MeshError;
use crate::scalar::{num, Scalar, Vec2};

/// Boundary patch classification.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PatchKind {
    /// Prescribed-velocity boundary.
    Inlet,
    /// Zero-traction style outflow.
    Outlet,
    /// No-slip outer wall.
    Wall,
    /// Obstacle boundary held fixed during optimization (Dirichlet for V).
    ObsD,
    /// Deformable obstacle boundary (natural condition for V).
    ObsN,
}

impl PatchKind {
    pub fn parse(tok: &str) -> Option<Self> {
        match tok {
            "inlet" => Some(Self::Inlet),
            "outlet" => Some(Self::Outlet),
            "wall" => Some(Self::Wall),
            "obsD" => Some(Self::ObsD),
            "obsN" => Some(Self::ObsN),
            _ => None,
        }
    }

    pub fn token(&self) -> &'static str {
        match self {
            Self::Inlet => "inlet",
            Self::Outlet => "outlet",
            Self::Wall => "wall",
            Self::ObsD => "obsD",
            Self::ObsN => "obsN",
        }
    }

    /// True for both halves of the obstacle boundary.
    pub fn is_obstacle(&self) -> bool {
        matches!(self, Self::ObsD | Self::ObsN)
    }
}

/// A mesh edge seen as a finite-volume face.
///
/// `a -> b` follows the owner cell's CCW orientation, so the outward normal of
/// the owner is the clockwise rotation of `b - a`.
#[derive(Clone, Copy, Debug)]
pub struct Face {
    pub a: usize,
    pub b: usize,
    pub owner: usize,
    pub neighbor: Option<usize>,
    pub patch: Option<PatchKind>,
}

impl Face {
    #[inline]
    pub fn is_boundary(&self) -> bool {
        self.neighbor.is_none()
    }
}

/// Metric data derived from vertex positions; recomputed on deformation.
#[derive(Clone, Debug)]
pub struct FaceGeometry<S> {
    /// Signed cell areas (positive for CCW cells).
    pub cell_volume: Vec<S>,
    pub cell_centroid: Vec<Vec2<S>>,
    /// Face lengths.
    pub face_area: Vec<S>,
    pub face_centroid: Vec<Vec2<S>>,
    /// Unit normals, outward from the owner cell.
    pub face_normal: Vec<Vec2<S>>,
}

#[derive(Clone, Copy, Debug)]
pub struct QualityReport<S> {
    pub min_cell_volume: S,
    pub max_skewness: S,
    pub valid: bool,
}

#[derive(Clone, Debug)]
pub struct Mesh<S> {
    pub vertices: Vec<Vec2<S>>,
    pub cells: Vec<[usize; 3]>,
    /// Interior faces first, then boundary faces in declaration order.
    pub faces: Vec<Face>,
    n_interior: usize,
    geom: FaceGeometry<S>,
}

/// Compute metric data for the given connectivity; exposed separately so
/// synthetic geometry can be probed in tests.
pub fn compute_geometry<S: Scalar>(
    vertices: &[Vec2<S>],
    cells: &[[usize; 3]],
    faces: &[Face],
) -> FaceGeometry<S> {
    let third = num::<S>(1.0 / 3.0);
    let half = num::<S>(0.5);
    let mut cell_volume = Vec::with_capacity(cells.len());
    let mut cell_centroid = Vec::with_capacity(cells.len());
    for c in cells {
        let (p0, p1, p2) = (vertices[c[0]], vertices[c[1]], vertices[c[2]]);
        cell_volume.push((p1 - p0).cross(p2 - p0) * half);
        cell_centroid.push((p0 + p1 + p2) * third);
    }
    let mut face_area = Vec::with_capacity(faces.len());
    let mut face_centroid = Vec::with_capacity(faces.len());
    let mut face_normal = Vec::with_capacity(faces.len());
    for f in faces {
        let (pa, pb) = (vertices[f.a], vertices[f.b]);
        let d = pb - pa;
        let len = d.norm();
        face_area.push(len);
        face_centroid.push((pa + pb) * half);
        face_normal.push(if len > S::zero() {
            d.rot_cw() / len
        } else {
            Vec2::zero()
        });
    }
    FaceGeometry {
        cell_volume,
        cell_centroid,
        face_area,
        face_centroid,
        face_normal,
    }
}

impl<S: Scalar> Mesh<S> {
    /// Build and validate a mesh from raw arrays. Boundary faces keep the
    /// order of `boundary`.
    pub fn build(
        vertices: Vec<Vec2<S>>,
        cells: Vec<[usize; 3]>,
        boundary: &[(usize, usize, PatchKind)],
    ) -> Result<Self, MeshError> {
        let nv = vertices.len();
        for (ci, c) in cells.iter().enumerate() {
            for &v in c {
                if v >= nv {
                    return Err(MeshError::Topology(format!(
                        "cell {ci} references vertex {v} but there are only {nv} vertices"
                    )));
                }
            }
            if c[0] == c[1] || c[1] == c[2] || c[0] == c[2] {
                return Err(MeshError::Topology(format!(
                    "cell {ci} has repeated vertices"
                )));
            }
            let (p0, p1, p2) = (vertices[c[0]], vertices[c[1]], vertices[c[2]]);
            let area2 = (p1 - p0).cross(p2 - p0);
            if area2 <= S::zero() {
                return Err(MeshError::Topology(format!(
                    "cell {ci} has non-positive area (clockwise or degenerate)"
                )));
            }
        }

        // Edge census: key is the sorted vertex pair, value records the cells
        // using the edge together with the CCW-ordered endpoints in the first
        // cell encountered.
        type EdgeRecord = (usize, usize, usize, Option<usize>);
        let mut edges: HashMap<(usize, usize), EdgeRecord> = HashMap::new();
        for (ci, c) in cells.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (c[k], c[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                match edges.get_mut(&key) {
                    None => {
                        edges.insert(key, (a, b, ci, None));
                    }
                    Some(e) => {
                        if e.3.is_some() {
                            return Err(MeshError::Topology(format!(
                                "edge ({a}, {b}) is shared by more than two cells"
                            )));
                        }
                        e.3 = Some(ci);
                    }
                }
            }
        }

        let mut faces: Vec<Face> = Vec::with_capacity(edges.len());
        // Interior faces in deterministic order (sorted by vertex pair).
        let mut interior: Vec<_> = edges
            .iter()
            .filter(|(_, e)| e.3.is_some())
            .map(|(k, e)| (*k, *e))
            .collect();
        interior.sort_unstable_by_key(|(k, _)| *k);
        for (_, (a, b, owner, neighbor)) in &interior {
            faces.push(Face {
                a: *a,
                b: *b,
                owner: *owner,
                neighbor: *neighbor,
                patch: None,
            });
        }
        let n_interior = faces.len();

        // Boundary faces must match the declared list one-to-one.
        let mut declared: HashMap<(usize, usize), PatchKind> = HashMap::new();
        for &(a, b, kind) in boundary {
            let key = (a.min(b), a.max(b));
            if declared.insert(key, kind).is_some() {
                return Err(MeshError::Patch(format!(
                    "boundary face ({a}, {b}) declared twice"
                )));
            }
        }
        for &(a, b, _) in boundary {
            let key = (a.min(b), a.max(b));
            match edges.get(&key) {
                None => {
                    return Err(MeshError::Topology(format!(
                        "declared boundary face ({a}, {b}) is not an edge of any cell"
                    )))
                }
                Some(e) if e.3.is_some() => {
                    return Err(MeshError::Topology(format!(
                        "declared boundary face ({a}, {b}) is an interior edge"
                    )))
                }
                Some(e) => {
                    let kind = declared[&key];
                    faces.push(Face {
                        a: e.0,
                        b: e.1,
                        owner: e.2,
                        neighbor: None,
                        patch: Some(kind),
                    });
                }
            }
        }
        let n_declared = faces.len() - n_interior;
        let n_boundary_edges = edges.values().filter(|e| e.3.is_none()).count();
        if n_declared != n_boundary_edges {
            let (a, b) = edges
                .iter()
                .find(|(k, e)| e.3.is_none() && !declared.contains_key(k))
                .map(|(k, _)| *k)
                .unwrap_or((0, 0));
            return Err(MeshError::Patch(format!(
                "untagged boundary face: edge ({a}, {b}) lies on the boundary but has no patch"
            )));
        }

        let geom = compute_geometry(&vertices, &cells, &faces);
        Ok(Self {
            vertices,
            cells,
            faces,
            n_interior,
            geom,
        })
    }

    #[inline]
    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    #[inline]
    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    #[inline]
    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    #[inline]
    pub fn n_interior_faces(&self) -> usize {
        self.n_interior
    }

    #[inline]
    pub fn n_boundary_faces(&self) -> usize {
        self.faces.len() - self.n_interior
    }

    #[inline]
    pub fn geometry(&self) -> &FaceGeometry<S> {
        &self.geom
    }

    /// Local boundary index of face `fid` (position among boundary faces), or
    /// `None` for interior faces.
    #[inline]
    pub fn boundary_index(&self, fid: usize) -> Option<usize> {
        (fid >= self.n_interior).then(|| fid - self.n_interior)
    }

    /// Face id of local boundary index `b`.
    #[inline]
    pub fn boundary_face_id(&self, b: usize) -> usize {
        self.n_interior + b
    }

    pub fn boundary_faces(&self) -> impl Iterator<Item = usize> + '_ {
        self.n_interior..self.faces.len()
    }

    pub fn patch_faces(&self, kind: PatchKind) -> Vec<usize> {
        self.boundary_faces()
            .filter(|&f| self.faces[f].patch == Some(kind))
            .collect()
    }

    pub fn obstacle_faces(&self) -> Vec<usize> {
        self.boundary_faces()
            .filter(|&f| self.faces[f].patch.map(|p| p.is_obstacle()).unwrap_or(false))
            .collect()
    }

    /// Move every vertex by `eps * v[i]` keeping the connectivity; geometry is
    /// recomputed but NOT validated (use `quality_check` on the result).
    pub fn apply_deformation(&self, v: &[Vec2<S>], eps: S) -> Self {
        assert_eq!(v.len(), self.vertices.len(), "vertex field length mismatch");
        let vertices: Vec<Vec2<S>> = self
            .vertices
            .iter()
            .zip(v)
            .map(|(p, d)| *p + *d * eps)
            .collect();
        let geom = compute_geometry(&vertices, &self.cells, &self.faces);
        Self {
            vertices,
            cells: self.cells.clone(),
            faces: self.faces.clone(),
            n_interior: self.n_interior,
            geom,
        }
    }

    /// Minimum signed cell volume and worst centroid/face-normal alignment.
    pub fn quality_check(&self) -> QualityReport<S> {
        let mut min_vol = S::infinity();
        for &v in &self.geom.cell_volume {
            min_vol = min_vol.min(v);
        }
        let mut max_skew = S::zero();
        for (fid, f) in self.faces.iter().enumerate() {
            let n = self.geom.face_normal[fid];
            let xf = self.geom.face_centroid[fid];
            let mut sides = vec![(f.owner, S::one())];
            if let Some(nb) = f.neighbor {
                sides.push((nb, -S::one()));
            }
            for (cell, sign) in sides {
                let d = xf - self.geom.cell_centroid[cell];
                let dn = d.norm();
                if dn == S::zero() {
                    max_skew = S::one();
                    continue;
                }
                let align = d.dot(n) * sign / dn;
                max_skew = max_skew.max(S::one() - align);
            }
        }
        QualityReport {
            min_cell_volume: min_vol,
            max_skewness: max_skew,
            valid: min_vol > S::zero(),
        }
    }

    /// Minimum incident edge length per vertex (for step-size limiting).
    pub fn vertex_min_edge(&self) -> Vec<S> {
        let mut h = vec![S::infinity(); self.vertices.len()];
        for c in &self.cells {
            for k in 0..3 {
                let (a, b) = (c[k], c[(k + 1) % 3]);
                let len = (self.vertices[b] - self.vertices[a]).norm();
                h[a] = h[a].min(len);
                h[b] = h[b].min(len);
            }
        }
        h
    }

    /// Unit outward normals at the vertices of the given boundary faces:
    /// the normalized average of the incident face normals. Vertices not on
    /// any of the faces are absent from the map.
    pub fn vertex_normals(&self, faces: &[usize]) -> HashMap<usize, Vec2<S>> {
        let mut acc: HashMap<usize, Vec2<S>> = HashMap::new();
        for &fid in faces {
            let f = &self.faces[fid];
            let n = self.geom.face_normal[fid];
            *acc.entry(f.a).or_insert_with(Vec2::zero) += n;
            *acc.entry(f.b).or_insert_with(Vec2::zero) += n;
        }
        for n in acc.values_mut() {
            *n = n.normalized();
        }
        acc
    }

    /// Bounding-box diagonal, used as the domain length scale.
    pub fn domain_diameter(&self) -> S {
        let mut lo = Vec2::new(S::infinity(), S::infinity());
        let mut hi = Vec2::new(S::neg_infinity(), S::neg_infinity());
        for p in &self.vertices {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
        }
        (hi - lo).norm()
    }

    /// Total mesh area (sum of signed cell volumes).
    pub fn total_volume(&self) -> S {
        self.geom.cell_volume.iter().copied().sum()
    }

    pub fn from_text(text: &str) -> Result<Self, MeshError> {
        parse_mesh(text)
    }

    pub fn load(path: &Path) -> Result<Self, MeshError> {
        let text = std::fs::read_to_string(path)?;
        parse_mesh(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# dim npoints ncells nbfaces");
        let _ = writeln!(
            out,
            "2 {} {} {}",
            self.vertices.len(),
            self.cells.len(),
            self.n_boundary_faces()
        );
        for p in &self.vertices {
            let _ = writeln!(out, "{} {}", p.x, p.y);
        }
        for c in &self.cells {
            let _ = writeln!(out, "{} {} {}", c[0], c[1], c[2]);
        }
        for f in self.boundary_faces() {
            let face = &self.faces[f];
            let _ = writeln!(
                out,
                "{} {} {}",
                face.a,
                face.b,
                face.patch.expect("boundary face without patch").token()
            );
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), MeshError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn parse_mesh<S: Scalar>(text: &str) -> Result<Mesh<S>, MeshError> {
    // Token stream with line tracking; '#' comments run to end of line.
    let mut tokens: Vec<(usize, &str)> = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(k) => &raw[..k],
            None => raw,
        };
        for tok in line.split_whitespace() {
            tokens.push((ln + 1, tok));
        }
    }
    let mut cur = Cursor { tokens: &tokens, pos: 0 };

    let dim = cur.next_usize("dimension")?;
    if dim != 2 {
        return Err(MeshError::Parse {
            line: tokens.first().map(|t| t.0).unwrap_or(1),
            msg: format!("unsupported dimension {dim}, this build handles dim = 2"),
        });
    }
    let npoints = cur.next_usize("point count")?;
    let ncells = cur.next_usize("cell count")?;
    let nbfaces = cur.next_usize("boundary face count")?;

    let mut vertices = Vec::with_capacity(npoints);
    for _ in 0..npoints {
        let x: S = num(cur.next_f64("x coordinate")?);
        let y: S = num(cur.next_f64("y coordinate")?);
        vertices.push(Vec2::new(x, y));
    }

    let mut cells = Vec::with_capacity(ncells);
    for _ in 0..ncells {
        let a = cur.next_usize("cell vertex")?;
        let b = cur.next_usize("cell vertex")?;
        let c = cur.next_usize("cell vertex")?;
        cells.push([a, b, c]);
    }

    let mut boundary = Vec::with_capacity(nbfaces);
    for _ in 0..nbfaces {
        let a = cur.next_usize("boundary face vertex")?;
        let b = cur.next_usize("boundary face vertex")?;
        let (ln, tok) = cur.next("patch token")?;
        let kind = PatchKind::parse(tok).ok_or_else(|| MeshError::Parse {
            line: ln,
            msg: format!(
                "unknown patch token '{tok}' (expected inlet, outlet, wall, obsD or obsN)"
            ),
        })?;
        boundary.push((a, b, kind));
    }
    if cur.pos != tokens.len() {
        let (ln, tok) = tokens[cur.pos];
        return Err(MeshError::Parse {
            line: ln,
            msg: format!("trailing content '{tok}' after mesh data"),
        });
    }

    Mesh::build(vertices, cells, &boundary)
}

struct Cursor<'a> {
    tokens: &'a [(usize, &'a str)],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn next(&mut self, what: &str) -> Result<(usize, &'a str), MeshError> {
        if self.pos >= self.tokens.len() {
            return Err(MeshError::Parse {
                line: self.tokens.last().map(|t| t.0).unwrap_or(0),
                msg: format!("unexpected end of file, expected {what}"),
            });
        }
        let t = self.tokens[self.pos];
        self.pos += 1;
        Ok(t)
    }

    fn next_usize(&mut self, what: &str) -> Result<usize, MeshError> {
        let (ln, tok) = self.next(what)?;
        tok.parse::<usize>().map_err(|_| MeshError::Parse {
            line: ln,
            msg: format!("expected {what} (non-negative integer), found '{tok}'"),
        })
    }

    fn next_f64(&mut self, what: &str) -> Result<f64, MeshError> {
        let (ln, tok) = self.next(what)?;
        tok.parse::<f64>().map_err(|_| MeshError::Parse {
            line: ln,
            msg: format!("expected {what} (number), found '{tok}'"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_square() -> Mesh<f64> {
        let vertices = vec![
            Vec2::new(0.0, 0.0),
            Vec2::new(1.0, 0.0),
            Vec2::new(1.0, 1.0),
            Vec2::new(0.0, 1.0),
        ];
        let cells = vec![[0, 1, 2], [0, 2, 3]];
        let boundary = [
            (0usize, 1usize, PatchKind::Wall),
            (1, 2, PatchKind::Outlet),
            (2, 3, PatchKind::Wall),
            (3, 0, PatchKind::Inlet),
        ];
        Mesh::build(vertices, cells, &boundary).unwrap()
    }

    #[test]
    fn unit_square_counts_and_area() {
        let m = unit_square();
        assert_eq!(m.n_vertices(), 4);
        assert_eq!(m.n_cells(), 2);
        assert_eq!(m.n_boundary_faces(), 4);
        assert_eq!(m.n_interior_faces(), 1);
        assert!((m.total_volume() - 1.0).abs() < 1e-15);
        let q = m.quality_check();
        assert!(q.valid);
        assert!((q.min_cell_volume - 0.5).abs() < 1e-15);
    }

    #[test]
    fn normals_point_out_of_owner() {
        let m = unit_square();
        let g = m.geometry();
        for f in m.boundary_faces() {
            let face = &m.faces[f];
            let d = g.face_centroid[f] - g.cell_centroid[face.owner];
            assert!(
                d.dot(g.face_normal[f]) > 0.0,
                "boundary normal must leave the owner cell"
            );
        }
    }

    #[test]
    fn per_cell_normal_closure() {
        // Divergence theorem on constants: sum of n*area over each closed cell is 0.
        let m = unit_square();
        let g = m.geometry();
        for ci in 0..m.n_cells() {
            let mut s = Vec2::zero();
            for (fid, f) in m.faces.iter().enumerate() {
                if f.owner == ci {
                    s += g.face_normal[fid] * g.face_area[fid];
                } else if f.neighbor == Some(ci) {
                    s -= g.face_normal[fid] * g.face_area[fid];
                }
            }
            assert!(s.norm() < 1e-12);
        }
    }

    #[test]
    fn clockwise_cell_rejected() {
        let vertices = vec![
            Vec2::new(0.0, 0.0),
            Vec2::new(1.0, 0.0),
            Vec2::new(0.0, 1.0),
        ];
        let cells = vec![[0, 2, 1]];
        let boundary = [
            (0usize, 1usize, PatchKind::Wall),
            (1, 2, PatchKind::Wall),
            (2, 0, PatchKind::Wall),
        ];
        let err = Mesh::<f64>::build(vertices, cells, &boundary).unwrap_err();
        assert!(matches!(err, MeshError::Topology(_)), "{err}");
    }

    #[test]
    fn untagged_boundary_rejected() {
        let vertices = vec![
            Vec2::new(0.0, 0.0),
            Vec2::new(1.0, 0.0),
            Vec2::new(0.0, 1.0),
        ];
        let cells = vec![[0, 1, 2]];
        let boundary = [(0usize, 1usize, PatchKind::Wall), (1, 2, PatchKind::Wall)];
        let err = Mesh::<f64>::build(vertices, cells, &boundary).unwrap_err();
        assert!(matches!(err, MeshError::Patch(_)), "{err}");
    }

    #[test]
    fn dangling_boundary_rejected() {
        let vertices = vec![
            Vec2::new(0.0, 0.0),
            Vec2::new(1.0, 0.0),
            Vec2::new(0.0, 1.0),
            Vec2::new(5.0, 5.0),
        ];
        let cells = vec![[0, 1, 2]];
        let boundary = [
            (0usize, 1usize, PatchKind::Wall),
            (1, 2, PatchKind::Wall),
            (2, 0, PatchKind::Wall),
            (2, 3, PatchKind::Wall),
        ];
        let err = Mesh::<f64>::build(vertices, cells, &boundary).unwrap_err();
        assert!(matches!(err, MeshError::Topology(_)), "{err}");
    }

    #[test]
    fn parse_roundtrip_bitwise() {
        let m = unit_square();
        let text = m.to_text();
        let m2: Mesh<f64> = Mesh::from_text(&text).unwrap();
        assert_eq!(m.vertices, m2.vertices);
        assert_eq!(m.cells, m2.cells);
        assert_eq!(m.n_boundary_faces(), m2.n_boundary_faces());
        for (f1, f2) in m.faces.iter().zip(&m2.faces) {
            assert_eq!(f1.patch, f2.patch);
        }
    }

    #[test]
    fn parse_with_comments() {
        let text = "# a comment\n2 3 1 3\n0 0\n1 0 # trailing note\n0 1\n0 1 2\n0 1 wall\n1 2 outlet\n2 0 inlet\n";
        let m: Mesh<f64> = Mesh::from_text(text).unwrap();
        assert_eq!(m.n_cells(), 1);
        assert_eq!(m.patch_faces(PatchKind::Outlet).len(), 1);
    }

    #[test]
    fn parse_rejects_3d() {
        let text = "3 0 0 0\n";
        let err = Mesh::<f64>::from_text(text).unwrap_err();
        match err {
            MeshError::Parse { msg, .. } => assert!(msg.contains("dimension")),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn parse_rejects_unknown_patch_token() {
        let text = "2 3 1 3\n0 0\n1 0\n0 1\n0 1 2\n0 1 wall\n1 2 outlet\n2 0 slipwall\n";
        let err = Mesh::<f64>::from_text(text).unwrap_err();
        match err {
            MeshError::Parse { line, msg } => {
                assert_eq!(line, 8);
                assert!(msg.contains("slipwall"));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn deformation_identity_and_translation() {
        let m = unit_square();
        let zero = vec![Vec2::zero(); m.n_vertices()];
        let m2 = m.apply_deformation(&zero, 0.3);
        assert_eq!(m.vertices, m2.vertices);
        let shift = vec![Vec2::new(1.0, 2.0); m.n_vertices()];
        let m3 = m.apply_deformation(&shift, 0.5);
        assert!((m3.total_volume() - 1.0).abs() < 1e-14);
        assert!((m3.vertices[0].x - 0.5).abs() < 1e-15);
        assert!((m3.vertices[0].y - 1.0).abs() < 1e-15);
    }

    #[test]
    fn inverted_cell_detected_by_quality() {
        let m = unit_square();
        // Drag vertex 0 across the diagonal, inverting cell 0.
        let mut v = vec![Vec2::zero(); m.n_vertices()];
        v[0] = Vec2::new(3.0, 3.0);
        let bad = m.apply_deformation(&v, 1.0);
        let q = bad.quality_check();
        assert!(!q.valid);
        assert!(q.min_cell_volume <= 0.0);
    }

    #[test]
    fn save_load_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("square.msh");
        let m = unit_square();
        m.save(&path).unwrap();
        let m2: Mesh<f64> = Mesh::load(&path).unwrap();
        assert_eq!(m.vertices, m2.vertices);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = Mesh::<f64>::load(Path::new("/nonexistent/nowhere.msh")).unwrap_err();
        assert!(matches!(err, MeshError::Io(_)));
    }
}
