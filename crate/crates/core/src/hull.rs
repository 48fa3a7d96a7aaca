//! Incremental 3-D convex hull reduced to a half-space membership test.

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

fn sub(a: &Point3, b: &Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: &Point3, b: &Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: &Point3, b: &Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: &Point3) -> f64 {
    dot(a, a).sqrt()
}

/// Outward unit normal `n` and offset `d`; the inside is `n·x ≤ d`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HalfSpace {
    pub normal: Point3,
    pub offset: f64,
}

impl HalfSpace {
    pub fn signed_distance(&self, x: &Point3) -> f64 {
        dot(&self.normal, x) - self.offset
    }
}

#[derive(Clone, Debug)]
pub struct ConvexHull {
    faces: Vec<HalfSpace>,
    tol: f64,
}

#[derive(Clone, Copy)]
struct Face {
    v: [usize; 3],
    plane: HalfSpace,
    alive: bool,
}

fn plane_through(pts: &[Point3], v: [usize; 3], inside: &Point3) -> Option<(HalfSpace, [usize; 3])> {
    let (a, b, c) = (&pts[v[0]], &pts[v[1]], &pts[v[2]]);
    let n = cross(&sub(b, a), &sub(c, a));
    let len = norm(&n);
    if len == 0.0 {
        return None;
    }
    let mut normal = [n[0] / len, n[1] / len, n[2] / len];
    let mut order = v;
    if dot(&normal, &sub(inside, a)) > 0.0 {
        normal = [-normal[0], -normal[1], -normal[2]];
        order = [v[0], v[2], v[1]];
    }
    Some((
        HalfSpace {
            normal,
            offset: dot(&normal, a),
        },
        order,
    ))
}

impl ConvexHull {
    /// Hull of `points`; fails when they do not span three dimensions.
    pub fn new(points: &[Point3]) -> Result<Self> {
        if points.len() < 4 {
            return Err(Error::DegenerateHull(format!(
                "{} points, need at least 4",
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateHull("non-finite coordinate".into()));
        }
        let scale = points
            .iter()
            .flat_map(|p| p.iter().map(|v| v.abs()))
            .fold(1e-300, f64::max);
        let eps = 1e-10 * scale;

        // Initial tetrahedron from extreme, well-separated points.
        let i0 = 0;
        let i1 = (0..points.len())
            .max_by(|&a, &b| norm(&sub(&points[a], &points[i0])).total_cmp(&norm(&sub(&points[b], &points[i0]))))
            .unwrap();
        let d01 = sub(&points[i1], &points[i0]);
        if norm(&d01) <= eps {
            return Err(Error::DegenerateHull("all points coincide".into()));
        }
        let area = |k: usize| norm(&cross(&d01, &sub(&points[k], &points[i0])));
        let i2 = (0..points.len()).max_by(|&a, &b| area(a).total_cmp(&area(b))).unwrap();
        if area(i2) <= eps * norm(&d01) {
            return Err(Error::DegenerateHull("points are collinear".into()));
        }
        let n012 = cross(&d01, &sub(&points[i2], &points[i0]));
        let n012 = {
            let l = norm(&n012);
            [n012[0] / l, n012[1] / l, n012[2] / l]
        };
        let height = |k: usize| dot(&n012, &sub(&points[k], &points[i0])).abs();
        let i3 = (0..points.len())
            .max_by(|&a, &b| height(a).total_cmp(&height(b)))
            .unwrap();
        if height(i3) <= eps {
            return Err(Error::DegenerateHull("points are coplanar".into()));
        }
        let tet = [i0, i1, i2, i3];
        let centroid = {
            let mut c = [0.0; 3];
            for &i in &tet {
                for d in 0..3 {
                    c[d] += points[i][d] / 4.0;
                }
            }
            c
        };

        let mut faces: Vec<Face> = Vec::new();
        for skip in 0..4 {
            let v: Vec<usize> = tet
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != skip)
                .map(|(_, &i)| i)
                .collect();
            let (plane, order) = plane_through(points, [v[0], v[1], v[2]], &centroid).expect("tetrahedron face");
            faces.push(Face {
                v: order,
                plane,
                alive: true,
            });
        }

        for (k, pt) in points.iter().enumerate() {
            if tet.contains(&k) {
                continue;
            }
            let visible: Vec<usize> = (0..faces.len())
                .filter(|&f| faces[f].alive && faces[f].plane.signed_distance(pt) > eps)
                .collect();
            if visible.is_empty() {
                continue;
            }
            // Horizon: directed edges of visible faces whose twin is not visible.
            let mut edges: Vec<(usize, usize)> = Vec::new();
            for &f in &visible {
                let v = faces[f].v;
                for e in 0..3 {
                    edges.push((v[e], v[(e + 1) % 3]));
                }
            }
            let horizon: Vec<(usize, usize)> = edges
                .iter()
                .copied()
                .filter(|&(a, b)| !edges.contains(&(b, a)))
                .collect();
            for &f in &visible {
                faces[f].alive = false;
            }
            for (a, b) in horizon {
                if let Some((plane, order)) = plane_through(points, [a, b, k], &centroid) {
                    faces.push(Face {
                        v: order,
                        plane,
                        alive: true,
                    });
                }
            }
            faces.retain(|f| f.alive);
        }

        Ok(ConvexHull {
            faces: faces.into_iter().map(|f| f.plane).collect(),
            tol: 1e-9 * scale,
        })
    }

    pub fn faces(&self) -> &[HalfSpace] {
        &self.faces
    }

    pub fn contains(&self, x: &Point3) -> bool {
        self.faces.iter().all(|h| h.signed_distance(x) <= self.tol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Membership by brute force: a point is inside iff it lies on the
    /// inner side of every supporting plane spanned by a triple of points.
    fn brute_inside(pts: &[Point3], x: &Point3) -> bool {
        let n = pts.len();
        for i in 0..n {
            for j in i + 1..n {
                for k in j + 1..n {
                    let nrm = cross(&sub(&pts[j], &pts[i]), &sub(&pts[k], &pts[i]));
                    if norm(&nrm) < 1e-12 {
                        continue;
                    }
                    let side: Vec<f64> = pts.iter().map(|p| dot(&nrm, &sub(p, &pts[i]))).collect();
                    let pos = side.iter().all(|&s| s >= -1e-12);
                    let neg = side.iter().all(|&s| s <= 1e-12);
                    if !(pos || neg) {
                        continue;
                    }
                    let s = dot(&nrm, &sub(x, &pts[i]));
                    if (pos && s < -1e-9) || (neg && s > 1e-9) {
                        return false;
                    }
                }
            }
        }
        true
    }

    #[test]
    fn unit_cube() {
        let mut pts = Vec::new();
        for i in 0..8 {
            pts.push([(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64]);
        }
        pts.push([0.5, 0.5, 0.5]);
        let h = ConvexHull::new(&pts).unwrap();
        assert!(h.contains(&[0.1, 0.9, 0.5]));
        assert!(h.contains(&[1.0, 1.0, 1.0]));
        assert!(!h.contains(&[1.01, 0.5, 0.5]));
        assert!(!h.contains(&[0.5, -0.01, 0.5]));
    }

    #[test]
    fn matches_brute_force_on_random_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let pts: Vec<Point3> = (0..25)
                .map(|_| {
                    [
                        rng.random::<f64>(),
                        rng.random::<f64>() * 2.0,
                        rng.random::<f64>() - 0.5,
                    ]
                })
                .collect();
            let h = ConvexHull::new(&pts).unwrap();
            for _ in 0..300 {
                let x = [
                    rng.random::<f64>() * 1.2 - 0.1,
                    rng.random::<f64>() * 2.4 - 0.2,
                    rng.random::<f64>() * 1.2 - 0.6,
                ];
                assert_eq!(h.contains(&x), brute_inside(&pts, &x), "{x:?}");
            }
            for p in &pts {
                assert!(h.contains(p));
            }
        }
    }

    #[test]
    fn degenerate_inputs() {
        assert!(ConvexHull::new(&[[0.0; 3]; 3]).is_err());
        let flat: Vec<Point3> = (0..10).map(|i| [i as f64, (i * i) as f64, 0.0]).collect();
        assert!(matches!(ConvexHull::new(&flat), Err(Error::DegenerateHull(_))));
        let line: Vec<Point3> = (0..10).map(|i| [i as f64, 2.0 * i as f64, 0.0]).collect();
        assert!(ConvexHull::new(&line).is_err());
    }
}
