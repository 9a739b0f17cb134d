//! Vector helpers, watertight ray/triangle intersection and a bounding-volume
//! hierarchy over triangle soups.

use nalgebra::Vector3;

pub type Vec3 = Vector3<f64>;

/// Self-intersection bias on ray parameters.
pub const T_MIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

/// Per-ray constants for the watertight test.
#[derive(Debug, Clone, Copy)]
struct Shear {
    kx: usize,
    ky: usize,
    kz: usize,
    sx: f64,
    sy: f64,
    sz: f64,
}

impl Shear {
    fn new(dir: &Vec3) -> Self {
        let abs = dir.abs();
        let kz = if abs.x >= abs.y && abs.x >= abs.z {
            0
        } else if abs.y >= abs.z {
            1
        } else {
            2
        };
        let mut kx = (kz + 1) % 3;
        let mut ky = (kx + 1) % 3;
        if dir[kz] < 0.0 {
            std::mem::swap(&mut kx, &mut ky);
        }
        Shear {
            kx,
            ky,
            kz,
            sx: dir[kx] / dir[kz],
            sy: dir[ky] / dir[kz],
            sz: 1.0 / dir[kz],
        }
    }
}

/// A ray with precomputed traversal constants.
#[derive(Debug, Clone, Copy)]
pub struct PreparedRay {
    pub ray: Ray,
    inv_dir: Vec3,
    shear: Shear,
}

impl PreparedRay {
    pub fn new(ray: Ray) -> Self {
        PreparedRay {
            inv_dir: Vec3::new(
                1.0 / ray.direction.x,
                1.0 / ray.direction.y,
                1.0 / ray.direction.z,
            ),
            shear: Shear::new(&ray.direction),
            ray,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangle {
    pub v: [Vec3; 3],
}

impl Triangle {
    pub fn new(a: Vec3, b: Vec3, c: Vec3) -> Self {
        Triangle { v: [a, b, c] }
    }

    pub fn area(&self) -> f64 {
        0.5 * (self.v[1] - self.v[0]).cross(&(self.v[2] - self.v[0])).norm()
    }

    /// Unit normal from counter-clockwise winding; `None` for degenerate triangles.
    pub fn winding_normal(&self) -> Option<Vec3> {
        let n = (self.v[1] - self.v[0]).cross(&(self.v[2] - self.v[0]));
        let len = n.norm();
        if len > 0.0 && len.is_finite() {
            Some(n / len)
        } else {
            None
        }
    }

    pub fn centroid(&self) -> Vec3 {
        (self.v[0] + self.v[1] + self.v[2]) / 3.0
    }

    pub fn bounds(&self) -> Aabb {
        let mut b = Aabb::empty();
        for p in &self.v {
            b.grow(p);
        }
        b
    }

    /// Watertight ray/triangle test (shear-and-scale formulation). Returns the
    /// ray parameter of the hit inside `(t_min, t_max)`.
    pub fn intersect(&self, ray: &PreparedRay, t_min: f64, t_max: f64) -> Option<f64> {
        let Shear {
            kx,
            ky,
            kz,
            sx,
            sy,
            sz,
        } = ray.shear;
        let a = self.v[0] - ray.ray.origin;
        let b = self.v[1] - ray.ray.origin;
        let c = self.v[2] - ray.ray.origin;

        let ax = a[kx] - sx * a[kz];
        let ay = a[ky] - sy * a[kz];
        let bx = b[kx] - sx * b[kz];
        let by = b[ky] - sy * b[kz];
        let cx = c[kx] - sx * c[kz];
        let cy = c[ky] - sy * c[kz];

        let u = cx * by - cy * bx;
        let v = ax * cy - ay * cx;
        let w = bx * ay - by * ax;

        if (u < 0.0 || v < 0.0 || w < 0.0) && (u > 0.0 || v > 0.0 || w > 0.0) {
            return None;
        }
        let det = u + v + w;
        if det == 0.0 {
            return None;
        }
        let az = sz * a[kz];
        let bz = sz * b[kz];
        let cz = sz * c[kz];
        let t = (u * az + v * bz + w * cz) / det;
        if t > t_min && t < t_max {
            Some(t)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn empty() -> Self {
        Aabb {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    pub fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&other.min),
            max: self.max.sup(&other.max),
        }
    }

    pub fn largest_axis(&self) -> usize {
        let d = self.max - self.min;
        if d.x >= d.y && d.x >= d.z {
            0
        } else if d.y >= d.z {
            1
        } else {
            2
        }
    }

    /// Slab test; returns true when the ray overlaps the box within `(t_min, t_max)`.
    fn hit(&self, ray: &PreparedRay, t_min: f64, t_max: f64) -> bool {
        let mut lo = t_min;
        let mut hi = t_max;
        for axis in 0..3 {
            let inv = ray.inv_dir[axis];
            let mut t0 = (self.min[axis] - ray.ray.origin[axis]) * inv;
            let mut t1 = (self.max[axis] - ray.ray.origin[axis]) * inv;
            if inv < 0.0 {
                std::mem::swap(&mut t0, &mut t1);
            }
            // NaN from 0 * inf leaves the bounds untouched.
            if t0 > lo {
                lo = t0;
            }
            if t1 < hi {
                hi = t1;
            }
            // Padding keeps hits on flat (zero-thickness) boxes.
            if lo > hi * (1.0 + 4.0 * f64::EPSILON) + 1e-12 {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { bounds: Aabb, first: usize, count: usize },
    Inner { bounds: Aabb, left: usize, right: usize },
}

impl Node {
    fn bounds(&self) -> &Aabb {
        match self {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }
}

const LEAF_SIZE: usize = 4;

/// Bounding-volume hierarchy over a fixed triangle list. Built once per scene
/// geometry and shared read-only by all tracing workers.
#[derive(Debug, Clone)]
pub struct Bvh {
    triangles: Vec<Triangle>,
    /// Triangle indices in leaf order; maps back to the caller's indexing.
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub triangle: usize,
}

impl Bvh {
    pub fn build(triangles: Vec<Triangle>) -> Self {
        let mut order: Vec<usize> = (0..triangles.len()).collect();
        let centroids: Vec<Vec3> = triangles.iter().map(Triangle::centroid).collect();
        let bounds: Vec<Aabb> = triangles.iter().map(Triangle::bounds).collect();
        let mut nodes = Vec::with_capacity(2 * triangles.len() / LEAF_SIZE + 1);
        if !triangles.is_empty() {
            build_node(&mut nodes, &mut order, 0, &centroids, &bounds);
        }
        Bvh {
            triangles,
            order,
            nodes,
        }
    }

    pub fn triangles(&self) -> &[Triangle] {
        &self.triangles
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Closest hit along the ray. Ties in `t` resolve to the lowest triangle index.
    pub fn closest(&self, ray: &PreparedRay, t_min: f64, t_max: f64) -> Option<Hit> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best: Option<Hit> = None;
        let mut limit = t_max;
        let mut stack = Vec::with_capacity(64);
        stack.push(0usize);
        while let Some(idx) = stack.pop() {
            let node = &self.nodes[idx];
            if !node.bounds().hit(ray, t_min, limit) {
                continue;
            }
            match *node {
                Node::Leaf { first, count, .. } => {
                    for &tri in &self.order[first..first + count] {
                        // Inclusive upper bound so equal-t ties can be resolved by index.
                        let upper = next_up(limit);
                        if let Some(t) = self.triangles[tri].intersect(ray, t_min, upper) {
                            let better = match best {
                                None => true,
                                Some(b) => t < b.t || (t == b.t && tri < b.triangle),
                            };
                            if better {
                                best = Some(Hit { t, triangle: tri });
                                limit = t;
                            }
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    stack.push(right);
                    stack.push(left);
                }
            }
        }
        best
    }

    /// True when anything blocks the ray within `(t_min, t_max)`.
    pub fn occluded(&self, ray: &PreparedRay, t_min: f64, t_max: f64) -> bool {
        if self.nodes.is_empty() {
            return false;
        }
        let mut stack = Vec::with_capacity(64);
        stack.push(0usize);
        while let Some(idx) = stack.pop() {
            let node = &self.nodes[idx];
            if !node.bounds().hit(ray, t_min, t_max) {
                continue;
            }
            match *node {
                Node::Leaf { first, count, .. } => {
                    if self.order[first..first + count]
                        .iter()
                        .any(|&tri| self.triangles[tri].intersect(ray, t_min, t_max).is_some())
                    {
                        return true;
                    }
                }
                Node::Inner { left, right, .. } => {
                    stack.push(right);
                    stack.push(left);
                }
            }
        }
        false
    }
}

fn next_up(x: f64) -> f64 {
    if x.is_finite() {
        x + x.abs() * f64::EPSILON + f64::MIN_POSITIVE
    } else {
        x
    }
}

fn build_node(
    nodes: &mut Vec<Node>,
    order: &mut [usize],
    offset: usize,
    centroids: &[Vec3],
    bounds: &[Aabb],
) -> usize {
    let node_bounds = order
        .iter()
        .fold(Aabb::empty(), |acc, &i| acc.union(&bounds[i]));
    let idx = nodes.len();
    if order.len() <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            bounds: node_bounds,
            first: offset,
            count: order.len(),
        });
        return idx;
    }
    let mut centroid_bounds = Aabb::empty();
    for &i in order.iter() {
        centroid_bounds.grow(&centroids[i]);
    }
    let axis = centroid_bounds.largest_axis();
    order.sort_by(|&a, &b| {
        centroids[a][axis]
            .total_cmp(&centroids[b][axis])
            .then(a.cmp(&b))
    });
    let mid = order.len() / 2;
    // Placeholder, patched once children exist.
    nodes.push(Node::Leaf {
        bounds: node_bounds,
        first: 0,
        count: 0,
    });
    let (lo, hi) = order.split_at_mut(mid);
    let left = build_node(nodes, lo, offset, centroids, bounds);
    let right = build_node(nodes, hi, offset + mid, centroids, bounds);
    nodes[idx] = Node::Inner {
        bounds: node_bounds,
        left,
        right,
    };
    idx
}

/// Mirror reflection of `d` about the plane with unit normal `n`.
pub fn reflect(d: &Vec3, n: &Vec3) -> Vec3 {
    d - n * (2.0 * d.dot(n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ray(o: [f64; 3], d: [f64; 3]) -> PreparedRay {
        PreparedRay::new(Ray {
            origin: Vec3::new(o[0], o[1], o[2]),
            direction: Vec3::new(d[0], d[1], d[2]).normalize(),
        })
    }

    fn unit_square_z0() -> Vec<Triangle> {
        let a = Vec3::new(0.0, 0.0, 0.0);
        let b = Vec3::new(1.0, 0.0, 0.0);
        let c = Vec3::new(1.0, 1.0, 0.0);
        let d = Vec3::new(0.0, 1.0, 0.0);
        vec![Triangle::new(a, b, c), Triangle::new(a, c, d)]
    }

    #[test]
    fn shared_edge_is_watertight() {
        let tris = unit_square_z0();
        // Ray straight through the diagonal shared by both triangles.
        let r = ray([0.5, 0.5, 1.0], [0.0, 0.0, -1.0]);
        let hits = tris
            .iter()
            .filter(|t| t.intersect(&r, T_MIN, f64::INFINITY).is_some())
            .count();
        assert!(hits >= 1);
    }

    #[test]
    fn miss_outside_and_behind() {
        let tris = unit_square_z0();
        let r = ray([2.0, 2.0, 1.0], [0.0, 0.0, -1.0]);
        assert!(tris[0].intersect(&r, T_MIN, f64::INFINITY).is_none());
        let r = ray([0.5, 0.25, 1.0], [0.0, 0.0, 1.0]);
        assert!(tris[0].intersect(&r, T_MIN, f64::INFINITY).is_none());
    }

    #[test]
    fn bvh_matches_brute_force() {
        let mut tris = Vec::new();
        for i in 0..40 {
            let x = i as f64 * 0.3;
            let z = (i % 7) as f64 * 0.5;
            tris.push(Triangle::new(
                Vec3::new(x, -1.0, z),
                Vec3::new(x + 0.2, -1.0, z),
                Vec3::new(x + 0.1, 1.0, z + 0.1),
            ));
        }
        let bvh = Bvh::build(tris.clone());
        for k in 0..50 {
            let r = ray(
                [k as f64 * 0.25 - 0.5, 0.1, 10.0],
                [0.05, 0.01 * k as f64, -1.0],
            );
            let brute = tris
                .iter()
                .enumerate()
                .filter_map(|(i, t)| t.intersect(&r, T_MIN, f64::INFINITY).map(|t| (t, i)))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let hit = bvh.closest(&r, T_MIN, f64::INFINITY);
            assert_eq!(brute.map(|b| b.1), hit.map(|h| h.triangle));
            assert_eq!(brute.is_some(), bvh.occluded(&r, T_MIN, f64::INFINITY));
        }
    }

    #[test]
    fn reflection_preserves_length() {
        let d = Vec3::new(1.0, -1.0, 0.0).normalize();
        let n = Vec3::new(0.0, 1.0, 0.0);
        let r = reflect(&d, &n);
        assert!((r - Vec3::new(1.0, 1.0, 0.0).normalize()).norm() < 1e-15);
    }
}
