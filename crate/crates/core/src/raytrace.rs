//! Visibility machinery: scaled-icosahedron bounding proxies around surfels,
//! a median-split BVH over them, transmittance queries, and the per-surfel
//! visibility table used at shading time.

use crate::brdf;
use crate::math::{vec3, Grid, Vec3};
use crate::rasterize::{ray_plane_uv, Ray};
use crate::surfel::{eval_kernel, Surfel};
use rayon::prelude::*;

/// Icosahedron with unit insphere: the canonical shape guarantees any point
/// of the unit ball is inside the hull, which is what the coverage bound
/// needs after anisotropic scaling.
const ICO_PHI: f64 = 1.618_033_988_749_895;
// Inradius of the (0, +-1, +-phi) icosahedron is phi^2 / sqrt(3).
const ICO_INRADIUS: f64 = 1.511_522_628_152_341_5;

const ICO_VERTS: [[f64; 3]; 12] = [
    [-1.0, ICO_PHI, 0.0],
    [1.0, ICO_PHI, 0.0],
    [-1.0, -ICO_PHI, 0.0],
    [1.0, -ICO_PHI, 0.0],
    [0.0, -1.0, ICO_PHI],
    [0.0, 1.0, ICO_PHI],
    [0.0, -1.0, -ICO_PHI],
    [0.0, 1.0, -ICO_PHI],
    [ICO_PHI, 0.0, -1.0],
    [ICO_PHI, 0.0, 1.0],
    [-ICO_PHI, 0.0, -1.0],
    [-ICO_PHI, 0.0, 1.0],
];

pub const ICO_FACES: [[usize; 3]; 20] = [
    [0, 11, 5],
    [0, 5, 1],
    [0, 1, 7],
    [0, 7, 10],
    [0, 10, 11],
    [1, 5, 9],
    [5, 11, 4],
    [11, 10, 2],
    [10, 7, 6],
    [7, 1, 8],
    [3, 9, 4],
    [3, 4, 2],
    [3, 2, 6],
    [3, 6, 8],
    [3, 8, 9],
    [4, 9, 5],
    [2, 4, 11],
    [6, 2, 10],
    [8, 6, 7],
    [9, 8, 1],
];

/// Anisotropically stretched icosahedron bounding one surfel's significant
/// kernel support.
#[derive(Debug, Clone)]
pub struct ProxyHull {
    pub vertices: [Vec3; 12],
}

impl ProxyHull {
    pub fn aabb(&self) -> (Vec3, Vec3) {
        let mut lo = self.vertices[0];
        let mut hi = self.vertices[0];
        for v in &self.vertices[1..] {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        (lo, hi)
    }

    pub fn centroid(&self) -> Vec3 {
        let mut c = Vec3::ZERO;
        for v in &self.vertices {
            c += *v;
        }
        c / 12.0
    }

    /// Convex membership test against all 20 faces (outward normals).
    pub fn contains(&self, p: Vec3, tol: f64) -> bool {
        let centroid = self.centroid();
        for face in &ICO_FACES {
            let (a, b, c) = (self.vertices[face[0]], self.vertices[face[1]], self.vertices[face[2]]);
            let mut n = (b - a).cross(c - a);
            if n.dot(centroid - a) > 0.0 {
                n = -n;
            }
            if n.normalized().dot(p - a) > tol {
                return false;
            }
        }
        true
    }

    /// First positive ray-hull intersection parameter over the 20 faces.
    pub fn ray_hit(&self, ray: &Ray) -> Option<f64> {
        let mut best: Option<f64> = None;
        for face in &ICO_FACES {
            let (a, b, c) = (self.vertices[face[0]], self.vertices[face[1]], self.vertices[face[2]]);
            if let Some(t) = ray_triangle(ray, a, b, c) {
                best = Some(best.map_or(t, |m: f64| m.min(t)));
            }
        }
        best
    }
}

/// Moeller-Trumbore; returns the positive ray parameter of a hit.
fn ray_triangle(ray: &Ray, a: Vec3, b: Vec3, c: Vec3) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let pvec = ray.dir.cross(e2);
    let det = e1.dot(pvec);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv_det = 1.0 / det;
    let tvec = ray.origin - a;
    let u = tvec.dot(pvec) * inv_det;
    if !(-1e-9..=1.0 + 1e-9).contains(&u) {
        return None;
    }
    let qvec = tvec.cross(e1);
    let v = ray.dir.dot(qvec) * inv_det;
    if v < -1e-9 || u + v > 1.0 + 1e-9 {
        return None;
    }
    let t = e2.dot(qvec) * inv_det;
    (t > 1e-12).then_some(t)
}

/// Scaled-icosahedron proxy for a surfel, or `None` when the opacity never
/// reaches `alpha_min`. The scale follows k = sqrt(2 ln(opacity/alpha_min))
/// per axis, with the flat axis thickened to s_z = 0.01 min(s_u, s_v).
pub fn proxy_hull(surfel: &Surfel, alpha_min: f64) -> Option<ProxyHull> {
    assert!(alpha_min > 0.0 && alpha_min < 1.0, "alpha_min must be in (0,1)");
    if surfel.opacity <= alpha_min {
        return None;
    }
    let k = (2.0 * (surfel.opacity / alpha_min).ln()).sqrt();
    let s_z = 0.01 * surfel.scale_u.min(surfel.scale_v);
    let normal = surfel.normal();
    let mut vertices = [Vec3::ZERO; 12];
    for (i, v) in ICO_VERTS.iter().enumerate() {
        let local = vec3(v[0], v[1], v[2]) / ICO_INRADIUS;
        vertices[i] = surfel.position
            + surfel.tangent_u * (k * surfel.scale_u * local.x)
            + surfel.tangent_v * (k * surfel.scale_v * local.y)
            + normal * (k * s_z * local.z);
    }
    Some(ProxyHull { vertices })
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    lo: Vec3,
    hi: Vec3,
}

impl Aabb {
    fn union(self, o: Aabb) -> Aabb {
        Aabb {
            lo: vec3(self.lo.x.min(o.lo.x), self.lo.y.min(o.lo.y), self.lo.z.min(o.lo.z)),
            hi: vec3(self.hi.x.max(o.hi.x), self.hi.y.max(o.hi.y), self.hi.z.max(o.hi.z)),
        }
    }

    fn hit(&self, ray: &Ray) -> bool {
        let mut tmin = 0.0f64;
        let mut tmax = f64::INFINITY;
        for a in 0..3 {
            let inv = 1.0 / ray.dir[a];
            let mut t0 = (self.lo[a] - ray.origin[a]) * inv;
            let mut t1 = (self.hi[a] - ray.origin[a]) * inv;
            if inv < 0.0 {
                std::mem::swap(&mut t0, &mut t1);
            }
            tmin = tmin.max(t0);
            tmax = tmax.min(t1);
            if tmax < tmin {
                return false;
            }
        }
        true
    }

    fn contains_point(&self, p: Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] <= self.hi[a])
    }
}

#[derive(Debug, Clone)]
enum BvhNode {
    Internal { aabb: Aabb, left: usize, right: usize },
    Leaf { aabb: Aabb, item: usize },
}

/// Binary BVH over per-surfel proxy hulls. Median-split on the longest
/// centroid axis; deterministic for a fixed surfel order.
#[derive(Debug, Clone)]
pub struct SurfelBvh {
    nodes: Vec<BvhNode>,
    /// (surfel index, hull) per leaf item.
    items: Vec<(usize, ProxyHull)>,
    root: Option<usize>,
}

impl SurfelBvh {
    pub fn build(surfels: &[Surfel], alpha_min: f64) -> SurfelBvh {
        let items: Vec<(usize, ProxyHull)> = surfels
            .iter()
            .enumerate()
            .filter_map(|(i, s)| proxy_hull(s, alpha_min).map(|h| (i, h)))
            .collect();
        let mut bvh = SurfelBvh {
            nodes: Vec::new(),
            items,
            root: None,
        };
        if bvh.items.is_empty() {
            return bvh;
        }
        let mut order: Vec<usize> = (0..bvh.items.len()).collect();
        let boxes: Vec<Aabb> = bvh
            .items
            .iter()
            .map(|(_, h)| {
                let (lo, hi) = h.aabb();
                Aabb { lo, hi }
            })
            .collect();
        let root = bvh.build_node(&mut order, &boxes);
        bvh.root = Some(root);
        bvh
    }

    fn build_node(&mut self, order: &mut [usize], boxes: &[Aabb]) -> usize {
        if order.len() == 1 {
            let item = order[0];
            self.nodes.push(BvhNode::Leaf {
                aabb: boxes[item],
                item,
            });
            return self.nodes.len() - 1;
        }
        // Split at the median of centroids along the widest axis; ties fall
        // back to the item index so builds are reproducible.
        let mut lo = self.items[order[0]].1.centroid();
        let mut hi = lo;
        for &i in order.iter() {
            let c = self.items[i].1.centroid();
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        let extent = hi - lo;
        let axis = if extent.x >= extent.y && extent.x >= extent.z {
            0
        } else if extent.y >= extent.z {
            1
        } else {
            2
        };
        order.sort_by(|&a, &b| {
            let ca = self.items[a].1.centroid()[axis];
            let cb = self.items[b].1.centroid()[axis];
            ca.partial_cmp(&cb).unwrap().then(a.cmp(&b))
        });
        let mid = order.len() / 2;
        let (left_items, right_items) = order.split_at_mut(mid);
        let left = self.build_node(left_items, boxes);
        let right = self.build_node(right_items, boxes);
        let aabb = self.node_aabb(left).union(self.node_aabb(right));
        self.nodes.push(BvhNode::Internal { aabb, left, right });
        self.nodes.len() - 1
    }

    fn node_aabb(&self, node: usize) -> Aabb {
        match &self.nodes[node] {
            BvhNode::Internal { aabb, .. } => *aabb,
            BvhNode::Leaf { aabb, .. } => *aabb,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.root.is_none()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    /// Root bounding box, for inspection/tests.
    pub fn root_aabb(&self) -> Option<(Vec3, Vec3)> {
        self.root.map(|r| {
            let b = self.node_aabb(r);
            (b.lo, b.hi)
        })
    }

    /// Visit surfel indices whose proxy hull the ray pierces. The AABB
    /// hierarchy prunes; the exact 20-triangle hull test gates the callback.
    pub fn for_each_candidate(&self, ray: &Ray, mut f: impl FnMut(usize)) {
        self.traverse(ray, |idx, _| f(idx));
    }

    /// Like `for_each_candidate` but also reports leaves whose AABB passed
    /// while the hull test rejected (for the proxy-benefit benchmark).
    fn traverse(&self, ray: &Ray, mut f: impl FnMut(usize, bool)) {
        let Some(root) = self.root else {
            return;
        };
        let mut stack = vec![root];
        while let Some(node) = stack.pop() {
            match &self.nodes[node] {
                BvhNode::Internal { aabb, left, right } => {
                    if aabb.hit(ray) {
                        // Push right first so the left subtree is visited
                        // first: deterministic DFS order.
                        stack.push(*right);
                        stack.push(*left);
                    }
                }
                BvhNode::Leaf { aabb, item } => {
                    if aabb.hit(ray) {
                        let (surfel_idx, hull) = &self.items[*item];
                        let hull_pass = hull.ray_hit(ray).is_some();
                        if hull_pass {
                            f(*surfel_idx, true);
                        } else {
                            f(*surfel_idx, false);
                        }
                    }
                }
            }
        }
    }

    /// Surfel indices whose leaf AABB contains the point.
    pub fn point_candidates(&self, p: Vec3) -> Vec<usize> {
        let mut out = Vec::new();
        let Some(root) = self.root else {
            return out;
        };
        let mut stack = vec![root];
        while let Some(node) = stack.pop() {
            match &self.nodes[node] {
                BvhNode::Internal { aabb, left, right } => {
                    if aabb.contains_point(p) {
                        stack.push(*right);
                        stack.push(*left);
                    }
                }
                BvhNode::Leaf { aabb, item } => {
                    if aabb.contains_point(p) {
                        out.push(self.items[*item].0);
                    }
                }
            }
        }
        out
    }
}

/// Exact ray-surfel response: the plane intersection evaluated through the
/// standard kernel. Misses on parallel rays and non-positive t.
pub fn surfel_response(ray: &Ray, surfel: &Surfel) -> Option<(f64, f64)> {
    let hit = ray_plane_uv(ray, surfel)?;
    Some((hit.t, eval_kernel(hit.u, hit.v)))
}

/// Transmittance along `ray`: the product of (1 - opacity * response) over
/// intersected surfels, skipping responses below `alpha_min`, hits outside
/// (0, t_max), and the excluded surfel.
pub fn transmittance(
    ray: &Ray,
    bvh: &SurfelBvh,
    surfels: &[Surfel],
    t_max: f64,
    exclude: Option<usize>,
    alpha_min: f64,
) -> f64 {
    let mut total = 1.0;
    bvh.for_each_candidate(ray, |idx| {
        if exclude == Some(idx) {
            return;
        }
        if let Some((t, response)) = surfel_response(ray, &surfels[idx]) {
            if t > 0.0 && t < t_max {
                let alpha = surfels[idx].opacity * response;
                if alpha >= alpha_min {
                    total *= 1.0 - alpha;
                }
            }
        }
    });
    total
}

/// Brute-force transmittance over every surfel; the BVH result must match
/// this exactly (up to product reassociation).
pub fn transmittance_bruteforce(
    ray: &Ray,
    surfels: &[Surfel],
    t_max: f64,
    exclude: Option<usize>,
    alpha_min: f64,
) -> f64 {
    let mut total = 1.0;
    for (idx, surfel) in surfels.iter().enumerate() {
        if exclude == Some(idx) {
            continue;
        }
        if let Some((t, response)) = surfel_response(ray, surfel) {
            if t > 0.0 && t < t_max {
                let alpha = surfel.opacity * response;
                if alpha >= alpha_min {
                    total *= 1.0 - alpha;
                }
            }
        }
    }
    total
}

/// Per-surfel, per-incident-direction visibility toward the environment.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityTable {
    ns: usize,
    rows: Vec<Vec<f64>>,
}

impl VisibilityTable {
    /// Fully unoccluded table.
    pub fn all_visible(n_surfels: usize, ns: usize) -> VisibilityTable {
        VisibilityTable {
            ns,
            rows: vec![vec![1.0; ns]; n_surfels],
        }
    }

    pub fn ns(&self) -> usize {
        self.ns
    }

    pub fn n_surfels(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, surfel: usize) -> &[f64] {
        &self.rows[surfel]
    }

    /// Flatten into a grid (one row per surfel) for PFM export.
    pub fn to_grid(&self) -> Grid<f64> {
        let mut grid = Grid::new(self.ns, self.rows.len().max(1), 1.0);
        for (i, row) in self.rows.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                grid.set(k, i, *v);
            }
        }
        grid
    }
}

/// Ray-traced visibility for every surfel along its Fibonacci hemisphere,
/// excluding the surfel itself and offsetting the origin off the plane.
pub fn precompute_visibility(surfels: &[Surfel], ns: usize, alpha_min: f64) -> VisibilityTable {
    let bvh = SurfelBvh::build(surfels, alpha_min);
    let rows: Vec<Vec<f64>> = surfels
        .par_iter()
        .enumerate()
        .map(|(i, surfel)| {
            let normal = surfel.normal();
            let eps = 1e-3 * surfel.scale_u.min(surfel.scale_v);
            let origin = surfel.position + normal * eps;
            brdf::fibonacci_dirs(ns, normal)
                .into_iter()
                .map(|dir| {
                    let ray = Ray { origin, dir };
                    transmittance(&ray, &bvh, surfels, f64::INFINITY, Some(i), alpha_min)
                })
                .collect()
        })
        .collect();
    VisibilityTable { ns, rows }
}

/// Candidate counts for hull-gated versus AABB-only BVH leaf tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProxyBench {
    pub candidate_hits_proxy: u64,
    pub candidate_hits_aabb: u64,
    pub ratio: f64,
}

/// Count leaf candidates surviving the exact hull test against those passing
/// only the leaf AABB test, over a fixed ray set.
pub fn bench_proxy(surfels: &[Surfel], rays: &[Ray], alpha_min: f64) -> ProxyBench {
    let bvh = SurfelBvh::build(surfels, alpha_min);
    let mut proxy = 0u64;
    let mut aabb = 0u64;
    for ray in rays {
        bvh.traverse(ray, |_, hull_pass| {
            aabb += 1;
            if hull_pass {
                proxy += 1;
            }
        });
    }
    ProxyBench {
        candidate_hits_proxy: proxy,
        candidate_hits_aabb: aabb,
        ratio: if aabb == 0 { 1.0 } else { proxy as f64 / aabb as f64 },
    }
}
