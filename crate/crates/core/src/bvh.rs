//! Axis-aligned bounding-box hierarchy over scene spheres with all-hits ray
//! traversal.
//!
//! Construction is a deterministic recursive median split on the widest box
//! axis. Traversal exploits that rays travel along +z: a node is skipped when
//! no sphere inside it could produce an entry time in `[0, t_max]`, which
//! shrinks the lateral acceptance window as `t_max` drops. Pruning is
//! conservative, so the hit set always equals a linear scan over the scene.

use crate::scene::{Ray, Sphere, SphereScene};
use crate::error::{Error, Result};

/// A recorded intersection. `t_hit` is the entry time into the sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub sphere: u32,
    pub t_hit: f64,
    pub s: u32,
    pub e: u32,
}

/// Traversal counters; `sphere_tests` and `hits` are the hardware-independent
/// cost proxy reported by the search pipeline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TraversalStats {
    pub nodes_visited: u64,
    pub sphere_tests: u64,
    pub hits: u64,
}

impl TraversalStats {
    pub fn merge(&mut self, other: &TraversalStats) {
        self.nodes_visited += other.nodes_visited;
        self.sphere_tests += other.sphere_tests;
        self.hits += other.hits;
    }
}

#[derive(Debug, Clone)]
enum NodeKind {
    Internal { left: u32, right: u32 },
    Leaf { start: u32, len: u32 },
}

#[derive(Debug, Clone)]
struct Node {
    min: [f64; 3],
    max: [f64; 3],
    /// Lowest sphere-center z in the subtree; bounds the earliest reachable
    /// entry time tighter than the box alone.
    min_cz: f64,
    r_max: f64,
    kind: NodeKind,
}

/// Static hierarchy over the spheres of one scene.
#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<Node>,
    /// Permutation of scene sphere indices; leaves reference ranges of it.
    sphere_order: Vec<u32>,
    leaf_size: usize,
}

/// Entry time of an axis-aligned +z ray into a sphere. A hit requires the
/// lateral distance to be strictly less than the radius and the entry time to
/// land in `[0, t_max]` inclusive.
#[inline]
pub fn ray_sphere_entry_t(ray: &Ray, sphere: &Sphere) -> Option<f64> {
    let dx = sphere.cx - ray.ox;
    let dy = sphere.cy - ray.oy;
    let d2 = dx * dx + dy * dy;
    let r2 = sphere.radius * sphere.radius;
    if d2 < r2 {
        let t = (sphere.cz - ray.oz) - (r2 - d2).sqrt();
        if t >= 0.0 && t <= ray.t_max {
            return Some(t);
        }
    }
    None
}

/// Every hit in the scene by brute force; the reference the tree must match.
pub fn linear_scan_hits(scene: &SphereScene, ray: &Ray) -> Vec<Hit> {
    scene
        .spheres
        .iter()
        .enumerate()
        .filter_map(|(i, sp)| {
            ray_sphere_entry_t(ray, sp).map(|t| Hit {
                sphere: i as u32,
                t_hit: t,
                s: sp.s,
                e: sp.e,
            })
        })
        .collect()
}

/// Builds the hierarchy; leaves hold at most `leaf_size` spheres.
pub fn build_bvh(scene: &SphereScene, leaf_size: usize) -> Result<Bvh> {
    if scene.spheres.is_empty() {
        return Err(Error::InvalidInput("cannot build a tree over an empty scene".into()));
    }
    if leaf_size == 0 {
        return Err(Error::InvalidInput("leaf_size must be at least 1".into()));
    }
    let mut order: Vec<u32> = (0..scene.spheres.len() as u32).collect();
    let mut nodes = Vec::with_capacity(2 * scene.spheres.len() / leaf_size + 1);
    build_node(scene, &mut order, 0, scene.spheres.len(), leaf_size, &mut nodes);
    Ok(Bvh {
        nodes,
        sphere_order: order,
        leaf_size,
    })
}

fn bounds_of(scene: &SphereScene, ids: &[u32]) -> ([f64; 3], [f64; 3], f64, f64) {
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    let mut min_cz = f64::INFINITY;
    let mut r_max = 0.0f64;
    for &i in ids {
        let sp = &scene.spheres[i as usize];
        let c = [sp.cx, sp.cy, sp.cz];
        for a in 0..3 {
            min[a] = min[a].min(c[a] - sp.radius);
            max[a] = max[a].max(c[a] + sp.radius);
        }
        min_cz = min_cz.min(sp.cz);
        r_max = r_max.max(sp.radius);
    }
    (min, max, min_cz, r_max)
}

fn build_node(
    scene: &SphereScene,
    order: &mut [u32],
    start: usize,
    len: usize,
    leaf_size: usize,
    nodes: &mut Vec<Node>,
) -> u32 {
    let slice = &order[start..start + len];
    let (min, max, min_cz, r_max) = bounds_of(scene, slice);
    let id = nodes.len() as u32;
    nodes.push(Node {
        min,
        max,
        min_cz,
        r_max,
        kind: NodeKind::Leaf { start: start as u32, len: len as u32 },
    });
    if len <= leaf_size {
        return id;
    }

    let mut axis = 0;
    let mut widest = max[0] - min[0];
    for a in 1..3 {
        let w = max[a] - min[a];
        if w > widest {
            widest = w;
            axis = a;
        }
    }
    // Median split on sphere centers; ties break on sphere index so the tree
    // is a pure function of the scene.
    order[start..start + len].sort_unstable_by(|&a, &b| {
        let ca = center_coord(&scene.spheres[a as usize], axis);
        let cb = center_coord(&scene.spheres[b as usize], axis);
        ca.total_cmp(&cb).then(a.cmp(&b))
    });
    let half = len / 2;
    let left = build_node(scene, order, start, half, leaf_size, nodes);
    let right = build_node(scene, order, start + half, len - half, leaf_size, nodes);
    nodes[id as usize].kind = NodeKind::Internal { left, right };
    id
}

#[inline]
fn center_coord(sp: &Sphere, axis: usize) -> f64 {
    match axis {
        0 => sp.cx,
        1 => sp.cy,
        _ => sp.cz,
    }
}

impl Bvh {
    pub fn leaf_size(&self) -> usize {
        self.leaf_size
    }

    /// All spheres intersected by the ray within its travel budget. Hit order
    /// is a traversal artifact; callers must not rely on it.
    pub fn traverse_all_hits(
        &self,
        scene: &SphereScene,
        ray: &Ray,
        stats: &mut TraversalStats,
    ) -> Vec<Hit> {
        debug_assert_eq!(self.sphere_order.len(), scene.spheres.len());
        let mut hits = Vec::new();
        let mut stack = vec![0u32];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id as usize];
            stats.nodes_visited += 1;
            if !self.node_reachable(node, ray) {
                continue;
            }
            match node.kind {
                NodeKind::Internal { left, right } => {
                    stack.push(right);
                    stack.push(left);
                }
                NodeKind::Leaf { start, len } => {
                    for &si in &self.sphere_order[start as usize..(start + len) as usize] {
                        stats.sphere_tests += 1;
                        let sp = &scene.spheres[si as usize];
                        if let Some(t) = ray_sphere_entry_t(ray, sp) {
                            stats.hits += 1;
                            hits.push(Hit {
                                sphere: si,
                                t_hit: t,
                                s: sp.s,
                                e: sp.e,
                            });
                        }
                    }
                }
            }
        }
        hits
    }

    /// Conservative reachability of a node for an axis-aligned +z ray: never
    /// rejects a node containing a true hit.
    #[inline]
    fn node_reachable(&self, node: &Node, ray: &Ray) -> bool {
        // Entirely behind the origin: every exit time is negative.
        if node.max[2] - ray.oz < 0.0 {
            return false;
        }
        // A hit at time t <= t_max on a sphere with center depth cz needs
        // lateral distance d with d^2 < r^2 - max(0, cz - oz - t_max)^2.
        // Bounding with the subtree's min center depth and max radius shrinks
        // the box laterally by r_max - sqrt(r_max^2 - gap^2).
        let gap = (node.min_cz - ray.oz - ray.t_max).max(0.0);
        let reach2 = node.r_max * node.r_max - gap * gap;
        if reach2 <= 0.0 {
            return false;
        }
        let shrink = node.r_max - reach2.sqrt();
        ray.ox >= node.min[0] + shrink
            && ray.ox <= node.max[0] - shrink
            && ray.oy >= node.min[1] + shrink
            && ray.oy <= node.max[1] - shrink
    }

    /// Edge-count depth of the deepest leaf.
    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], id: u32) -> usize {
            match nodes[id as usize].kind {
                NodeKind::Leaf { .. } => 0,
                NodeKind::Internal { left, right } => {
                    1 + walk(nodes, left).max(walk(nodes, right))
                }
            }
        }
        walk(&self.nodes, 0)
    }

    /// Structural audit: every sphere's box inside its leaf box, every child
    /// box inside its parent, every sphere in exactly one leaf.
    pub fn check_containment(&self, scene: &SphereScene) -> bool {
        let mut seen = vec![false; scene.spheres.len()];
        let eps = 1e-12;
        for node in &self.nodes {
            match node.kind {
                NodeKind::Internal { left, right } => {
                    for child in [left, right] {
                        let ch = &self.nodes[child as usize];
                        for a in 0..3 {
                            if ch.min[a] < node.min[a] - eps || ch.max[a] > node.max[a] + eps {
                                return false;
                            }
                        }
                    }
                }
                NodeKind::Leaf { start, len } => {
                    for &si in &self.sphere_order[start as usize..(start + len) as usize] {
                        if seen[si as usize] {
                            return false;
                        }
                        seen[si as usize] = true;
                        let sp = &scene.spheres[si as usize];
                        let c = [sp.cx, sp.cy, sp.cz];
                        for ((&ca, &mn), &mx) in c.iter().zip(&node.min).zip(&node.max) {
                            if ca - sp.radius < mn - eps || ca + sp.radius > mx + eps {
                                return false;
                            }
                        }
                    }
                }
            }
        }
        seen.iter().all(|&s| s)
    }
}
