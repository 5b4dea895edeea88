//! Geometric encoding of codebook entries as spheres, plus the closed-form
//! conversions between ray travel time, lateral distance, pruning threshold,
//! and inner product.
//!
//! Entries of subspace `s` become spheres at their 2-d coordinates, placed at
//! depth `z_s`. A query casts one axis-aligned +z ray per (probe cluster,
//! subspace) from `z_s - L_s`, where `L_s` is the per-subspace standoff, so a
//! hit at travel time `t` sits at lateral distance `sqrt(R^2 - (L - t)^2)`
//! from the ray. Capping `t_max` realizes a dynamic pruning radius without
//! touching the geometry.

use crate::dataset::Metric;
use crate::error::{Error, Result};
use crate::trainer::Codebook;

/// One sphere: an entry of subspace `s` at depth `z`.
#[derive(Debug, Clone, Copy)]
pub struct Sphere {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub radius: f64,
    pub s: u32,
    pub e: u32,
}

/// Per-subspace scene constants: base radius `R_s`, ray standoff `L_s`, and
/// center depth `z_s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubspaceGeom {
    pub base_radius: f64,
    pub standoff: f64,
    pub depth: f64,
}

/// All entry spheres with their per-subspace constants.
#[derive(Debug, Clone)]
pub struct SphereScene {
    pub spheres: Vec<Sphere>,
    pub per_sub: Vec<SubspaceGeom>,
    pub metric: Metric,
}

/// An axis-aligned +z ray tagged with its (query, subspace, probe cluster).
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub ox: f64,
    pub oy: f64,
    pub oz: f64,
    pub t_max: f64,
    pub query: u32,
    pub s: u32,
    pub c: u32,
}

impl SphereScene {
    pub fn n_sub(&self) -> usize {
        self.per_sub.len()
    }

    /// Origin depth for rays of subspace `s`.
    #[inline]
    pub fn ray_origin_z(&self, s: usize) -> f64 {
        self.per_sub[s].depth - self.per_sub[s].standoff
    }

    /// Rebuilds the sphere list from a codebook and stored constants. In IP
    /// mode per-entry radii are re-derived from the base radius.
    pub fn from_parts(codebook: &Codebook, metric: Metric, per_sub: Vec<SubspaceGeom>) -> Self {
        let mut spheres = Vec::with_capacity(codebook.n_sub * codebook.e);
        for (s, geom) in per_sub.iter().copied().enumerate() {
            for e in 0..codebook.e {
                let coords = codebook.entry(s, e);
                let radius = match metric {
                    Metric::L2 => geom.base_radius,
                    Metric::InnerProduct => {
                        let norm2 = coords[0] * coords[0] + coords[1] * coords[1];
                        (geom.base_radius * geom.base_radius + norm2).sqrt()
                    }
                };
                spheres.push(Sphere {
                    cx: coords[0],
                    cy: coords[1],
                    cz: geom.depth,
                    radius,
                    s: s as u32,
                    e: e as u32,
                });
            }
        }
        SphereScene { spheres, per_sub, metric }
    }
}

/// Places one sphere per codebook entry. In L2 mode every sphere of subspace
/// `s` gets radius `R_s = 1.25 * thresholds_max[s]` and the standoff equals
/// `R_s`; the margin keeps dynamic thresholds from clipping against the
/// sphere boundary. In IP mode `thresholds_max[s]` is taken as the base
/// radius directly and per-entry radii follow `sqrt(R_s^2 + |e|^2)`, with the
/// standoff set to the largest radius so ray origins stay outside every
/// sphere. Depths are strided so that no ray can reach a foreign subspace.
pub fn build_scene(
    codebook: &Codebook,
    metric: Metric,
    thresholds_max: &[f64],
) -> Result<SphereScene> {
    if thresholds_max.len() != codebook.n_sub {
        return Err(Error::InvalidInput(format!(
            "expected {} per-subspace thresholds, got {}",
            codebook.n_sub,
            thresholds_max.len()
        )));
    }
    if thresholds_max.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(Error::InvalidInput(
            "per-subspace thresholds must be finite and positive".into(),
        ));
    }

    let mut per_sub = Vec::with_capacity(codebook.n_sub);
    let mut max_radii = Vec::with_capacity(codebook.n_sub);
    for (s, &thres) in thresholds_max.iter().enumerate() {
        let (base_radius, max_radius, standoff) = match metric {
            Metric::L2 => {
                let r = 1.25 * thres;
                (r, r, r)
            }
            Metric::InnerProduct => {
                let r = thres;
                let max_r = (0..codebook.e)
                    .map(|e| {
                        let c = codebook.entry(s, e);
                        (r * r + c[0] * c[0] + c[1] * c[1]).sqrt()
                    })
                    .fold(r, f64::max);
                (r, max_r, max_r)
            }
        };
        per_sub.push(SubspaceGeom {
            base_radius,
            standoff,
            depth: 0.0,
        });
        max_radii.push(max_radius);
    }

    // z_{s+1} - z_s > max_radius(s) + L_{s+1}; use twice the bound.
    let mut depth = per_sub[0].standoff;
    per_sub[0].depth = depth;
    for s in 1..codebook.n_sub {
        depth += 2.0 * (max_radii[s - 1] + per_sub[s].standoff);
        per_sub[s].depth = depth;
    }

    Ok(SphereScene::from_parts(codebook, metric, per_sub))
}

/// Lateral distance between ray origin and sphere center recovered from the
/// hit time: `sqrt(R^2 - (L - t_hit)^2)`. Defined for `L - R <= t_hit <= L`.
pub fn t_hit_to_l2(t_hit: f64, r: f64, l: f64) -> Result<f64> {
    let gap = l - t_hit;
    if gap > r || gap < 0.0 {
        return Err(Error::Domain(format!(
            "t_hit {} outside [{}, {}]",
            t_hit,
            l - r,
            l
        )));
    }
    Ok((r * r - gap * gap).max(0.0).sqrt())
}

/// Converts a pruning threshold into a maximum travel time. The effective
/// radius is `min(threshold * scale, R)`; the result is `L - sqrt(R^2 -
/// r_eff^2)`, clamped into [0, L]. A hit at time `t <= t_max` therefore lies
/// within `r_eff` of the ray.
pub fn threshold_to_tmax(threshold: f64, scale: f64, r: f64, l: f64) -> f64 {
    let r_eff = (threshold * scale).min(r).max(0.0);
    let t = l - (r * r - r_eff * r_eff).max(0.0).sqrt();
    t.clamp(0.0, l)
}

/// Inner product between the ray-origin projection and the hit entry,
/// recovered from the hit time under the inflated-radius placement:
/// `(|q|^2 - R^2 + (L - t_hit)^2) / 2` with `R` the base radius.
pub fn t_hit_to_ip(t_hit: f64, q_norm2: f64, r: f64, l: f64) -> f64 {
    let gap = l - t_hit;
    (q_norm2 - r * r + gap * gap) / 2.0
}

/// Travel-time cap such that every hit with `t_hit <= t_max` has inner
/// product at least `ip_floor`.
pub fn ip_floor_to_tmax(ip_floor: f64, q_norm2: f64, r: f64, l: f64) -> f64 {
    let inner = (r * r - q_norm2 + 2.0 * ip_floor).max(0.0);
    (l - inner.sqrt()).clamp(0.0, l)
}

/// One ray per (probe cluster, subspace). Ray origins are the query
/// projection minus the probed centroid projection; `t_max` comes from the
/// per-subspace threshold in L2 mode and defaults to the standoff (accept
/// all) in IP mode.
pub fn make_rays(
    query: &[f64],
    probes: &[(u32, &[f64])],
    thresholds: &[f64],
    scale: f64,
    scene: &SphereScene,
) -> Result<Vec<Ray>> {
    let n_sub = scene.n_sub();
    if query.len() != n_sub * 2 {
        return Err(Error::DimensionMismatch {
            expected: n_sub * 2,
            got: query.len(),
        });
    }
    if thresholds.len() != n_sub {
        return Err(Error::InvalidInput("one threshold per subspace required".into()));
    }
    if probes.is_empty() {
        return Err(Error::InvalidInput("at least one probe required".into()));
    }
    let mut rays = Vec::with_capacity(probes.len() * n_sub);
    for &(c, centroid) in probes {
        if centroid.len() != query.len() {
            return Err(Error::DimensionMismatch {
                expected: query.len(),
                got: centroid.len(),
            });
        }
        for s in 0..n_sub {
            let geom = scene.per_sub[s];
            let t_max = match scene.metric {
                Metric::L2 => {
                    threshold_to_tmax(thresholds[s], scale, geom.base_radius, geom.standoff)
                }
                Metric::InnerProduct => geom.standoff,
            };
            rays.push(Ray {
                ox: query[s * 2] - centroid[s * 2],
                oy: query[s * 2 + 1] - centroid[s * 2 + 1],
                oz: scene.ray_origin_z(s),
                t_max,
                query: 0,
                s: s as u32,
                c,
            });
        }
    }
    Ok(rays)
}
