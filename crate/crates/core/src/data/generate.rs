//! Synthetic dataset generators: partitioned cylinders, primitive-shape
//! registration pairs, and a multi-part toy with interchangeable duplicates.
//!
//! Every sample carries the assembled ground truth, the unposed condition
//! (non-anchor parts Haar-rotated and centered at their own CoM; the anchor
//! kept in the global frame), and the per-part transforms mapping condition
//! points back onto the assembled cloud.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::geometry::{
    center_of_mass, random_direction, random_rotation, MultiPartCloud, Part, RigidTransform,
};

/// How a cylinder is cut into two parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionScheme {
    /// Plane normal to the cylinder axis at a random height.
    Horizontal,
    /// Plane containing the central axis at a random orientation.
    Axial,
    /// Plane with random normal through a random interior point.
    RandomPlane,
}

impl PartitionScheme {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "horizontal" => Ok(Self::Horizontal),
            "axial" => Ok(Self::Axial),
            "random" | "random-plane" => Ok(Self::RandomPlane),
            other => Err(Error::ConfigError(format!("unknown partition scheme '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Horizontal => "horizontal",
            Self::Axial => "axial",
            Self::RandomPlane => "random",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    CylinderAssembly,
    PairwiseRegistration,
    MultiPartToy,
}

impl Task {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cylinder" => Ok(Self::CylinderAssembly),
            "registration" => Ok(Self::PairwiseRegistration),
            "multipart" | "toy" => Ok(Self::MultiPartToy),
            other => Err(Error::ConfigError(format!("unknown task '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub task: Task,
    pub count: usize,
    pub points_per_part: usize,
    pub seed: u64,
    pub scheme: PartitionScheme,
    pub part_count_range: (usize, usize),
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count < 1 {
            return Err(Error::ConfigError("count must be ≥ 1".into()));
        }
        if self.points_per_part < 8 {
            return Err(Error::ConfigError("points_per_part must be ≥ 8".into()));
        }
        let (lo, hi) = self.part_count_range;
        if lo < 2 || hi > 8 || lo > hi {
            return Err(Error::ConfigError(format!(
                "part_count_range must lie within [2, 8], got [{lo}, {hi}]"
            )));
        }
        Ok(())
    }
}

/// One generated scene: assembled ground truth, unposed condition, and the
/// per-part rigid transforms with `gt[i]·condition_i = assembled_i`.
#[derive(Debug, Clone)]
pub struct Sample {
    pub assembled: MultiPartCloud,
    pub condition: MultiPartCloud,
    pub gt: Vec<RigidTransform>,
}

/// Surface point with its outward unit normal.
#[derive(Debug, Clone, Copy)]
pub struct SurfacePoint {
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
}

pub fn generate(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    (0..spec.count)
        .map(|i| {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(spec.seed, i as u64));
            match spec.task {
                Task::CylinderAssembly => generate_cylinder_sample(spec, &mut rng),
                Task::PairwiseRegistration => generate_registration_sample(spec, &mut rng),
                Task::MultiPartToy => generate_multipart_sample(spec, &mut rng),
            }
        })
        .collect()
}

/// SplitMix64 step; decorrelates per-sample streams from one dataset seed.
pub fn derive_seed(seed: u64, idx: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E3779B97F4A7C15u64.wrapping_mul(idx.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// primitive surface sampling (area-weighted)
// ---------------------------------------------------------------------------

pub fn sample_cylinder_surface<R: Rng>(
    radius: f64,
    height: f64,
    n: usize,
    rng: &mut R,
) -> Vec<SurfacePoint> {
    let lateral = TAU * radius * height;
    let cap = PI * radius * radius;
    let total = lateral + 2.0 * cap;
    (0..n)
        .map(|_| {
            let u = rng.gen::<f64>() * total;
            let theta = rng.gen::<f64>() * TAU;
            let (s, c) = theta.sin_cos();
            if u < lateral {
                let z = (rng.gen::<f64>() - 0.5) * height;
                SurfacePoint {
                    point: Vector3::new(radius * c, radius * s, z),
                    normal: Vector3::new(c, s, 0.0),
                }
            } else {
                let top = u - lateral < cap;
                let rho = radius * rng.gen::<f64>().sqrt();
                let z = if top { height / 2.0 } else { -height / 2.0 };
                SurfacePoint {
                    point: Vector3::new(rho * c, rho * s, z),
                    normal: Vector3::new(0.0, 0.0, if top { 1.0 } else { -1.0 }),
                }
            }
        })
        .collect()
}

pub fn sample_box_surface<R: Rng>(half: Vector3<f64>, n: usize, rng: &mut R) -> Vec<SurfacePoint> {
    let areas = [
        half.y * half.z, // ±x faces (relative weights; the common factor cancels)
        half.x * half.z,
        half.x * half.y,
    ];
    let total: f64 = areas.iter().sum::<f64>() * 2.0;
    (0..n)
        .map(|_| {
            let mut u = rng.gen::<f64>() * total;
            let mut axis = 0;
            for (i, a) in areas.iter().enumerate() {
                if u < 2.0 * a {
                    axis = i;
                    break;
                }
                u -= 2.0 * a;
            }
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let mut p = Vector3::new(
                (rng.gen::<f64>() * 2.0 - 1.0) * half.x,
                (rng.gen::<f64>() * 2.0 - 1.0) * half.y,
                (rng.gen::<f64>() * 2.0 - 1.0) * half.z,
            );
            let mut normal = Vector3::zeros();
            p[axis] = sign * half[axis];
            normal[axis] = sign;
            SurfacePoint { point: p, normal }
        })
        .collect()
}

pub fn sample_ellipsoid_surface<R: Rng>(
    semi: Vector3<f64>,
    n: usize,
    rng: &mut R,
) -> Vec<SurfacePoint> {
    // Map the unit sphere through diag(a,b,c); the area element is
    // abc·|(u_x/a, u_y/b, u_z/c)| dΩ, handled by rejection.
    let w_max = (1.0 / semi.x).max(1.0 / semi.y).max(1.0 / semi.z);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u = random_direction(rng);
        let g = Vector3::new(u.x / semi.x, u.y / semi.y, u.z / semi.z);
        if rng.gen::<f64>() * w_max > g.norm() {
            continue;
        }
        out.push(SurfacePoint {
            point: Vector3::new(semi.x * u.x, semi.y * u.y, semi.z * u.z),
            normal: g.normalize(),
        });
    }
    out
}

pub fn sample_torus_surface<R: Rng>(
    major: f64,
    minor: f64,
    n: usize,
    rng: &mut R,
) -> Vec<SurfacePoint> {
    // dA = r(R + r cos φ) dθ dφ; rejection on the tube angle φ.
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let phi = rng.gen::<f64>() * TAU;
        if rng.gen::<f64>() * (major + minor) > major + minor * phi.cos() {
            continue;
        }
        let theta = rng.gen::<f64>() * TAU;
        let (st, ct) = theta.sin_cos();
        let (sp, cp) = phi.sin_cos();
        let ring = major + minor * cp;
        out.push(SurfacePoint {
            point: Vector3::new(ring * ct, ring * st, minor * sp),
            normal: Vector3::new(cp * ct, cp * st, sp),
        });
    }
    out
}

// ---------------------------------------------------------------------------
// sample assembly
// ---------------------------------------------------------------------------

fn aabb_volume(points: &[Vector3<f64>]) -> f64 {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (hi - lo).iter().product()
}

/// Builds the assembled cloud from per-part surface points, flags the part
/// with the largest bounding-box volume as anchor.
fn assemble_parts(groups: Vec<Vec<SurfacePoint>>) -> Result<MultiPartCloud> {
    let anchor = groups
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| {
            let va = aabb_volume(&a.iter().map(|s| s.point).collect::<Vec<_>>());
            let vb = aabb_volume(&b.iter().map(|s| s.point).collect::<Vec<_>>());
            va.total_cmp(&vb)
        })
        .map(|(i, _)| i)
        .unwrap_or(0);
    let parts = groups
        .into_iter()
        .enumerate()
        .map(|(i, g)| Part {
            points: g.iter().map(|s| s.point).collect(),
            normals: Some(g.iter().map(|s| s.normal).collect()),
            part_index: i,
            anchor: i == anchor,
        })
        .collect();
    MultiPartCloud::new(parts, true)
}

/// Unposes a cloud: every non-anchor part is centered at its CoM and rotated
/// by an independent Haar rotation; the anchor stays in the global frame.
pub fn make_condition<R: Rng>(
    assembled: &MultiPartCloud,
    rng: &mut R,
) -> (MultiPartCloud, Vec<RigidTransform>) {
    let mut parts = Vec::with_capacity(assembled.num_parts());
    let mut gt = Vec::with_capacity(assembled.num_parts());
    for part in &assembled.parts {
        if part.anchor {
            parts.push(part.clone());
            gt.push(RigidTransform::identity());
            continue;
        }
        let com = center_of_mass(&part.points);
        let rot: Matrix3<f64> = random_rotation(rng);
        let points = part.points.iter().map(|p| rot * (p - com)).collect();
        let normals = part
            .normals
            .as_ref()
            .map(|ns| ns.iter().map(|n| rot * n).collect());
        parts.push(Part {
            points,
            normals,
            part_index: part.part_index,
            anchor: false,
        });
        gt.push(RigidTransform {
            rotation: rot.transpose(),
            translation: com,
        });
    }
    (
        MultiPartCloud {
            parts,
            assembled: false,
        },
        gt,
    )
}

fn finish_sample<R: Rng>(assembled: MultiPartCloud, rng: &mut R) -> Sample {
    let (condition, gt) = make_condition(&assembled, rng);
    Sample {
        assembled,
        condition,
        gt,
    }
}

/// Splits surface points by the signed distance to a plane; errors if either
/// side ends up with fewer than 8 points.
fn split_by_plane(
    points: &[SurfacePoint],
    normal: &Vector3<f64>,
    offset: f64,
) -> Result<(Vec<SurfacePoint>, Vec<SurfacePoint>)> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for sp in points {
        if normal.dot(&sp.point) - offset > 0.0 {
            pos.push(*sp);
        } else {
            neg.push(*sp);
        }
    }
    if pos.len() < 8 || neg.len() < 8 {
        return Err(Error::DegeneratePartition(format!(
            "cut left parts with {} / {} points",
            pos.len(),
            neg.len()
        )));
    }
    Ok((pos, neg))
}

const MAX_CUT_ATTEMPTS: usize = 100;

fn generate_cylinder_sample<R: Rng>(spec: &DatasetSpec, rng: &mut R) -> Result<Sample> {
    let height = 0.2 + 0.8 * rng.gen::<f64>();
    let diameter = 0.2 + 0.8 * rng.gen::<f64>();
    let radius = diameter / 2.0;
    let surface = sample_cylinder_surface(radius, height, 2 * spec.points_per_part, rng);

    let mut last_err = None;
    for _ in 0..MAX_CUT_ATTEMPTS {
        let (normal, offset) = match spec.scheme {
            PartitionScheme::Horizontal => {
                (Vector3::z(), (rng.gen::<f64>() - 0.5) * height)
            }
            PartitionScheme::Axial => {
                let phi = rng.gen::<f64>() * TAU;
                (Vector3::new(phi.cos(), phi.sin(), 0.0), 0.0)
            }
            PartitionScheme::RandomPlane => {
                let n = random_direction(rng);
                // plane through a point drawn from the inner half of the volume
                let rho = radius * rng.gen::<f64>().sqrt() * 0.5;
                let th = rng.gen::<f64>() * TAU;
                let z = (rng.gen::<f64>() - 0.5) * height * 0.5;
                let p0 = Vector3::new(rho * th.cos(), rho * th.sin(), z);
                (n, n.dot(&p0))
            }
        };
        match split_by_plane(&surface, &normal, offset) {
            Ok((pos, neg)) => {
                let assembled = assemble_parts(vec![pos, neg])?;
                return Ok(finish_sample(assembled, rng));
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::DegeneratePartition("cut resampling exhausted".into())))
}

fn generate_registration_sample<R: Rng>(spec: &DatasetSpec, rng: &mut R) -> Result<Sample> {
    let surface = match rng.gen_range(0..4) {
        0 => {
            let half = Vector3::new(
                0.1 + 0.4 * rng.gen::<f64>(),
                0.1 + 0.4 * rng.gen::<f64>(),
                0.1 + 0.4 * rng.gen::<f64>(),
            );
            sample_box_surface(half, 2 * spec.points_per_part, rng)
        }
        1 => {
            let h = 0.2 + 0.8 * rng.gen::<f64>();
            let r = 0.1 + 0.4 * rng.gen::<f64>();
            sample_cylinder_surface(r, h, 2 * spec.points_per_part, rng)
        }
        2 => {
            let semi = Vector3::new(
                0.1 + 0.4 * rng.gen::<f64>(),
                0.1 + 0.4 * rng.gen::<f64>(),
                0.1 + 0.4 * rng.gen::<f64>(),
            );
            sample_ellipsoid_surface(semi, 2 * spec.points_per_part, rng)
        }
        _ => {
            let major = 0.15 + 0.25 * rng.gen::<f64>();
            let minor = major * (0.2 + 0.5 * rng.gen::<f64>());
            sample_torus_surface(major, minor, 2 * spec.points_per_part, rng)
        }
    };

    let centroid = center_of_mass(&surface.iter().map(|s| s.point).collect::<Vec<_>>());
    let mut last_err = None;
    for _ in 0..MAX_CUT_ATTEMPTS {
        let n = random_direction(rng);
        match split_by_plane(&surface, &n, n.dot(&centroid)) {
            Ok((pos, neg)) => {
                let assembled = assemble_parts(vec![pos, neg])?;
                return Ok(finish_sample(assembled, rng));
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::DegeneratePartition("cut resampling exhausted".into())))
}

fn generate_multipart_sample<R: Rng>(spec: &DatasetSpec, rng: &mut R) -> Result<Sample> {
    let (lo, hi) = spec.part_count_range;
    let n_parts = rng.gen_range(lo..=hi);
    let n_legs = n_parts - 1;

    // slab resting on identical legs; legs are translated copies of one
    // sampled point cloud, so duplicate-part paths get exercised
    let leg_h = 0.2 + 0.2 * rng.gen::<f64>();
    let leg_r = 0.02 + 0.03 * rng.gen::<f64>();
    let half = Vector3::new(
        0.2 + 0.2 * rng.gen::<f64>(),
        0.2 + 0.2 * rng.gen::<f64>(),
        0.02 + 0.03 * rng.gen::<f64>(),
    );

    let slab: Vec<SurfacePoint> = sample_box_surface(half, spec.points_per_part, rng)
        .into_iter()
        .map(|mut sp| {
            sp.point.z += leg_h + half.z;
            sp
        })
        .collect();

    let leg_template: Vec<SurfacePoint> =
        sample_cylinder_surface(leg_r, leg_h, spec.points_per_part, rng)
            .into_iter()
            .map(|mut sp| {
                sp.point.z += leg_h / 2.0; // feet on z = 0, top touching the slab
                sp
            })
            .collect();

    let margin = leg_r * 1.5;
    let positions: Vec<(f64, f64)> = (0..n_legs)
        .map(|k| {
            let ang = TAU * k as f64 / n_legs.max(1) as f64 + PI / 4.0;
            (
                (half.x - margin) * ang.cos().signum() * ang.cos().abs().max(0.3),
                (half.y - margin) * ang.sin().signum() * ang.sin().abs().max(0.3),
            )
        })
        .collect();

    let mut groups = vec![slab];
    for &(x, y) in &positions {
        groups.push(
            leg_template
                .iter()
                .map(|sp| SurfacePoint {
                    point: sp.point + Vector3::new(x, y, 0.0),
                    normal: sp.normal,
                })
                .collect(),
        );
    }
    let assembled = assemble_parts(groups)?;
    Ok(finish_sample(assembled, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{chamfer_distance, kabsch_solve, overlap_labels_brute};

    fn spec(task: Task, scheme: PartitionScheme) -> DatasetSpec {
        DatasetSpec {
            task,
            count: 4,
            points_per_part: 128,
            seed: 99,
            scheme,
            part_count_range: (2, 8),
        }
    }

    fn check_roundtrip(sample: &Sample) {
        for (i, part) in sample.condition.parts.iter().enumerate() {
            let restored = sample.gt[i].apply_points(&part.points);
            for (a, b) in restored.iter().zip(&sample.assembled.parts[i].points) {
                assert!((a - b).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn cylinder_horizontal_cut_normal_is_axis() {
        let samples = generate(&spec(Task::CylinderAssembly, PartitionScheme::Horizontal)).unwrap();
        for s in &samples {
            check_roundtrip(s);
            // one part entirely above the other along z
            let z_ranges: Vec<(f64, f64)> = s
                .assembled
                .parts
                .iter()
                .map(|p| {
                    let zs: Vec<f64> = p.points.iter().map(|q| q.z).collect();
                    (
                        zs.iter().cloned().fold(f64::INFINITY, f64::min),
                        zs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                    )
                })
                .collect();
            let disjoint = z_ranges[0].0 >= z_ranges[1].1 || z_ranges[1].0 >= z_ranges[0].1;
            assert!(disjoint, "horizontal cut must separate parts along z");
        }
    }

    #[test]
    fn cylinder_axial_cut_contains_axis() {
        let samples = generate(&spec(Task::CylinderAssembly, PartitionScheme::Axial)).unwrap();
        for s in &samples {
            check_roundtrip(s);
            // both parts span the full height range
            for p in &s.assembled.parts {
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for q in &p.points {
                    lo = lo.min(q.z);
                    hi = hi.max(q.z);
                }
                assert!(hi - lo > 0.1, "axial part should span the axis direction");
            }
        }
    }

    #[test]
    fn cylinder_dimensions_uniform() {
        // min/max inside [0.2, 1.0] and a coarse KS check against uniform
        let n = 2000;
        let mut heights = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(7, i as u64));
            heights.push(0.2 + 0.8 * rng.gen::<f64>());
        }
        heights.sort_by(f64::total_cmp);
        assert!(*heights.first().unwrap() >= 0.2);
        assert!(*heights.last().unwrap() <= 1.0);
        let mut ks: f64 = 0.0;
        for (i, h) in heights.iter().enumerate() {
            let emp = (i + 1) as f64 / n as f64;
            let theo = (h - 0.2) / 0.8;
            ks = ks.max((emp - theo).abs());
        }
        // critical value at α=0.01: 1.63 / sqrt(n)
        assert!(ks < 1.63 / (n as f64).sqrt(), "KS statistic {ks}");
    }

    #[test]
    fn cylinder_cap_lateral_area_weighting() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let (r, h) = (0.3, 0.8);
        let n = 10_000;
        let pts = sample_cylinder_surface(r, h, n, &mut rng);
        let on_caps = pts.iter().filter(|p| p.normal.z.abs() > 0.5).count();
        let cap_frac = 2.0 * PI * r * r / (TAU * r * h + 2.0 * PI * r * r);
        let mean = n as f64 * cap_frac;
        let sigma = (n as f64 * cap_frac * (1.0 - cap_frac)).sqrt();
        assert!(
            (on_caps as f64 - mean).abs() < 3.0 * sigma,
            "cap count {on_caps}, expected {mean} ± {sigma}"
        );
    }

    #[test]
    fn registration_pair_partitions_points() {
        let sp = spec(Task::PairwiseRegistration, PartitionScheme::RandomPlane);
        let samples = generate(&sp).unwrap();
        for s in &samples {
            assert_eq!(s.assembled.num_parts(), 2);
            assert_eq!(s.assembled.total_points(), 2 * sp.points_per_part);
            check_roundtrip(s);
            // union of assembled parts is the original surface sampling
            let union: Vec<_> = s
                .assembled
                .parts
                .iter()
                .flat_map(|p| p.points.iter().cloned())
                .collect();
            assert_eq!(chamfer_distance(&union, &union).unwrap(), 0.0);
        }
    }

    #[test]
    fn multipart_toy_duplicate_legs_congruent() {
        let mut sp = spec(Task::MultiPartToy, PartitionScheme::RandomPlane);
        sp.part_count_range = (3, 3); // slab + 2 legs
        let samples = generate(&sp).unwrap();
        for s in &samples {
            check_roundtrip(s);
            assert_eq!(s.assembled.num_parts(), 3);
            let a = &s.assembled.parts[1].points;
            let b = &s.assembled.parts[2].points;
            let t = kabsch_solve(a, b).unwrap();
            let moved = t.apply_points(a);
            let resid: f64 = moved
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y).norm())
                .fold(0.0, f64::max);
            assert!(resid < 1e-9, "duplicate legs residual {resid}");
        }
    }

    #[test]
    fn multipart_toy_part_counts_in_range() {
        let mut sp = spec(Task::MultiPartToy, PartitionScheme::RandomPlane);
        sp.count = 10;
        sp.part_count_range = (2, 8);
        for s in generate(&sp).unwrap() {
            let n = s.assembled.num_parts();
            assert!((2..=8).contains(&n));
        }
    }

    #[test]
    fn multipart_toy_contacts_have_overlap_labels() {
        let mut sp = spec(Task::MultiPartToy, PartitionScheme::RandomPlane);
        sp.count = 2;
        sp.points_per_part = 256;
        sp.part_count_range = (4, 4);
        for s in generate(&sp).unwrap() {
            let labels = overlap_labels_brute(&s.assembled, 0.05).unwrap();
            assert!(
                labels.iter().flatten().any(|&l| l),
                "abutting parts should produce overlap labels"
            );
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let sp = spec(Task::CylinderAssembly, PartitionScheme::RandomPlane);
        let a = generate(&sp).unwrap();
        let b = generate(&sp).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.assembled, y.assembled);
            assert_eq!(x.condition, y.condition);
        }
    }
}
