//! Procedural liver phantoms.
//!
//! A phantom is painted on a padded "scan" grid: a wobbly ellipsoid liver,
//! portal and hepatic vein trees as polyline tubes inside it, and spherical
//! tumours fully inside it. Intensities follow the hepatobiliary-phase
//! pattern (bright liver, dark vessels and lesions). The ROI is then
//! cropped around the liver centroid and range-normalized to `[0, 1]`.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::grid::{clamp_center, Grid3, LabelMap, Volume, HEPATIC_VEIN, LIVER, PORTAL_VEIN, TUMOR};
use crate::error::{Error, Result};
use crate::rng::{derive, Rng64};
use rand_distr::{Distribution, Normal};

/// Mean rendered intensity per class before blur, noise and normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityMeans {
    pub background: f64,
    pub liver: f64,
    pub portal_vein: f64,
    pub hepatic_vein: f64,
    pub tumor: f64,
}

impl IntensityMeans {
    pub fn as_array(&self) -> [f64; 5] {
        [self.background, self.liver, self.portal_vein, self.hepatic_vein, self.tumor]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// ROI shape `(H, W, D)` of the emitted volumes.
    pub grid_shape: [usize; 3],
    /// Extra voxels per side of the simulated scan before the ROI crop.
    pub scan_margin: [usize; 3],
    /// Liver semi-axes as fractions of the ROI extent along each axis.
    pub liver_axes_range: (f64, f64),
    /// Relative amplitude of the low-frequency boundary perturbation.
    pub liver_wobble: f64,
    /// Number of vessel branches per vessel class.
    pub n_vessels_range: (usize, usize),
    pub vessel_radius_range: (f64, f64),
    pub n_tumors_range: (usize, usize),
    pub tumor_radius_range: (f64, f64),
    pub intensity_means: IntensityMeans,
    pub noise_sigma: f64,
    pub blur_sigma: f64,
    /// Chebyshev dilation radius of the liver mask that must contain every
    /// vessel and tumour voxel.
    pub containment_radius: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self::desk()
    }
}

impl PhantomSpec {
    /// 32×32×16 ROI used for CPU-scale experiments.
    pub fn desk() -> Self {
        Self {
            grid_shape: [32, 32, 16],
            scan_margin: [4, 4, 2],
            liver_axes_range: (0.28, 0.40),
            liver_wobble: 0.08,
            n_vessels_range: (1, 2),
            vessel_radius_range: (0.8, 1.3),
            n_tumors_range: (0, 2),
            tumor_radius_range: (1.5, 2.8),
            intensity_means: IntensityMeans {
                background: 0.12,
                liver: 0.78,
                portal_vein: 0.30,
                hepatic_vein: 0.36,
                tumor: 0.48,
            },
            noise_sigma: 0.03,
            blur_sigma: 0.6,
            containment_radius: 4,
        }
    }

    /// 160×160×64 ROI, matching the clinical crop size.
    pub fn full_scale() -> Self {
        Self {
            grid_shape: [160, 160, 64],
            scan_margin: [16, 16, 8],
            vessel_radius_range: (1.5, 3.5),
            tumor_radius_range: (4.0, 12.0),
            blur_sigma: 1.0,
            containment_radius: 14,
            ..Self::desk()
        }
    }

    pub fn scan_shape(&self) -> [usize; 3] {
        let mut s = self.grid_shape;
        for a in 0..3 {
            s[a] += 2 * self.scan_margin[a];
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.grid_shape.contains(&0) {
            return bad(format!("grid_shape {:?} must be positive", self.grid_shape));
        }
        let ranges_f = [
            ("liver_axes_range", self.liver_axes_range),
            ("vessel_radius_range", self.vessel_radius_range),
            ("tumor_radius_range", self.tumor_radius_range),
        ];
        for (name, (lo, hi)) in ranges_f {
            if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
                return bad(format!("{name} ({lo}, {hi}) must satisfy 0 < min <= max"));
            }
        }
        for (name, (lo, hi)) in [("n_vessels_range", self.n_vessels_range), ("n_tumors_range", self.n_tumors_range)] {
            if lo > hi {
                return bad(format!("{name} ({lo}, {hi}) has min > max"));
            }
        }
        let means = self.intensity_means.as_array();
        if means.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return bad("intensity means must lie in [0, 1]".into());
        }
        if self.intensity_means.liver <= self.intensity_means.background {
            return bad("liver mean must exceed background mean".into());
        }
        if !(self.noise_sigma >= 0.0 && self.blur_sigma >= 0.0 && self.liver_wobble >= 0.0 && self.liver_wobble < 0.5) {
            return bad("noise_sigma, blur_sigma must be >= 0 and liver_wobble in [0, 0.5)".into());
        }
        // Structure sizes must fit inside the ROI.
        if self.liver_axes_range.1 * (1.0 + self.liver_wobble) > 0.5 {
            return bad(format!(
                "liver semi-axis fraction {} (with wobble) exceeds half the grid",
                self.liver_axes_range.1
            ));
        }
        let min_dim = *self.grid_shape.iter().min().unwrap() as f64;
        for (name, r) in [("vessel", self.vessel_radius_range.1), ("tumor", self.tumor_radius_range.1)] {
            if 2.0 * r >= min_dim {
                return bad(format!("{name} radius {r} exceeds grid dimension {min_dim}"));
            }
        }
        let min_liver_extent = self.liver_axes_range.0 * min_dim;
        if self.n_tumors_range.1 > 0 && self.tumor_radius_range.1 + 1.0 >= min_liver_extent {
            return bad(format!(
                "tumor radius {} cannot fit inside the smallest liver semi-axis {min_liver_extent:.2}",
                self.tumor_radius_range.1
            ));
        }
        Ok(())
    }
}

/// Liver envelope: rotated ellipsoid with a smooth angular radius modulation.
struct LiverShape {
    center: [f64; 3],
    axes: [f64; 3],
    cos: f64,
    sin: f64,
    wobble: f64,
    phases: [f64; 3],
}

impl LiverShape {
    /// Normalized radius minus the boundary level; `<= 0` means inside.
    fn level(&self, p: [f64; 3]) -> f64 {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let u = [self.cos * d[0] + self.sin * d[1], -self.sin * d[0] + self.cos * d[1], d[2]];
        let q = [u[0] / self.axes[0], u[1] / self.axes[1], u[2] / self.axes[2]];
        let rho = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
        let theta = q[1].atan2(q[0]);
        let phi = if rho > 0.0 { (q[2] / rho).clamp(-1.0, 1.0).acos() } else { 0.0 };
        let bump = (2.0 * theta + self.phases[0]).cos() * 0.5
            + (3.0 * theta + self.phases[1]).sin() * 0.3
            + (2.0 * phi + self.phases[2]).cos() * 0.2;
        rho - (1.0 + self.wobble * bump)
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        self.level(p) <= 0.0
    }
}

fn sample_range_f(rng: &mut Rng64, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn sample_range_n(rng: &mut Rng64, (lo, hi): (usize, usize)) -> usize {
    rng.random_range(lo..=hi)
}

fn dist2_to_segment(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2 = ab.iter().map(|x| x * x).sum::<f64>();
    let t = if len2 > 0.0 {
        (ap.iter().zip(&ab).map(|(x, y)| x * y).sum::<f64>() / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (0..3).map(|i| (ap[i] - t * ab[i]).powi(2)).sum()
}

/// Uniform point inside the liver whose level is below `max_level`.
fn point_inside(rng: &mut Rng64, liver: &LiverShape, max_level: f64, bias_axis0: Option<f64>) -> Option<[f64; 3]> {
    for _ in 0..200 {
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = liver.center[a] + rng.random_range(-1.0..1.0) * liver.axes[a] * 1.2;
        }
        if let Some(side) = bias_axis0 {
            if (p[0] - liver.center[0]) * side < 0.0 {
                continue;
            }
        }
        if liver.level(p) <= max_level {
            return Some(p);
        }
    }
    None
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with edge clamping.
fn blur(grid: &Grid3<f64>, sigma: f64) -> Grid3<f64> {
    if sigma <= 0.0 {
        return grid.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let shape = grid.shape();
    let mut cur = grid.clone();
    for axis in 0..3 {
        let mut next = cur.clone();
        for i in 0..shape[0] {
            for j in 0..shape[1] {
                for l in 0..shape[2] {
                    let pos = [i, j, l];
                    let mut acc = 0.0;
                    for (t, w) in k.iter().enumerate() {
                        let mut q = pos;
                        let off = pos[axis] as isize + t as isize - r;
                        q[axis] = off.clamp(0, shape[axis] as isize - 1) as usize;
                        acc += w * cur.get(q[0], q[1], q[2]);
                    }
                    next.set(i, j, l, acc);
                }
            }
        }
        cur = next;
    }
    cur
}

/// Min-max range scaling to `[0, 1]`.
pub fn normalize_volume(raw: &Grid3<f32>) -> Result<Volume> {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in raw.data() {
        if !v.is_finite() {
            return Err(Error::Input("volume contains non-finite values".into()));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if raw.is_empty() || hi <= lo {
        return Err(Error::Input("constant volume has zero dynamic range".into()));
    }
    let (lo, range) = (lo as f64, hi as f64 - lo as f64);
    let data = raw.data().iter().map(|&v| ((v as f64 - lo) / range) as f32).collect();
    Volume::new(Grid3::new(raw.shape(), data)?)
}

/// Renders labels to raw intensities: class means, blur, additive noise.
fn render(labels: &Grid3<u8>, spec: &PhantomSpec, rng: &mut Rng64) -> Grid3<f32> {
    let means = spec.intensity_means.as_array();
    let base = Grid3::new(labels.shape(), labels.data().iter().map(|&c| means[c as usize]).collect()).unwrap();
    let smooth = blur(&base, spec.blur_sigma);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let data = smooth
        .data()
        .iter()
        .map(|&v| {
            let n = if spec.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            (v + n) as f32
        })
        .collect();
    Grid3::new(labels.shape(), data).unwrap()
}

/// Generates one (volume, label map) phantom; a pure function of `(seed, spec)`.
pub fn generate_phantom(seed: u64, spec: &PhantomSpec) -> Result<(Volume, LabelMap)> {
    spec.validate()?;
    let mut rng = derive(seed, "phantom");
    let scan = spec.scan_shape();
    let g = spec.grid_shape;

    let mut axes = [0.0; 3];
    let mut center = [0.0; 3];
    for a in 0..3 {
        axes[a] = sample_range_f(&mut rng, spec.liver_axes_range) * g[a] as f64;
        let jitter = spec.scan_margin[a] as f64;
        center[a] = (scan[a] as f64 - 1.0) / 2.0 + if jitter > 0.0 { rng.random_range(-jitter..jitter) } else { 0.0 };
    }
    let angle = rng.random_range(0.0..PI);
    let liver = LiverShape {
        center,
        axes,
        cos: angle.cos(),
        sin: angle.sin(),
        wobble: spec.liver_wobble,
        phases: [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)],
    };

    let mut labels = Grid3::filled(scan, 0u8);
    let voxel = |i: usize, j: usize, k: usize| [i as f64, j as f64, k as f64];
    for i in 0..scan[0] {
        for j in 0..scan[1] {
            for k in 0..scan[2] {
                if liver.contains(voxel(i, j, k)) {
                    labels.set(i, j, k, LIVER);
                }
            }
        }
    }

    // Portal branches enter from the lower half along axis 0, hepatic ones from the upper half.
    let mean_axis = axes.iter().sum::<f64>() / 3.0;
    for (class, side) in [(PORTAL_VEIN, 1.0), (HEPATIC_VEIN, -1.0)] {
        let n = sample_range_n(&mut rng, spec.n_vessels_range);
        for _ in 0..n {
            let radius = sample_range_f(&mut rng, spec.vessel_radius_range);
            let Some(start) = point_inside(&mut rng, &liver, -0.25, Some(side)) else { continue };
            let mut points = vec![start];
            for _ in 0..3 {
                let last = *points.last().unwrap();
                let mut placed = false;
                for _ in 0..20 {
                    let z: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5)];
                    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
                    let len = rng.random_range(0.3..0.7) * mean_axis;
                    let next = [last[0] + z[0] / norm * len, last[1] + z[1] / norm * len, last[2] + z[2] / norm * len];
                    if liver.level(next) <= -0.15 {
                        points.push(next);
                        placed = true;
                        break;
                    }
                }
                if !placed {
                    break;
                }
            }
            let r2 = radius * radius;
            for seg in points.windows(2) {
                let (a, b) = (seg[0], seg[1]);
                let lo: Vec<usize> = (0..3).map(|x| (a[x].min(b[x]) - radius).floor().max(0.0) as usize).collect();
                let hi: Vec<usize> = (0..3)
                    .map(|x| ((a[x].max(b[x]) + radius).ceil() as usize).min(scan[x] - 1))
                    .collect();
                for i in lo[0]..=hi[0] {
                    for j in lo[1]..=hi[1] {
                        for k in lo[2]..=hi[2] {
                            let p = voxel(i, j, k);
                            if labels.get(i, j, k) != 0 && dist2_to_segment(p, a, b) <= r2 {
                                labels.set(i, j, k, class);
                            }
                        }
                    }
                }
            }
        }
    }

    let n_tumors = sample_range_n(&mut rng, spec.n_tumors_range);
    for _ in 0..n_tumors {
        let radius = sample_range_f(&mut rng, spec.tumor_radius_range);
        for _ in 0..50 {
            let Some(c) = point_inside(&mut rng, &liver, -0.2, None) else { break };
            let reach = radius + 1.0;
            let lo: Vec<isize> = (0..3).map(|x| (c[x] - reach).floor() as isize).collect();
            let hi: Vec<isize> = (0..3).map(|x| (c[x] + reach).ceil() as isize).collect();
            let in_bounds = (0..3).all(|x| lo[x] >= 0 && hi[x] < scan[x] as isize);
            if !in_bounds {
                continue;
            }
            let mut inside = true;
            'check: for i in lo[0]..=hi[0] {
                for j in lo[1]..=hi[1] {
                    for k in lo[2]..=hi[2] {
                        let p = [i as f64, j as f64, k as f64];
                        let d2: f64 = (0..3).map(|x| (p[x] - c[x]).powi(2)).sum();
                        if d2 <= reach * reach && !liver.contains(p) {
                            inside = false;
                            break 'check;
                        }
                    }
                }
            }
            if !inside {
                continue;
            }
            for i in lo[0]..=hi[0] {
                for j in lo[1]..=hi[1] {
                    for k in lo[2]..=hi[2] {
                        let p = [i as f64, j as f64, k as f64];
                        let d2: f64 = (0..3).map(|x| (p[x] - c[x]).powi(2)).sum();
                        if d2 <= radius * radius {
                            labels.set(i as usize, j as usize, k as usize, TUMOR);
                        }
                    }
                }
            }
            break;
        }
    }

    let raw = render(&labels, spec, &mut rng);
    let labels = LabelMap::new(labels)?;
    let centre = clamp_center(scan, g, labels.foreground_centroid())?;
    let roi_labels = labels.crop_roi(g, centre)?;
    let roi_raw = raw.crop(g, centre)?;
    if roi_labels.count(LIVER) == 0 {
        return Err(Error::Input(format!("phantom seed {seed} produced no liver voxels in the ROI")));
    }
    Ok((normalize_volume(&roi_raw)?, roi_labels))
}

/// True if every vessel/tumour voxel lies within the Chebyshev `radius`
/// dilation of the liver (class 1) mask.
pub fn check_containment(labels: &LabelMap, radius: usize) -> bool {
    let g = labels.grid();
    let [h, w, d] = g.shape();
    let mut liver = Grid3::filled([h, w, d], false);
    for (dst, &v) in liver.data_mut().iter_mut().zip(g.data()) {
        *dst = v == LIVER;
    }
    // Separable box dilation: one pass per axis.
    for axis in 0..3 {
        let src = liver.clone();
        let shape = [h, w, d];
        for i in 0..h {
            for j in 0..w {
                for k in 0..d {
                    let pos = [i, j, k];
                    let lo = pos[axis].saturating_sub(radius);
                    let hi = (pos[axis] + radius).min(shape[axis] - 1);
                    let hit = (lo..=hi).any(|t| {
                        let mut q = pos;
                        q[axis] = t;
                        src.get(q[0], q[1], q[2])
                    });
                    liver.set(i, j, k, hit);
                }
            }
        }
    }
    g.data()
        .iter()
        .zip(liver.data())
        .all(|(&c, &inside)| c <= LIVER || inside)
}
