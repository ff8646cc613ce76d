//! Fréchet distances between feature distributions and Dice overlap.
//!
//! Features come from frozen, randomly initialized convolutional networks:
//! a 3D variant for whole volumes and a 2D variant for slices. View
//! convention for slicing an `(H, W, D)` volume: axial slices run along D,
//! sagittal along H, coronal along W.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{LabelMap, Volume};
use crate::error::{Error, Result};
use crate::nn::{Array, Conv, ConvGeom, ParamSet, Tape};
use crate::rng::derive;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    Volume3d,
    Slice2d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub kind: ExtractorKind,
    pub dim: usize,
    pub seed: u64,
}

impl ExtractorConfig {
    pub fn desk(kind: ExtractorKind) -> Self {
        Self { kind, dim: 64, seed: 2024 }
    }
}

/// Frozen random feature network. Three stride-2 convolutions with ReLU,
/// a pointwise projection to `dim` channels, then global average pooling.
pub struct FeatureExtractor {
    pub config: ExtractorConfig,
    params: ParamSet<f32>,
    convs: Vec<Conv>,
    head: Conv,
}

/// Smallest spatial extent the extractor accepts along each convolved axis.
pub const MIN_EXTENT: usize = 4;

impl FeatureExtractor {
    pub fn new(config: ExtractorConfig) -> Result<Self> {
        if config.dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        let mut rng = derive(config.seed, "feature-extractor");
        let mut ps = ParamSet::new();
        let geom = match config.kind {
            ExtractorKind::Volume3d => ConvGeom::cube(3, 2),
            ExtractorKind::Slice2d => ConvGeom::planar(3, 2),
        };
        let widths = [1, 16, 32, 64];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv::new(&mut ps, &mut rng, &format!("conv{i}"), w[0], w[1], geom))
            .collect();
        let head = Conv::new(&mut ps, &mut rng, "head", 64, config.dim, ConvGeom::pointwise());
        Ok(Self {
            config,
            params: ps,
            convs,
            head,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Features for a batch `[n, 1, a, b, c]` (`c = 1` for slices).
    pub fn features(&self, batch: &Array<f32>) -> Result<Vec<Vec<f64>>> {
        let s = batch.shape();
        let ok = s.len() == 5
            && s[1] == 1
            && match self.config.kind {
                ExtractorKind::Volume3d => s[2..].iter().all(|&d| d >= MIN_EXTENT),
                ExtractorKind::Slice2d => s[2] >= MIN_EXTENT && s[3] >= MIN_EXTENT && s[4] == 1,
            };
        if !ok {
            return Err(Error::Shape(format!("{:?} extractor cannot take input {s:?}", self.config.kind)));
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let mut h = tape.constant(batch.clone());
        for c in &self.convs {
            h = c.forward(&p, h).relu();
        }
        let out = self.head.forward(&p, h).relu().value();
        let (n, d) = (s[0], self.config.dim);
        let vox = out.len() / (n * d);
        Ok((0..n)
            .map(|i| {
                (0..d)
                    .map(|j| {
                        let base = (i * d + j) * vox;
                        out.data()[base..base + vox].iter().map(|&x| x as f64).sum::<f64>() / vox as f64
                    })
                    .collect()
            })
            .collect())
    }
}

const CHUNK: usize = 16;

/// Row `i` holds the features of `volumes[i]`.
pub fn extract_features(volumes: &[Volume], ext: &FeatureExtractor) -> Result<Vec<Vec<f64>>> {
    if ext.config.kind != ExtractorKind::Volume3d {
        return Err(Error::Config("volume features need a 3D extractor".into()));
    }
    let mut rows = Vec::with_capacity(volumes.len());
    for chunk in volumes.chunks(CHUNK) {
        let shape = chunk[0].shape();
        if chunk.iter().any(|v| v.shape() != shape) {
            return Err(Error::Shape("volumes in one set must share a grid".into()));
        }
        let arrays: Vec<Array<f32>> = chunk
            .iter()
            .map(|v| Array::from_vec(&[1, shape[0], shape[1], shape[2]], v.data().to_vec()))
            .collect();
        let refs: Vec<&Array<f32>> = arrays.iter().collect();
        rows.extend(ext.features(&Array::stack(&refs))?);
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Axial,
    Sagittal,
    Coronal,
}

impl View {
    pub const ALL: [View; 3] = [View::Axial, View::Sagittal, View::Coronal];

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "axial" => Some(View::Axial),
            "sagittal" => Some(View::Sagittal),
            "coronal" => Some(View::Coronal),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            View::Axial => "axial",
            View::Sagittal => "sagittal",
            View::Coronal => "coronal",
        }
    }

    /// Number of slices of an `(H, W, D)` grid.
    pub fn slice_count(self, shape: [usize; 3]) -> usize {
        match self {
            View::Axial => shape[2],
            View::Sagittal => shape[0],
            View::Coronal => shape[1],
        }
    }

    /// In-plane size `(rows, cols)` of each slice.
    pub fn slice_shape(self, shape: [usize; 3]) -> (usize, usize) {
        let [h, w, d] = shape;
        match self {
            View::Axial => (h, w),
            View::Sagittal => (w, d),
            View::Coronal => (h, d),
        }
    }
}

/// Slice `k` along `view`, row-major `(rows, cols)`.
pub fn slice<T: Copy>(data: &[T], shape: [usize; 3], view: View, k: usize) -> Vec<T> {
    let [_, w, d] = shape;
    let (r, c) = view.slice_shape(shape);
    let mut out = Vec::with_capacity(r * c);
    for a in 0..r {
        for b in 0..c {
            let idx = match view {
                View::Axial => (a * w + b) * d + k,
                View::Sagittal => (k * w + a) * d + b,
                View::Coronal => (a * w + k) * d + b,
            };
            out.push(data[idx]);
        }
    }
    out
}

/// Features of every slice of every volume, pooled into one set.
pub fn extract_slice_features(volumes: &[Volume], view: View, ext: &FeatureExtractor) -> Result<Vec<Vec<f64>>> {
    if ext.config.kind != ExtractorKind::Slice2d {
        return Err(Error::Config("slice features need a 2D extractor".into()));
    }
    let mut slices = Vec::new();
    for v in volumes {
        let shape = v.shape();
        let (r, c) = view.slice_shape(shape);
        for k in 0..view.slice_count(shape) {
            slices.push(Array::from_vec(&[1, r, c, 1], slice(v.data(), shape, view, k)));
        }
    }
    let mut rows = Vec::with_capacity(slices.len());
    for chunk in slices.chunks(CHUNK * 4) {
        if chunk.iter().any(|s| s.shape() != chunk[0].shape()) {
            return Err(Error::Shape("volumes in one set must share a grid".into()));
        }
        let refs: Vec<&Array<f32>> = chunk.iter().collect();
        rows.extend(ext.features(&Array::stack(&refs))?);
    }
    Ok(rows)
}

/// Gaussian moments of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl FeatureStats {
    /// Sample mean and unbiased covariance of the rows.
    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::Input(format!("need at least 2 feature rows, got {n}")));
        }
        let d = rows[0].len();
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("feature rows must share a positive dimension".into()));
        }
        let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
        let mut centered = x;
        for j in 0..d {
            let m = mean[j];
            centered.column_mut(j).add_scalar_mut(-m);
        }
        let mut cov = centered.transpose() * &centered / (n - 1) as f64;
        cov = (&cov + cov.transpose()) * 0.5;
        Ok(Self { mean, cov, n })
    }

    pub fn from_moments(mean: Vec<f64>, cov: DMatrix<f64>, n: usize) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::Shape("covariance must be d×d".into()));
        }
        Ok(Self {
            mean: DVector::from_vec(mean),
            cov,
            n,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Adds `eps·I` to the covariance.
    pub fn regularized(mut self, eps: f64) -> Self {
        for i in 0..self.dim() {
            self.cov[(i, i)] += eps;
        }
        self
    }
}

/// Tolerance below which negative eigenvalues are clamped silently.
const EIG_TOL: f64 = 1e-8;

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let min = eig.eigenvalues.min();
    if min < -EIG_TOL * scale {
        log::warn!("covariance has negative eigenvalue {min:.3e}; clamped to 0");
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2 (Σ_a Σ_b)^{1/2})`.
///
/// The trace of the product root is evaluated as the sum of root
/// eigenvalues of the symmetric matrix `Σ_a^{1/2} Σ_b Σ_a^{1/2}`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("feature dims {} vs {}", a.dim(), b.dim())));
    }
    let finite = |s: &FeatureStats| s.mean.iter().chain(s.cov.iter()).all(|v| v.is_finite());
    if !finite(a) || !finite(b) {
        return Err(Error::Input("non-finite feature statistics".into()));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let ra = psd_sqrt(&a.cov);
    let m = &ra * &b.cov * &ra;
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    let min = eig.eigenvalues.min();
    if min < -EIG_TOL * scale {
        log::warn!("product covariance has negative eigenvalue {min:.3e}; clamped to 0");
    }
    let tr_root: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    Ok((diff + a.cov.trace() + b.cov.trace() - 2.0 * tr_root).max(0.0))
}

pub const COV_EPS: f64 = 1e-6;

fn fid_from_rows(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Input("FID needs two nonempty sets".into()));
    }
    let mut sa = FeatureStats::from_features(a)?;
    let mut sb = FeatureStats::from_features(b)?;
    let d = sa.dim();
    if sa.n < d || sb.n < d {
        sa = sa.regularized(COV_EPS);
        sb = sb.regularized(COV_EPS);
    }
    frechet_distance(&sa, &sb)
}

pub fn fid_3d(a: &[Volume], b: &[Volume], ext: &FeatureExtractor) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Input("FID needs two nonempty sets".into()));
    }
    fid_from_rows(&extract_features(a, ext)?, &extract_features(b, ext)?)
}

pub fn fid_per_view(a: &[Volume], b: &[Volume], view: View, ext: &FeatureExtractor) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Input("FID needs two nonempty sets".into()));
    }
    fid_from_rows(&extract_slice_features(a, view, ext)?, &extract_slice_features(b, view, ext)?)
}

/// `2|A∩B| / (|A|+|B|)`, 1 when both masks are empty.
pub fn dice_masks(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("mask sizes {} vs {}", a.len(), b.len())));
    }
    let (mut inter, mut sa, mut sb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        sa += x as usize;
        sb += y as usize;
        inter += (x && y) as usize;
    }
    if sa + sb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (sa + sb) as f64)
}

/// Dice of one class between two label maps.
pub fn dice(pred: &LabelMap, gt: &LabelMap, class: u8) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!("label grids {:?} vs {:?}", pred.shape(), gt.shape())));
    }
    let a: Vec<bool> = pred.data().iter().map(|&c| c == class).collect();
    let b: Vec<bool> = gt.data().iter().map(|&c| c == class).collect();
    dice_masks(&a, &b)
}

/// Overall and per-view Fréchet distances between two volume sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    pub n_a: usize,
    pub n_b: usize,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fid_3d: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_view: Option<PerViewFid>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerViewFid {
    pub axial: f64,
    pub sagittal: f64,
    pub coronal: f64,
    pub average: f64,
}

impl FidReport {
    pub fn compute(
        a: &[Volume],
        b: &[Volume],
        overall: Option<&FeatureExtractor>,
        slices: Option<&FeatureExtractor>,
    ) -> Result<Self> {
        let fid_3d = overall.map(|e| fid_3d(a, b, e)).transpose()?;
        let per_view = match slices {
            Some(e) => {
                let axial = fid_per_view(a, b, View::Axial, e)?;
                let sagittal = fid_per_view(a, b, View::Sagittal, e)?;
                let coronal = fid_per_view(a, b, View::Coronal, e)?;
                Some(PerViewFid {
                    axial,
                    sagittal,
                    coronal,
                    average: (axial + sagittal + coronal) / 3.0,
                })
            }
            None => None,
        };
        let dim = overall.or(slices).map_or(0, |e| e.dim());
        Ok(Self {
            n_a: a.len(),
            n_b: b.len(),
            dim,
            fid_3d,
            per_view,
        })
    }

    /// Plain-text table with one row for `method`.
    pub fn table(&self, method: &str) -> String {
        let mut out = String::new();
        let w = method.len().max(6);
        if let Some(v) = &self.per_view {
            out += &format!(
                "{:<w$} | {:>10} | {:>11} | {:>11} | {:>11}\n",
                "Method", "Ax. FID ↓", "Sag. FID ↓", "Cor. FID ↓", "Avg. FID ↓"
            );
            out += &format!("{}\n", "-".repeat(w + 56));
            out += &format!(
                "{:<w$} | {:>10.4} | {:>11.4} | {:>11.4} | {:>11.4}\n",
                method, v.axial, v.sagittal, v.coronal, v.average
            );
        }
        if let Some(f) = self.fid_3d {
            out += &format!("3D FID ({} vs {} volumes, d={}): {f:.6}\n", self.n_a, self.n_b, self.dim);
        }
        out
    }
}

/// Mean per-class Dice over paired label maps, one entry per class in `classes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub classes: Vec<u8>,
    pub per_class: Vec<f64>,
    pub mean: f64,
    pub n: usize,
}

impl DiceReport {
    pub fn compute(pred: &[LabelMap], gt: &[LabelMap], classes: &[u8]) -> Result<Self> {
        if pred.len() != gt.len() || pred.is_empty() {
            return Err(Error::Input(format!("{} predictions for {} references", pred.len(), gt.len())));
        }
        if classes.is_empty() {
            return Err(Error::Input("no classes to score".into()));
        }
        let mut per_class = Vec::with_capacity(classes.len());
        for &c in classes {
            let mut s = 0.0;
            for (p, g) in pred.iter().zip(gt) {
                s += dice(p, g, c)?;
            }
            per_class.push(s / pred.len() as f64);
        }
        let mean = per_class.iter().sum::<f64>() / per_class.len() as f64;
        Ok(Self {
            classes: classes.to_vec(),
            per_class,
            mean,
            n: pred.len(),
        })
    }

    pub fn table(&self, names: &[&str]) -> String {
        let mut out = format!("{:<14} | {:>8}\n{}\n", "Class", "Dice", "-".repeat(25));
        for (i, d) in self.per_class.iter().enumerate() {
            let name = names.get(i).copied().map(String::from).unwrap_or_else(|| format!("class {}", self.classes[i]));
            out += &format!("{name:<14} | {d:>8.4}\n");
        }
        out += &format!("{:<14} | {:>8.4}\n", "Mean", self.mean);
        out
    }
}

const OVERLAY: [[u8; 3]; 5] = [[0, 0, 0], [220, 160, 40], [40, 120, 230], [60, 200, 90], [230, 50, 50]];

/// Grid of evenly spaced slices along `view`: one row per item, volume slices
/// in grayscale, followed by the label slice in class colours when present.
pub fn write_montage(path: &Path, items: &[(Volume, Option<LabelMap>)], view: View, per_row: usize) -> Result<()> {
    let first = items.first().ok_or_else(|| Error::Input("montage needs at least one item".into()))?;
    let shape = first.0.shape();
    if items.iter().any(|(v, l)| v.shape() != shape || l.as_ref().is_some_and(|l| l.shape() != shape)) {
        return Err(Error::Shape("montage items must share a grid".into()));
    }
    let (r, c) = view.slice_shape(shape);
    let count = view.slice_count(shape);
    let per_row = per_row.clamp(1, count);
    let picks: Vec<usize> = (0..per_row).map(|i| (2 * i + 1) * count / (2 * per_row)).collect();
    let has_labels = items.iter().any(|(_, l)| l.is_some());
    let tiles_per_item = if has_labels { 2 } else { 1 };
    let (tw, th) = (c as u32 + 1, r as u32 + 1);
    let width = tw * per_row as u32;
    let height = th * (items.len() * tiles_per_item) as u32;
    let mut img = image::RgbImage::new(width, height);
    for (row, (vol, lab)) in items.iter().enumerate() {
        for (col, &k) in picks.iter().enumerate() {
            let sv = slice(vol.data(), shape, view, k);
            let x0 = col as u32 * tw;
            let y0 = (row * tiles_per_item) as u32 * th;
            for a in 0..r {
                for b in 0..c {
                    let g = (sv[a * c + b].clamp(0.0, 1.0) * 255.0).round() as u8;
                    img.put_pixel(x0 + b as u32, y0 + a as u32, image::Rgb([g, g, g]));
                }
            }
            if let Some(l) = lab {
                let sl = slice(l.data(), shape, view, k);
                for a in 0..r {
                    for b in 0..c {
                        let px = OVERLAY[sl[a * c + b] as usize % OVERLAY.len()];
                        img.put_pixel(x0 + b as u32, y0 + th + a as u32, image::Rgb(px));
                    }
                }
            }
        }
    }
    if let Some(dir) = path.parent() {
        crate::io::create_dir(dir)?;
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, Grid3, PhantomSpec};
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    fn stats1(mean: f64, var: f64) -> FeatureStats {
        FeatureStats::from_moments(vec![mean], DMatrix::from_element(1, 1, var), 10).unwrap()
    }

    #[test]
    fn one_dimensional_cases() {
        let d = frechet_distance(&stats1(0.0, 1.0), &stats1(3.0, 1.0)).unwrap();
        assert!((d - 9.0).abs() < 1e-9);
        let d = frechet_distance(&stats1(1.0, 4.0), &stats1(1.0, 0.25)).unwrap();
        assert!((d - (2.0f64 - 0.5).powi(2)).abs() < 1e-9);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let b = FeatureStats::from_moments(vec![0.0, 0.0], DMatrix::identity(2, 2), 3).unwrap();
        assert!(frechet_distance(&stats1(0.0, 1.0), &b).is_err());
        assert!(FeatureStats::from_features(&[vec![1.0]]).is_err());
    }

    #[test]
    fn slice_counts_follow_axis_convention() {
        let s = [32, 32, 16];
        assert_eq!(View::Axial.slice_count(s), 16);
        assert_eq!(View::Sagittal.slice_count(s), 32);
        assert_eq!(View::Coronal.slice_count(s), 32);
        let data: Vec<usize> = (0..2 * 3 * 4).collect();
        // (i, j, k) -> (i*3 + j)*4 + k
        assert_eq!(slice(&data, [2, 3, 4], View::Axial, 1), vec![1, 5, 9, 13, 17, 21]);
        assert_eq!(slice(&data, [2, 3, 4], View::Sagittal, 1).len(), 12);
        assert_eq!(slice(&data, [2, 3, 4], View::Coronal, 2), vec![8, 9, 10, 11, 20, 21, 22, 23]);
    }

    #[test]
    fn features_are_deterministic_and_row_local() {
        let vols: Vec<Volume> = (0..3).map(|s| generate_phantom(s, &PhantomSpec::desk()).unwrap().0).collect();
        let a = FeatureExtractor::new(ExtractorConfig::desk(ExtractorKind::Volume3d)).unwrap();
        let b = FeatureExtractor::new(ExtractorConfig::desk(ExtractorKind::Volume3d)).unwrap();
        let fa = extract_features(&vols, &a).unwrap();
        assert_eq!(fa, extract_features(&vols, &b).unwrap());
        assert_eq!(fa.len(), 3);
        assert_eq!(fa[0].len(), 64);
        let rev: Vec<Volume> = vols.iter().rev().cloned().collect();
        let fr = extract_features(&rev, &a).unwrap();
        assert_eq!(fr[0], fa[2]);
        assert_eq!(fr[2], fa[0]);
    }

    #[test]
    fn self_fid_is_zero() {
        let vols: Vec<Volume> = (0..6).map(|s| generate_phantom(s, &PhantomSpec::desk()).unwrap().0).collect();
        let e3 = FeatureExtractor::new(ExtractorConfig::desk(ExtractorKind::Volume3d)).unwrap();
        assert!(fid_3d(&vols, &vols, &e3).unwrap() <= 1e-6);
        let e2 = FeatureExtractor::new(ExtractorConfig::desk(ExtractorKind::Slice2d)).unwrap();
        for v in View::ALL {
            assert!(fid_per_view(&vols, &vols, v, &e2).unwrap() <= 1e-6);
        }
        assert!(fid_3d(&vols, &[], &e3).is_err());
        assert!(fid_3d(&vols, &vols, &e2).is_err());
    }

    #[test]
    fn dice_examples() {
        let mut a = vec![false; 300];
        let mut b = vec![false; 300];
        a[..100].iter_mut().for_each(|x| *x = true);
        b[50..150].iter_mut().for_each(|x| *x = true);
        assert_eq!(dice_masks(&a, &b).unwrap(), 0.5);
        assert_eq!(dice_masks(&a, &a).unwrap(), 1.0);
        let c: Vec<bool> = (0..300).map(|i| i >= 200).collect();
        assert_eq!(dice_masks(&a, &c).unwrap(), 0.0);
        assert_eq!(dice_masks(&[false; 4], &[false; 4]).unwrap(), 1.0);
        assert!(dice_masks(&a, &[true]).is_err());
    }

    #[test]
    fn dice_report_means() {
        let gt = LabelMap::new(Grid3::new([2, 2, 1], vec![0, 1, 2, 2]).unwrap()).unwrap();
        let bg = LabelMap::new(Grid3::filled([2, 2, 1], 0)).unwrap();
        let perfect = DiceReport::compute(&[gt.clone()], &[gt.clone()], &[1, 2]).unwrap();
        assert_eq!(perfect.per_class, vec![1.0, 1.0]);
        let none = DiceReport::compute(&[bg], &[gt], &[1, 2]).unwrap();
        assert_eq!(none.per_class, vec![0.0, 0.0]);
        assert_eq!(none.mean, 0.0);
    }

    #[test]
    fn montage_writes_png() {
        let dir = tempfile::tempdir().unwrap();
        let (v, l) = generate_phantom(3, &PhantomSpec::desk()).unwrap();
        let path = dir.path().join("m.png");
        write_montage(&path, &[(v.clone(), Some(l)), (v, None)], View::Axial, 4).unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!(img.width(), 4 * 33);
        assert_eq!(img.height(), 4 * 33);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn dice_is_symmetric_and_bounded(seed in any::<u64>(), p in 0.0f64..1.0, q in 0.0f64..1.0) {
            let mut rng = seeded(seed);
            let a: Vec<bool> = (0..200).map(|_| rng.random_bool(p)).collect();
            let b: Vec<bool> = (0..200).map(|_| rng.random_bool(q)).collect();
            let d = dice_masks(&a, &b).unwrap();
            prop_assert_eq!(d, dice_masks(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&d));
        }

        #[test]
        fn frechet_is_symmetric_and_nonnegative(seed in any::<u64>()) {
            let mut rng = seeded(seed);
            let rows = |rng: &mut crate::rng::Rng64, shift: f64| -> Vec<Vec<f64>> {
                (0..12).map(|_| (0..4).map(|_| rng.random::<f64>() + shift).collect()).collect()
            };
            let a = FeatureStats::from_features(&rows(&mut rng, 0.0)).unwrap();
            let b = FeatureStats::from_features(&rows(&mut rng, 0.3)).unwrap();
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-9);
            prop_assert!(frechet_distance(&a, &a).unwrap() <= 1e-8);
        }
    }
}
