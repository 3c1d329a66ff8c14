//! Reconstruction metrics and the edema classification procedure.

use std::collections::{HashMap, VecDeque};

use ndarray::{s, Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::SosMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.02, k2: 0.03 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ssim: f64,
    /// `+inf` when the maps are identical.
    pub psnr_db: f64,
    pub nmse_db: f64,
    pub lmse: Option<f64>,
    pub dice: Option<f64>,
}

fn same_shape(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("maps differ in shape: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Normalized 1-D Gaussian of odd length `n`.
pub fn gaussian_kernel(n: usize, sigma: f64) -> Vec<f64> {
    let h = (n / 2) as f64;
    let w: Vec<f64> = (0..n).map(|i| (-((i as f64 - h).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = w.iter().sum();
    w.into_iter().map(|v| v / sum).collect()
}

/// Separable weighted sum over every fully contained window.
fn filter_valid(x: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (n0, n1) = x.dim();
    let w = k.len();
    let (m0, m1) = (n0 + 1 - w, n1 + 1 - w);
    let rows: Array2<f64> = Array2::from_shape_fn((m0, n1), |(i, j)| (0..w).map(|t| k[t] * x[[i + t, j]]).sum::<f64>());
    Array2::from_shape_fn((m0, m1), |(i, j)| (0..w).map(|t| k[t] * rows[[i, j + t]]).sum::<f64>())
}

/// Per-window SSIM over all fully contained windows.
pub fn ssim_map(a: ArrayView2<f64>, b: ArrayView2<f64>, range: f64, p: &SsimParams) -> Result<Array2<f64>> {
    same_shape(a, b)?;
    let (n0, n1) = a.dim();
    if p.window % 2 == 0 || n0 < p.window || n1 < p.window {
        return Err(Error::Shape(format!("{n0}x{n1} map is smaller than the {} window", p.window)));
    }
    if !(range > 0.0) {
        return Err(Error::InvalidArgument(format!("SSIM data range must be positive, got {range}")));
    }
    let k = gaussian_kernel(p.window, p.sigma);
    let (a, b) = (a.to_owned(), b.to_owned());
    let mu_a = filter_valid(&a, &k);
    let mu_b = filter_valid(&b, &k);
    let aa = filter_valid(&(&a * &a), &k);
    let bb = filter_valid(&(&b * &b), &k);
    let ab = filter_valid(&(&a * &b), &k);
    let c1 = (p.k1 * range).powi(2);
    let c2 = (p.k2 * range).powi(2);
    let mut out = Array2::zeros(mu_a.dim());
    Zip::from(&mut out).and(&mu_a).and(&mu_b).and(&aa).and(&bb).and(&ab).for_each(|o, &ma, &mb, &saa, &sbb, &sab| {
        let va = saa - ma * ma;
        let vb = sbb - mb * mb;
        let cov = sab - ma * mb;
        *o = ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    });
    Ok(out)
}

pub fn ssim(a: ArrayView2<f64>, b: ArrayView2<f64>, range: f64) -> Result<f64> {
    let m = ssim_map(a, b, range, &SsimParams::default())?;
    Ok(m.mean().unwrap_or(f64::NAN))
}

pub fn mse(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.len().max(1) as f64;
    Ok(Zip::from(a).and(b).fold(0.0, |acc, x, y| acc + (x - y) * (x - y)) / n)
}

/// `max(gt) - min(gt)`.
pub fn data_range(gt: ArrayView2<f64>) -> f64 {
    let max = gt.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = gt.iter().cloned().fold(f64::INFINITY, f64::min);
    max - min
}

pub fn psnr_db(recon: ArrayView2<f64>, gt: ArrayView2<f64>) -> Result<f64> {
    let e = mse(recon, gt)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range(gt).powi(2) / e).log10())
}

pub fn nmse_db(recon: ArrayView2<f64>, gt: ArrayView2<f64>) -> Result<f64> {
    same_shape(recon, gt)?;
    let norm: f64 = gt.iter().map(|v| v * v).sum();
    if norm == 0.0 {
        return Err(Error::InvalidArgument("NMSE of a zero-norm reference".into()));
    }
    let err: f64 = Zip::from(recon).and(gt).fold(0.0, |acc, x, y| acc + (x - y) * (x - y));
    Ok(10.0 * (err / norm).log10())
}

/// MSE over the cells where `mask` is set, (m/s)².
pub fn lmse(recon: ArrayView2<f64>, gt: ArrayView2<f64>, mask: ArrayView2<bool>) -> Result<f64> {
    same_shape(recon, gt)?;
    if mask.dim() != gt.dim() {
        return Err(Error::Shape(format!("mask {:?} does not match map {:?}", mask.dim(), gt.dim())));
    }
    let (sum, n) = Zip::from(recon).and(gt).and(mask).fold((0.0, 0usize), |(s, n), x, y, &m| {
        if m {
            (s + (x - y) * (x - y), n + 1)
        } else {
            (s, n)
        }
    });
    if n == 0 {
        return Err(Error::InvalidArgument("LMSE over an empty region".into()));
    }
    Ok(sum / n as f64)
}

/// `2|A∩B| / (|A|+|B|)`, defined as 1 when both masks are empty.
pub fn dice(a: ArrayView2<bool>, b: ArrayView2<bool>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("masks differ in shape: {:?} vs {:?}", a.dim(), b.dim())));
    }
    let (inter, na, nb) = Zip::from(a).and(b).fold((0usize, 0usize, 0usize), |(i, na, nb), &x, &y| {
        (i + (x && y) as usize, na + x as usize, nb + y as usize)
    });
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// SSIM, PSNR and NMSE of `recon` against `gt`, using the GT dynamic range.
pub fn image_metrics(recon: &SosMap, gt: &SosMap) -> Result<MetricReport> {
    let (r, g) = (recon.values.view(), gt.values.view());
    same_shape(r, g)?;
    let range = data_range(g);
    Ok(MetricReport { ssim: ssim(r, g, range)?, psnr_db: psnr_db(r, g)?, nmse_db: nmse_db(r, g)?, lmse: None, dice: None })
}

/// 4-connected components of `mask` in row-major order of their first cell.
pub fn connected_components(mask: &Array2<bool>) -> Vec<Vec<(usize, usize)>> {
    let (n0, n1) = mask.dim();
    let mut seen = Array2::from_elem((n0, n1), false);
    let mut comps = Vec::new();
    for i in 0..n0 {
        for j in 0..n1 {
            if !mask[[i, j]] || seen[[i, j]] {
                continue;
            }
            seen[[i, j]] = true;
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([(i, j)]);
            while let Some((a, b)) = queue.pop_front() {
                comp.push((a, b));
                for (u, v) in neighbours4(a, b, n0, n1) {
                    if mask[[u, v]] && !seen[[u, v]] {
                        seen[[u, v]] = true;
                        queue.push_back((u, v));
                    }
                }
            }
            comp.sort_unstable();
            comps.push(comp);
        }
    }
    comps
}

fn neighbours4(i: usize, j: usize, n0: usize, n1: usize) -> impl Iterator<Item = (usize, usize)> {
    let cand = [(i.wrapping_sub(1), j), (i + 1, j), (i, j.wrapping_sub(1)), (i, j + 1)];
    cand.into_iter().filter(move |&(u, v)| u < n0 && v < n1)
}

/// Cells within Euclidean distance `radius` of a set cell.
pub fn dilate(mask: &Array2<bool>, radius: f64) -> Array2<bool> {
    let (n0, n1) = mask.dim();
    let r = radius.floor() as isize;
    let mut out = mask.clone();
    for ((i, j), &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        for di in -r..=r {
            for dj in -r..=r {
                let (u, v) = (i as isize + di, j as isize + dj);
                if ((di * di + dj * dj) as f64) <= radius * radius && u >= 0 && v >= 0 && (u as usize) < n0 && (v as usize) < n1 {
                    out[[u as usize, v as usize]] = true;
                }
            }
        }
    }
    out
}

/// Gaussian smoothing normalized over the `valid` cells only; invalid cells
/// neither contribute nor receive a value (they are returned unchanged).
pub fn masked_gaussian_smooth(values: &Array2<f64>, valid: &Array2<bool>, sigma: f64) -> Array2<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k = gaussian_kernel(2 * r as usize + 1, sigma);
    let (n0, n1) = values.dim();
    let mut out = values.clone();
    for i in 0..n0 {
        for j in 0..n1 {
            if !valid[[i, j]] {
                continue;
            }
            let (mut s, mut w) = (0.0, 0.0);
            for di in -r..=r {
                for dj in -r..=r {
                    let (u, v) = (i as isize + di, j as isize + dj);
                    if u < 0 || v < 0 || u as usize >= n0 || v as usize >= n1 || !valid[[u as usize, v as usize]] {
                        continue;
                    }
                    let kw = k[(di + r) as usize] * k[(dj + r) as usize];
                    s += kw * values[[u as usize, v as usize]];
                    w += kw;
                }
            }
            out[[i, j]] = s / w;
        }
    }
    out
}

/// Cells reachable from the border without crossing `barrier` (4-connected).
pub fn outside_of(barrier: &Array2<bool>) -> Array2<bool> {
    let (n0, n1) = barrier.dim();
    let mut out = Array2::from_elem((n0, n1), false);
    let mut queue = VecDeque::new();
    for i in 0..n0 {
        for j in 0..n1 {
            if (i == 0 || j == 0 || i == n0 - 1 || j == n1 - 1) && !barrier[[i, j]] {
                out[[i, j]] = true;
                queue.push_back((i, j));
            }
        }
    }
    while let Some((a, b)) = queue.pop_front() {
        for (u, v) in neighbours4(a, b, n0, n1) {
            if !barrier[[u, v]] && !out[[u, v]] {
                out[[u, v]] = true;
                queue.push_back((u, v));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdemaParams {
    pub sigma: f64,
    pub band: (f64, f64),
    pub min_area: usize,
    pub dilation: f64,
}

impl Default for EdemaParams {
    fn default() -> Self {
        Self { sigma: 1.0, band: (1460.0, 1500.0), min_area: 10, dilation: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdemaDetection {
    pub positive: bool,
    /// Cells of each surviving component.
    pub regions: Vec<Vec<(usize, usize)>>,
    /// Union of the regions.
    pub mask: Array2<bool>,
    /// Closed boundary of each region in fractional cell coordinates.
    pub contours: Vec<Vec<(f64, f64)>>,
}

pub fn classify_edema(recon: &SosMap, bone: &Array2<bool>, skin: &Array2<bool>) -> Result<EdemaDetection> {
    classify_edema_with(recon, bone, skin, &EdemaParams::default())
}

/// Smooth, threshold to the band, label, reject implausible components and
/// trace their boundaries. Cells outside a non-empty skin contour are excluded.
pub fn classify_edema_with(recon: &SosMap, bone: &Array2<bool>, skin: &Array2<bool>, p: &EdemaParams) -> Result<EdemaDetection> {
    let shape = recon.values.dim();
    if bone.dim() != shape || skin.dim() != shape {
        return Err(Error::Shape(format!("masks {:?}/{:?} do not match map {shape:?}", bone.dim(), skin.dim())));
    }
    let mut excluded = Zip::from(bone).and(skin).map_collect(|&b, &s| b || s);
    if skin.iter().any(|&s| s) {
        let out = outside_of(skin);
        Zip::from(&mut excluded).and(&out).for_each(|e, &o| *e |= o);
    }
    let valid = excluded.mapv(|e| !e);
    let smooth = masked_gaussian_smooth(&recon.values, &valid, p.sigma);
    let (lo, hi) = p.band;
    let in_band = Zip::from(&smooth).and(&valid).map_collect(|&v, &ok| ok && v >= lo && v <= hi);
    let guard = dilate(&Zip::from(bone).and(skin).map_collect(|&b, &s| b || s), p.dilation);
    let regions: Vec<_> = connected_components(&in_band)
        .into_iter()
        .filter(|c| c.len() >= p.min_area && c.iter().all(|&(i, j)| !guard[[i, j]]))
        .collect();
    let mut mask = Array2::from_elem(shape, false);
    let mut contours = Vec::new();
    for c in &regions {
        let mut own = Array2::from_elem(shape, false);
        for &(i, j) in c {
            own[[i, j]] = true;
            mask[[i, j]] = true;
        }
        let level = Array2::from_shape_fn(shape, |(i, j)| {
            let margin = (smooth[[i, j]] - lo).min(hi - smooth[[i, j]]);
            if own[[i, j]] {
                margin.max(1e-9)
            } else if margin >= 0.0 || excluded[[i, j]] {
                -1e-9
            } else {
                margin
            }
        });
        contours.extend(marching_squares(&level));
    }
    Ok(EdemaDetection { positive: !regions.is_empty(), regions, mask, contours })
}

/// Closed zero-level contours of `f`, which is taken as negative outside the
/// raster. Ambiguous saddles are split by the mean of the four corners.
pub fn marching_squares(f: &Array2<f64>) -> Vec<Vec<(f64, f64)>> {
    let (n0, n1) = f.dim();
    let mut pad = Array2::from_elem((n0 + 2, n1 + 2), -1.0);
    pad.slice_mut(s![1..n0 + 1, 1..n1 + 1]).assign(f);
    // An edge is identified by its lower corner and direction (0 along i, 1 along j).
    type Edge = (usize, usize, u8);
    let point = |(i, j, d): Edge| -> (f64, f64) {
        let (u, v) = if d == 0 { (i + 1, j) } else { (i, j + 1) };
        let (a, b) = (pad[[i, j]], pad[[u, v]]);
        let t = a / (a - b);
        let (x, y) = (i as f64 + t * (u as f64 - i as f64), j as f64 + t * (v as f64 - j as f64));
        (x - 1.0, y - 1.0)
    };
    let mut links: HashMap<Edge, Vec<Edge>> = HashMap::new();
    for i in 0..n0 + 1 {
        for j in 0..n1 + 1 {
            let c = [pad[[i, j]], pad[[i + 1, j]], pad[[i + 1, j + 1]], pad[[i, j + 1]]];
            let inside: Vec<bool> = c.iter().map(|&v| v > 0.0).collect();
            // Edges in cyclic order: corner k to corner k+1.
            let edges: [Edge; 4] = [(i, j, 0), (i + 1, j, 1), (i, j + 1, 0), (i, j, 1)];
            let crossed: Vec<usize> = (0..4).filter(|&k| inside[k] != inside[(k + 1) % 4]).collect();
            let mut pair = |a: usize, b: usize| {
                links.entry(edges[a]).or_default().push(edges[b]);
                links.entry(edges[b]).or_default().push(edges[a]);
            };
            match crossed.len() {
                2 => pair(crossed[0], crossed[1]),
                4 => {
                    let centre_in = c.iter().sum::<f64>() / 4.0 > 0.0;
                    // Join around the corners that are separated from the centre.
                    if inside[0] == centre_in {
                        pair(0, 1);
                        pair(2, 3);
                    } else {
                        pair(3, 0);
                        pair(1, 2);
                    }
                }
                _ => {}
            }
        }
    }
    let mut loops = Vec::new();
    let mut keys: Vec<Edge> = links.keys().copied().collect();
    keys.sort_unstable();
    let mut used: std::collections::HashSet<Edge> = std::collections::HashSet::new();
    for start in keys {
        if used.contains(&start) {
            continue;
        }
        let mut path = vec![point(start)];
        used.insert(start);
        let mut prev = start;
        let mut cur = links[&start][0];
        while cur != start {
            used.insert(cur);
            path.push(point(cur));
            let next = links[&cur].iter().copied().find(|&e| e != prev).unwrap_or(start);
            prev = cur;
            cur = next;
        }
        loops.push(path);
    }
    loops
}

/// Shoelace area of a closed polygon.
pub fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    (0..n).map(|k| {
        let (a, b) = (poly[k], poly[(k + 1) % n]);
        a.0 * b.1 - b.0 * a.1
    })
    .sum::<f64>()
    .abs()
        / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionScores {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    /// Percent.
    pub accuracy: f64,
    /// Percent; `None` when nothing was predicted positive.
    pub precision: Option<f64>,
    /// Percent; `None` when there are no true positives to find.
    pub recall: Option<f64>,
}

pub fn detection_scores(decisions: &[bool], truth: &[bool]) -> Result<DetectionScores> {
    if decisions.len() != truth.len() {
        return Err(Error::Shape(format!("{} decisions for {} labels", decisions.len(), truth.len())));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&d, &t) in decisions.iter().zip(truth) {
        match (d, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let pct = |num: usize, den: usize| (den > 0).then(|| 100.0 * num as f64 / den as f64);
    Ok(DetectionScores {
        tp,
        fp,
        tn,
        fn_,
        accuracy: pct(tp + tn, decisions.len()).unwrap_or(f64::NAN),
        precision: pct(tp, tp + fp),
        recall: pct(tp, tp + fn_),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid2D;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pair(seed: u64) -> (Array2<f64>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Array2::from_shape_fn((16, 16), |_| rng.random_range(1400.0..1700.0));
        let b = Array2::from_shape_fn((16, 16), |(i, j)| a[[i, j]] + rng.random_range(-40.0..40.0));
        (a, b)
    }

    fn sos(values: Array2<f64>) -> SosMap {
        let (n0, n1) = values.dim();
        SosMap::new(Grid2D::new(n0, n1, 1e-3, 1e-7, 10).unwrap(), values).unwrap()
    }

    /// Mean SSIM straight from the windowed-statistics definition.
    fn ssim_oracle(a: &Array2<f64>, b: &Array2<f64>, range: f64) -> f64 {
        let w = 11;
        let h = 5.0;
        let mut g = Array2::from_shape_fn((w, w), |(i, j)| (-((i as f64 - h).powi(2) + (j as f64 - h).powi(2)) / 4.5).exp());
        let tot = g.sum();
        g.mapv_inplace(|v| v / tot);
        let (c1, c2) = ((0.02 * range).powi(2), (0.03 * range).powi(2));
        let (n0, n1) = a.dim();
        let mut vals = Vec::new();
        for i in 0..=n0 - w {
            for j in 0..=n1 - w {
                let pa = a.slice(s![i..i + w, j..j + w]);
                let pb = b.slice(s![i..i + w, j..j + w]);
                let ma = (&pa * &g).sum();
                let mb = (&pb * &g).sum();
                let va = (pa.mapv(|x| (x - ma).powi(2)) * &g).sum();
                let vb = (pb.mapv(|x| (x - mb).powi(2)) * &g).sum();
                let cov = ((pa.mapv(|x| x - ma)) * (pb.mapv(|x| x - mb)) * &g).sum();
                vals.push((2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)));
            }
        }
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    #[test]
    fn ssim_matches_definition() {
        for seed in 0..5 {
            let (a, b) = random_pair(seed);
            let r = data_range(a.view());
            let got = ssim(b.view(), a.view(), r).unwrap();
            assert!((got - ssim_oracle(&b, &a, r)).abs() < 1e-6, "seed {seed}");
        }
    }

    #[test]
    fn identical_maps() {
        let (a, _) = random_pair(1);
        let m = image_metrics(&sos(a.clone()), &sos(a)).unwrap();
        assert!((m.ssim - 1.0).abs() < 1e-12);
        assert_eq!(m.psnr_db, f64::INFINITY);
        assert_eq!(m.nmse_db, f64::NEG_INFINITY);
    }

    #[test]
    fn constant_offset_nmse() {
        let (a, _) = random_pair(2);
        let c = 7.5;
        let norm: f64 = a.iter().map(|v| v * v).sum();
        let want = 10.0 * (a.len() as f64 * c * c / norm).log10();
        let got = nmse_db(a.mapv(|v| v + c).view(), a.view()).unwrap();
        assert!((got - want).abs() < 1e-10);
    }

    #[test]
    fn metric_errors() {
        let a = Array2::<f64>::zeros((16, 16));
        let b = Array2::<f64>::zeros((16, 15));
        assert!(matches!(mse(a.view(), b.view()), Err(Error::Shape(_))));
        assert!(nmse_db(a.view(), a.view()).is_err());
        assert!(lmse(a.view(), a.view(), Array2::from_elem((16, 16), false).view()).is_err());
    }

    #[test]
    fn lmse_examples() {
        let gt = Array2::from_elem((4, 4), 1500.0);
        let mut recon = gt.clone();
        let mut mask = Array2::from_elem((4, 4), false);
        for k in 0..4 {
            recon[[k, 1]] += 10.0;
            mask[[k, 1]] = true;
        }
        assert_eq!(lmse(gt.view(), gt.view(), mask.view()).unwrap(), 0.0);
        assert_eq!(lmse(recon.view(), gt.view(), mask.view()).unwrap(), 100.0);
        let all = Array2::from_elem((4, 4), true);
        assert_eq!(lmse(recon.view(), gt.view(), all.view()).unwrap(), mse(recon.view(), gt.view()).unwrap());
    }

    #[test]
    fn dice_examples() {
        let mut a = Array2::from_elem((4, 4), false);
        a.slice_mut(s![0..2, 0..3]).fill(true);
        let mut b = Array2::from_elem((4, 4), false);
        b.slice_mut(s![0..1, 0..3]).fill(true);
        assert_eq!(dice(a.view(), a.view()).unwrap(), 1.0);
        assert!((dice(a.view(), b.view()).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let mut c = Array2::from_elem((4, 4), false);
        c[[3, 3]] = true;
        assert_eq!(dice(a.view(), c.view()).unwrap(), 0.0);
        let e = Array2::from_elem((4, 4), false);
        assert_eq!(dice(e.view(), e.view()).unwrap(), 1.0);
        assert!(dice(a.view(), Array2::from_elem((3, 4), false).view()).is_err());
    }

    #[test]
    fn components_are_four_connected() {
        let mut m = Array2::from_elem((5, 5), false);
        m[[0, 0]] = true;
        m[[1, 1]] = true;
        m[[2, 1]] = true;
        m[[4, 4]] = true;
        let c = connected_components(&m);
        assert_eq!(c.len(), 3);
        assert_eq!(c[1], vec![(1, 1), (2, 1)]);
    }

    fn disk(n: usize, centre: (f64, f64), radius: f64) -> Array2<bool> {
        Array2::from_shape_fn((n, n), |(i, j)| (i as f64 - centre.0).hypot(j as f64 - centre.1) <= radius)
    }

    fn disk_map(n: usize, centre: (f64, f64), radius: f64) -> (SosMap, Array2<bool>) {
        let d = disk(n, centre, radius);
        (sos(d.mapv(|b| if b { 1480.0 } else { 1580.0 })), d)
    }

    #[test]
    fn uniform_muscle_is_negative() {
        let none = Array2::from_elem((40, 40), false);
        let det = classify_edema(&sos(Array2::from_elem((40, 40), 1580.0)), &none, &none).unwrap();
        assert!(!det.positive);
        assert!(det.contours.is_empty());
    }

    #[test]
    fn synthetic_disk_is_found() {
        // Smoothing pulls the 1500 m/s level about 0.84 cells inside the rim.
        let (map, truth) = disk_map(64, (32.0, 30.0), 14.0);
        let none = Array2::from_elem((64, 64), false);
        let det = classify_edema(&map, &none, &none).unwrap();
        assert!(det.positive);
        assert_eq!(det.regions.len(), 1);
        let d = dice(det.mask.view(), truth.view()).unwrap();
        assert!(d > 0.9, "{d}");
        assert_eq!(det.contours.len(), 1);
        let area = polygon_area(&det.contours[0]);
        let want = std::f64::consts::PI * 13.16f64.powi(2);
        assert!((area - want).abs() / want < 0.05, "{area}");
        for &(x, y) in &det.contours[0] {
            assert!(((x - 32.0).hypot(y - 30.0) - 13.16).abs() < 0.5);
        }
    }

    #[test]
    fn disk_inside_bone_is_excluded() {
        let (map, _) = disk_map(40, (20.0, 20.0), 5.0);
        let bone = disk(40, (20.0, 20.0), 7.0);
        let none = Array2::from_elem((40, 40), false);
        assert!(!classify_edema(&map, &bone, &none).unwrap().positive);
    }

    #[test]
    fn water_outside_skin_is_excluded() {
        let mut values = Array2::from_elem((40, 40), 1500.0);
        let body = disk(40, (20.0, 20.0), 14.0);
        let inner = disk(40, (20.0, 20.0), 12.0);
        let skin = Zip::from(&body).and(&inner).map_collect(|&b, &i| b && !i);
        Zip::from(&mut values).and(&body).for_each(|v, &b| {
            if b {
                *v = 1590.0
            }
        });
        let none = Array2::from_elem((40, 40), false);
        assert!(!classify_edema(&sos(values), &none, &skin).unwrap().positive);
    }

    #[test]
    fn small_region_is_rejected() {
        let (map, _) = disk_map(40, (20.0, 20.0), 1.0);
        let none = Array2::from_elem((40, 40), false);
        assert!(!classify_edema(&map, &none, &none).unwrap().positive);
    }

    #[test]
    fn contour_of_square_closes() {
        let mut f = Array2::from_elem((6, 6), -1.0);
        f.slice_mut(s![2..4, 2..4]).fill(1.0);
        let c = marching_squares(&f);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].len(), 8);
        // Midpoint crossings give a 2x2 square with the corners cut.
        assert!((polygon_area(&c[0]) - 3.5).abs() < 1e-12);
    }

    #[test]
    fn detection_score_examples() {
        let truth = [true, false, true, false];
        let s = detection_scores(&truth, &truth).unwrap();
        assert_eq!((s.accuracy, s.precision, s.recall), (100.0, Some(100.0), Some(100.0)));
        let s = detection_scores(&[false; 4], &truth).unwrap();
        assert_eq!((s.accuracy, s.precision, s.recall), (50.0, None, Some(0.0)));
        assert!(detection_scores(&[true], &truth).is_err());
    }

    #[test]
    fn detection_scores_match_confusion_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d: Vec<bool> = (0..20).map(|_| rng.random()).collect();
        let t: Vec<bool> = (0..20).map(|_| rng.random()).collect();
        let tp = d.iter().zip(&t).filter(|(a, b)| **a && **b).count() as f64;
        let pp = d.iter().filter(|a| **a).count() as f64;
        let ap = t.iter().filter(|a| **a).count() as f64;
        let correct = d.iter().zip(&t).filter(|(a, b)| a == b).count() as f64;
        let s = detection_scores(&d, &t).unwrap();
        assert!((s.accuracy - 100.0 * correct / 20.0).abs() < 1e-12);
        assert!((s.precision.unwrap() - 100.0 * tp / pp).abs() < 1e-12);
        assert!((s.recall.unwrap() - 100.0 * tp / ap).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn ssim_is_symmetric(seed in 0u64..1000) {
            let (a, b) = random_pair(seed);
            let r = data_range(a.view());
            let ab = ssim(a.view(), b.view(), r).unwrap();
            let ba = ssim(b.view(), a.view(), r).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((ssim(a.view(), a.view(), r).unwrap() - 1.0).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn psnr_and_nmse_share_mse(seed in 0u64..1000) {
            let (a, b) = random_pair(seed);
            let e = mse(b.view(), a.view()).unwrap();
            let r = data_range(a.view());
            let norm: f64 = a.iter().map(|v| v * v).sum();
            let psnr = psnr_db(b.view(), a.view()).unwrap();
            let nmse = nmse_db(b.view(), a.view()).unwrap();
            // PSNR + NMSE = 10 log10(range^2 N / ||gt||^2).
            let want = 10.0 * (r * r * a.len() as f64 / norm).log10();
            prop_assert!((psnr + nmse - want).abs() < 1e-9);
            prop_assert!((psnr - 10.0 * (r * r / e).log10()).abs() < 1e-9);
        }

        #[test]
        fn dice_is_symmetric(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Array2::from_shape_fn((8, 8), |_| rng.random::<bool>());
            let b = Array2::from_shape_fn((8, 8), |_| rng.random::<bool>());
            prop_assert_eq!(dice(a.view(), b.view()).unwrap(), dice(b.view(), a.view()).unwrap());
        }

        #[test]
        fn detection_is_translation_equivariant(ci in 14usize..22, cj in 14usize..22, di in 0usize..6, dj in 0usize..6) {
            let none = Array2::from_elem((48, 48), false);
            let (m0, _) = disk_map(48, (ci as f64, cj as f64), 4.5);
            let (m1, _) = disk_map(48, ((ci + di) as f64, (cj + dj) as f64), 4.5);
            let a = classify_edema(&m0, &none, &none).unwrap();
            let b = classify_edema(&m1, &none, &none).unwrap();
            prop_assert_eq!(a.regions.len(), b.regions.len());
            for (ra, rb) in a.regions.iter().zip(&b.regions) {
                let shifted: Vec<_> = ra.iter().map(|&(i, j)| (i + di, j + dj)).collect();
                prop_assert_eq!(&shifted, rb);
            }
        }
    }
}
