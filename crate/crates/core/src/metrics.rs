//! Overlap and surface-distance metrics with per-manifest reporting.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{load_labels, CaseRecord, LabelVolume};

fn check_dims(a: &LabelVolume, b: &LabelVolume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "mask dims {:?} and {:?} differ",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

fn overlap(a: &LabelVolume, b: &LabelVolume) -> Result<(usize, usize, usize)> {
    check_dims(a, b)?;
    let (mut na, mut nb, mut both) = (0, 0, 0);
    for (&x, &y) in a.voxels().iter().zip(b.voxels()) {
        na += x as usize;
        nb += y as usize;
        both += (x & y) as usize;
    }
    Ok((na, nb, both))
}

/// `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
pub fn dice(a: &LabelVolume, b: &LabelVolume) -> Result<f64> {
    let (na, nb, both) = overlap(a, b)?;
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// `|A∩B| / |A∪B|`; two empty masks score 1.
pub fn jaccard(a: &LabelVolume, b: &LabelVolume) -> Result<f64> {
    let (na, nb, both) = overlap(a, b)?;
    let union = na + nb - both;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(both as f64 / union as f64)
}

/// Foreground voxels with a background or out-of-bounds face neighbour.
pub fn surface_mask(m: &LabelVolume) -> Vec<bool> {
    let [nx, ny, nz] = m.dims();
    let v = m.voxels();
    let mut out = vec![false; v.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = (z * ny + y) * nx + x;
                if v[i] == 0 {
                    continue;
                }
                out[i] = x == 0
                    || y == 0
                    || z == 0
                    || x + 1 == nx
                    || y + 1 == ny
                    || z + 1 == nz
                    || v[i - 1] == 0
                    || v[i + 1] == 0
                    || v[i - nx] == 0
                    || v[i + nx] == 0
                    || v[i - nx * ny] == 0
                    || v[i + nx * ny] == 0;
            }
        }
    }
    out
}

/// Surface voxels in physical coordinates (`index * spacing`).
pub fn surface_voxels(m: &LabelVolume, spacing: [f64; 3]) -> Vec<[f64; 3]> {
    let [nx, ny, _] = m.dims();
    surface_mask(m)
        .iter()
        .enumerate()
        .filter(|(_, &s)| s)
        .map(|(i, _)| {
            let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
            [x as f64 * spacing[0], y as f64 * spacing[1], z as f64 * spacing[2]]
        })
        .collect()
}

/// Lower envelope of parabolas along one line with sample spacing `s`;
/// infinite entries are not sites.
fn edt_line(f: &mut [f64], s: f64, v: &mut Vec<usize>, zb: &mut Vec<f64>, out: &mut [f64]) {
    let n = f.len();
    v.clear();
    zb.clear();
    let key = |q: usize, f: &[f64]| f[q] + (q as f64 * s).powi(2);
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    zb.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let x = (key(q, f) - key(p, f)) / (2.0 * s * (q - p) as f64);
                    if x <= *zb.last().unwrap() {
                        v.pop();
                        zb.pop();
                    } else {
                        v.push(q);
                        zb.push(x);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate().take(n) {
        let pos = p as f64 * s;
        while k + 1 < v.len() && zb[k + 1] < pos {
            k += 1;
        }
        let d = (p as f64 - v[k] as f64) * s;
        *o = d * d + f[v[k]];
    }
    f.copy_from_slice(&out[..n]);
}

/// Exact squared Euclidean distance (in physical units) from every voxel to
/// the nearest site; infinite everywhere if there are no sites.
pub fn squared_distance_transform(sites: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let mut d: Vec<f64> = sites
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    let longest = nx.max(ny).max(nz);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let (mut v, mut zb) = (Vec::new(), Vec::new());
    let strides = [1, nx, nx * ny];
    for axis in 0..3 {
        let n = dims[axis];
        let st = strides[axis];
        for start in 0..d.len() {
            // visit each line once, from its first element
            let coord = (start / st) % n;
            if coord != 0 {
                continue;
            }
            for (i, l) in line.iter_mut().enumerate().take(n) {
                *l = d[start + i * st];
            }
            edt_line(&mut line[..n], spacing[axis], &mut v, &mut zb, &mut out);
            for (i, &l) in line.iter().enumerate().take(n) {
                d[start + i * st] = l;
            }
        }
    }
    d
}

/// Distances from each surface voxel of `from` to the surface of `to`.
fn directed_surface_distances(from: &[bool], to: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let dt = squared_distance_transform(to, dims, spacing);
    from.iter()
        .zip(&dt)
        .filter(|(&s, _)| s)
        .map(|(_, &d)| d.sqrt())
        .collect()
}

fn surface_pair(a: &LabelVolume, b: &LabelVolume, spacing: [f64; 3]) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    check_dims(a, b)?;
    if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::Parameter(format!("spacing must be positive, got {spacing:?}")));
    }
    let (sa, sb) = (surface_mask(a), surface_mask(b));
    if !sa.contains(&true) || !sb.contains(&true) {
        return Ok(None);
    }
    let ab = directed_surface_distances(&sa, &sb, a.dims(), spacing);
    let ba = directed_surface_distances(&sb, &sa, a.dims(), spacing);
    Ok(Some((ab, ba)))
}

/// Symmetric Hausdorff distance between the two surfaces; `None` when either
/// mask is empty.
pub fn hausdorff(a: &LabelVolume, b: &LabelVolume, spacing: [f64; 3]) -> Result<Option<f64>> {
    Ok(surface_pair(a, b, spacing)?.map(|(ab, ba)| ab.iter().chain(&ba).fold(0.0, |m: f64, &d| m.max(d))))
}

/// Average symmetric surface distance; `None` when either mask is empty.
pub fn assd(a: &LabelVolume, b: &LabelVolume, spacing: [f64; 3]) -> Result<Option<f64>> {
    Ok(surface_pair(a, b, spacing)?.map(|(ab, ba)| {
        let total: f64 = ab.iter().chain(&ba).sum();
        total / (ab.len() + ba.len()) as f64
    }))
}

pub fn spacing_f64(m: &LabelVolume) -> [f64; 3] {
    let s = m.spacing();
    [s[0] as f64, s[1] as f64, s[2] as f64]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub dice: Option<f64>,
    pub jc: Option<f64>,
    pub hd_mm: Option<f64>,
    pub assd_mm: Option<f64>,
    /// Why the case could not be scored, if it could not.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CaseMetrics {
    pub fn compute(case_id: &str, pred: &LabelVolume, truth: &LabelVolume) -> Result<Self> {
        let sp = spacing_f64(truth);
        Ok(CaseMetrics {
            case_id: case_id.to_string(),
            dice: Some(dice(pred, truth)?),
            jc: Some(jaccard(pred, truth)?),
            hd_mm: hausdorff(pred, truth, sp)?,
            assd_mm: assd(pred, truth, sp)?,
            error: None,
        })
    }

    fn failed(case_id: &str, why: String) -> Self {
        CaseMetrics {
            case_id: case_id.to_string(),
            dice: None,
            jc: None,
            hd_mm: None,
            assd_mm: None,
            error: Some(why),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Aggregate {
            mean,
            std: var.sqrt(),
            n: values.len(),
        })
    }

    /// `mean (std)` with the given number of decimals.
    pub fn format(&self, decimals: usize) -> String {
        format!("{:.*} ({:.*})", decimals, self.mean, decimals, self.std)
    }
}

fn format_agg(a: Option<Aggregate>, decimals: usize) -> String {
    a.map_or_else(|| "undefined".to_string(), |a| a.format(decimals))
}

fn format_opt(v: Option<f64>, decimals: usize) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.decimals$}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Distance unit of `hd_mm` / `assd_mm`.
    pub units: String,
    /// Face-neighbour surface definition.
    pub surface_connectivity: usize,
    pub cases: Vec<CaseMetrics>,
    pub dice: Option<Aggregate>,
    pub jc: Option<Aggregate>,
    pub hd_mm: Option<Aggregate>,
    pub assd_mm: Option<Aggregate>,
    /// Case ids that could not be scored.
    pub flagged: Vec<String>,
}

impl MetricsReport {
    pub fn from_cases(cases: Vec<CaseMetrics>) -> Self {
        let col = |f: fn(&CaseMetrics) -> Option<f64>| Aggregate::of(&cases.iter().filter_map(f).collect::<Vec<_>>());
        MetricsReport {
            units: "mm".into(),
            surface_connectivity: 6,
            dice: col(|c| c.dice),
            jc: col(|c| c.jc),
            hd_mm: col(|c| c.hd_mm),
            assd_mm: col(|c| c.assd_mm),
            flagged: cases
                .iter()
                .filter(|c| c.error.is_some())
                .map(|c| c.case_id.clone())
                .collect(),
            cases,
        }
    }

    /// Summary cells in column order Dice, JC, HD, ASSD.
    pub fn summary_cells(&self) -> [String; 4] {
        [
            format_agg(self.dice, 3),
            format_agg(self.jc, 3),
            format_agg(self.hd_mm, 2),
            format_agg(self.assd_mm, 2),
        ]
    }

    /// Aligned per-case table with a final `mean (std)` row.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<[String; 5]> = vec![[
            "case".into(),
            "Dice".into(),
            "JC".into(),
            format!("HD ({})", self.units),
            format!("ASSD ({})", self.units),
        ]];
        for c in &self.cases {
            match &c.error {
                Some(e) => rows.push([c.case_id.clone(), format!("FLAGGED: {e}"), String::new(), String::new(), String::new()]),
                None => rows.push([
                    c.case_id.clone(),
                    format_opt(c.dice, 3),
                    format_opt(c.jc, 3),
                    format_opt(c.hd_mm, 2),
                    format_opt(c.assd_mm, 2),
                ]),
            }
        }
        let [d, j, h, a] = self.summary_cells();
        rows.push(["mean (std)".into(), d, j, h, a]);
        let mut out = render(&rows);
        let _ = writeln!(
            out,
            "surface: {}-neighbour; distances in {}; {} flagged",
            self.surface_connectivity,
            self.units,
            self.flagged.len()
        );
        out
    }
}

fn render<const N: usize>(rows: &[[String; N]]) -> String {
    let mut widths = [0usize; N];
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c:<w$}"))
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

/// Method-per-row summary table in Dice / JC / HD / ASSD column order.
pub fn comparison_table(rows: &[(&str, &MetricsReport)]) -> String {
    let mut table: Vec<[String; 5]> = vec![[
        "Method".into(),
        "Dice".into(),
        "JC".into(),
        "HD".into(),
        "ASSD".into(),
    ]];
    for (name, r) in rows {
        let [d, j, h, a] = r.summary_cells();
        table.push([name.to_string(), d, j, h, a]);
    }
    render(&table)
}

/// File name of a case's predicted mask inside a prediction directory.
pub fn prediction_file_name(case_id: &str) -> String {
    format!("{case_id}.avl")
}

/// Scores every case of `cases` against `pred_dir/<case_id>.avl`. Missing or
/// unreadable predictions are flagged and excluded from the aggregates.
pub fn evaluate_manifest(pred_dir: &Path, cases: &[CaseRecord]) -> Result<MetricsReport> {
    let mut out = Vec::with_capacity(cases.len());
    for case in cases {
        let mask = case.mask.as_ref().ok_or_else(|| {
            Error::Validation(format!("case `{}` has no ground-truth mask", case.case_id))
        })?;
        let truth = load_labels(mask)?;
        let pred_path = pred_dir.join(prediction_file_name(&case.case_id));
        if !pred_path.exists() {
            out.push(CaseMetrics::failed(&case.case_id, "missing prediction".into()));
            continue;
        }
        let scored = load_labels(&pred_path).and_then(|pred| {
            if !pred.same_geometry(&truth) {
                return Err(Error::Integrity(format!(
                    "prediction geometry {:?}/{:?} differs from ground truth {:?}/{:?}",
                    pred.dims(),
                    pred.spacing(),
                    truth.dims(),
                    truth.spacing()
                )));
            }
            CaseMetrics::compute(&case.case_id, &pred, &truth)
        });
        out.push(scored.unwrap_or_else(|e| CaseMetrics::failed(&case.case_id, e.to_string())));
    }
    Ok(MetricsReport::from_cases(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn block(dims: [usize; 3], lo: [usize; 3], hi: [usize; 3]) -> LabelVolume {
        let mut m = LabelVolume::zeros(dims, [1.0; 3]).unwrap();
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    m.set(x, y, z, 1);
                }
            }
        }
        m
    }

    fn brute(a: &LabelVolume, b: &LabelVolume, sp: [f64; 3]) -> Option<(f64, f64)> {
        let sa = surface_voxels(a, sp);
        let sb = surface_voxels(b, sp);
        if sa.is_empty() || sb.is_empty() {
            return None;
        }
        let d = |p: &[f64; 3], q: &[f64; 3]| {
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
        };
        let directed = |x: &[[f64; 3]], y: &[[f64; 3]]| -> Vec<f64> {
            x.iter()
                .map(|p| y.iter().map(|q| d(p, q)).fold(f64::INFINITY, f64::min))
                .collect()
        };
        let (ab, ba) = (directed(&sa, &sb), directed(&sb, &sa));
        let hd = ab.iter().chain(&ba).cloned().fold(0.0, f64::max);
        let mean = ab.iter().chain(&ba).sum::<f64>() / (ab.len() + ba.len()) as f64;
        Some((hd, mean))
    }

    #[test]
    fn shifted_block_overlap() {
        let a = block([4, 3, 1], [0, 0, 0], [2, 2, 1]);
        let b = block([4, 3, 1], [1, 0, 0], [3, 2, 1]);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert!((jaccard(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let far = block([4, 3, 1], [3, 2, 0], [4, 3, 1]);
        assert_eq!(dice(&a, &far).unwrap(), 0.0);
        let empty = LabelVolume::zeros([4, 3, 1], [1.0; 3]).unwrap();
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert_eq!(jaccard(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dice(&empty, &a).unwrap(), 0.0);
        assert!(matches!(dice(&a, &block([3, 3, 1], [0; 3], [1; 3])), Err(Error::Shape(_))));
    }

    #[test]
    fn surfaces() {
        let one = block([3, 3, 3], [1, 1, 1], [2, 2, 2]);
        assert_eq!(surface_voxels(&one, [1.0; 3]), vec![[1.0, 1.0, 1.0]]);
        let cube = block([5, 5, 5], [1, 1, 1], [4, 4, 4]);
        assert_eq!(surface_voxels(&cube, [1.0; 3]).len(), 26);
        let empty = LabelVolume::zeros([3, 3, 3], [1.0; 3]).unwrap();
        assert!(surface_voxels(&empty, [1.0; 3]).is_empty());
    }

    #[test]
    fn three_four_five() {
        let a = block([5, 5, 1], [0, 0, 0], [1, 1, 1]);
        let b = block([5, 5, 1], [3, 4, 0], [4, 5, 1]);
        assert_eq!(hausdorff(&a, &b, [1.0; 3]).unwrap(), Some(5.0));
        assert_eq!(assd(&a, &b, [1.0; 3]).unwrap(), Some(5.0));
        assert_eq!(hausdorff(&a, &a, [1.0; 3]).unwrap(), Some(0.0));
        assert_eq!(assd(&a, &a, [1.0; 3]).unwrap(), Some(0.0));
        let empty = LabelVolume::zeros([5, 5, 1], [1.0; 3]).unwrap();
        assert_eq!(hausdorff(&a, &empty, [1.0; 3]).unwrap(), None);
        assert_eq!(assd(&empty, &a, [1.0; 3]).unwrap(), None);
    }

    #[test]
    fn aggregates_and_formatting() {
        let a = Aggregate::of(&[0.8, 1.0]).unwrap();
        assert!((a.mean - 0.9).abs() < 1e-15 && (a.std - 0.1).abs() < 1e-15);
        assert_eq!(Aggregate::of(&[1.0]).unwrap().format(3), "1.000 (0.000)");
        assert_eq!(Aggregate { mean: 0.901, std: 0.03, n: 2 }.format(3), "0.901 (0.030)");
    }

    fn mask_strategy() -> impl Strategy<Value = LabelVolume> {
        ([1usize..=12, 1usize..=12, 1usize..=12], 0.05f64..0.7, any::<u64>()).prop_map(|(d, p, seed)| {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let v = (0..d[0] * d[1] * d[2]).map(|_| u8::from(rng.gen_bool(p))).collect();
            LabelVolume::new(d, [1.0; 3], v).unwrap()
        })
    }

    fn pair_strategy() -> impl Strategy<Value = (LabelVolume, LabelVolume, [f64; 3])> {
        (mask_strategy(), any::<u64>(), [0.3f64..3.0, 0.3f64..3.0, 0.3f64..3.0]).prop_map(|(a, seed, sp)| {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let p = rng.gen_range(0.05..0.7);
            let v = (0..a.len()).map(|_| u8::from(rng.gen_bool(p))).collect();
            let b = LabelVolume::new(a.dims(), [1.0; 3], v).unwrap();
            (a, b, sp)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn distances_match_brute_force((a, b, sp) in pair_strategy()) {
            let hd = hausdorff(&a, &b, sp).unwrap();
            let asd = assd(&a, &b, sp).unwrap();
            match brute(&a, &b, sp) {
                None => prop_assert!(hd.is_none() && asd.is_none()),
                Some((h, m)) => {
                    prop_assert!((hd.unwrap() - h).abs() < 1e-9);
                    prop_assert!((asd.unwrap() - m).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn symmetric_and_scale_covariant((a, b, sp) in pair_strategy()) {
            prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
            prop_assert_eq!(jaccard(&a, &b).unwrap(), jaccard(&b, &a).unwrap());
            let h = hausdorff(&a, &b, sp).unwrap();
            prop_assert_eq!(h, hausdorff(&b, &a, sp).unwrap());
            let s = assd(&a, &b, sp).unwrap();
            let s_ba = assd(&b, &a, sp).unwrap();
            prop_assert!(s.zip(s_ba).map_or(true, |(x, y)| (x - y).abs() < 1e-12));
            let sp2 = [sp[0] * 2.0, sp[1] * 2.0, sp[2] * 2.0];
            if let (Some(h), Some(h2)) = (h, hausdorff(&a, &b, sp2).unwrap()) {
                prop_assert!((h2 - 2.0 * h).abs() <= 1e-12 * h2.max(1.0));
            }
            if let (Some(s), Some(s2)) = (s, assd(&a, &b, sp2).unwrap()) {
                prop_assert!((s2 - 2.0 * s).abs() <= 1e-12 * s2.max(1.0));
            }
        }

        #[test]
        fn jaccard_dice_identity((a, b, _sp) in pair_strategy()) {
            let d = dice(&a, &b).unwrap();
            let j = jaccard(&a, &b).unwrap();
            prop_assert!(j <= d);
            prop_assert!((j - d / (2.0 - d)).abs() < 1e-12);
        }
    }
}
