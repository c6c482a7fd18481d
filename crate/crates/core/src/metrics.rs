//! Evaluation metrics M1-M4 and report formatting.
//!
//! M1: global relative L2 velocity score over fluid element centers.
//! M2: the same score restricted to the near-surface band 0 <= SDF <= 0.2.
//! M3: mean of the nine per-component relative gradient scores.
//! M4: Gauss-quadrature continuity residual of the prediction.
//! Scores are `100 * (1 - relative error)`; 100 is perfect.

use crate::error::{Error, Result};
use crate::fem::{continuity_residual, element_center_values, ElementField, NodalField};
use crate::voxel::SdfField;

/// Near-surface band upper bound for M2.
pub const BOUNDARY_LAYER_WIDTH: f64 = 0.2;

fn masked_rel_l2<'a>(
    pairs: impl Iterator<Item = (&'a [f64], &'a [f64])>,
    mask: &[bool],
) -> (f64, f64) {
    let mut num = 0.0;
    let mut den = 0.0;
    for (pred, truth) in pairs {
        for (lin, &m) in mask.iter().enumerate() {
            if m {
                let d = pred[lin] - truth[lin];
                num += d * d;
                den += truth[lin] * truth[lin];
            }
        }
    }
    (num.sqrt(), den.sqrt())
}

/// Global velocity accuracy: `100 (1 - ||u - u_hat|| / ||u||)`, the joint
/// 2-norm over the three components at fluid element centers.
pub fn metric_m1(pred: &ElementField, truth: &ElementField) -> Result<f64> {
    let (num, den) = masked_rel_l2(
        (0..3).map(|c| (pred.values[c].as_slice(), truth.values[c].as_slice())),
        &truth.mask,
    );
    if den == 0.0 {
        return Err(Error::UndefinedMetric(
            "M1: ground-truth velocity norm is zero on the fluid mask".into(),
        ));
    }
    Ok(100.0 * (1.0 - num / den))
}

/// Boundary-layer accuracy: M1's formula restricted to element centers
/// with centroid SDF in `[0, 0.2]`.
pub fn metric_m2(pred: &ElementField, truth: &ElementField, sdf: &SdfField) -> Result<f64> {
    let centers = element_center_values(sdf.grid());
    let band: Vec<bool> = centers
        .iter()
        .map(|&s| (0.0..=BOUNDARY_LAYER_WIDTH).contains(&s))
        .collect();
    if !band.iter().any(|&b| b) {
        return Err(Error::UndefinedMetric(
            "M2: boundary-layer band 0 <= SDF <= 0.2 is empty".into(),
        ));
    }
    let (num, den) = masked_rel_l2(
        (0..3).map(|c| (pred.values[c].as_slice(), truth.values[c].as_slice())),
        &band,
    );
    if den == 0.0 {
        return Err(Error::UndefinedMetric(
            "M2: ground-truth velocity norm is zero on the boundary-layer band".into(),
        ));
    }
    Ok(100.0 * (1.0 - num / den))
}

/// Gradient accuracy: the mean over the nine tensor components of their
/// relative L2 scores. Components whose truth norm vanishes are excluded
/// from the average and logged.
pub fn metric_m3(pred: &ElementField, truth: &ElementField) -> Result<f64> {
    let mut parts = [[(0.0f64, 0.0f64); 3]; 3];
    let mut max_den: f64 = 0.0;
    for comp in 0..3 {
        for axis in 0..3 {
            let (num, den) = masked_rel_l2(
                std::iter::once((
                    pred.gradients[comp][axis].as_slice(),
                    truth.gradients[comp][axis].as_slice(),
                )),
                &truth.mask,
            );
            parts[comp][axis] = (num, den);
            max_den = max_den.max(den);
        }
    }
    if max_den == 0.0 {
        return Err(Error::UndefinedMetric(
            "M3: every truth gradient component has zero norm".into(),
        ));
    }
    // A denominator can be analytically zero yet carry ~1e-15 stencil
    // cancellation residue; exclude anything negligible against the
    // largest component rather than testing for exact zero.
    let threshold = 1e-12 * max_den;
    let mut total = 0.0;
    let mut included = 0usize;
    for comp in 0..3 {
        for axis in 0..3 {
            let (num, den) = parts[comp][axis];
            if den <= threshold {
                log::warn!(
                    "M3: truth gradient component ({comp},{axis}) has negligible norm; excluded"
                );
                continue;
            }
            total += num / den;
            included += 1;
        }
    }
    Ok(100.0 * (1.0 - total / included as f64))
}

/// Continuity consistency: the integrated L2 norm of the predicted
/// field's divergence (see the continuity residual machinery); the truth
/// is not involved.
pub fn metric_m4(pred: &NodalField) -> f64 {
    continuity_residual(pred).total
}

/// Weights of the configurable aggregate: a convex combination of M1-M3
/// minus a penalty on M4.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnifiedWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub m4_penalty: f64,
}

impl Default for UnifiedWeights {
    fn default() -> Self {
        UnifiedWeights {
            w1: 1.0 / 3.0,
            w2: 1.0 / 3.0,
            w3: 1.0 / 3.0,
            m4_penalty: 100.0,
        }
    }
}

impl UnifiedWeights {
    pub fn validate(&self) -> Result<()> {
        if self.w1 < 0.0 || self.w2 < 0.0 || self.w3 < 0.0 || self.m4_penalty < 0.0 {
            return Err(Error::Config("unified-score weights must be >= 0".into()));
        }
        if (self.w1 + self.w2 + self.w3 - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "unified-score weights must sum to 1, got {}",
                self.w1 + self.w2 + self.w3
            )));
        }
        Ok(())
    }
}

/// Single-number ranking aid: `w1 M1 + w2 M2 + w3 M3 - penalty * M4`.
pub fn unified_score(m: [f64; 4], weights: &UnifiedWeights) -> Result<f64> {
    weights.validate()?;
    Ok(weights.w1 * m[0] + weights.w2 * m[1] + weights.w3 * m[2] - weights.m4_penalty * m[3])
}

/// Identifies what produced a metrics report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub model: String,
    pub loss: String,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub sample: usize,
    pub reynolds: f64,
    pub m: [f64; 4],
    pub unified: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub provenance: Provenance,
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn mean(&self) -> [f64; 4] {
        let mut mean = [0.0; 4];
        for row in &self.rows {
            for k in 0..4 {
                mean[k] += row.m[k];
            }
        }
        let n = self.rows.len().max(1) as f64;
        mean.map(|v| v / n)
    }

    pub fn mean_unified(&self) -> f64 {
        self.rows.iter().map(|r| r.unified).sum::<f64>() / self.rows.len().max(1) as f64
    }

    /// One row per sample plus a trailing aggregate row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample,reynolds,m1,m2,m3,m4,unified_score\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                row.sample, row.reynolds, row.m[0], row.m[1], row.m[2], row.m[3], row.unified
            ));
        }
        let mean = self.mean();
        out.push_str(&format!(
            "mean,,{},{},{},{},{}\n",
            mean[0],
            mean[1],
            mean[2],
            mean[3],
            self.mean_unified()
        ));
        out
    }
}

/// One line of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableEntry {
    pub loss: String,
    pub model: String,
    pub split: String,
    pub m: [f64; 4],
}

/// Renders entries in the published comparison layout: one row per
/// (loss, model), metric columns M1-M4 grouped per split, the random
/// split first.
pub fn format_table(entries: &[TableEntry]) -> String {
    let mut splits: Vec<String> = Vec::new();
    for want in ["random", "extrapolatory"] {
        if entries.iter().any(|e| e.split == want) {
            splits.push(want.to_string());
        }
    }
    for e in entries {
        if !splits.contains(&e.split) {
            splits.push(e.split.clone());
        }
    }
    let mut keys: Vec<(String, String)> = Vec::new();
    for e in entries {
        let key = (e.loss.clone(), e.model.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| b.1.cmp(&a.1))); // geometric before deeponet

    let metric_width = 10;
    let mut out = String::new();
    out.push_str(&format!("{:<6}{:<12}", "", ""));
    for s in &splits {
        out.push_str(&format!("{:^width$}", s, width = 4 * metric_width));
    }
    out.push('\n');
    out.push_str(&format!("{:<6}{:<12}", "loss", "model"));
    for _ in &splits {
        for m in ["M1", "M2", "M3", "M4"] {
            out.push_str(&format!("{:>width$}", m, width = metric_width));
        }
    }
    out.push('\n');
    for (loss, model) in &keys {
        out.push_str(&format!("{loss:<6}{model:<12}"));
        for split in &splits {
            match entries
                .iter()
                .find(|e| &e.loss == loss && &e.model == model && &e.split == split)
            {
                Some(e) => {
                    for k in 0..3 {
                        out.push_str(&format!("{:>width$.2}", e.m[k], width = metric_width));
                    }
                    out.push_str(&format!("{:>width$.2e}", e.m[3], width = metric_width));
                }
                None => {
                    for _ in 0..4 {
                        out.push_str(&format!("{:>width$}", "-", width = metric_width));
                    }
                }
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::postprocess;
    use crate::voxel::VoxelGrid;

    fn sphere_sdf(g: usize) -> SdfField {
        SdfField::new(VoxelGrid::from_fn(g, |p| {
            ((p[0] - 1.0).powi(2) + (p[1] - 1.0).powi(2) + (p[2] - 1.0).powi(2)).sqrt() - 0.5
        }))
    }

    fn truth_field(g: usize) -> NodalField {
        NodalField::from_fn(g, |p| {
            [
                (p[0] - 1.0) * p[1] + 0.3,
                p[2] * p[2] - p[0],
                0.5 * p[1] * p[2] + 0.1,
            ]
        })
    }

    fn scale_field(f: &NodalField, c: f64) -> NodalField {
        let g = f.resolution();
        let comp = |i: usize| {
            VoxelGrid::new(g, f.component(i).values().iter().map(|v| c * v).collect()).unwrap()
        };
        NodalField::new(comp(0), comp(1), comp(2)).unwrap()
    }

    #[test]
    fn perfect_prediction_scores_100() {
        let g = 8;
        let truth = truth_field(g);
        let sdf = sphere_sdf(g);
        let ef = postprocess(&truth, &sdf).unwrap();
        assert_eq!(metric_m1(&ef, &ef).unwrap(), 100.0);
        assert_eq!(metric_m2(&ef, &ef, &sdf).unwrap(), 100.0);
        assert_eq!(metric_m3(&ef, &ef).unwrap(), 100.0);
        // M4 only sees the prediction.
        assert!(metric_m4(&truth) > 0.0);
    }

    #[test]
    fn zero_prediction_scores_0() {
        let g = 8;
        let truth = truth_field(g);
        let sdf = sphere_sdf(g);
        let tf = postprocess(&truth, &sdf).unwrap();
        let zero = NodalField::from_fn(g, |_| [0.0; 3]);
        let pf = postprocess(&zero, &sdf).unwrap();
        assert!((metric_m1(&pf, &tf).unwrap() - 0.0).abs() < 1e-12);
    }

    #[test]
    fn scaled_prediction_identities() {
        let g = 8;
        let truth = truth_field(g);
        let sdf = sphere_sdf(g);
        let tf = postprocess(&truth, &sdf).unwrap();
        let pf = postprocess(&scale_field(&truth, 1.1), &sdf).unwrap();
        assert!((metric_m1(&pf, &tf).unwrap() - 90.0).abs() < 1e-9);
        // All nine gradient components scale by 1.2 -> relative error 0.2.
        let pf = postprocess(&scale_field(&truth, 1.2), &sdf).unwrap();
        assert!((metric_m3(&pf, &tf).unwrap() - 80.0).abs() < 1e-9);
        // Uniform relative error 0.5 across components -> 50.
        let pf = postprocess(&scale_field(&truth, 1.5), &sdf).unwrap();
        assert!((metric_m3(&pf, &tf).unwrap() - 50.0).abs() < 1e-9);
    }

    #[test]
    fn m2_is_local_to_the_band() {
        let g = 12;
        let truth = truth_field(g);
        let sdf = sphere_sdf(g);
        let tf = postprocess(&truth, &sdf).unwrap();
        // Corrupt predictions far from the band (SDF > 0.2 at centers).
        let centers = element_center_values(sdf.grid());
        let mut pf = tf.clone();
        for (lin, &s) in centers.iter().enumerate() {
            if s > BOUNDARY_LAYER_WIDTH + 0.05 || s < -0.05 {
                for c in 0..3 {
                    pf.values[c][lin] += 9.0;
                }
            }
        }
        assert_eq!(metric_m2(&pf, &tf, &sdf).unwrap(), 100.0);
        assert!(metric_m1(&pf, &tf).unwrap() < 100.0);
    }

    #[test]
    fn m2_band_matches_brute_force_count() {
        let g = 32;
        let sdf = sphere_sdf(g);
        let centers = element_center_values(sdf.grid());
        let band_count = centers
            .iter()
            .filter(|&&s| (0.0..=BOUNDARY_LAYER_WIDTH).contains(&s))
            .count();
        // Brute force: recompute centroid SDF per element from corners.
        let e = g - 1;
        let mut brute = 0usize;
        for ex in 0..e {
            for ey in 0..e {
                for ez in 0..e {
                    let mut acc = 0.0;
                    for c in 0..8 {
                        let (dx, dy, dz) = ((c >> 2) & 1, (c >> 1) & 1, c & 1);
                        acc += sdf.grid().at(ex + dx, ey + dy, ez + dz);
                    }
                    let s = acc / 8.0;
                    if (0.0..=BOUNDARY_LAYER_WIDTH).contains(&s) {
                        brute += 1;
                    }
                }
            }
        }
        assert_eq!(band_count, brute);
        assert!(band_count > 0);
    }

    #[test]
    fn m3_excludes_zero_norm_components() {
        let g = 6;
        // Truth with dw/dz identically zero.
        let truth = NodalField::from_fn(g, |p| [p[1], p[0] * p[2], 0.0]);
        let sdf = SdfField::new(VoxelGrid::from_fn(g, |_| 1.0));
        let tf = postprocess(&truth, &sdf).unwrap();
        let pf = postprocess(&scale_field(&truth, 1.2), &sdf).unwrap();
        // Nonzero components: du/dy, dv/dx, dv/dz; each at rel error 0.2.
        assert!((metric_m3(&pf, &tf).unwrap() - 80.0).abs() < 1e-9);
    }

    #[test]
    fn corruption_inside_geometry_leaves_metrics_bit_identical() {
        let g = 10;
        let truth = truth_field(g);
        let sdf = sphere_sdf(g);
        let tf = postprocess(&truth, &sdf).unwrap();
        let mut pf = postprocess(&scale_field(&truth, 1.05), &sdf).unwrap();
        let before = (
            metric_m1(&pf, &tf).unwrap(),
            metric_m2(&pf, &tf, &sdf).unwrap(),
            metric_m3(&pf, &tf).unwrap(),
        );
        let centers = element_center_values(sdf.grid());
        let mut touched = 0;
        for (lin, &s) in centers.iter().enumerate() {
            if s < 0.0 {
                touched += 1;
                for c in 0..3 {
                    pf.values[c][lin] = 1e6;
                    for a in 0..3 {
                        pf.gradients[c][a][lin] = -1e6;
                    }
                }
            }
        }
        assert!(touched > 0);
        let after = (
            metric_m1(&pf, &tf).unwrap(),
            metric_m2(&pf, &tf, &sdf).unwrap(),
            metric_m3(&pf, &tf).unwrap(),
        );
        assert_eq!(before, after);
    }

    #[test]
    fn noise_monotonically_degrades_m1() {
        use rand::{Rng, SeedableRng};
        let g = 8;
        let truth = truth_field(g);
        let sdf = sphere_sdf(g);
        let tf = postprocess(&truth, &sdf).unwrap();
        let mut degradations = 0;
        for seed in 0..20u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut scores = Vec::new();
            for amplitude in [0.01, 0.1, 0.5] {
                let mut pf = tf.clone();
                for c in 0..3 {
                    for v in pf.values[c].iter_mut() {
                        *v += rng.gen_range(-amplitude..amplitude);
                    }
                }
                scores.push(metric_m1(&pf, &tf).unwrap());
            }
            if scores[0] > scores[1] && scores[1] > scores[2] {
                degradations += 1;
            }
        }
        assert!(degradations >= 18, "only {degradations}/20 monotone");
    }

    #[test]
    fn m4_equals_continuity_total_bit_for_bit() {
        let field = truth_field(9);
        assert_eq!(metric_m4(&field), continuity_residual(&field).total);
    }

    #[test]
    fn unified_score_cases() {
        let w = UnifiedWeights::default();
        let perfect = unified_score([100.0, 100.0, 100.0, 0.0], &w).unwrap();
        assert!((perfect - 100.0).abs() < 1e-9);
        let even = unified_score([60.0, 60.0, 60.0, 0.0], &w).unwrap();
        assert!((even - 60.0).abs() < 1e-9);
        let published = unified_score([94.22, 84.86, 81.72, 3.75e-3], &w).unwrap();
        assert!((published - 86.558).abs() < 1e-3, "{published}");
        assert!(unified_score(
            [1.0, 1.0, 1.0, 0.0],
            &UnifiedWeights {
                w1: -0.5,
                w2: 1.0,
                w3: 0.5,
                m4_penalty: 0.0
            }
        )
        .is_err());
    }

    #[test]
    fn csv_has_one_row_per_sample_plus_aggregate() {
        let report = MetricsReport {
            provenance: Provenance {
                model: "deeponet".into(),
                loss: "L1".into(),
                split: "random".into(),
            },
            rows: (0..3)
                .map(|i| MetricsRow {
                    sample: i,
                    reynolds: 100.0 * (i + 1) as f64,
                    m: [90.0, 80.0, 70.0, 1e-3],
                    unified: 79.9,
                })
                .collect(),
        };
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 1 + 3 + 1);
        assert!(csv.lines().last().unwrap().starts_with("mean,"));
    }

    #[test]
    fn table_layout_mirrors_published_structure() {
        let entries = vec![
            TableEntry {
                loss: "L1".into(),
                model: "geometric".into(),
                split: "random".into(),
                m: [91.31, 81.52, 56.31, 3.22e-3],
            },
            TableEntry {
                loss: "L1".into(),
                model: "deeponet".into(),
                split: "random".into(),
                m: [83.15, 55.03, 32.83, 3.33e-3],
            },
            TableEntry {
                loss: "L1".into(),
                model: "geometric".into(),
                split: "extrapolatory".into(),
                m: [67.47, 43.56, 15.30, 3.78e-3],
            },
        ];
        let table = format_table(&entries);
        let lines: Vec<&str> = table.lines().collect();
        // Split banner, header, then one row per (loss, model).
        assert!(lines[0].contains("random"));
        let rand_pos = lines[0].find("random").unwrap();
        let extra_pos = lines[0].find("extrapolatory").unwrap();
        assert!(rand_pos < extra_pos, "random split column comes first");
        assert_eq!(lines[1].matches("M1").count(), 2);
        assert!(lines[1].find("M1").unwrap() < lines[1].find("M2").unwrap());
        assert!(lines[1].find("M3").unwrap() < lines[1].find("M4").unwrap());
        // Geometric row precedes deeponet within the loss group.
        let geo_line = lines.iter().position(|l| l.contains("geometric")).unwrap();
        let depo_line = lines.iter().position(|l| l.contains("deeponet")).unwrap();
        assert!(geo_line < depo_line);
        assert!(lines[geo_line].contains("91.31"));
        // Missing cells are dashes.
        assert!(lines[depo_line].contains('-'));
    }
}
