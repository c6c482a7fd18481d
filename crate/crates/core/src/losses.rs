//! The derivative-informed training losses L1-L4.
//!
//! All four are evaluated on element-center quantities restricted to the
//! fluid mask (centroid SDF > 0) and normalized by the fluid element count
//! N_out. L1 penalizes weighted squared velocity errors; L2 adds the nine
//! gradient components scaled by the mesh size h; L3 keeps only the
//! gradient term and adds unnormalized nodal boundary-face penalties; L4
//! adds the h-scaled squared divergence of the prediction.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fem::{CenterStencils, ElementField, NodalField};

/// The published loss-weight table plus the mesh size.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda_velocity: [f64; 3],
    /// `lambda_gradient[i][j]` weights the error in `d u^i / d x_j`.
    pub lambda_gradient: [[f64; 3]; 3],
    pub lambda_boundary: f64,
    pub lambda_solenoidality: f64,
    /// Mesh size; scales the gradient and solenoidality terms.
    pub h: f64,
    /// Off by default: the boundary sums are unnormalized as published.
    /// On, each axis pair is averaged over its 2 G^2 nodes instead.
    pub normalize_boundary: bool,
}

impl LossWeights {
    pub fn paper(h: f64) -> Self {
        LossWeights {
            lambda_velocity: [1.0, 3.0, 150.0],
            lambda_gradient: [
                [15.0, 1.0, 30.0],
                [50.0, 30.0, 5.0],
                [600.0, 750.0, 600.0],
            ],
            lambda_boundary: 5.0,
            lambda_solenoidality: 10.0,
            h,
            normalize_boundary: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut all = vec![
            self.lambda_boundary,
            self.lambda_solenoidality,
            self.h,
        ];
        all.extend_from_slice(&self.lambda_velocity);
        for row in &self.lambda_gradient {
            all.extend_from_slice(row);
        }
        if all.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Config(
                "loss weights and mesh size must all be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossId {
    L1,
    L2,
    L3,
    L4,
}

impl LossId {
    pub const ALL: [LossId; 4] = [LossId::L1, LossId::L2, LossId::L3, LossId::L4];

    /// Whether the loss reads the nodal boundary faces.
    pub fn uses_boundary(&self) -> bool {
        matches!(self, LossId::L3 | LossId::L4)
    }
}

impl std::str::FromStr for LossId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L1" | "l1" => Ok(LossId::L1),
            "L2" | "l2" => Ok(LossId::L2),
            "L3" | "l3" => Ok(LossId::L3),
            "L4" | "l4" => Ok(LossId::L4),
            other => Err(Error::Config(format!(
                "unknown loss '{other}' (valid: L1, L2, L3, L4)"
            ))),
        }
    }
}

impl std::fmt::Display for LossId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossId::L1 => "L1",
            LossId::L2 => "L2",
            LossId::L3 => "L3",
            LossId::L4 => "L4",
        })
    }
}

/// Nodal index sets of the six outer faces; each face holds exactly G^2
/// nodes (edges and corners belong to every face touching them).
#[derive(Debug, Clone)]
pub struct BoundarySets {
    pub resolution: usize,
    /// `faces[axis][0]` is the min face, `faces[axis][1]` the max face.
    pub faces: [[Arc<Vec<usize>>; 2]; 3],
}

impl BoundarySets {
    pub fn new(g: usize) -> Self {
        let index = |ix: usize, iy: usize, iz: usize| (ix * g + iy) * g + iz;
        let face = |axis: usize, fixed: usize| -> Arc<Vec<usize>> {
            let mut idx = Vec::with_capacity(g * g);
            for a in 0..g {
                for b in 0..g {
                    idx.push(match axis {
                        0 => index(fixed, a, b),
                        1 => index(a, fixed, b),
                        _ => index(a, b, fixed),
                    });
                }
            }
            Arc::new(idx)
        };
        BoundarySets {
            resolution: g,
            faces: std::array::from_fn(|axis| [face(axis, 0), face(axis, g - 1)]),
        }
    }
}

/// Predicted element-center quantities (tape variables) paired with their
/// ground-truth counterparts and the fluid mask.
pub struct MaskedCenters {
    pub n_out: usize,
    pub mask: Vec<bool>,
    pub pred_values: [Var; 3],
    pub pred_gradients: [[Var; 3]; 3],
    pub true_values: [Arc<Vec<f64>>; 3],
    pub true_gradients: [[Arc<Vec<f64>>; 3]; 3],
}

impl MaskedCenters {
    /// Applies the centroid stencils to the nodal prediction variables and
    /// pairs them with the postprocessed truth.
    pub fn from_nodal(
        tape: &mut Tape,
        nodal_pred: [Var; 3],
        stencils: &CenterStencils,
        truth: &ElementField,
    ) -> Result<Self> {
        let n_out = truth.fluid_count();
        if n_out == 0 {
            return Err(Error::Degenerate(
                "no fluid elements (centroid SDF > 0) in this sample".into(),
            ));
        }
        let mut pred_values = [nodal_pred[0]; 3];
        let mut pred_gradients = [[nodal_pred[0]; 3]; 3];
        for c in 0..3 {
            pred_values[c] = tape.stencil(nodal_pred[c], stencils.value.clone())?;
            for a in 0..3 {
                pred_gradients[c][a] = tape.stencil(nodal_pred[c], stencils.gradient[a].clone())?;
            }
        }
        Ok(MaskedCenters {
            n_out,
            mask: truth.mask.clone(),
            pred_values,
            pred_gradients,
            true_values: std::array::from_fn(|c| Arc::new(truth.values[c].clone())),
            true_gradients: std::array::from_fn(|c| {
                std::array::from_fn(|a| Arc::new(truth.gradients[c][a].clone()))
            }),
        })
    }

    fn masked_weights(&self, coefficient: f64) -> Arc<Vec<f64>> {
        Arc::new(
            self.mask
                .iter()
                .map(|&m| if m { coefficient } else { 0.0 })
                .collect(),
        )
    }
}

/// Velocity term of L1: `(1/N_out) sum_f sum_k lambda_k (u_k - u_k_true)^2`.
pub fn loss_l1(tape: &mut Tape, mc: &MaskedCenters, w: &LossWeights) -> Result<Var> {
    let mut total = None;
    for comp in 0..3 {
        let weights = mc.masked_weights(w.lambda_velocity[comp] / mc.n_out as f64);
        let term = tape.weighted_sse(
            mc.pred_values[comp],
            mc.true_values[comp].clone(),
            weights,
        )?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    Ok(total.unwrap())
}

/// Gradient term shared by L2, L3 and L4:
/// `(1/N_out) sum_f h sum_{i,j} lambda_ij (d_j u^i - d_j u^i_true)^2`.
pub fn gradient_term(tape: &mut Tape, mc: &MaskedCenters, w: &LossWeights) -> Result<Var> {
    let mut total = None;
    for comp in 0..3 {
        for axis in 0..3 {
            let coeff = w.h * w.lambda_gradient[comp][axis] / mc.n_out as f64;
            let weights = mc.masked_weights(coeff);
            let term = tape.weighted_sse(
                mc.pred_gradients[comp][axis],
                mc.true_gradients[comp][axis].clone(),
                weights,
            )?;
            total = Some(match total {
                None => term,
                Some(t) => tape.add(t, term)?,
            });
        }
    }
    Ok(total.unwrap())
}

pub fn loss_l2(tape: &mut Tape, mc: &MaskedCenters, w: &LossWeights) -> Result<Var> {
    let l1 = loss_l1(tape, mc, w)?;
    let d = gradient_term(tape, mc, w)?;
    tape.add(l1, d)
}

/// Boundary-face penalty: x faces constrain u, y faces v, z faces w.
/// Unnormalized sums as published unless `normalize_boundary` is set.
pub fn boundary_term(
    tape: &mut Tape,
    nodal_pred: [Var; 3],
    nodal_true: &NodalField,
    bs: &BoundarySets,
    w: &LossWeights,
) -> Result<Var> {
    let g = bs.resolution;
    if nodal_true.resolution() != g {
        return Err(Error::Config(format!(
            "boundary sets built for G={g} but the field has G={}",
            nodal_true.resolution()
        )));
    }
    let mut total = None;
    for axis in 0..3 {
        let scale = if w.normalize_boundary {
            w.lambda_boundary / (2 * g * g) as f64
        } else {
            w.lambda_boundary
        };
        for face in 0..2 {
            let idx = bs.faces[axis][face].clone();
            let target: Vec<f64> = idx
                .iter()
                .map(|&i| nodal_true.component(axis).values()[i])
                .collect();
            let gathered = tape.gather(nodal_pred[axis], idx.clone())?;
            let weights = Arc::new(vec![scale; idx.len()]);
            let term = tape.weighted_sse(gathered, Arc::new(target), weights)?;
            total = Some(match total {
                None => term,
                Some(t) => tape.add(t, term)?,
            });
        }
    }
    Ok(total.unwrap())
}

/// Solenoidality penalty on the predicted divergence:
/// `(1/N_out) lambda_sol sum_f h (du/dx + dv/dy + dw/dz)^2`.
pub fn solenoidality_term(tape: &mut Tape, mc: &MaskedCenters, w: &LossWeights) -> Result<Var> {
    let dxy = tape.add(mc.pred_gradients[0][0], mc.pred_gradients[1][1])?;
    let div = tape.add(dxy, mc.pred_gradients[2][2])?;
    let n = mc.mask.len();
    let weights = mc.masked_weights(w.h * w.lambda_solenoidality / mc.n_out as f64);
    tape.weighted_sse(div, Arc::new(vec![0.0; n]), weights)
}

pub fn loss_l3(
    tape: &mut Tape,
    mc: &MaskedCenters,
    w: &LossWeights,
    bs: &BoundarySets,
    nodal_pred: [Var; 3],
    nodal_true: &NodalField,
) -> Result<Var> {
    let d = gradient_term(tape, mc, w)?;
    let b = boundary_term(tape, nodal_pred, nodal_true, bs, w)?;
    tape.add(d, b)
}

pub fn loss_l4(
    tape: &mut Tape,
    mc: &MaskedCenters,
    w: &LossWeights,
    bs: &BoundarySets,
    nodal_pred: [Var; 3],
    nodal_true: &NodalField,
) -> Result<Var> {
    let l3 = loss_l3(tape, mc, w, bs, nodal_pred, nodal_true)?;
    let s = solenoidality_term(tape, mc, w)?;
    tape.add(l3, s)
}

/// Dispatch on the loss id.
pub fn build_loss(
    tape: &mut Tape,
    id: LossId,
    mc: &MaskedCenters,
    w: &LossWeights,
    bs: &BoundarySets,
    nodal_pred: [Var; 3],
    nodal_true: &NodalField,
) -> Result<Var> {
    match id {
        LossId::L1 => loss_l1(tape, mc, w),
        LossId::L2 => loss_l2(tape, mc, w),
        LossId::L3 => loss_l3(tape, mc, w, bs, nodal_pred, nodal_true),
        LossId::L4 => loss_l4(tape, mc, w, bs, nodal_pred, nodal_true),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::postprocess;
    use crate::voxel::{SdfField, VoxelGrid};

    fn constant_sdf(g: usize, v: f64) -> SdfField {
        SdfField::new(VoxelGrid::from_fn(g, |_| v))
    }

    /// Builds MaskedCenters for a prediction/truth pair of nodal fields.
    fn centers_for(
        tape: &mut Tape,
        pred: &NodalField,
        truth: &NodalField,
        sdf: &SdfField,
    ) -> (MaskedCenters, [Var; 3]) {
        let g = pred.resolution();
        let stencils = CenterStencils::new(g, pred.spacing());
        let nodal: [Var; 3] = std::array::from_fn(|c| {
            tape.leaf(
                &[g * g * g],
                pred.component(c).values().to_vec(),
                true,
            )
            .unwrap()
        });
        let truth_field = postprocess(truth, sdf).unwrap();
        let mc = MaskedCenters::from_nodal(tape, nodal, &stencils, &truth_field).unwrap();
        (mc, nodal)
    }

    fn eval_all(pred: &NodalField, truth: &NodalField, sdf: &SdfField, h: f64) -> [f64; 4] {
        let mut tape = Tape::new();
        let (mc, nodal) = centers_for(&mut tape, pred, truth, sdf);
        let w = LossWeights::paper(h);
        let bs = BoundarySets::new(pred.resolution());
        LossId::ALL.map(|id| {
            let var = build_loss(&mut tape, id, &mc, &w, &bs, nodal, truth).unwrap();
            tape.scalar(var).unwrap()
        })
    }

    #[test]
    fn perfect_prediction_gives_zero_l1_l2_l3() {
        let field = NodalField::from_fn(4, |p| [p[0] * p[1], p[2], p[1]]);
        let sdf = constant_sdf(4, 1.0);
        let losses = eval_all(&field, &field, &sdf, field.spacing());
        assert_eq!(losses[0], 0.0);
        assert_eq!(losses[1], 0.0);
        assert_eq!(losses[2], 0.0);
        // L4 keeps the solenoidality penalty of the (imperfectly
        // divergence-free) prediction itself.
        assert!(losses[3] >= 0.0);
    }

    #[test]
    fn single_element_velocity_errors() {
        // One element (G=2), truth zero, prediction with constant
        // component errors; centroid values equal the constants.
        let sdf = constant_sdf(2, 1.0);
        let truth = NodalField::from_fn(2, |_| [0.0; 3]);

        let pred = NodalField::from_fn(2, |_| [1.0, 0.0, 0.0]);
        let l = eval_all(&pred, &truth, &sdf, 1.0);
        assert!((l[0] - 1.0).abs() < 1e-13, "lambda_u alone: {}", l[0]);

        let pred = NodalField::from_fn(2, |_| [1.0, 1.0, 1.0]);
        let l = eval_all(&pred, &truth, &sdf, 1.0);
        assert!((l[0] - 154.0).abs() < 1e-12, "1 + 3 + 150: {}", l[0]);
    }

    #[test]
    fn gradient_error_term_hand_value() {
        // Truth zero; prediction u = y so only du/dy = 1 errs; h = 0.5.
        // L2 - L1 = h * lambda_uy * 1 = 0.5.
        let g = 2;
        let truth = NodalField::from_fn(g, |_| [0.0; 3]);
        let pred = NodalField::from_fn(g, |p| [p[1], 0.0, 0.0]);
        let sdf = constant_sdf(g, 1.0);
        let mut tape = Tape::new();
        let (mc, _) = centers_for(&mut tape, &pred, &truth, &sdf);
        let w = LossWeights::paper(0.5);
        let l1 = loss_l1(&mut tape, &mc, &w).unwrap();
        let l2 = loss_l2(&mut tape, &mc, &w).unwrap();
        let diff = tape.scalar(l2).unwrap() - tape.scalar(l1).unwrap();
        assert!((diff - 0.5).abs() < 1e-13, "{diff}");
    }

    #[test]
    fn zero_gradient_error_means_l2_equals_l1() {
        // Prediction differs from truth by a constant: gradients agree.
        let g = 3;
        let truth = NodalField::from_fn(g, |p| [p[0], p[1] * p[2], 0.5 * p[2]]);
        let pred = NodalField::from_fn(g, |p| [p[0] + 0.3, p[1] * p[2] + 0.3, 0.5 * p[2] + 0.3]);
        let sdf = constant_sdf(g, 1.0);
        let l = eval_all(&pred, &truth, &sdf, 0.25);
        assert_eq!(l[1], l[0], "constant offsets leave gradients exact");
        assert!(l[0] > 0.0);
    }

    #[test]
    fn constant_shift_hits_boundary_term() {
        // G=4, truth zero, prediction u = 1 everywhere: gradients exact,
        // interior velocity ignored by L3, but both x faces penalize u:
        // 5 * 1^2 * 2*16 = 160.
        let g = 4;
        let truth = NodalField::from_fn(g, |_| [0.0; 3]);
        let pred = NodalField::from_fn(g, |_| [1.0, 0.0, 0.0]);
        let sdf = constant_sdf(g, 1.0);
        let l = eval_all(&pred, &truth, &sdf, truth.spacing());
        assert!((l[2] - 160.0).abs() < 1e-12, "L3 = {}", l[2]);
        assert!(l[2] > 0.0, "constant shift must not yield zero L3");
    }

    #[test]
    fn solenoidality_hand_value() {
        // Single element, pred = truth = (2x, 0, 0): divergence 2, h=0.5,
        // N_out=1 -> L4 - L3 = 10 * 0.5 * 4 = 20. Also shows that a
        // perfect prediction of non-solenoidal truth keeps L4 > L3.
        let g = 2;
        let field = NodalField::from_fn(g, |p| [2.0 * p[0], 0.0, 0.0]);
        let sdf = constant_sdf(g, 1.0);
        let mut tape = Tape::new();
        let (mc, nodal) = centers_for(&mut tape, &field, &field, &sdf);
        let w = LossWeights::paper(0.5);
        let bs = BoundarySets::new(g);
        let l3 = loss_l3(&mut tape, &mc, &w, &bs, nodal, &field).unwrap();
        let l4 = loss_l4(&mut tape, &mc, &w, &bs, nodal, &field).unwrap();
        let diff = tape.scalar(l4).unwrap() - tape.scalar(l3).unwrap();
        assert!((diff - 20.0).abs() < 1e-12, "{diff}");
    }

    #[test]
    fn boundary_sets_cover_faces_exactly() {
        let g = 5;
        let bs = BoundarySets::new(g);
        let mut seen = std::collections::HashSet::new();
        for axis in 0..3 {
            for face in 0..2 {
                assert_eq!(bs.faces[axis][face].len(), g * g);
                seen.extend(bs.faces[axis][face].iter().copied());
            }
        }
        // The union is every node minus the interior.
        assert_eq!(seen.len(), g * g * g - (g - 2) * (g - 2) * (g - 2));
    }

    #[test]
    fn degenerate_all_solid_sample_rejected() {
        let g = 3;
        let field = NodalField::from_fn(g, |_| [0.0; 3]);
        let sdf = constant_sdf(g, -1.0);
        let truth_field = postprocess(&field, &sdf).unwrap();
        let mut tape = Tape::new();
        let stencils = CenterStencils::new(g, field.spacing());
        let nodal: [Var; 3] = std::array::from_fn(|c| {
            tape.leaf(&[g * g * g], field.component(c).values().to_vec(), true)
                .unwrap()
        });
        assert!(matches!(
            MaskedCenters::from_nodal(&mut tape, nodal, &stencils, &truth_field),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn masked_elements_do_not_contribute() {
        // Perturbing predictions only where the mask is off leaves L1, L2
        // and the gradient/solenoidality pieces unchanged.
        use rand::{Rng, SeedableRng};
        let g = 5;
        let rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let truth = NodalField::from_fn(g, |p| [p[0] * p[1], p[2], p[1] + p[2]]);
        // Solid ball in the middle.
        let sdf = SdfField::new(VoxelGrid::from_fn(g, |p| {
            ((p[0] - 1.0).powi(2) + (p[1] - 1.0).powi(2) + (p[2] - 1.0).powi(2)).sqrt() - 0.6
        }));
        let truth_field = postprocess(&truth, &sdf).unwrap();
        assert!(truth_field.fluid_count() < truth_field.element_count());

        let eval = |corrupt: bool| -> [f64; 3] {
            let mut tape = Tape::new();
            let n_elem = truth_field.element_count();
            // Center-level leaves rather than stencils, so masked entries
            // can be perturbed directly.
            let mut values: Vec<Vec<f64>> =
                (0..3).map(|c| truth_field.values[c].clone()).collect();
            let mut grads: Vec<Vec<Vec<f64>>> = (0..3)
                .map(|c| (0..3).map(|a| truth_field.gradients[c][a].clone()).collect())
                .collect();
            if corrupt {
                for lin in 0..n_elem {
                    if !truth_field.mask[lin] {
                        for c in 0..3 {
                            values[c][lin] += rng.clone().gen_range(-9.0..9.0);
                            for a in 0..3 {
                                grads[c][a][lin] -= 17.0;
                            }
                        }
                    }
                }
            }
            let pred_values: [Var; 3] = std::array::from_fn(|c| {
                tape.leaf(&[n_elem], values[c].clone(), false).unwrap()
            });
            let pred_gradients: [[Var; 3]; 3] = std::array::from_fn(|c| {
                std::array::from_fn(|a| tape.leaf(&[n_elem], grads[c][a].clone(), false).unwrap())
            });
            let mc = MaskedCenters {
                n_out: truth_field.fluid_count(),
                mask: truth_field.mask.clone(),
                pred_values,
                pred_gradients,
                true_values: std::array::from_fn(|c| Arc::new(truth_field.values[c].clone())),
                true_gradients: std::array::from_fn(|c| {
                    std::array::from_fn(|a| Arc::new(truth_field.gradients[c][a].clone()))
                }),
            };
            let w = LossWeights::paper(truth.spacing());
            let l1 = loss_l1(&mut tape, &mc, &w).unwrap();
            let d = gradient_term(&mut tape, &mc, &w).unwrap();
            let s = solenoidality_term(&mut tape, &mc, &w).unwrap();
            [
                tape.scalar(l1).unwrap(),
                tape.scalar(d).unwrap(),
                tape.scalar(s).unwrap(),
            ]
        };
        assert_eq!(eval(false), eval(true));
    }

    #[test]
    fn decomposition_matches_independent_accumulation() {
        use rand::{Rng, SeedableRng};
        let g = 4;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut randfield = |scale: f64| {
            let comp = |rng: &mut rand_chacha::ChaCha8Rng| {
                VoxelGrid::new(
                    g,
                    (0..g * g * g).map(|_| rng.gen_range(-scale..scale)).collect(),
                )
                .unwrap()
            };
            NodalField::new(comp(&mut rng), comp(&mut rng), comp(&mut rng)).unwrap()
        };
        let truth = randfield(1.0);
        let pred = randfield(1.0);
        let sdf = SdfField::new(VoxelGrid::from_fn(g, |p| p[0] - 0.9));
        let h = 2.0 / 3.0;
        let losses = eval_all(&pred, &truth, &sdf, h);

        // Independent accumulation with plain loops over postprocessed
        // fields.
        let pf = postprocess(&pred, &sdf).unwrap();
        let tf = postprocess(&truth, &sdf).unwrap();
        let w = LossWeights::paper(h);
        let n_out = tf.fluid_count() as f64;
        let mut l1 = 0.0;
        let mut d = 0.0;
        let mut s = 0.0;
        for lin in 0..tf.element_count() {
            if !tf.mask[lin] {
                continue;
            }
            for c in 0..3 {
                l1 += w.lambda_velocity[c] * (pf.values[c][lin] - tf.values[c][lin]).powi(2);
                for a in 0..3 {
                    d += h
                        * w.lambda_gradient[c][a]
                        * (pf.gradients[c][a][lin] - tf.gradients[c][a][lin]).powi(2);
                }
            }
            let div = pf.gradients[0][0][lin] + pf.gradients[1][1][lin] + pf.gradients[2][2][lin];
            s += h * w.lambda_solenoidality * div * div;
        }
        l1 /= n_out;
        d /= n_out;
        s /= n_out;
        let mut b = 0.0;
        let bs = BoundarySets::new(g);
        for axis in 0..3 {
            for face in 0..2 {
                for &i in bs.faces[axis][face].iter() {
                    let e = pred.component(axis).values()[i] - truth.component(axis).values()[i];
                    b += w.lambda_boundary * e * e;
                }
            }
        }
        assert!((losses[0] - l1).abs() < 1e-12);
        assert!((losses[1] - (l1 + d)).abs() < 1e-12);
        assert!((losses[2] - (d + b)).abs() < 1e-11);
        assert!((losses[3] - (d + b + s)).abs() < 1e-11);
    }

    #[test]
    fn h_doubling_scales_derivative_and_solenoidality_terms() {
        use rand::{Rng, SeedableRng};
        let g = 4;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let comp = |rng: &mut rand_chacha::ChaCha8Rng| {
            VoxelGrid::new(g, (0..g * g * g).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let truth = NodalField::new(comp(&mut rng), comp(&mut rng), comp(&mut rng)).unwrap();
        let pred = NodalField::new(comp(&mut rng), comp(&mut rng), comp(&mut rng)).unwrap();
        let sdf = constant_sdf(g, 1.0);

        let mut tape = Tape::new();
        let (mc, nodal) = centers_for(&mut tape, &pred, &truth, &sdf);
        let bs = BoundarySets::new(g);
        let eval = |tape: &mut Tape, h: f64| -> (f64, f64, f64, f64) {
            let w = LossWeights::paper(h);
            let l1 = loss_l1(tape, &mc, &w).unwrap();
            let d = gradient_term(tape, &mc, &w).unwrap();
            let s = solenoidality_term(tape, &mc, &w).unwrap();
            let b = boundary_term(tape, nodal, &truth, &bs, &w).unwrap();
            (
                tape.scalar(l1).unwrap(),
                tape.scalar(d).unwrap(),
                tape.scalar(s).unwrap(),
                tape.scalar(b).unwrap(),
            )
        };
        let (l1a, da, sa, ba) = eval(&mut tape, 0.4);
        let (l1b, db, sb, bb) = eval(&mut tape, 0.8);
        assert_eq!(l1a, l1b);
        assert_eq!(ba, bb);
        assert!((db - 2.0 * da).abs() < 1e-13);
        assert!((sb - 2.0 * sa).abs() < 1e-13);
    }

    #[test]
    fn losses_differentiable_wrt_nodal_predictions() {
        use crate::autodiff::grad_check;
        use rand::{Rng, SeedableRng};
        // 3^3-node micro problem: finite differences against the tape
        // gradient of each loss w.r.t. the nodal prediction.
        let g = 3;
        let n = g * g * g;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let truth = NodalField::from_fn(g, |p| [p[0] * p[1], p[2] * p[2], p[1]]);
        let sdf = SdfField::new(VoxelGrid::from_fn(g, |p| p[0] - 0.4));
        let truth_field = postprocess(&truth, &sdf).unwrap();
        let stencils = CenterStencils::new(g, truth.spacing());
        let bs = BoundarySets::new(g);
        let pred0: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();

        for id in LossId::ALL {
            let err = grad_check(
                |tape, vars| {
                    let nodal = [vars[0], vars[1], vars[2]];
                    let mc = MaskedCenters::from_nodal(tape, nodal, &stencils, &truth_field)?;
                    let w = LossWeights::paper(truth.spacing());
                    build_loss(tape, id, &mc, &w, &bs, nodal, &truth)
                },
                &[
                    (vec![n], pred0[0].clone()),
                    (vec![n], pred0[1].clone()),
                    (vec![n], pred0[2].clone()),
                ],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "{id}: max relative error {err}");
        }
    }

    #[test]
    fn loss_id_parsing() {
        assert_eq!("L3".parse::<LossId>().unwrap(), LossId::L3);
        assert!("L5".parse::<LossId>().is_err());
        let msg = "L5".parse::<LossId>().unwrap_err().to_string();
        assert!(msg.contains("L1") && msg.contains("L4"));
    }
}
