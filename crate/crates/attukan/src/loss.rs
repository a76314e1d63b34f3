//! Segmentation losses: binary cross-entropy, jaccard, dice, the pixel-wise
//! contrastive loss over augmented views, and their weighted hybrid.
//!
//! The contrastive loss treats each spatial location of a feature map as one
//! embedding vector. For every view i with positive partner j and location s
//! it scores the cosine similarity of the partner pair against all other
//! views at the same location under a temperature-scaled softmax. In
//! label-masked mode a location only contributes when the downsampled labels
//! of i and j agree there; view-only mode uses every location.

use crate::error::{Error, Result};
use crate::tape::{GradTape, LpclMode, Var};
use crate::tensor::Tensor;

const BCE_CLAMP: f64 = 1e-7;
const SMOOTH: f64 = 1e-6;
const NORM_EPS: f64 = 1e-12;

/// Weighting coefficients of the hybrid objective.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.8,
            lambda2: 0.2,
            lambda3: 1.0,
            lambda4: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda3 < 0.0 || self.lambda4 < 0.0 {
            return Err(Error::invalid("loss weights must be nonnegative"));
        }
        Ok(())
    }
}

/// Inputs of one contrastive evaluation: per-view bottleneck features,
/// downsampled binary labels, the positive-partner index per view, and the
/// softmax temperature.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    /// `[V, D, S, S]` feature maps of the V augmented views.
    pub features: Tensor,
    /// `[V, S, S]` binary labels at the feature resolution.
    pub labels_ds: Tensor,
    /// Partner view index per view; `None` removes a view from the anchor sum.
    pub view_pairing: Vec<Option<usize>>,
    pub tau: f64,
}

// ---- binary cross-entropy -------------------------------------------------

pub(crate) fn bce_forward(pred: &Tensor, target: &Tensor) -> (f64, bool) {
    let n = pred.numel() as f64;
    let mut acc = 0.0;
    let mut clamped = false;
    for (p, y) in pred.data().iter().zip(target.data()) {
        let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        clamped |= pc != *p;
        acc -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
    }
    (acc / n, clamped)
}

pub(crate) fn bce_backward(pred: &Tensor, target: &Tensor, g: f64) -> Vec<f64> {
    let n = pred.numel() as f64;
    pred.data()
        .iter()
        .zip(target.data())
        .map(|(p, y)| {
            if *p <= BCE_CLAMP || *p >= 1.0 - BCE_CLAMP {
                0.0
            } else {
                g * (p - y) / (p * (1.0 - p)) / n
            }
        })
        .collect()
}

// ---- overlap losses ---------------------------------------------------------

pub(crate) fn dice_forward(pred: &Tensor, target: &Tensor) -> f64 {
    let mut inter = 0.0;
    let mut total = 0.0;
    for (p, y) in pred.data().iter().zip(target.data()) {
        inter += p * y;
        total += p + y;
    }
    1.0 - (2.0 * inter + SMOOTH) / (total + SMOOTH)
}

pub(crate) fn dice_backward(pred: &Tensor, target: &Tensor, g: f64) -> Vec<f64> {
    let mut inter = 0.0;
    let mut total = 0.0;
    for (p, y) in pred.data().iter().zip(target.data()) {
        inter += p * y;
        total += p + y;
    }
    let denom = total + SMOOTH;
    let num = 2.0 * inter + SMOOTH;
    target
        .data()
        .iter()
        .map(|y| g * (num - 2.0 * y * denom) / (denom * denom))
        .collect()
}

pub(crate) fn jaccard_forward(pred: &Tensor, target: &Tensor) -> f64 {
    let mut inter = 0.0;
    let mut total = 0.0;
    for (p, y) in pred.data().iter().zip(target.data()) {
        inter += p * y;
        total += p + y;
    }
    let union = total - inter;
    1.0 - (inter + SMOOTH) / (union + SMOOTH)
}

pub(crate) fn jaccard_backward(pred: &Tensor, target: &Tensor, g: f64) -> Vec<f64> {
    let mut inter = 0.0;
    let mut total = 0.0;
    for (p, y) in pred.data().iter().zip(target.data()) {
        inter += p * y;
        total += p + y;
    }
    let union = total - inter;
    let denom = union + SMOOTH;
    let num = inter + SMOOTH;
    target
        .data()
        .iter()
        .map(|y| g * (num * (1.0 - y) - y * denom) / (denom * denom))
        .collect()
}

// ---- pixel-wise contrastive loss ---------------------------------------------

struct NormalizedViews {
    /// Unit feature vectors, layout `[V, D, S2]`.
    unit: Vec<f64>,
    /// Norm of each raw vector, layout `[V, S2]`.
    norm: Vec<f64>,
    v: usize,
    d: usize,
    s2: usize,
}

fn normalize_views(features: &Tensor) -> NormalizedViews {
    let fs = features.shape();
    let (v, d, s2) = (fs[0], fs[1], fs[2] * fs[3]);
    let fd = features.data();
    let mut unit = vec![0.0; fd.len()];
    let mut norm = vec![0.0; v * s2];
    for vi in 0..v {
        for s in 0..s2 {
            let mut sq = 0.0;
            for di in 0..d {
                let x = fd[(vi * d + di) * s2 + s];
                sq += x * x;
            }
            let n = sq.sqrt().max(NORM_EPS);
            norm[vi * s2 + s] = n;
            for di in 0..d {
                let at = (vi * d + di) * s2 + s;
                unit[at] = fd[at] / n;
            }
        }
    }
    NormalizedViews { unit, norm, v, d, s2 }
}

#[inline]
fn unit_dot(nv: &NormalizedViews, a: usize, b: usize, s: usize) -> f64 {
    let (d, s2) = (nv.d, nv.s2);
    let mut acc = 0.0;
    for di in 0..d {
        acc += nv.unit[(a * d + di) * s2 + s] * nv.unit[(b * d + di) * s2 + s];
    }
    acc
}

pub(crate) fn lpcl_forward(
    features: &Tensor,
    labels: &Tensor,
    pairing: &[Option<usize>],
    tau: f64,
    mode: LpclMode,
) -> f64 {
    let nv = normalize_views(features);
    let (v, s2) = (nv.v, nv.s2);
    let ld = labels.data();
    let mut total = 0.0;
    let inv_s2 = 1.0 / s2 as f64;
    let mut logits = vec![0.0; v];
    for i in 0..v {
        let Some(j) = pairing[i] else { continue };
        for s in 0..s2 {
            if mode == LpclMode::LabelMasked && ld[i * s2 + s] != ld[j * s2 + s] {
                continue;
            }
            let mut max = f64::NEG_INFINITY;
            for k in 0..v {
                if k == i {
                    continue;
                }
                let z = unit_dot(&nv, i, k, s) / tau;
                logits[k] = z;
                max = max.max(z);
            }
            let mut denom = 0.0;
            for (k, z) in logits.iter().enumerate() {
                if k == i {
                    continue;
                }
                denom += (z - max).exp();
            }
            let log_softmax = logits[j] - max - denom.ln();
            total -= inv_s2 * log_softmax;
        }
    }
    total
}

pub(crate) fn lpcl_backward(
    features: &Tensor,
    labels: &Tensor,
    pairing: &[Option<usize>],
    tau: f64,
    mode: LpclMode,
    g: f64,
) -> Vec<f64> {
    let nv = normalize_views(features);
    let (v, d, s2) = (nv.v, nv.d, nv.s2);
    let ld = labels.data();
    let inv_s2 = 1.0 / s2 as f64;
    // Gradient with respect to the unit vectors, layout [V, D, S2].
    let mut du = vec![0.0; nv.unit.len()];
    let mut logits = vec![0.0; v];
    for i in 0..v {
        let Some(j) = pairing[i] else { continue };
        for s in 0..s2 {
            if mode == LpclMode::LabelMasked && ld[i * s2 + s] != ld[j * s2 + s] {
                continue;
            }
            let mut max = f64::NEG_INFINITY;
            for k in 0..v {
                if k == i {
                    continue;
                }
                let z = unit_dot(&nv, i, k, s) / tau;
                logits[k] = z;
                max = max.max(z);
            }
            let mut denom = 0.0;
            for (k, z) in logits.iter().enumerate() {
                if k == i {
                    continue;
                }
                denom += (z - max).exp();
            }
            // d(-log_softmax_j)/d z_k = softmax_k - delta_{kj}
            for k in 0..v {
                if k == i {
                    continue;
                }
                let p = (logits[k] - max).exp() / denom;
                let dz = g * inv_s2 * (p - if k == j { 1.0 } else { 0.0 }) / tau;
                if dz == 0.0 {
                    continue;
                }
                // z = <u_i, u_k>: gradient flows to both unit vectors.
                for di in 0..d {
                    let ui = nv.unit[(i * d + di) * s2 + s];
                    let uk = nv.unit[(k * d + di) * s2 + s];
                    du[(i * d + di) * s2 + s] += dz * uk;
                    du[(k * d + di) * s2 + s] += dz * ui;
                }
            }
        }
    }
    // Through the normalization: df = (du - u * <u, du>) / norm.
    let fd = features.data();
    let mut df = vec![0.0; fd.len()];
    for vi in 0..v {
        for s in 0..s2 {
            let n = nv.norm[vi * s2 + s];
            let raw_norm_small = {
                let mut sq = 0.0;
                for di in 0..d {
                    let x = fd[(vi * d + di) * s2 + s];
                    sq += x * x;
                }
                sq.sqrt() < NORM_EPS
            };
            if raw_norm_small {
                for di in 0..d {
                    let at = (vi * d + di) * s2 + s;
                    df[at] = du[at] / n;
                }
                continue;
            }
            let mut dot = 0.0;
            for di in 0..d {
                let at = (vi * d + di) * s2 + s;
                dot += nv.unit[at] * du[at];
            }
            for di in 0..d {
                let at = (vi * d + di) * s2 + s;
                df[at] = (du[at] - nv.unit[at] * dot) / n;
            }
        }
    }
    df
}

// ---- value-level API -----------------------------------------------------------

/// Mean binary cross-entropy with predictions clamped away from 0 and 1.
pub fn bce(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_same_shape(pred, target, "bce")?;
    Ok(bce_forward(pred, target).0)
}

pub fn dice_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_same_shape(pred, target, "dice_loss")?;
    Ok(dice_forward(pred, target))
}

pub fn jaccard_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_same_shape(pred, target, "jaccard_loss")?;
    Ok(jaccard_forward(pred, target))
}

pub fn lpcl(batch: &ContrastiveBatch, mode: LpclMode) -> Result<f64> {
    let mut tape = GradTape::new();
    let f = tape.constant(batch.features.clone());
    let v = tape.lpcl(f, &batch.labels_ds, &batch.view_pairing, batch.tau, mode)?;
    Ok(tape.scalar(v))
}

/// Per-term values of one hybrid-loss evaluation, for logging.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LossBreakdown {
    pub bce: f64,
    pub jaccard: f64,
    pub dice: f64,
    pub lpcl: f64,
    pub total: f64,
}

/// Weighted hybrid objective on the tape. Returns the scalar loss together
/// with its per-term breakdown. A `None` batch (or zero weight) skips the
/// contrastive term.
pub fn hybrid_loss_on_tape(
    tape: &mut GradTape,
    pred: Var,
    target: &Tensor,
    batch: Option<(Var, &Tensor, &[Option<usize>], f64)>,
    mode: LpclMode,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    w.validate()?;
    let bce_v = tape.bce(pred, target)?;
    let jac_v = tape.jaccard_loss(pred, target)?;
    let dice_v = tape.dice_loss(pred, target)?;
    let mut terms = vec![
        (bce_v, w.lambda1),
        (jac_v, w.lambda2),
        (dice_v, w.lambda3),
    ];
    let mut lpcl_val = 0.0;
    if w.lambda4 > 0.0 {
        if let Some((features, labels, pairing, tau)) = batch {
            let l = tape.lpcl(features, labels, pairing, tau, mode)?;
            lpcl_val = tape.scalar(l);
            terms.push((l, w.lambda4));
        }
    }
    let total = tape.weighted_sum(&terms)?;
    let breakdown = LossBreakdown {
        bce: tape.scalar(bce_v),
        jaccard: tape.scalar(jac_v),
        dice: tape.scalar(dice_v),
        lpcl: lpcl_val,
        total: tape.scalar(total),
    };
    Ok((total, breakdown))
}

/// Pure hybrid evaluation for tests and reporting.
pub fn hybrid_loss(
    pred: &Tensor,
    target: &Tensor,
    batch: Option<&ContrastiveBatch>,
    mode: LpclMode,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let mut tape = GradTape::new();
    let p = tape.constant(pred.clone());
    let b = batch.map(|cb| {
        let f = tape.constant(cb.features.clone());
        (f, cb)
    });
    let (_, breakdown) = hybrid_loss_on_tape(
        &mut tape,
        p,
        target,
        b.as_ref()
            .map(|(f, cb)| (*f, &cb.labels_ds, cb.view_pairing.as_slice(), cb.tau)),
        mode,
        w,
    )?;
    Ok(breakdown)
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn bce_known_values() {
        // Prediction equal to the post-clamp target: the loss is the
        // Bernoulli entropy at the clamp value, about 1e-7 * |ln 1e-7|.
        let c = 1e-7f64;
        let clamped = t(vec![4], vec![1.0 - c, c, 1.0 - c, c]);
        let perfect = bce(&clamped, &clamped).unwrap();
        let want = -(c * c.ln() + (1.0 - c) * (1.0 - c).ln());
        assert!((perfect - want).abs() < 1e-12, "{perfect} vs {want}");
        assert!((perfect - 1.6e-6).abs() < 2e-7);

        // Uniform uncertainty gives ln 2.
        let target = t(vec![4], vec![1.0, 0.0, 1.0, 0.0]);
        let half = t(vec![4], vec![0.5; 4]);
        assert!((bce(&half, &target).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);

        // Hand-computed two-pixel case.
        let pred = t(vec![2], vec![0.9, 0.2]);
        let tgt = t(vec![2], vec![1.0, 0.0]);
        let want = -((0.9f64).ln() + (0.8f64).ln()) / 2.0;
        assert!((bce(&pred, &tgt).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.164252).abs() < 1e-6);
    }

    #[test]
    fn dice_and_jaccard_known_values() {
        let pred = t(vec![4], vec![1.0, 1.0, 0.0, 0.0]);
        let tgt = t(vec![4], vec![1.0, 0.0, 0.0, 0.0]);
        assert!((dice_loss(&pred, &tgt).unwrap() - (1.0 - 2.0 / 3.0)).abs() < 1e-6);
        assert!((jaccard_loss(&pred, &tgt).unwrap() - 0.5).abs() < 1e-6);

        // Perfect overlap is exactly zero; disjoint masks reach one.
        assert!(dice_loss(&tgt, &tgt).unwrap().abs() < 1e-5);
        assert!(jaccard_loss(&tgt, &tgt).unwrap().abs() < 1e-5);
        let other = t(vec![4], vec![0.0, 1.0, 1.0, 0.0]);
        assert!((dice_loss(&other, &tgt).unwrap() - 1.0).abs() < 1e-5);
        assert!((jaccard_loss(&other, &tgt).unwrap() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn jaccard_dominates_dice() {
        // In loss form the overlap identity reads J = 2D/(1+D), so J >= D.
        let cases = [
            (vec![1.0, 1.0, 0.0, 0.0], vec![1.0, 0.0, 1.0, 0.0]),
            (vec![1.0, 0.0, 0.0, 0.0], vec![1.0, 1.0, 1.0, 0.0]),
            (vec![1.0, 1.0, 1.0, 1.0], vec![1.0, 1.0, 0.0, 0.0]),
        ];
        for (p, y) in cases {
            let pred = t(vec![4], p);
            let tgt = t(vec![4], y);
            let d = dice_loss(&pred, &tgt).unwrap();
            let j = jaccard_loss(&pred, &tgt).unwrap();
            assert!(j >= d - 1e-9, "jaccard {j} below dice {d}");
            let want_j = 2.0 * d / (1.0 + d);
            assert!((j - want_j).abs() < 1e-5, "identity: {j} vs {want_j}");
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = t(vec![2], vec![0.5, 0.5]);
        let b = t(vec![3], vec![1.0, 0.0, 1.0]);
        assert!(bce(&a, &b).is_err());
        assert!(dice_loss(&a, &b).is_err());
        assert!(jaccard_loss(&a, &b).is_err());
    }

    fn two_view_batch(features: Tensor, labels: Tensor, tau: f64) -> ContrastiveBatch {
        ContrastiveBatch {
            features,
            labels_ds: labels,
            view_pairing: vec![Some(1), Some(0)],
            tau,
        }
    }

    #[test]
    fn lpcl_degenerate_two_views_is_zero() {
        // With a single candidate the softmax is 1 and the log term vanishes.
        let f = Tensor::uniform(&[2, 3, 1, 1], 1.0, &mut rand::thread_rng());
        let mut both = f.clone();
        both.data_mut().copy_from_slice(f.data());
        let labels = t(vec![2, 1, 1], vec![1.0, 1.0]);
        let batch = two_view_batch(both, labels, 0.5);
        let v = lpcl(&batch, LpclMode::LabelMasked).unwrap();
        assert!(v.abs() < 1e-12, "{v}");
    }

    #[test]
    fn lpcl_matches_scalar_triple_loop() {
        // 4 views, D=2, S=1, hand-chosen feature vectors.
        let vecs = [
            [1.0, 0.3],
            [0.8, -0.2],
            [-0.5, 1.1],
            [0.1, -0.9],
        ];
        let mut data = Vec::new();
        for v in &vecs {
            data.extend_from_slice(v);
        }
        let features = t(vec![4, 2, 1, 1], data);
        let labels = t(vec![4, 1, 1], vec![1.0, 1.0, 0.0, 0.0]);
        let pairing = vec![Some(1), Some(0), Some(3), Some(2)];
        let tau = 0.5;
        let batch = ContrastiveBatch {
            features,
            labels_ds: labels,
            view_pairing: pairing.clone(),
            tau,
        };
        let got = lpcl(&batch, LpclMode::ViewOnly).unwrap();

        // Naive reference: explicit cosine similarities and softmax sums.
        let unit: Vec<[f64; 2]> = vecs
            .iter()
            .map(|v| {
                let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
                [v[0] / n, v[1] / n]
            })
            .collect();
        let sim = |a: usize, b: usize| unit[a][0] * unit[b][0] + unit[a][1] * unit[b][1];
        let mut want = 0.0;
        for i in 0..4 {
            let j = pairing[i].unwrap();
            let num = (sim(i, j) / tau).exp();
            let mut den = 0.0;
            for k in 0..4 {
                if k != i {
                    den += (sim(i, k) / tau).exp();
                }
            }
            want -= (num / den).ln();
        }
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn lpcl_prefers_class_aligned_features() {
        // Same-class pixels identical, cross-class orthogonal: aligned
        // features score strictly lower than the same batch with the
        // feature-class assignment scrambled.
        let s = 2usize;
        let labels_data: Vec<f64> = vec![
            1.0, 0.0, 0.0, 1.0, // view 0
            1.0, 0.0, 0.0, 1.0, // its partner
            0.0, 1.0, 1.0, 0.0, // view 2
            0.0, 1.0, 1.0, 0.0, // its partner
        ];
        let labels = t(vec![4, s, s], labels_data.clone());
        let embed = |class: f64| if class > 0.5 { [1.0, 0.0] } else { [0.0, 1.0] };
        let features_from = |assign: &[f64]| {
            let mut data = vec![0.0; 4 * 2 * s * s];
            for v in 0..4 {
                for p in 0..s * s {
                    let e = embed(assign[v * s * s + p]);
                    data[(v * 2) * s * s + p] = e[0];
                    data[(v * 2 + 1) * s * s + p] = e[1];
                }
            }
            t(vec![4, 2, s, s], data)
        };
        let aligned = ContrastiveBatch {
            features: features_from(&labels_data),
            labels_ds: labels.clone(),
            view_pairing: vec![Some(1), Some(0), Some(3), Some(2)],
            tau: 0.5,
        };
        // Scramble: invert the classes used to build features for two views,
        // leaving labels untouched.
        let mut scrambled_assign = labels_data.clone();
        for p in 0..s * s {
            scrambled_assign[s * s + p] = 1.0 - scrambled_assign[s * s + p];
            scrambled_assign[3 * s * s + p] = 1.0 - scrambled_assign[3 * s * s + p];
        }
        let scrambled = ContrastiveBatch {
            features: features_from(&scrambled_assign),
            labels_ds: labels,
            view_pairing: vec![Some(1), Some(0), Some(3), Some(2)],
            tau: 0.5,
        };
        let lo = lpcl(&aligned, LpclMode::LabelMasked).unwrap();
        let hi = lpcl(&scrambled, LpclMode::LabelMasked).unwrap();
        assert!(lo < hi, "aligned {lo} not below scrambled {hi}");
    }

    #[test]
    fn lpcl_rotation_invariance() {
        // A global rotation of every feature vector preserves cosines.
        let mut rng = rand::thread_rng();
        let features = Tensor::uniform(&[4, 2, 2, 2], 1.0, &mut rng);
        let labels = t(vec![4, 2, 2], vec![1.0, 0.0, 1.0, 0.0].repeat(4));
        let pairing = vec![Some(1), Some(0), Some(3), Some(2)];
        let theta = 0.73f64;
        let (c, s) = (theta.cos(), theta.sin());
        let mut rotated = features.clone();
        {
            let fd = features.data();
            let rd = rotated.data_mut();
            let s2 = 4;
            for v in 0..4 {
                for p in 0..s2 {
                    let x = fd[(v * 2) * s2 + p];
                    let y = fd[(v * 2 + 1) * s2 + p];
                    rd[(v * 2) * s2 + p] = c * x - s * y;
                    rd[(v * 2 + 1) * s2 + p] = s * x + c * y;
                }
            }
        }
        let a = ContrastiveBatch {
            features,
            labels_ds: labels.clone(),
            view_pairing: pairing.clone(),
            tau: 0.4,
        };
        let b = ContrastiveBatch {
            features: rotated,
            labels_ds: labels,
            view_pairing: pairing,
            tau: 0.4,
        };
        let va = lpcl(&a, LpclMode::LabelMasked).unwrap();
        let vb = lpcl(&b, LpclMode::LabelMasked).unwrap();
        assert!((va - vb).abs() < 1e-8, "{va} vs {vb}");
    }

    #[test]
    fn lpcl_anchor_permutation_equivariance() {
        let mut rng = rand::thread_rng();
        let features = Tensor::uniform(&[4, 3, 2, 2], 1.0, &mut rng);
        let labels = t(vec![4, 2, 2], vec![1.0, 1.0, 0.0, 0.0].repeat(4));
        let pairing = vec![Some(1), Some(0), Some(3), Some(2)];
        let base = ContrastiveBatch {
            features: features.clone(),
            labels_ds: labels.clone(),
            view_pairing: pairing,
            tau: 0.5,
        };
        // Swap views 0<->2 and 1<->3 together with labels and pairing.
        let perm = [2usize, 3, 0, 1];
        let s2 = 4;
        let mut fperm = Tensor::zeros(&[4, 3, 2, 2]);
        let mut lperm = Tensor::zeros(&[4, 2, 2]);
        for v in 0..4 {
            let src = perm[v];
            for di in 0..3 {
                for p in 0..s2 {
                    fperm.data_mut()[(v * 3 + di) * s2 + p] =
                        features.data()[(src * 3 + di) * s2 + p];
                }
            }
            for p in 0..s2 {
                lperm.data_mut()[v * s2 + p] = labels.data()[src * s2 + p];
            }
        }
        let permuted = ContrastiveBatch {
            features: fperm,
            labels_ds: lperm,
            view_pairing: vec![Some(1), Some(0), Some(3), Some(2)],
            tau: 0.5,
        };
        let va = lpcl(&base, LpclMode::LabelMasked).unwrap();
        let vb = lpcl(&permuted, LpclMode::LabelMasked).unwrap();
        assert!((va - vb).abs() < 1e-10);
    }

    #[test]
    fn lpcl_rejects_degenerate_batches() {
        let features = Tensor::zeros(&[1, 2, 1, 1]);
        let labels = Tensor::zeros(&[1, 1, 1]);
        let batch = ContrastiveBatch {
            features,
            labels_ds: labels,
            view_pairing: vec![None],
            tau: 0.5,
        };
        assert!(lpcl(&batch, LpclMode::LabelMasked).is_err());
    }

    #[test]
    fn lpcl_unpaired_anchor_contributes_zero() {
        let mut rng = rand::thread_rng();
        let features = Tensor::uniform(&[3, 2, 1, 1], 1.0, &mut rng);
        let labels = t(vec![3, 1, 1], vec![1.0, 1.0, 0.0]);
        let with_orphan = ContrastiveBatch {
            features: features.clone(),
            labels_ds: labels.clone(),
            view_pairing: vec![Some(1), Some(0), None],
            tau: 0.5,
        };
        let v = lpcl(&with_orphan, LpclMode::ViewOnly).unwrap();
        // Only anchors 0 and 1 contribute; removing view 2's anchor term is
        // not the same as removing the view (it still acts as a negative).
        assert!(v.is_finite());
    }

    #[test]
    fn hybrid_weights_and_breakdown() {
        let pred = t(vec![4], vec![0.9, 0.2, 0.7, 0.4]);
        let tgt = t(vec![4], vec![1.0, 0.0, 1.0, 0.0]);
        let w = LossWeights {
            lambda1: 0.8,
            lambda2: 0.2,
            lambda3: 1.0,
            lambda4: 0.0,
        };
        let bd = hybrid_loss(&pred, &tgt, None, LpclMode::LabelMasked, &w).unwrap();
        let want = 0.8 * bce(&pred, &tgt).unwrap()
            + 0.2 * jaccard_loss(&pred, &tgt).unwrap()
            + 1.0 * dice_loss(&pred, &tgt).unwrap();
        assert!((bd.total - want).abs() < 1e-12);
        assert_eq!(bd.lpcl, 0.0);

        // All-zero weights give a zero loss.
        let zero = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
        };
        let bd0 = hybrid_loss(&pred, &tgt, None, LpclMode::LabelMasked, &zero).unwrap();
        assert_eq!(bd0.total, 0.0);

        // Linearity in each weight, holding the term values fixed.
        let w2 = LossWeights {
            lambda1: 1.6,
            ..w
        };
        let bd2 = hybrid_loss(&pred, &tgt, None, LpclMode::LabelMasked, &w2).unwrap();
        assert!(((bd2.total - bd.total) - 0.8 * bd.bce).abs() < 1e-12);

        let neg = LossWeights {
            lambda1: -0.1,
            ..w
        };
        assert!(hybrid_loss(&pred, &tgt, None, LpclMode::LabelMasked, &neg).is_err());
    }
}
