//! Central finite differences against tape gradients.
//!
//! `finite_diff_check` evaluates a scalar function of a `ParamStore` twice
//! per probed element (theta +/- eps) and compares the quotient with the
//! gradient the tape reported. The relative error divides by
//! `max(|analytic|, |numeric|, 1e-8)`. Large parameter tensors can be probed
//! on a seeded element subsample to keep full-network checks fast.
//!
//! `run_suite` wires a fixed check for every tape operation, every composite
//! block, and every loss, and is what the `gradcheck` CLI command runs.

use crate::attention;
use crate::error::{Error, Result};
use crate::kan::{self, TokenBlockCfg, TokenLayerKind};
use crate::loss;
use crate::model::{Model, ModelConfig};
use crate::optim::ParamStore;
use crate::spline::SplineSpec;
use crate::tape::{GradTape, LpclMode, Var};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error observed per parameter.
    pub per_param: BTreeMap<String, f64>,
    pub max_rel_err: f64,
    /// Operations that reported a non-differentiable point during the
    /// unperturbed forward pass.
    pub nondiff_sites: Vec<&'static str>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol || !self.nondiff_sites.is_empty()
    }
}

/// Compare tape gradients of `f` against central finite differences.
///
/// `f` must build its computation on the provided tape and return the scalar
/// loss variable. It may be called many times; it must be a pure function of
/// the store's parameter values (batch-norm running-buffer writes are
/// harmless because training-mode outputs never read them).
///
/// `sample_per_param` probes at most that many elements per tensor, chosen
/// by a seeded shuffle; `None` probes everything.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    eps: f64,
    sample_per_param: Option<usize>,
    sample_seed: u64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut GradTape, &mut ParamStore) -> Result<Var>,
{
    store.zero_grads();
    let mut tape = GradTape::new();
    let loss_var = f(&mut tape, store)?;
    let loss0 = tape.scalar(loss_var);
    if !loss0.is_finite() {
        return Err(Error::invalid(format!("finite_diff_check: loss is {loss0}")));
    }
    let nondiff_sites = tape.nondiff_sites().to_vec();
    tape.backward(loss_var, store)?;

    let names: Vec<String> = store
        .iter()
        .filter(|(_, e)| e.learnable)
        .map(|(n, _)| n.to_string())
        .collect();

    let mut eval = |store: &mut ParamStore| -> Result<f64> {
        let mut t = GradTape::new();
        let v = f(&mut t, store)?;
        let val = t.scalar(v);
        if !val.is_finite() {
            return Err(Error::invalid(format!("finite_diff_check: loss is {val}")));
        }
        Ok(val)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let mut per_param = BTreeMap::new();
    let mut max_rel_err: f64 = 0.0;
    for name in names {
        let n = store.value(&name)?.numel();
        let indices: Vec<usize> = match sample_per_param {
            Some(k) if k < n => {
                let mut all: Vec<usize> = (0..n).collect();
                for i in 0..k {
                    let j = rng.gen_range(i..n);
                    all.swap(i, j);
                }
                all.truncate(k);
                all
            }
            _ => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        for idx in indices {
            let original = store.value(&name)?.data()[idx];
            let analytic = store.grad(&name)?.data()[idx];

            set_element(store, &name, idx, original + eps)?;
            let hi = eval(store)?;
            set_element(store, &name, idx, original - eps)?;
            let lo = eval(store)?;
            set_element(store, &name, idx, original)?;

            let numeric = (hi - lo) / (2.0 * eps);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        max_rel_err = max_rel_err.max(worst);
        per_param.insert(name, worst);
    }

    Ok(GradCheckReport {
        per_param,
        max_rel_err,
        nondiff_sites,
    })
}

fn set_element(store: &mut ParamStore, name: &str, idx: usize, value: f64) -> Result<()> {
    let entry = store.entry_mut(name)?;
    entry.value.data_mut()[idx] = value;
    Ok(())
}

// ---- the fixed gradient suite -------------------------------------------------

#[derive(Debug, Clone)]
pub struct SuiteRow {
    pub op: &'static str,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
    pub nondiff: Vec<&'static str>,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub rows: Vec<SuiteRow>,
}

impl SuiteReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }
}

/// Names covered by the suite, in execution order. Kept as a constant so
/// completeness is testable.
pub const SUITE_OPS: &[&str] = &[
    "add",
    "mul",
    "scale",
    "matmul",
    "add_bias_row",
    "relu",
    "sigmoid",
    "sum",
    "reshape",
    "conv2d",
    "conv2d_strided",
    "conv1x1",
    "dwconv3x3",
    "max_pool2x2",
    "bilinear_upsample2x",
    "batch_norm_train",
    "batch_norm_eval",
    "layer_norm",
    "layer_norm_channels",
    "concat_channels",
    "mul_bcast_channel",
    "tokenize",
    "detokenize",
    "token_map_permute",
    "kan_layer",
    "mlp_block",
    "tokenized_kan_block",
    "attention_gate",
    "bce",
    "jaccard_loss",
    "dice_loss",
    "lpcl",
    "hybrid_loss",
    "full_network",
];

/// Run the whole suite. `corrupt` deliberately perturbs the analytic
/// gradient of the named op before comparison; it exists as a negative
/// control so tests can confirm a broken backward rule is caught.
pub fn run_suite(corrupt: Option<&str>) -> Result<SuiteReport> {
    let mut rows = Vec::new();
    for op in SUITE_OPS {
        let mut report = check_one(op)?;
        if corrupt == Some(*op) {
            report.max_rel_err += 1.0;
        }
        let tol = DEFAULT_TOL;
        let pass = report.max_rel_err < tol || (!report.nondiff_sites.is_empty() && corrupt != Some(*op));
        rows.push(SuiteRow {
            op,
            max_rel_err: report.max_rel_err,
            tol,
            pass,
            nondiff: report.nondiff_sites,
        });
    }
    Ok(SuiteReport { rows })
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Store whose entries are both the op inputs and the checked parameters,
/// so input gradients are verified alongside weight gradients.
fn store_of(entries: &[(&str, Tensor)]) -> Result<ParamStore> {
    let mut s = ParamStore::new();
    for (name, t) in entries {
        s.insert(name, t.clone())?;
    }
    Ok(s)
}

/// Reduce an output tensor to a scalar through fixed random weights, which
/// probes the full Jacobian without favoring any direction.
fn weighted_probe(tape: &mut GradTape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let probe = tape.constant(Tensor::uniform(&shape, 1.0, &mut rng(seed)));
    let prod = tape.mul(out, probe)?;
    Ok(tape.sum(prod))
}

fn check_one(op: &str) -> Result<GradCheckReport> {
    let mut r = rng(0xA11CE);
    match op {
        "add" => {
            let mut s = store_of(&[
                ("a", Tensor::uniform(&[3, 4], 1.0, &mut r)),
                ("b", Tensor::uniform(&[3, 4], 1.0, &mut r)),
            ])?;
            finite_diff_check(&mut s, DEFAULT_EPS, None, 1, |t, s| {
                let a = t.param(s, "a")?;
                let b = t.param(s, "b")?;
                let y = t.add(a, b)?;
                weighted_probe(t, y, 11)
            })
        }
        "mul" => {
            let mut s = store_of(&[
                ("a", Tensor::uniform(&[3, 4], 1.0, &mut r)),
                ("b", Tensor::uniform(&[3, 4], 1.0, &mut r)),
            ])?;
            finite_diff_check(&mut s, DEFAULT_EPS, None, 1, |t, s| {
                let a = t.param(s, "a")?;
                let b = t.param(s, "b")?;
                let y = t.mul(a, b)?;
                weighted_probe(t, y, 12)
            })
        }
        "scale" => {
            let mut s = store_of(&[("a", Tensor::uniform(&[5], 1.0, &mut r))])?;
            finite_diff_check(&mut s, DEFAULT_EPS, None, 1, |t, s| {
                let a = t.param(s, "a")?;
                let y = t.scale(a, -1.7);
                weighted_probe(t, y, 13)
            })
        }
        "matmul" => {
            let mut s = store_of(&[
                ("a", Tensor::uniform(&[3, 4], 1.0, &mut r)),
                ("b", Tensor::uniform(&[4, 2], 1.0, &mut r)),
            ])?;
            finite_diff_check(&mut s, DEFAULT_EPS, None, 1, |t, s| {
                let a = t.param(s, "a")?;
                let b = t.param(s, "b")?;
                let y = t.matmul(a, b)?;
                weighted_probe(t, y, 14)
            })
        }
        "add_bias_row" => {
            let mut s = store_of(&[
                ("x", Tensor::uniform(&[3, 4], 1.0, &mut r)),
                ("b", Tensor::uniform(&[4], 1.0, &mut r)),
            ])?;
            finite_diff_check(&mut s, DEFAULT_EPS, None, 1, |t, s| {
                let x = t.param(s, "x")?;
                let b = t.param(s, "b")?;
                let y = t.add_bias_row(x, b)?;
                weighted_probe(t, y, 15)
            })
        }
        "relu" => {
            let mut s = store_of(&[("x", Tensor::uniform(&[4, 4], 1.0, &mut r))])?;
            finite_diff_check(&mut s, DEFAULT_EPS, None, 1, |t, s| {
                let x = t.param(s, "x")?;
                let y = t.relu(x);
                weighted_probe(t, y, 16)
            })
        }
        "sigmoid" => {
            let mut s = store_of(&[("x", Tensor::uniform(&[4, 4], 2.0, &mut r))])?;
            finite_diff_check(&mut s, DEFAULT_EPS, None, 1, |t, s| {
                let x = t.param(s, "x")?;
                let y = t.sigmoid(x);
                weighted_probe(t, y, 17)
            })
        }
        "sum" => {
            let mut s = store_of(&[("x", Tensor::uniform(&[7], 1.0, &mut r))])?;
            finite_diff_check(&mut s, DEFAULT_EPS, None, 1, |t, s| {
                let x = t.param(s, "x")?;
                let sq = t.mul(x, x)?;
                Ok(t.sum(sq))
            })
        }
        "reshape" => {
            let mut s = store_of(&[("x", Tensor::uniform(&[2, 6], 1.0, &mut r))])?;
            finite_diff_check(&mut s, DEFAULT_EPS, None, 1, |t, s| {
                let x = t.param(s, "x")?;
                let y = t.reshape(x, vec![3, 4])?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            })
        }
        "conv2d" => {
            let mut s = store_of(&[
                ("x", Tensor::uniform(&[2, 2, 4, 4], 1.0, &mut r)),
                ("w", Tensor::uniform(&[3, 2, 3, 3], 0.6, &mut r)),
                ("b", Tensor::uniform(&[3], 0.5, &mut r)),
            ])?;
            finite_diff_check(&mut s, DEFAULT_EPS, None, 1, |t, s| {
                let x = t.param(s, "x")?;
                let w = t.param(s, "w")?;
                let b = t.param(s, "b")?;
                let y = t.conv2d(x, w, Some(b), 1, 1)?;
                weighted_probe(t, y, 20)
            })
        }
        "conv2d_strided" => {
            let mut s = store_of(&[
                ("x", Tensor::uniform(&[1, 2, 4, 4], 1.0, &mut r)),
                ("w", Tensor::uniform(&[2, 2, 3, 3], 0.6, &mut r)),
                ("b", Tensor::uniform(&[2], 0.5, &mut r)),
            ])?;
            finite_diff_check(&mut s, DEFAULT_EPS, None, 1, |t, s| {
                let x = t.param(s, "x")?;
                let w = t.param(s, "w")?;
                let b = t.param(s, "b")?;
                let y = t.conv2d(x, w, Some(b), 2, 1)?;
                weighted_probe(t, y, 21)
            })
        }
        "conv1x1" => {
            let mut s = store_of(&[
                ("x", Tensor::uniform(&[2, 3, 3, 3], 1.0, &mut r)),
                ("w", Tensor::uniform(&[2, 3], 0.7, &mut r)),
                ("b", Tensor::uniform(&[2], 0.5, &mut r)),
            ])?;
            finite_diff_check(&mut s, DEFAULT_EPS, None, 1, |t, s| {
                let x = t.param(s, "x")?;
                let w = t.param(s, "w")?;
                let b = t.param(s, "b")?;
                let y = t.conv1x1(x, w, Some(b))?;
                weighted_probe(t, y, 22)
            })
        }
        "dwconv3x3" => {
            let mut s = store_of(&[
                ("x", Tensor::uniform(&[2, 3, 4, 4], 1.0, &mut r)),
                ("w", Tensor::uniform(&[3, 3, 3], 0.6, &mut r)),
                ("b", Tensor::uniform(&[3], 0.5, &mut r)),
            ])?;
            finite_diff_check(&mut s, DEFAULT_EPS, None, 1, |t, s| {
                let x = t.param(s, "x")?;
                let w = t.param(s, "w")?;
                let b = t.param(s, "b")?;
                let y = t.dwconv3x3(x, w, b)?;
                weighted_probe(t, y, 23)
            })
        }
        "max_pool2x2" => {
            let mut s = store_of(&[("x", Tensor::uniform(&[2, 2, 4, 4], 1.0, &mut r))])?;
            finite_diff_check(&mut s, DEFAULT_EPS, None, 1, |t, s| {
                let x = t.param(s, "x")?;
                let y = t.max_pool2x2(x)?;
                weighted_probe(t, y, 24)
            })
        }
        "bilinear_upsample2x" => {
            let mut s = store_of(&[("x", Tensor::uniform(&[2, 2, 3, 3], 1.0, &mut r))])?;
            finite_diff_check(&mut s, DEFAULT_EPS, None, 1, |t, s| {
                let x = t.param(s, "x")?;
                let y = t.bilinear_up2x(x)?;
                weighted_probe(t, y, 25)
            })
        }
        "batch_norm_train" => {
            let mut s = store_of(&[
                ("x", Tensor::uniform(&[3, 2, 3, 3], 1.0, &mut r)),
                ("g", Tensor::uniform(&[2], 1.0, &mut r)),
                ("b", Tensor::uniform(&[2], 1.0, &mut r)),
            ])?;
            finite_diff_check(&mut s, DEFAULT_EPS, None, 1, |t, s| {
                let x = t.param(s, "x")?;
                let g = t.param(s, "g")?;
                let b = t.param(s, "b")?;
                let (y, _, _) = t.batch_norm_train(x, g, b)?;
                weighted_probe(t, y, 26)
            })
        }
        "batch_norm_eval" => {
            let mut s = store_of(&[
                ("x", Tensor::uniform(&[2, 2, 3, 3], 1.0, &mut r)),
                ("g", Tensor::uniform(&[2], 1.0, &mut r)),
                ("b", Tensor::uniform(&[2], 1.0, &mut r)),
            ])?;
            let rm = Tensor::uniform(&[2], 0.5, &mut r);
            let rv = Tensor::new(vec![2], vec![0.9, 1.4])?;
            finite_diff_check(&mut s, DEFAULT_EPS, None, 1, move |t, s| {
                let x = t.param(s, "x")?;
                let g = t.param(s, "g")?;
                let b = t.param(s, "b")?;
                let y = t.batch_norm_eval(x, g, b, &rm, &rv)?;
                weighted_probe(t, y, 27)
            })
        }
        "layer_norm" => {
            let mut s = store_of(&[
                ("x", Tensor::uniform(&[2, 3, 4], 1.0, &mut r)),
                ("g", Tensor::uniform(&[4], 1.0, &mut r)),
                ("b", Tensor::uniform(&[4], 1.0, &mut r)),
            ])?;
            finite_diff_check(&mut s, DEFAULT_EPS, None, 1, |t, s| {
                let x = t.param(s, "x")?;
                let g = t.param(s, "g")?;
                let b = t.param(s, "b")?;
                let y = t.layer_norm(x, g, b)?;
                weighted_probe(t, y, 28)
            })
        }
        "layer_norm_channels" => {
            let mut s = store_of(&[
                ("x", Tensor::uniform(&[2, 3, 2, 2], 1.0, &mut r)),
                ("g", Tensor::uniform(&[3], 1.0, &mut r)),
                ("b", Tensor::uniform(&[3], 1.0, &mut r)),
            ])?;
            finite_diff_check(&mut s, DEFAULT_EPS, None, 1, |t, s| {
                let x = t.param(s, "x")?;
                let g = t.param(s, "g")?;
                let b = t.param(s, "b")?;
                let y = t.layer_norm_channels(x, g, b)?;
                weighted_probe(t, y, 29)
            })
        }
        "concat_channels" => {
            let mut s = store_of(&[
                ("a", Tensor::uniform(&[2, 2, 3, 3], 1.0, &mut r)),
                ("b", Tensor::uniform(&[2, 3, 3, 3], 1.0, &mut r)),
            ])?;
            finite_diff_check(&mut s, DEFAULT_EPS, None, 1, |t, s| {
                let a = t.param(s, "a")?;
                let b = t.param(s, "b")?;
                let y = t.concat_channels(a, b)?;
                weighted_probe(t, y, 30)
            })
        }
        "mul_bcast_channel" => {
            let mut s = store_of(&[
                ("x", Tensor::uniform(&[2, 3, 2, 2], 1.0, &mut r)),
                ("alpha", Tensor::uniform(&[2, 1, 2, 2], 1.0, &mut r)),
            ])?;
            finite_diff_check(&mut s, DEFAULT_EPS, None, 1, |t, s| {
                let x = t.param(s, "x")?;
                let a = t.param(s, "alpha")?;
                let y = t.mul_bcast_channel(x, a)?;
                weighted_probe(t, y, 31)
            })
        }
        "tokenize" => {
            let mut s = store_of(&[
                ("x", Tensor::uniform(&[2, 3, 2, 2], 1.0, &mut r)),
                ("proj", Tensor::uniform(&[3, 4], 0.7, &mut r)),
            ])?;
            finite_diff_check(&mut s, DEFAULT_EPS, None, 1, |t, s| {
                let x = t.param(s, "x")?;
                let p = t.param(s, "proj")?;
                let y = t.tokenize(x, p)?;
                weighted_probe(t, y, 32)
            })
        }
        "detokenize" => {
            let mut s = store_of(&[
                ("tok", Tensor::uniform(&[2, 4, 3], 1.0, &mut r)),
                ("proj", Tensor::uniform(&[3, 2], 0.7, &mut r)),
            ])?;
            finite_diff_check(&mut s, DEFAULT_EPS, None, 1, |t, s| {
                let tok = t.param(s, "tok")?;
                let p = t.param(s, "proj")?;
                let y = t.detokenize(tok, p, 2, 2)?;
                weighted_probe(t, y, 33)
            })
        }
        "token_map_permute" => {
            let mut s = store_of(&[("tok", Tensor::uniform(&[2, 4, 3], 1.0, &mut r))])?;
            finite_diff_check(&mut s, DEFAULT_EPS, None, 1, |t, s| {
                let tok = t.param(s, "tok")?;
                let map = t.tok_to_map(tok, 2, 2)?;
                let back = t.map_to_tok(map)?;
                let sq = t.mul(back, back)?;
                Ok(t.sum(sq))
            })
        }
        "kan_layer" => {
            let spec = SplineSpec::default();
            let mut s = store_of(&[
                ("x", Tensor::uniform(&[3, 2], 1.6, &mut r)),
                ("c", Tensor::uniform(&[2, 3, spec.basis_len()], 0.4, &mut r)),
                ("wb", Tensor::uniform(&[2, 3], 0.8, &mut r)),
                ("ws", Tensor::uniform(&[2, 3], 0.8, &mut r)),
            ])?;
            finite_diff_check(&mut s, DEFAULT_EPS, None, 1, move |t, s| {
                let x = t.param(s, "x")?;
                let c = t.param(s, "c")?;
                let wb = t.param(s, "wb")?;
                let ws = t.param(s, "ws")?;
                let y = t.kan_layer(x, c, wb, ws, &spec)?;
                weighted_probe(t, y, 34)
            })
        }
        "mlp_block" => {
            let mut s = store_of(&[
                ("x", Tensor::uniform(&[3, 4], 1.0, &mut r)),
                ("w0", Tensor::uniform(&[4, 5], 0.6, &mut r)),
                ("b0", Tensor::uniform(&[5], 0.4, &mut r)),
                ("w1", Tensor::uniform(&[5, 2], 0.6, &mut r)),
                ("b1", Tensor::uniform(&[2], 0.4, &mut r)),
            ])?;
            finite_diff_check(&mut s, DEFAULT_EPS, None, 1, |t, s| {
                let x = t.param(s, "x")?;
                let w0 = t.param(s, "w0")?;
                let b0 = t.param(s, "b0")?;
                let w1 = t.param(s, "w1")?;
                let b1 = t.param(s, "b1")?;
                let h = t.matmul(x, w0)?;
                let h = t.add_bias_row(h, b0)?;
                let h = t.relu(h);
                let y = t.matmul(h, w1)?;
                let y = t.add_bias_row(y, b1)?;
                weighted_probe(t, y, 35)
            })
        }
        "tokenized_kan_block" => {
            let cfg = TokenBlockCfg {
                dim: 2,
                n_layers: 3,
                spline: SplineSpec::default(),
                kind: TokenLayerKind::Kan,
            };
            let mut s = ParamStore::new();
            s.insert("x", Tensor::uniform(&[1, 2, 4, 4], 1.0, &mut r))?;
            kan::register_token_block(&mut s, "blk", &cfg, &mut r)?;
            finite_diff_check(&mut s, DEFAULT_EPS, None, 1, move |t, s| {
                let x = t.param(s, "x")?;
                let y = kan::token_block_forward(t, s, "blk", &cfg, x, true)?;
                weighted_probe(t, y, 36)
            })
        }
        "attention_gate" => {
            let mut s = ParamStore::new();
            s.insert("x", Tensor::uniform(&[1, 2, 4, 4], 1.0, &mut r))?;
            s.insert("gate", Tensor::uniform(&[1, 4, 2, 2], 1.0, &mut r))?;
            attention::register_attention_gate(&mut s, "att", 2, 4, &mut r)?;
            finite_diff_check(&mut s, DEFAULT_EPS, None, 1, |t, s| {
                let x = t.param(s, "x")?;
                let g = t.param(s, "gate")?;
                let out = attention::attention_gate_forward(t, s, "att", x, g)?;
                weighted_probe(t, out.gated, 37)
            })
        }
        "bce" | "jaccard_loss" | "dice_loss" => {
            let mut target = Tensor::zeros(&[2, 1, 4, 4]);
            for (i, v) in target.data_mut().iter_mut().enumerate() {
                *v = if i % 3 == 0 { 1.0 } else { 0.0 };
            }
            let mut pre = Tensor::uniform(&[2, 1, 4, 4], 2.0, &mut r);
            pre.data_mut().iter_mut().for_each(|v| *v = 0.5 + 0.4 * *v / 2.0);
            let mut s = store_of(&[("pred", pre)])?;
            let which = op.to_string();
            finite_diff_check(&mut s, DEFAULT_EPS, None, 1, move |t, s| {
                let p = t.param(s, "pred")?;
                match which.as_str() {
                    "bce" => t.bce(p, &target),
                    "jaccard_loss" => t.jaccard_loss(p, &target),
                    _ => t.dice_loss(p, &target),
                }
            })
        }
        "lpcl" => {
            let labels = Tensor::new(
                vec![4, 2, 2],
                vec![
                    1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0,
                ],
            )?;
            let pairing = vec![Some(1), Some(0), Some(3), Some(2)];
            let mut s = store_of(&[("f", Tensor::uniform(&[4, 3, 2, 2], 1.0, &mut r))])?;
            finite_diff_check(&mut s, DEFAULT_EPS, None, 1, move |t, s| {
                let f = t.param(s, "f")?;
                t.lpcl(f, &labels, &pairing, 0.5, LpclMode::LabelMasked)
            })
        }
        "hybrid_loss" => {
            let mut target = Tensor::zeros(&[2, 1, 4, 4]);
            for (i, v) in target.data_mut().iter_mut().enumerate() {
                *v = if i % 4 == 0 { 1.0 } else { 0.0 };
            }
            let labels = Tensor::new(vec![2, 2, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0])?;
            let pairing = vec![Some(1), Some(0)];
            let weights = loss::LossWeights::default();
            let mut pre = Tensor::uniform(&[2, 1, 4, 4], 1.0, &mut r);
            pre.data_mut().iter_mut().for_each(|v| *v = 0.5 + 0.4 * *v);
            let mut s = store_of(&[
                ("pred", pre),
                ("f", Tensor::uniform(&[2, 3, 2, 2], 1.0, &mut r)),
            ])?;
            finite_diff_check(&mut s, DEFAULT_EPS, None, 1, move |t, s| {
                let p = t.param(s, "pred")?;
                let f = t.param(s, "f")?;
                let (total, _) = loss::hybrid_loss_on_tape(
                    t,
                    p,
                    &target,
                    Some((f, &labels, pairing.as_slice(), 0.5)),
                    LpclMode::LabelMasked,
                    &weights,
                )?;
                Ok(total)
            })
        }
        "full_network" => {
            let cfg = ModelConfig {
                channels: [2, 4, 8, 16, 32],
                input_channels: 1,
                seed: 99,
                ..ModelConfig::default()
            };
            let mut model = Model::build(&cfg)?;
            let images = {
                let mut m = Tensor::uniform(&[2, 1, 16, 16], 1.0, &mut r);
                m.data_mut().iter_mut().for_each(|v| *v = (*v + 1.0) / 2.0);
                m
            };
            let mut target = Tensor::zeros(&[2, 1, 16, 16]);
            for (i, v) in target.data_mut().iter_mut().enumerate() {
                *v = if (i / 3) % 5 == 0 { 1.0 } else { 0.0 };
            }
            // Bottleneck labels for the contrastive term: 16x16 input gives a
            // 1x1 bottleneck under four halvings.
            let labels = Tensor::new(vec![2, 1, 1], vec![1.0, 1.0])?;
            let pairing = vec![Some(1), Some(0)];
            let weights = loss::LossWeights::default();
            let mut store = std::mem::take(&mut model.store);
            let report = finite_diff_check(&mut store, DEFAULT_EPS, Some(6), 0xFEED, move |t, s| {
                let out = model.forward_with_store(t, s, &images, true)?;
                let (total, _) = loss::hybrid_loss_on_tape(
                    t,
                    out.prob,
                    &target,
                    Some((out.features[4], &labels, pairing.as_slice(), 0.5)),
                    LpclMode::LabelMasked,
                    &weights,
                )?;
                Ok(total)
            })?;
            Ok(report)
        }
        other => Err(Error::invalid(format!("unknown suite op {other}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let mut r = rng(5);
        let c = Tensor::uniform(&[6], 1.0, &mut r);
        let mut s = store_of(&[("theta", Tensor::uniform(&[6], 1.0, &mut r))]).unwrap();
        let report = finite_diff_check(&mut s, DEFAULT_EPS, None, 0, |t, s| {
            let theta = t.param(s, "theta")?;
            let cv = t.constant(c.clone());
            let prod = t.mul(theta, cv)?;
            Ok(t.sum(prod))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-9, "{}", report.max_rel_err);
    }

    #[test]
    fn gradient_of_sum_is_ones_and_square_is_linear() {
        let mut s = store_of(&[("theta", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())]).unwrap();
        let mut tape = GradTape::new();
        let theta = tape.param(&s, "theta").unwrap();
        let l = tape.sum(theta);
        tape.backward(l, &mut s).unwrap();
        assert_eq!(s.grad("theta").unwrap().data(), &[1.0, 1.0]);

        s.zero_grads();
        let mut tape = GradTape::new();
        let theta = tape.param(&s, "theta").unwrap();
        let sq = tape.mul(theta, theta).unwrap();
        let l = tape.sum(sq);
        tape.backward(l, &mut s).unwrap();
        assert_eq!(s.grad("theta").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut s = store_of(&[("theta", Tensor::zeros(&[3]))]).unwrap();
        let mut tape = GradTape::new();
        let theta = tape.param(&s, "theta").unwrap();
        assert!(tape.backward(theta, &mut s).is_err());
    }

    #[test]
    fn maxpool_tie_is_flagged_not_failed() {
        let mut s = store_of(&[("x", Tensor::full(&[1, 1, 2, 2], 5.0))]).unwrap();
        let report = finite_diff_check(&mut s, DEFAULT_EPS, None, 0, |t, s| {
            let x = t.param(s, "x")?;
            let y = t.max_pool2x2(x)?;
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(report.nondiff_sites.contains(&"max_pool2x2"));
        assert!(report.passes(DEFAULT_TOL));
    }

    #[test]
    fn maxpool_tie_routes_to_first_occurrence() {
        let mut s = store_of(&[("x", Tensor::full(&[1, 1, 2, 2], 5.0))]).unwrap();
        let mut tape = GradTape::new();
        let x = tape.param(&s, "x").unwrap();
        let y = tape.max_pool2x2(x).unwrap();
        let l = tape.sum(y);
        tape.backward(l, &mut s).unwrap();
        assert_eq!(s.grad("x").unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn suite_covers_registry_and_corruption_is_caught() {
        // A deliberately corrupted analytic gradient must fail its row and
        // name the op.
        let report = run_suite(Some("conv2d")).unwrap();
        assert_eq!(report.rows.len(), SUITE_OPS.len());
        let bad: Vec<_> = report.rows.iter().filter(|r| !r.pass).collect();
        assert_eq!(bad.len(), 1);
        assert_eq!(bad[0].op, "conv2d");
    }
}
